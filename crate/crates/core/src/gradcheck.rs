//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::data::{generate_synthetic, ConvInput, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{build_params, forward, forward_with_teachers, ForwardMode, FrozenTeachers, ModelConfig};
use crate::objectives::Head;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Compare at most this many coordinates per parameter (sampled).
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, rel_tol: 1e-2, abs_tol: 1e-4, max_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradStat {
    pub path: String,
    pub compared: usize,
    pub failures: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradStat>,
    pub compared: usize,
    pub failures: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} n={:<5} fail={:<3} max_abs={:.3e} max_rel={:.3e}",
                p.path, p.compared, p.failures, p.max_abs_diff, p.max_rel_diff
            )?;
        }
        write!(
            f,
            "{} coordinates compared, {} failed: {}",
            self.compared,
            self.failures,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn eval_loss<T, F>(params: &ParamStore<T>, loss_fn: &F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = loss_fn(&mut g)?;
    let v = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Analytic gradients of `loss_fn` at `params`, as returned by the tape.
pub fn analytic_gradients<T, F>(params: &ParamStore<T>, loss_fn: &F) -> Result<Gradients<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = loss_fn(&mut g)?;
    g.backward(loss)
}

/// Compares tape gradients with `(f(p + eps) - f(p - eps)) / (2 eps)` for every
/// (or a sampled subset of) parameter coordinate. A coordinate passes when
/// `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
pub fn grad_check<T, F>(params: &ParamStore<T>, loss_fn: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let base = eval_loss(params, &loss_fn)?;
    let again = eval_loss(params, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic(format!("{base} vs {again}")));
    }
    let grads = analytic_gradients(params, &loss_fn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradReport { params: Vec::new(), compared: 0, failures: 0, passed: true };

    for idx in 0..params.len() {
        let (path, tensor) = params.by_index(idx);
        let len = tensor.len();
        let coords: Vec<usize> = match opts.max_per_param {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut stat = ParamGradStat {
            path: path.to_string(),
            compared: 0,
            failures: 0,
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
        };
        for c in coords {
            let orig = tensor.data()[c];
            let step = T::lit(opts.eps);
            work.by_index_mut(idx).data_mut()[c] = orig + step;
            let plus = eval_loss(&work, &loss_fn)?;
            work.by_index_mut(idx).data_mut()[c] = orig - step;
            let minus = eval_loss(&work, &loss_fn)?;
            work.by_index_mut(idx).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads
                .get(idx)
                .map_or(0.0, |g| g[c].to_f64().unwrap_or(f64::NAN));
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            stat.compared += 1;
            stat.max_abs_diff = stat.max_abs_diff.max(diff);
            stat.max_rel_diff = stat.max_rel_diff.max(rel);
            if !(diff <= opts.abs_tol + opts.rel_tol * scale) {
                stat.failures += 1;
            }
        }
        report.compared += stat.compared;
        report.failures += stat.failures;
        report.params.push(stat);
    }
    report.passed = report.failures == 0;
    Ok(report)
}

/// Checks the tape gradient of the full training loss of `cfg` on one
/// conversation, in `f64`.
///
/// The distillation teachers are detached, so the tape follows the gradient
/// of the loss with the teachers held at their current values. Finite
/// differences are therefore taken with the teachers frozen, and the tape
/// gradient of the live loss must match the frozen one coordinate for
/// coordinate (any mismatch is counted as a failure). Train-mode noise is
/// drawn from `noise_seed` on every evaluation.
pub fn check_model_loss(
    cfg: &ModelConfig,
    input: &ConvInput,
    param_seed: u64,
    noise_seed: u64,
    gammas: (f64, f64),
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let params = build_params::<f64>(cfg, param_seed)?;
    let mode = ForwardMode::Train { seed: noise_seed };
    let no_loss = || Error::Invalid("conversation has no labelled utterance".into());
    let live = |g: &mut Graph<'_, f64>| forward(cfg, g, input, mode, gammas)?.loss.ok_or_else(no_loss);

    let teachers = {
        let mut g = Graph::new(&params);
        let out = forward(cfg, &mut g, input, mode, gammas)?;
        FrozenTeachers { fused: g.value(out.fused).clone(), fused_probs: g.value(out.probs[&Head::Fused]).clone() }
    };
    let frozen = |g: &mut Graph<'_, f64>| {
        forward_with_teachers(cfg, g, input, mode, gammas, Some(&teachers))?.loss.ok_or_else(no_loss)
    };

    let mut report = grad_check(&params, frozen, opts)?;
    let (a, b) = (analytic_gradients(&params, &live)?, analytic_gradients(&params, &frozen)?);
    for (idx, stat) in report.params.iter_mut().enumerate() {
        let zeros = vec![0.0; params.by_index(idx).1.len()];
        let ga = a.get(idx).unwrap_or(&zeros);
        let gb = b.get(idx).unwrap_or(&zeros);
        let bad = ga.iter().zip(gb).filter(|(x, y)| (*x - *y).abs() > 1e-12 * (1.0 + x.abs())).count();
        stat.failures += bad;
        report.failures += bad;
    }
    report.passed = report.failures == 0;
    Ok(report)
}

/// Toy setting: one synthetic conversation of `n` utterances, `classes`
/// labels, small feature widths, width `d`, one layer, all modalities and
/// unit loss weights.
pub fn toy_model_check(d: usize, n: usize, heads: usize, classes: usize, seed: u64) -> Result<GradReport> {
    let ds = generate_synthetic(&SynthConfig {
        conversations: 1,
        min_len: n,
        max_len: n,
        num_classes: classes,
        modality_dims: [6, 5, 4],
        noise: 0.1,
        seed,
        ..Default::default()
    })?;
    let cfg = ModelConfig { heads, ..ModelConfig::small(ds.modality_dims, classes, ds.num_speakers, d) };
    let input = ConvInput::from_conversation(&ds.conversations[0], classes);
    let opts = GradCheckOptions { eps: 1e-5, seed, ..Default::default() };
    check_model_loss(&cfg, &input, seed, seed.wrapping_add(1), (1.0, 1.0), &opts)
}
