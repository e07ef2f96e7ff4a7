//! Invariant checks shared by the property suite and the acceptance runner.
//! Each returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mmerc::autodiff::Graph;
use mmerc::cma::{attention, cma_block, register_attention, register_gate, AttentionShape, Dropout};
use mmerc::data::ConvInput;
use mmerc::fusion::{mix_gaussians, modality_gaussian, register_fusion, reparameterize, GaussianPair};
use mmerc::model::{build_params, forward, ForwardMode, Model, ModelConfig};
use mmerc::objectives::{high_level_distill, low_level_distill, Head};
use mmerc::params::ParamStore;
use mmerc::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::common::{random_tensor, rng, small_dataset};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn attention_rows(seed: u64, mask: &[bool], heads: usize) -> Check {
    let n = mask.len();
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    register_attention(&mut store, "att", AttentionShape { d: 8, heads, d_ff: 8 }, &mut r).unwrap();
    let mut g = Graph::new(&store);
    let q = g.constant(random_tensor(&mut r, n, 8, 3.0).cast());
    let (_, weights) = attention(&mut g, q, q, "att", heads, mask).map_err(|e| e.to_string())?;
    ensure!(weights.len() == heads, "{} weight maps for {heads} heads", weights.len());
    for w in weights {
        let w = g.value(w);
        for i in 0..n {
            let row = w.row(i);
            let total: f32 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).sum();
            ensure!((total - 1.0).abs() <= 1e-5, "row {i} sums to {total}");
            for (j, (v, &m)) in row.iter().zip(mask).enumerate() {
                ensure!(m || v.to_bits() == 0f32.to_bits(), "masked key {j} got weight {v}");
                ensure!(*v >= 0.0, "negative weight {v}");
            }
        }
    }
    Ok(())
}

pub fn gate_simplex(seed: u64, n: usize, streams: usize) -> Check {
    let mut r = rng(seed);
    let shape = AttentionShape { d: 4, heads: 2, d_ff: 8 };
    let mut store = ParamStore::<f64>::new();
    let aux_names: Vec<String> = (1..streams).map(|i| format!("x{i}")).collect();
    for p in aux_names.iter().chain(std::iter::once(&"self".to_string())) {
        register_attention(&mut store, p, shape, &mut r).unwrap();
    }
    register_gate(&mut store, "gate", 4, streams, &mut r).unwrap();
    for v in store.get_mut("gate.weight").unwrap().data_mut() {
        *v *= 10.0;
    }
    let mut g = Graph::new(&store);
    let c = g.constant(random_tensor(&mut r, n, 4, 2.0));
    let aux: Vec<_> = aux_names.iter().map(|p| (g.constant(random_tensor(&mut r, n, 4, 2.0)), p.clone())).collect();
    let out = cma_block(&mut g, c, &aux, "self", "gate", 2, &vec![true; n], &mut Dropout::off()).map_err(|e| e.to_string())?;
    let w = g.value(out.gate_weights);
    ensure!(w.shape() == [n, streams], "gate shape {:?}", w.shape());
    for i in 0..n {
        ensure!(w.row(i).iter().all(|&v| v >= 0.0), "negative gate weight in row {i}");
        let s = w.row(i).iter().sum::<f64>();
        ensure!((s - 1.0).abs() <= 1e-5, "gate row {i} sums to {s}");
    }
    Ok(())
}

/// Exchanging the two auxiliary streams together with their gate slots
/// (row blocks and columns 1 and 2) must leave the output unchanged.
pub fn aux_swap_symmetry(seed: u64, n: usize) -> Check {
    let d = 4;
    let mut r = rng(seed);
    let shape = AttentionShape { d, heads: 2, d_ff: 8 };
    let mut store = ParamStore::<f64>::new();
    for p in ["x1", "x2", "self"] {
        register_attention(&mut store, p, shape, &mut r).unwrap();
    }
    register_gate(&mut store, "gate", d, 3, &mut r).unwrap();
    store.get_mut("gate.bias").unwrap().data_mut().copy_from_slice(&[0.1, -0.4, 0.7]);
    let mut swapped = store.clone();
    {
        let w = store.get("gate.weight").unwrap();
        let sw = swapped.get_mut("gate.weight").unwrap().data_mut();
        let block = |s: usize| if s == 1 { 2 } else if s == 2 { 1 } else { s };
        for row in 0..3 * d {
            for col in 0..3 {
                let src_row = block(row / d) * d + row % d;
                sw[row * 3 + col] = w.data()[src_row * 3 + block(col)];
            }
        }
        let b = store.get("gate.bias").unwrap().data().to_vec();
        swapped.get_mut("gate.bias").unwrap().data_mut().copy_from_slice(&[b[0], b[2], b[1]]);
    }
    let hc = random_tensor(&mut r, n, d, 2.0);
    let h1 = random_tensor(&mut r, n, d, 2.0);
    let h2 = random_tensor(&mut r, n, d, 2.0);
    let mask = vec![true; n];

    let mut g = Graph::new(&store);
    let (c, a1, a2) = (g.constant(hc.clone()), g.constant(h1.clone()), g.constant(h2.clone()));
    let fwd = cma_block(&mut g, c, &[(a1, "x1".into()), (a2, "x2".into())], "self", "gate", 2, &mask, &mut Dropout::off())
        .map_err(|e| e.to_string())?;

    let mut g2 = Graph::new(&swapped);
    let (c, a1, a2) = (g2.constant(hc), g2.constant(h1), g2.constant(h2));
    let rev = cma_block(&mut g2, c, &[(a2, "x2".into()), (a1, "x1".into())], "self", "gate", 2, &mask, &mut Dropout::off())
        .map_err(|e| e.to_string())?;

    for (x, y) in g.value(fwd.fused).data().iter().zip(g2.value(rev.fused).data()) {
        ensure!((x - y).abs() <= 1e-12, "fused {x} vs {y}");
    }
    let (w1, w2) = (g.value(fwd.gate_weights), g2.value(rev.gate_weights));
    for i in 0..n {
        ensure!((w1.at(i, 1) - w2.at(i, 2)).abs() <= 1e-12, "aux gate weight mismatch in row {i}");
        ensure!((w1.at(i, 0) - w2.at(i, 0)).abs() <= 1e-12, "self gate weight mismatch in row {i}");
    }
    Ok(())
}

pub fn sigma_positive(seed: u64, scale: f64) -> Check {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    register_fusion(&mut store, "f", 4, 6, &mut r).unwrap();
    let mut g = Graph::new(&store);
    let h = g.constant(random_tensor(&mut r, 5, 4, scale));
    let pair = modality_gaussian(&mut g, h, "f").map_err(|e| e.to_string())?;
    ensure!(g.value(pair.sigma).data().iter().all(|&s| s > 0.0 && s.is_finite()), "non-positive sigma at scale {scale}");
    Ok(())
}

pub fn mixing_permutation_invariant(seed: u64) -> Check {
    let mut r = rng(seed);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let pairs: Vec<GaussianPair> = (0..3)
        .map(|_| GaussianPair {
            mu: g.constant(random_tensor(&mut r, 2, 3, 1.0)),
            sigma: g.constant(random_tensor(&mut r, 2, 3, 1.0).map(|v| v.abs() + 0.1)),
        })
        .collect();
    let a = mix_gaussians(&mut g, &pairs).unwrap();
    let b = mix_gaussians(&mut g, &[pairs[2], pairs[0], pairs[1]]).unwrap();
    for (x, y) in [(a.mu, b.mu), (a.sigma, b.sigma)] {
        for (u, v) in g.value(x).data().iter().zip(g.value(y).data()) {
            ensure!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
    Ok(())
}

fn random_probs(r: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let t = random_tensor(r, n, c, 3.0).map(f64::exp);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s: f64 = t.row(i).iter().sum();
            t.row(i).iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn distillation_nonnegative(seed: u64, n: usize, c: usize) -> Check {
    let mut r = rng(seed);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mask: Vec<bool> = (0..n).map(|i| i == 0 || r.random::<bool>()).collect();
    let (p, q) = (random_probs(&mut r, n, c), random_probs(&mut r, n, c));
    let (pv, qv) = (g.constant(p.clone()), g.constant(q));
    let kl = high_level_distill(&mut g, pv, qv, &mask).unwrap();
    ensure!(g.value(kl).item() >= -1e-12, "KL {}", g.value(kl).item());
    let pv2 = g.constant(p);
    let kl0 = high_level_distill(&mut g, pv, pv2, &mask).unwrap();
    ensure!(g.value(kl0).item().abs() <= 1e-12, "KL(p, p) = {}", g.value(kl0).item());

    let (x, y) = (random_tensor(&mut r, n, 3, 2.0), random_tensor(&mut r, n, 3, 2.0));
    let (xv, yv) = (g.constant(x.clone()), g.constant(y));
    let mse = low_level_distill(&mut g, xv, yv, &mask).unwrap();
    ensure!(g.value(mse).item() >= 0.0, "MSE {}", g.value(mse).item());
    let xv2 = g.constant(x);
    let mse0 = low_level_distill(&mut g, xv, xv2, &mask).unwrap();
    ensure!(g.value(mse0).item() == 0.0, "MSE(x, x) = {}", g.value(mse0).item());
    Ok(())
}

/// Appending padded positions changes neither evaluation outputs at the valid
/// positions nor the training loss.
pub fn padding_invariance(seed: u64, extra: usize, subset: &str) -> Check {
    let ds = small_dataset(1, seed);
    let cfg = ModelConfig { modalities: subset.parse().unwrap(), ..ModelConfig::small(ds.modality_dims, ds.num_classes(), ds.num_speakers, 8) };
    let model = Model::new(cfg, seed).unwrap();
    let c = ds.num_classes();
    let input = ConvInput::from_conversation(&ds.conversations[0], c);
    let padded = input.padded(extra, c);

    let a = model.predict(&input, Head::Fused).map_err(|e| e.to_string())?;
    let b = model.predict(&padded, Head::Fused).map_err(|e| e.to_string())?;
    ensure!(a.labels == b.labels, "labels changed: {:?} vs {:?}", a.labels, b.labels);
    for (x, y) in a.fused.data().iter().zip(b.fused.data()) {
        ensure!((x - y).abs() <= 1e-5, "fused drift {x} vs {y}");
    }
    for (h, p) in &a.probs {
        for (x, y) in p.data().iter().zip(b.probs[h].data()) {
            ensure!((x - y).abs() <= 1e-5, "{h:?} probability drift {x} vs {y}");
        }
    }

    let mode = ForwardMode::Train { seed };
    let (pa, _) = model.loss_and_grads(&input, mode, (1.0, 1.0)).map_err(|e| e.to_string())?.unwrap();
    let (pb, _) = model.loss_and_grads(&padded, mode, (1.0, 1.0)).map_err(|e| e.to_string())?.unwrap();
    ensure!((pa.total - pb.total).abs() <= 1e-5 * pa.total.abs().max(1.0), "loss {} vs {}", pa.total, pb.total);
    ensure!((pa.re - pb.re).abs() <= 1e-5 * pa.re.abs().max(1.0), "reconstruction {} vs {}", pa.re, pb.re);
    Ok(())
}

pub fn loss_parts_recompose(seed: u64, g1: f64, g2: f64) -> Check {
    let ds = small_dataset(1, seed);
    let model = Model::new(ModelConfig::small(ds.modality_dims, ds.num_classes(), ds.num_speakers, 8), seed).unwrap();
    let input = ConvInput::from_conversation(&ds.conversations[0], ds.num_classes());
    let (parts, _) = model.loss_and_grads(&input, ForwardMode::Train { seed }, (g1, g2)).map_err(|e| e.to_string())?.unwrap();
    ensure!(
        (parts.recompose() - parts.total).abs() <= 1e-6 * parts.total.abs(),
        "recomposed {} vs total {}",
        parts.recompose(),
        parts.total
    );
    ensure!(parts.ce.len() == 4, "{} CE terms", parts.ce.len());
    ensure!(parts.gammas == (g1, g2), "gammas {:?}", parts.gammas);
    Ok(())
}

/// 10,000 reparameterised draws: sample mean within 5 standard errors and
/// sample sd within 5% per coordinate; evaluation returns the mean exactly.
pub fn reparameterization_moments() -> Check {
    let mut r = rng(5);
    let store = ParamStore::<f64>::new();
    let mu = random_tensor(&mut r, 2, 3, 2.0);
    let sigma = random_tensor(&mut r, 2, 3, 1.0).map(|v| v.abs() + 0.2);
    let samples = 10_000;
    let mut sum = vec![0.0; 6];
    let mut sq = vec![0.0; 6];
    let mut noise = rng(6);
    for _ in 0..samples {
        let mut g = Graph::new(&store);
        let pair = GaussianPair { mu: g.constant(mu.clone()), sigma: g.constant(sigma.clone()) };
        let z = reparameterize(&mut g, pair, Some(&mut noise)).unwrap();
        for (k, v) in g.value(z).data().iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let n = samples as f64;
    for k in 0..6 {
        let mean = sum[k] / n;
        let sd = ((sq[k] - n * mean * mean) / (n - 1.0)).sqrt();
        let se = sigma.data()[k] / n.sqrt();
        ensure!((mean - mu.data()[k]).abs() <= 5.0 * se, "coord {k}: mean {mean} vs {}", mu.data()[k]);
        ensure!((sd / sigma.data()[k] - 1.0).abs() <= 0.05, "coord {k}: sd {sd} vs {}", sigma.data()[k]);
    }
    let mut g = Graph::new(&store);
    let pair = GaussianPair { mu: g.constant(mu.clone()), sigma: g.constant(sigma) };
    let z = reparameterize::<f64, ChaCha8Rng>(&mut g, pair, None).unwrap();
    ensure!(g.value(z) == &mu, "evaluation draw differs from the mean");
    Ok(())
}

/// d z / d sigma equals the drawn noise and d z / d mu is one.
pub fn pathwise_derivative() -> Check {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    store.insert("mu", random_tensor(&mut r, 2, 2, 1.0)).unwrap();
    store.insert("sigma", random_tensor(&mut r, 2, 2, 1.0).map(|v| v.abs() + 0.5)).unwrap();
    let mut g = Graph::new(&store);
    let pair = GaussianPair { mu: g.param("mu").unwrap(), sigma: g.param("sigma").unwrap() };
    let z = reparameterize(&mut g, pair, Some(&mut rng(8))).unwrap();
    let total = g.sum(z);
    let grads = g.backward(total).unwrap();
    let mut noise = rng(8);
    let eps: Vec<f64> = (0..4).map(|_| noise.sample(rand_distr::StandardNormal)).collect();
    let idx = store.index_of("sigma").unwrap();
    for (a, e) in grads.get(idx).unwrap().iter().zip(&eps) {
        ensure!((a - e).abs() < 1e-12, "dz/dsigma {a} vs noise {e}");
    }
    ensure!(grads.get(store.index_of("mu").unwrap()).unwrap().iter().all(|&v| v == 1.0), "dz/dmu is not one");
    Ok(())
}

/// Gradients of every fusion-MLP and fused-classifier parameter.
fn teacher_side_grads(cfg: &ModelConfig, params: &ParamStore<f64>, input: &ConvInput, gammas: (f64, f64)) -> BTreeMap<String, Vec<f64>> {
    let mut g = Graph::new(params);
    let out = forward(cfg, &mut g, input, ForwardMode::Train { seed: 3 }, gammas).unwrap();
    let grads = g.backward(out.loss.unwrap()).unwrap();
    params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.starts_with("fusion.") || name.starts_with("cls.x"))
        .map(|(i, (name, t))| (name.to_string(), grads.get(i).map_or(vec![0.0; t.len()], <[f64]>::to_vec)))
        .collect()
}

/// The distillation terms contribute nothing to the gradients of the
/// teacher side (fusion MLPs and fused classifier).
pub fn teacher_detachment(seed: u64) -> Check {
    let ds = small_dataset(1, seed);
    let cfg = ModelConfig::small(ds.modality_dims, ds.num_classes(), ds.num_speakers, 8);
    let params = build_params::<f64>(&cfg, seed).unwrap();
    let input = ConvInput::from_conversation(&ds.conversations[0], ds.num_classes());
    let with = teacher_side_grads(&cfg, &params, &input, (1.0, 1.8));
    let without = teacher_side_grads(&cfg, &params, &input, (0.0, 0.0));
    ensure!(!with.is_empty(), "no teacher-side parameters");
    for (name, a) in &with {
        for (x, y) in a.iter().zip(&without[name]) {
            ensure!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}: {x} vs {y}");
        }
    }
    Ok(())
}
