//! Asymmetric cross-modality augmented transformer.
//!
//! For a central modality `c` with auxiliaries `a1, a2`:
//!
//! ```text
//! ~H_{a->c} = CA(H_c, H_a, H_a)
//!  H_{a->c} = Norm(FFN(Norm(~H_{a->c} + H_c)) + Norm(~H_{a->c} + H_c))
//! ~H_{c->c} = SA(H_c, H_c, H_c) + ~H_{a1->c} + ~H_{a2->c}
//!  H_{c->c} = same post-norm tail applied to ~H_{c->c}
//!  H'_c     = sum_k g_k H_k,  g = softmax(W_g [H_{c->c}; H_{a1->c}; H_{a2->c}] + b_g)
//! ```
//!
//! With fewer auxiliaries the gate shrinks accordingly; with none only the
//! self branch remains and the gate is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout on sublayer outputs. Inactive unless built with a
/// positive rate and a seed.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            Self { rate, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
        } else {
            Self::off()
        }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let len = g.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let mask = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
        g.mul(x, mask)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl AttentionShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

/// Registers query/key/value/output projections, both layer norms and the
/// feed-forward network of one attention sublayer.
pub fn register_attention<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    shape: AttentionShape,
    rng: &mut R,
) -> Result<()> {
    let d = shape.d;
    for proj in ["query", "key", "value", "output"] {
        store.init_weight(format!("{prefix}.{proj}.weight"), &[d, d], d, rng)?;
        store.init_zeros(format!("{prefix}.{proj}.bias"), &[d])?;
    }
    store.init_ones(format!("{prefix}.norm1.gain"), &[d])?;
    store.init_zeros(format!("{prefix}.norm1.bias"), &[d])?;
    store.init_weight(format!("{prefix}.ffn1.weight"), &[d, shape.d_ff], d, rng)?;
    store.init_zeros(format!("{prefix}.ffn1.bias"), &[shape.d_ff])?;
    store.init_weight(format!("{prefix}.ffn2.weight"), &[shape.d_ff, d], shape.d_ff, rng)?;
    store.init_zeros(format!("{prefix}.ffn2.bias"), &[d])?;
    store.init_ones(format!("{prefix}.norm2.gain"), &[d])?;
    store.init_zeros(format!("{prefix}.norm2.bias"), &[d])?;
    Ok(())
}

/// Gate over `streams` inputs of width `d`: weight `[streams * d, streams]`.
pub fn register_gate<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    streams: usize,
    rng: &mut R,
) -> Result<()> {
    store.init_weight(format!("{prefix}.weight"), &[streams * d, streams], streams * d, rng)?;
    store.init_zeros(format!("{prefix}.bias"), &[streams])?;
    Ok(())
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.affine(x, w, b)
}

fn norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, T::lit(LAYER_NORM_EPS))
}

/// Key mask expanded to every query row.
fn key_mask(mask: &[bool], rows: usize) -> Result<Vec<bool>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttentionRow);
    }
    Ok((0..rows).flat_map(|_| mask.iter().copied()).collect())
}

/// Multi-head scaled dot-product attention; returns the projected output and
/// the per-head attention weights.
pub fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    queries: Var,
    keys: Var,
    prefix: &str,
    heads: usize,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let (n, d) = (g.value(queries).rows(), g.value(queries).cols());
    let m = g.value(keys).rows();
    if g.value(keys).cols() != d {
        return Err(shape_err(format!("query width {d} vs key width {}", g.value(keys).cols())));
    }
    if mask.len() != m {
        return Err(shape_err(format!("{} mask flags for {m} keys", mask.len())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let full_mask = key_mask(mask, n)?;
    let q = linear(g, queries, &format!("{prefix}.query"))?;
    let k = linear(g, keys, &format!("{prefix}.key"))?;
    let v = linear(g, keys, &format!("{prefix}.value"))?;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, Some(&full_mask))?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    Ok((linear(g, merged, &format!("{prefix}.output"))?, weights))
}

/// `Norm(FFN(Norm(x + residual)) + Norm(x + residual))`.
pub fn post_norm_tail<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    residual: Var,
    prefix: &str,
    drop: &mut Dropout,
) -> Result<Var> {
    let x = drop.apply(g, x)?;
    let sum = g.add(x, residual)?;
    let bar = norm(g, sum, &format!("{prefix}.norm1"))?;
    let hidden = linear(g, bar, &format!("{prefix}.ffn1"))?;
    let hidden = g.relu(hidden);
    let ff = linear(g, hidden, &format!("{prefix}.ffn2"))?;
    let ff = drop.apply(g, ff)?;
    let out = g.add(ff, bar)?;
    norm(g, out, &format!("{prefix}.norm2"))
}

/// Cross-attention from `aux` into `central`. Returns the pre-residual
/// attention output and the normalized stream.
pub fn cross_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    central: Var,
    aux: Var,
    prefix: &str,
    heads: usize,
    mask: &[bool],
    drop: &mut Dropout,
) -> Result<(Var, Var)> {
    if g.shape(central) != g.shape(aux) {
        return Err(shape_err(format!("central {:?} vs auxiliary {:?}", g.shape(central), g.shape(aux))));
    }
    let (tilde, _) = attention(g, central, aux, prefix, heads, mask)?;
    let stream = post_norm_tail(g, tilde, central, prefix, drop)?;
    Ok((tilde, stream))
}

/// Self-attention over `central` augmented with the cross branches'
/// pre-residual outputs.
pub fn central_self<T: Scalar>(
    g: &mut Graph<'_, T>,
    central: Var,
    cross_tildes: &[Var],
    prefix: &str,
    heads: usize,
    mask: &[bool],
    drop: &mut Dropout,
) -> Result<Var> {
    let (mut aug, _) = attention(g, central, central, prefix, heads, mask)?;
    for &t in cross_tildes {
        aug = g.add(aug, t)?;
    }
    post_norm_tail(g, aug, central, prefix, drop)
}

/// Position-wise convex combination of `streams` (self stream first).
/// Returns the fused output and the `n x streams` gate weights.
pub fn gate_fuse<T: Scalar>(g: &mut Graph<'_, T>, streams: &[Var], prefix: &str) -> Result<(Var, Var)> {
    let first = *streams.first().ok_or_else(|| shape_err("gate over no streams"))?;
    if streams.iter().any(|&s| g.shape(s) != g.shape(first)) {
        return Err(shape_err("gate streams differ in shape"));
    }
    let cat = if streams.len() == 1 { first } else { g.concat(streams)? };
    let logits = linear(g, cat, prefix)?;
    let weights = g.softmax(logits, None)?;
    if streams.len() == 1 {
        let w = g.slice_cols(weights, 0, 1)?;
        return Ok((g.mul_col(first, w)?, weights));
    }
    let mut out: Option<Var> = None;
    for (k, &s) in streams.iter().enumerate() {
        let w = g.slice_cols(weights, k, 1)?;
        let term = g.mul_col(s, w)?;
        out = Some(match out {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((out.expect("non-empty"), weights))
}

/// Intermediate values of one block.
#[derive(Clone, Debug)]
pub struct CmaOutputs {
    /// pre-residual cross-attention outputs, one per auxiliary
    pub cross_tildes: Vec<Var>,
    /// normalized cross streams, one per auxiliary
    pub cross_streams: Vec<Var>,
    pub self_stream: Var,
    pub gate_weights: Var,
    pub fused: Var,
}

/// One block. `aux` pairs each auxiliary input with the parameter prefix of
/// its cross branch, in the order the gate sees them.
#[allow(clippy::too_many_arguments)]
pub fn cma_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    central: Var,
    aux: &[(Var, String)],
    self_prefix: &str,
    gate_prefix: &str,
    heads: usize,
    mask: &[bool],
    drop: &mut Dropout,
) -> Result<CmaOutputs> {
    let mut cross_tildes = Vec::with_capacity(aux.len());
    let mut cross_streams = Vec::with_capacity(aux.len());
    for (h_aux, prefix) in aux {
        let (t, s) = cross_attend(g, central, *h_aux, prefix, heads, mask, drop)?;
        cross_tildes.push(t);
        cross_streams.push(s);
    }
    let self_stream = central_self(g, central, &cross_tildes, self_prefix, heads, mask, drop)?;
    let mut streams = vec![self_stream];
    streams.extend(&cross_streams);
    let (fused, gate_weights) = gate_fuse(g, &streams, gate_prefix)?;
    Ok(CmaOutputs { cross_tildes, cross_streams, self_stream, gate_weights, fused })
}

/// Parameter prefixes for central modality `central` at `layer`.
pub fn block_prefixes(root: &str, central: char, layer: usize, aux: &[char]) -> (Vec<String>, String, String) {
    let base = format!("{root}.{central}.layer{layer}");
    let cross = aux.iter().map(|a| format!("{base}.cross_{a}")).collect();
    (cross, format!("{base}.self"), format!("{base}.gate"))
}

pub fn register_block<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    root: &str,
    central: char,
    layer: usize,
    aux: &[char],
    shape: AttentionShape,
    rng: &mut R,
) -> Result<()> {
    let (cross, self_p, gate_p) = block_prefixes(root, central, layer, aux);
    for p in &cross {
        register_attention(store, p, shape, rng)?;
    }
    register_attention(store, &self_p, shape, rng)?;
    register_gate(store, &gate_p, shape.d, aux.len() + 1, rng)
}

/// Stacks `layers` blocks on the central stream; every layer attends to the
/// same auxiliary inputs.
#[allow(clippy::too_many_arguments)]
pub fn cma_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    root: &str,
    central: (char, Var),
    aux: &[(char, Var)],
    layers: usize,
    heads: usize,
    mask: &[bool],
    drop: &mut Dropout,
) -> Result<CmaOutputs> {
    let tags: Vec<char> = aux.iter().map(|(c, _)| *c).collect();
    let mut h = central.1;
    let mut last = None;
    for layer in 0..layers {
        let (cross, self_p, gate_p) = block_prefixes(root, central.0, layer, &tags);
        let pairs: Vec<(Var, String)> = aux.iter().map(|(_, v)| *v).zip(cross).collect();
        let out = cma_block(g, h, &pairs, &self_p, &gate_p, heads, mask, drop)?;
        h = out.fused;
        last = Some(out);
    }
    last.ok_or_else(|| Error::Config("at least one transformer layer is required".into()))
}

/// Constant `n x n` attention weights of head 0 for inspection in tests.
pub fn attention_weights<T: Scalar>(g: &Graph<'_, T>, w: Var) -> Tensor<T> {
    g.value(w).clone()
}
