//! Variational fusion: each augmented modality stream is mapped to a diagonal
//! Gaussian, the Gaussians are averaged, and the fused representation is a
//! reparameterized sample (or the mean in evaluation).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GaussianPair {
    pub mu: Var,
    pub sigma: Var,
}

/// Registers the `d -> d_h -> d` mean and scale MLPs under `prefix.mu` and
/// `prefix.sigma`.
pub fn register_fusion<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    d_h: usize,
    rng: &mut R,
) -> Result<()> {
    for head in ["mu", "sigma"] {
        store.init_weight(format!("{prefix}.{head}.hidden.weight"), &[d, d_h], d, rng)?;
        store.init_zeros(format!("{prefix}.{head}.hidden.bias"), &[d_h])?;
        store.init_weight(format!("{prefix}.{head}.out.weight"), &[d_h, d], d_h, rng)?;
        store.init_zeros(format!("{prefix}.{head}.out.bias"), &[d])?;
    }
    Ok(())
}

fn mlp<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.hidden.weight"))?;
    let b1 = g.param(&format!("{prefix}.hidden.bias"))?;
    let h = g.affine(x, w1, b1)?;
    let h = g.relu(h);
    let w2 = g.param(&format!("{prefix}.out.weight"))?;
    let b2 = g.param(&format!("{prefix}.out.bias"))?;
    g.affine(h, w2, b2)
}

/// `mu = MLP_mu(h)`, `sigma = softplus(MLP_sigma(h)) + 1e-4`.
pub fn modality_gaussian<T: Scalar>(g: &mut Graph<'_, T>, h: Var, prefix: &str) -> Result<GaussianPair> {
    let mu = mlp(g, h, &format!("{prefix}.mu"))?;
    let raw = mlp(g, h, &format!("{prefix}.sigma"))?;
    let sp = g.softplus(raw);
    let floor = g.constant(Tensor::full(g.shape(sp), T::lit(SIGMA_FLOOR)));
    let sigma = g.add(sp, floor)?;
    Ok(GaussianPair { mu, sigma })
}

/// Arithmetic mean of the means and of the standard deviations.
pub fn mix_gaussians<T: Scalar>(g: &mut Graph<'_, T>, pairs: &[GaussianPair]) -> Result<GaussianPair> {
    let first = pairs.first().ok_or_else(|| shape_err("mixture of no Gaussians"))?;
    if pairs.len() == 1 {
        return Ok(*first);
    }
    let (mut mu, mut sigma) = (first.mu, first.sigma);
    for p in &pairs[1..] {
        mu = g.add(mu, p.mu)?;
        sigma = g.add(sigma, p.sigma)?;
    }
    let inv = T::one() / T::from_usize(pairs.len()).expect("count");
    Ok(GaussianPair { mu: g.scale(mu, inv), sigma: g.scale(sigma, inv) })
}

/// `mu + eps * sigma` with `eps ~ N(0, I)` drawn from `rng`; with no rng
/// (evaluation) the mean itself.
pub fn reparameterize<T: Scalar, R: Rng>(
    g: &mut Graph<'_, T>,
    pair: GaussianPair,
    rng: Option<&mut R>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(pair.mu) };
    let shape = g.shape(pair.sigma).to_vec();
    let len: usize = shape.iter().product();
    let eps: Vec<T> = (0..len).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    let eps = g.constant(Tensor::new(shape, eps)?);
    let noise = g.mul(eps, pair.sigma)?;
    g.add(pair.mu, noise)
}
