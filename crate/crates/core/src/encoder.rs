//! Modality reconstruction and embedding assembly.
//!
//! Each modality is compressed from `d_m` to the common width `d` by a 1-D
//! convolution along the utterance axis, decoded back to `d_m` for the
//! reconstruction loss, and combined with speaker and sinusoidal position
//! embeddings. Convolutions use symmetric zero padding so the utterance count
//! never changes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Registers a `[k, d_in, d_out]` kernel and `[d_out]` bias under `prefix`.
pub fn register_conv<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    k: usize,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("{prefix}: kernel size {k} must be odd")));
    }
    store.init_weight(format!("{prefix}.weight"), &[k, d_in, d_out], k * d_in, rng)?;
    store.init_zeros(format!("{prefix}.bias"), &[d_out])?;
    Ok(())
}

/// Same-length 1-D convolution over rows of `x: n x d_in` with a
/// `[k, d_in, d_out]` kernel, lowered to a single matmul over stacked taps.
pub fn conv1d<T: Scalar>(g: &mut Graph<'_, T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(weight).to_vec();
    let [k, d_in, _] = shape[..] else {
        return Err(shape_err(format!("conv kernel must be [k, d_in, d_out], got {shape:?}")));
    };
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size {k} must be odd")));
    }
    if g.value(x).cols() != d_in {
        return Err(shape_err(format!(
            "conv expects {d_in} input channels, got {}",
            g.value(x).cols()
        )));
    }
    let half = (k / 2) as isize;
    let stacked = if k == 1 {
        x
    } else {
        let taps = (0..k as isize)
            .map(|j| g.shift_rows(x, j - half))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&taps)?
    };
    g.affine(stacked, weight, bias)
}

pub fn conv_encode<T: Scalar>(g: &mut Graph<'_, T>, u: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    conv1d(g, u, w, b)
}

pub fn conv_decode<T: Scalar>(g: &mut Graph<'_, T>, latent: Var, prefix: &str) -> Result<Var> {
    conv_encode(g, latent, prefix)
}

/// Squared Frobenius distance between `u` and `recon`, over rows where
/// `mask` is set.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    u: Var,
    recon: Var,
    mask: &[bool],
) -> Result<Var> {
    if g.shape(u) != g.shape(recon) {
        return Err(shape_err(format!(
            "reconstruction of {:?} against {:?}",
            g.shape(recon),
            g.shape(u)
        )));
    }
    let diff = g.sub(u, recon)?;
    let diff = mask_rows(g, diff, mask)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

/// Zeroes the rows of `x` whose mask flag is false.
pub fn mask_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let col: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let col = g.constant(Tensor::new(vec![mask.len(), 1], col)?);
    g.mul_col(x, col)
}

/// Row `i` is column `ids[i]` of the `d x m_spk` embedding matrix.
pub fn speaker_embeddings<T: Scalar>(g: &mut Graph<'_, T>, ids: &[usize], table: Var) -> Result<Var> {
    g.gather_cols(table, ids)
}

type PeCache = Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>;

fn pe_cache() -> &'static PeCache {
    static CACHE: OnceLock<PeCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Sinusoidal encoding: entry `(i, 2k)` is `sin(i / 10000^(2k/d))` and
/// `(i, 2k+1)` is the matching cosine. Positions start at 0.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding width {d} must be even")));
    }
    if n == 0 {
        return Err(shape_err("positional encoding for zero positions"));
    }
    let table = {
        let mut cache = pe_cache().lock().expect("positional cache");
        cache
            .entry((n, d))
            .or_insert_with(|| {
                let mut v = vec![0.0; n * d];
                for i in 0..n {
                    for k in 0..d / 2 {
                        let angle = i as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
                        v[i * d + 2 * k] = angle.sin();
                        v[i * d + 2 * k + 1] = angle.cos();
                    }
                }
                Arc::new(v)
            })
            .clone()
    };
    Tensor::new(vec![n, d], table.iter().map(|&x| T::lit(x)).collect())
}

/// `H_m = U'_m + S + P`.
pub fn assemble_modality<T: Scalar>(g: &mut Graph<'_, T>, latent: Var, speakers: Var, positions: Var) -> Result<Var> {
    let s = g.add(latent, speakers)?;
    g.add(s, positions)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<f64> {
        Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_store(k: usize, d_in: usize, d_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("c.weight", Tensor::new(vec![k, d_in, d_out], weight).unwrap()).unwrap();
        s.insert("c.bias", Tensor::new(vec![d_out], bias).unwrap()).unwrap();
        s
    }

    #[test]
    fn pointwise_kernel_on_zero_input_gives_bias() {
        let store = conv_store(1, 3, 2, vec![0.5; 6], vec![1.0, -2.0]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let y = conv_encode(&mut g, x, "c").unwrap();
        assert_eq!(g.shape(y), &[4, 2]);
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[1.0, -2.0]);
        }
    }

    #[test]
    fn single_row_uses_centre_tap_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_matrix(&mut rng, 3 * 2, 2);
        let store = conv_store(3, 2, 2, w.data().to_vec(), vec![0.1, 0.2]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap());
        let y = conv_encode(&mut g, x, "c").unwrap();
        // centre tap is rows 2..4 of the stacked kernel
        let expect: Vec<f64> = (0..2)
            .map(|o| 1.5 * w.at(2, o) - 0.5 * w.at(3, o) + [0.1, 0.2][o])
            .collect();
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_centre_tap_reproduces_input() {
        let d = 3;
        let mut weight = vec![0.0; 3 * d * d];
        for i in 0..d {
            weight[d * d + i * d + i] = 1.0;
        }
        let store = conv_store(3, d, d, weight, vec![0.0; d]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_val = rand_matrix(&mut rng, 5, d);
        let mut g = Graph::new(&store);
        let x = g.constant(x_val.clone());
        let y = conv_encode(&mut g, x, "c").unwrap();
        assert_eq!(g.value(y).data(), x_val.data());
    }

    #[test]
    fn side_taps_see_neighbours() {
        // kernel [1, 0, 0] on a scalar channel picks the previous row
        let store = conv_store(3, 1, 1, vec![1.0, 0.0, 0.0], vec![0.0]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let y = conv_encode(&mut g, x, "c").unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn inverse_pointwise_kernels_round_trip() {
        // encoder A, decoder A^-1 for a well-conditioned 2x2 A
        let a = [2.0, 1.0, 1.0, 3.0];
        let det = a[0] * a[3] - a[1] * a[2];
        let inv = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
        let mut store = conv_store(1, 2, 2, a.to_vec(), vec![0.0; 2]);
        store.insert("d.weight", Tensor::new(vec![1, 2, 2], inv.to_vec()).unwrap()).unwrap();
        store.insert("d.bias", Tensor::zeros(&[2])).unwrap();
        let x_val = Tensor::from_rows(&[vec![0.3, -1.2], vec![4.0, 0.5]]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(x_val.clone());
        let z = conv_encode(&mut g, x, "c").unwrap();
        let back = conv_decode(&mut g, z, "d").unwrap();
        for (p, q) in g.value(back).data().iter().zip(x_val.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_zero_latent_gives_bias_rows() {
        let store = conv_store(3, 2, 3, vec![0.7; 18], vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let y = conv_decode(&mut g, z, "c").unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let store = conv_store(1, 3, 2, vec![0.0; 6], vec![0.0; 2]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(conv_encode(&mut g, x, "c").is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(register_conv(&mut store, "c", 2, 3, 3, &mut rng).is_err());
    }

    fn recon(u: Tensor<f64>, r: Tensor<f64>, mask: &[bool]) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(u), g.constant(r));
        let l = reconstruction_loss(&mut g, a, b, mask).unwrap();
        g.value(l).item()
    }

    #[test]
    fn reconstruction_loss_cases() {
        let u = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(recon(u.clone(), u.clone(), &[true]), 0.0);
        assert_eq!(recon(u, Tensor::zeros(&[1, 2]), &[true]), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 3, 4);
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                oracle += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        assert!((recon(a.clone(), b.clone(), &[true; 3]) - oracle).abs() < 1e-12);

        let masked: f64 = (0..4).map(|j| (a.at(0, j) - b.at(0, j)).powi(2)).sum();
        assert!((recon(a, b, &[true, false, false]) - masked).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_shape_mismatch() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(reconstruction_loss(&mut g, a, b, &[true, true]).is_err());
    }

    #[test]
    fn speaker_rows_are_table_columns() {
        let mut store = ParamStore::<f64>::new();
        let table = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        store.insert("spk", table.clone()).unwrap();
        let mut g = Graph::new(&store);
        let t = g.param("spk").unwrap();
        let s = speaker_embeddings(&mut g, &[1, 0, 1], t).unwrap();
        let v = g.value(s);
        for (i, &id) in [1usize, 0, 1].iter().enumerate() {
            assert_eq!(v.row(i), &[table.at(0, id), table.at(1, id)]);
        }
        assert!(speaker_embeddings(&mut g, &[3], t).is_err());
    }

    #[test]
    fn identity_table_gives_unit_rows() {
        let mut store = ParamStore::<f64>::new();
        store.insert("spk", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let t = g.param("spk").unwrap();
        let s = speaker_embeddings(&mut g, &[0, 1], t).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_encoding_values() {
        let p = positional_encoding::<f64>(3, 6).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = positional_encoding::<f64>(2, 2).unwrap();
        assert!((q.at(1, 0) - 0.84147).abs() < 1e-5);
        assert!((q.at(1, 1) - 0.54030).abs() < 1e-5);
        let big = positional_encoding::<f32>(64, 16).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(big, positional_encoding::<f32>(64, 16).unwrap());
        assert!(positional_encoding::<f32>(3, 5).is_err());
    }

    #[test]
    fn assemble_sums_inputs() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (u, s, p) = (rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 2, 3));
        let (uv, sv, pv) = (g.constant(u.clone()), g.constant(s.clone()), g.constant(p.clone()));
        let h = assemble_modality(&mut g, uv, sv, pv).unwrap();
        for i in 0..6 {
            assert_eq!(g.value(h).data()[i], u.data()[i] + s.data()[i] + p.data()[i]);
        }
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let h0 = assemble_modality(&mut g, uv, zero, zero).unwrap();
        assert_eq!(g.value(h0).data(), u.data());
        let ones = g.constant(Tensor::ones(&[2, 3]));
        let h3 = assemble_modality(&mut g, ones, ones, ones).unwrap();
        assert!(g.value(h3).data().iter().all(|&v| v == 3.0));
        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(assemble_modality(&mut g, uv, bad, pv).is_err());
    }
}
