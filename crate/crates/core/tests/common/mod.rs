#![allow(dead_code)]

use mmerc::data::{generate_synthetic, Dataset, SynthConfig};
use mmerc::modality::Modality;
use mmerc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_dataset(conversations: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        conversations,
        min_len: 3,
        max_len: 6,
        modality_dims: [6, 5, 4],
        noise: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting; `b` may have several columns.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for row in (0..n).rev() {
        for k in 0..m {
            let s: f64 = (row + 1..n).map(|j| a[row][j] * x[j][k]).sum();
            x[row][k] = (b[row][k] - s) / a[row][row];
        }
    }
    x
}

/// Design rows (features of `modalities`, plus a constant) and labels of
/// every labelled utterance.
pub fn design(ds: &Dataset, modalities: &[Modality]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for c in &ds.conversations {
        let Some(labels) = &c.labels else { continue };
        for (i, &y) in labels.iter().enumerate() {
            let mut row = vec![1.0];
            for &m in modalities {
                row.extend(c.feature(m).row(i).iter().map(|&v| f64::from(v)));
            }
            xs.push(row);
            ys.push(y);
        }
    }
    (xs, ys)
}

/// Ridge least-squares fit of one-hot targets; returns the weight matrix.
pub fn fit_probe(xs: &[Vec<f64>], ys: &[usize], classes: usize, ridge: f64) -> Vec<Vec<f64>> {
    let p = xs[0].len();
    let mut ata = vec![vec![0.0; p]; p];
    let mut atb = vec![vec![0.0; classes]; p];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..p {
            for j in 0..p {
                ata[i][j] += x[i] * x[j];
            }
            atb[i][y] += x[i];
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += ridge;
    }
    solve(ata, atb)
}

pub fn probe_accuracy(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let classes = w[0].len();
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let scores: Vec<f64> = (0..classes).map(|k| x.iter().zip(w).map(|(a, r)| a * r[k]).sum()).collect();
            let best = (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == y
        })
        .count();
    correct as f64 / xs.len() as f64
}

/// Train accuracy of the least-squares linear probe on `modalities`.
pub fn linear_probe(ds: &Dataset, modalities: &[Modality]) -> f64 {
    let (xs, ys) = design(ds, modalities);
    let w = fit_probe(&xs, &ys, ds.num_classes(), 1e-6);
    probe_accuracy(&w, &xs, &ys)
}

/// Probe fitted on `train` and scored on `test`.
pub fn linear_probe_heldout(train: &Dataset, test: &Dataset, modalities: &[Modality]) -> f64 {
    let (xs, ys) = design(train, modalities);
    let w = fit_probe(&xs, &ys, train.num_classes(), 1e-6);
    let (tx, ty) = design(test, modalities);
    probe_accuracy(&w, &tx, &ty)
}
