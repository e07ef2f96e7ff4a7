use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

/// A group of conversations zero-padded to the longest one.
#[derive(Clone, Debug)]
pub struct Batch {
    /// positions of the conversations in the source dataset
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub n_max: usize,
    /// per modality `B x n_max x d_m`
    pub features: [Tensor<f32>; 3],
    /// `B x n_max`, row-major
    pub speakers: Vec<usize>,
    /// `B x n_max`; padding and unlabelled positions hold `ignore_label`
    pub labels: Vec<usize>,
    /// `B x n_max`; true exactly for `i < n_b`
    pub mask: Vec<bool>,
    pub ignore_label: usize,
}

/// Model input for a single (possibly padded) conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvInput {
    pub id: String,
    /// per modality `n x d_m`
    pub features: [Tensor<f32>; 3],
    pub speakers: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ConvInput {
    /// Unpadded input; missing labels become `ignore_label`.
    pub fn from_conversation(c: &Conversation, ignore_label: usize) -> Self {
        let n = c.len();
        Self {
            id: c.id.clone(),
            features: c.features.clone(),
            speakers: c.speakers.clone(),
            labels: c.labels.clone().unwrap_or_else(|| vec![ignore_label; n]),
            mask: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn feature(&self, m: Modality) -> &Tensor<f32> {
        &self.features[m.index()]
    }

    /// Appends `extra` padded positions (zero features, masked out).
    pub fn padded(&self, extra: usize, ignore_label: usize) -> Self {
        let mut out = self.clone();
        let n = self.len() + extra;
        for (slot, f) in out.features.iter_mut().zip(&self.features) {
            let mut data = f.data().to_vec();
            data.resize(n * f.cols(), 0.0);
            *slot = Tensor::new(vec![n, f.cols()], data).expect("padded shape");
        }
        out.speakers.resize(n, 0);
        out.labels.resize(n, ignore_label);
        out.mask.resize(n, false);
        out
    }
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Padded view of conversation `b` of the batch.
    pub fn item(&self, b: usize) -> ConvInput {
        let n = self.n_max;
        let features = std::array::from_fn(|m| {
            let d = self.features[m].cols();
            let data = self.features[m].data()[b * n * d..(b + 1) * n * d].to_vec();
            Tensor::new(vec![n, d], data).expect("batch slice")
        });
        ConvInput {
            id: self.ids[b].clone(),
            features,
            speakers: self.speakers[b * n..(b + 1) * n].to_vec(),
            labels: self.labels[b * n..(b + 1) * n].to_vec(),
            mask: self.mask[b * n..(b + 1) * n].to_vec(),
        }
    }

    fn assemble(ds: &Dataset, indices: Vec<usize>) -> Batch {
        let ignore = ds.num_classes();
        let convs: Vec<&Conversation> = indices.iter().map(|&i| &ds.conversations[i]).collect();
        let lengths: Vec<usize> = convs.iter().map(|c| c.len()).collect();
        let n_max = lengths.iter().copied().max().unwrap_or(1);
        let bsz = convs.len();
        let features = std::array::from_fn(|m| {
            let d = ds.modality_dims[m];
            let mut data = vec![0.0f32; bsz * n_max * d];
            for (b, c) in convs.iter().enumerate() {
                let src = c.features[m].data();
                data[b * n_max * d..b * n_max * d + src.len()].copy_from_slice(src);
            }
            Tensor::new(vec![bsz, n_max, d], data).expect("batch shape")
        });
        let mut speakers = vec![0; bsz * n_max];
        let mut labels = vec![ignore; bsz * n_max];
        let mut mask = vec![false; bsz * n_max];
        for (b, c) in convs.iter().enumerate() {
            for i in 0..c.len() {
                speakers[b * n_max + i] = c.speakers[i];
                mask[b * n_max + i] = true;
                if let Some(ls) = &c.labels {
                    labels[b * n_max + i] = ls[i];
                }
            }
        }
        Batch {
            ids: convs.iter().map(|c| c.id.clone()).collect(),
            indices,
            lengths,
            n_max,
            features,
            speakers,
            labels,
            mask,
            ignore_label: ignore,
        }
    }
}

/// Splits `ds` into batches of `batch_size` conversations. With `shuffle`,
/// the order is a permutation drawn from `seed`; otherwise file order.
pub fn make_batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if ds.conversations.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..ds.conversations.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::assemble(ds, chunk.to_vec()))
        .collect())
}
