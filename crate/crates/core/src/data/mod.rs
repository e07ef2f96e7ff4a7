//! Conversations, datasets, the feature-file format, synthetic generation
//! and padded batching.

mod batch;
mod format;
mod synth;

pub use batch::{make_batches, Batch, ConvInput};
pub use format::{load_dataset, read_dataset, write_dataset, write_dataset_to, FORMAT_VERSION};
pub use synth::{generate_synthetic, Preset, SynthConfig, CROSS_MODAL_SHARE_SCALE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dialogue: per-utterance features for each modality plus speaker ids
/// and (optionally) class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub speakers: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    /// `n x d_t`, `n x d_a`, `n x d_v`
    pub features: [Tensor<f32>; 3],
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn feature(&self, m: Modality) -> &Tensor<f32> {
        &self.features[m.index()]
    }

    pub fn validate(&self, dims: [usize; 3], num_classes: usize, num_speakers: usize) -> Result<()> {
        let n = self.speakers.len();
        if n == 0 {
            return Err(Error::RaggedConversation(format!("{}: no utterances", self.id)));
        }
        for m in crate::modality::ALL_MODALITIES {
            let f = self.feature(m);
            if f.rows() != n || f.shape().len() != 2 {
                return Err(Error::RaggedConversation(format!(
                    "{}: {} speakers but {} has {} rows",
                    self.id,
                    n,
                    m.name(),
                    f.rows()
                )));
            }
            if f.cols() != dims[m.index()] {
                return Err(Error::Shape(format!(
                    "{}: {} features have width {}, header says {}",
                    self.id,
                    m.name(),
                    f.cols(),
                    dims[m.index()]
                )));
            }
            if !f.all_finite() {
                return Err(Error::NonFinite(format!("{} {} features", self.id, m.name())));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::RaggedConversation(format!(
                    "{}: {} labels for {} utterances",
                    self.id,
                    labels.len(),
                    n
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::BadLabel(format!(
                    "{}: label {bad} with {num_classes} classes",
                    self.id
                )));
            }
        }
        if let Some(&bad) = self.speakers.iter().find(|&&s| s >= num_speakers) {
            return Err(Error::BadSpeaker(format!(
                "{}: speaker {bad} with {num_speakers} speakers",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub class_names: Vec<String>,
    /// `(d_t, d_a, d_v)`
    pub modality_dims: [usize; 3],
    pub num_speakers: usize,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Format("at least two classes are required".into()));
        }
        if self.num_speakers == 0 {
            return Err(Error::Format("num_speakers must be at least 1".into()));
        }
        if self.modality_dims.contains(&0) {
            return Err(Error::Format("modality dimensions must be positive".into()));
        }
        for c in &self.conversations {
            c.validate(self.modality_dims, self.num_classes(), self.num_speakers)?;
        }
        Ok(())
    }

    /// Utterance counts per class over labelled conversations.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for c in &self.conversations {
            for &y in c.labels.iter().flatten() {
                counts[y] += 1;
            }
        }
        counts
    }

    pub fn check_compatible(&self, other: &Dataset) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::Config("datasets disagree on class names".into()));
        }
        if self.modality_dims != other.modality_dims {
            return Err(Error::Config(format!(
                "modality dims {:?} vs {:?}",
                self.modality_dims, other.modality_dims
            )));
        }
        Ok(())
    }

    /// Splits off the trailing `fraction` of conversations (at least one).
    pub fn split_off(&mut self, fraction: f64) -> Result<Dataset> {
        let n = self.conversations.len();
        let take = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        if n < 2 {
            return Err(Error::EmptyDataset);
        }
        let tail = self.conversations.split_off(n - take);
        Ok(Dataset { conversations: tail, split: None, ..self.clone_header() })
    }

    pub fn clone_header(&self) -> Dataset {
        Dataset {
            conversations: Vec::new(),
            class_names: self.class_names.clone(),
            modality_dims: self.modality_dims,
            num_speakers: self.num_speakers,
            split: self.split,
        }
    }
}
