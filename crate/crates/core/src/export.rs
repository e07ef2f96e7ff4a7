//! Per-utterance fused embeddings as JSON lines, for external projection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::model::Model;
use crate::objectives::Head;
use crate::train::predict_dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub conversation: String,
    pub index: usize,
    /// `None` for unlabelled conversations
    pub label: Option<usize>,
    pub predicted: usize,
    pub embedding: Vec<f32>,
}

/// One record per utterance, in dataset order. Predictions come from `head`.
pub fn embedding_records(model: &Model, ds: &Dataset, head: Head) -> Result<Vec<EmbeddingRecord>> {
    let preds = predict_dataset(model, ds, head)?;
    let mut out = Vec::with_capacity(ds.num_utterances());
    for (conv, pred) in ds.conversations.iter().zip(preds) {
        for i in 0..conv.len() {
            out.push(EmbeddingRecord {
                conversation: conv.id.clone(),
                index: i,
                label: conv.labels.as_ref().map(|l| l[i]),
                predicted: pred.labels[i],
                embedding: pred.fused.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn write_embeddings<W: Write>(model: &Model, ds: &Dataset, head: Head, w: &mut W) -> Result<usize> {
    let records = embedding_records(model, ds, head)?;
    for r in &records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(records.len())
}

pub fn export_embeddings(model: &Model, ds: &Dataset, head: Head, path: impl AsRef<Path>) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_embeddings(model, ds, head, &mut w)?;
    w.flush()?;
    Ok(n)
}
