//! JSON-lines feature files.
//!
//! Line 1 is a header `{format_version, class_names, modality_dims,
//! num_speakers, split?}`; every following line is one conversation
//! `{id, speakers, labels | null, feat_t, feat_a, feat_v}` with row-major
//! nested feature arrays. Values are written with the shortest decimal form
//! that reads back to the same `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use super::{Conversation, Dataset, Split};
use crate::error::{Error, Result};
use crate::modality::ALL_MODALITIES;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    class_names: Vec<String>,
    modality_dims: [usize; 3],
    num_speakers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    speakers: Vec<i64>,
    #[serde(default)]
    labels: Option<Vec<i64>>,
    feat_t: Option<Vec<Vec<f32>>>,
    feat_a: Option<Vec<Vec<f32>>>,
    feat_v: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    speakers: &'a [usize],
    labels: Option<&'a [usize]>,
    feat_t: Rows<'a>,
    feat_a: Rows<'a>,
    feat_v: Rows<'a>,
}

struct Rows<'a>(&'a Tensor<f32>);

impl Serialize for Rows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.rows()))?;
        for r in 0..self.0.rows() {
            seq.serialize_element(self.0.row(r))?;
        }
        seq.end()
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| {
        l.as_ref().map_or(true, |s| !s.trim().is_empty())
    });
    let (_, first) = lines.next().ok_or_else(|| Error::Format("empty file".into()))?;
    let header: Header = serde_json::from_str(&first?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let mut ds = Dataset {
        conversations: Vec::new(),
        class_names: header.class_names,
        modality_dims: header.modality_dims,
        num_speakers: header.num_speakers,
        split: header.split,
    };
    ds.validate()?;
    for (lineno, line) in lines {
        let line = line?;
        let rec: RecordIn = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let conv = convert(rec)?;
        conv.validate(ds.modality_dims, ds.num_classes(), ds.num_speakers)?;
        ds.conversations.push(conv);
    }
    Ok(ds)
}

fn convert(rec: RecordIn) -> Result<Conversation> {
    let id = rec.id;
    let speakers = rec
        .speakers
        .iter()
        .map(|&s| usize::try_from(s).map_err(|_| Error::BadSpeaker(format!("{id}: speaker {s}"))))
        .collect::<Result<Vec<_>>>()?;
    let labels = rec
        .labels
        .map(|ls| {
            ls.iter()
                .map(|&y| usize::try_from(y).map_err(|_| Error::BadLabel(format!("{id}: label {y}"))))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let mut feats = Vec::with_capacity(3);
    for (m, block) in ALL_MODALITIES.into_iter().zip([rec.feat_t, rec.feat_a, rec.feat_v]) {
        let rows = block.ok_or_else(|| {
            Error::ModalityMissing(format!("{id}: no feat_{} block", m.tag()))
        })?;
        if rows.is_empty() {
            return Err(Error::RaggedConversation(format!("{id}: {} block has no rows", m.name())));
        }
        feats.push(
            Tensor::from_rows(&rows)
                .map_err(|_| Error::Shape(format!("{id}: {} rows differ in width", m.name())))?,
        );
    }
    let features: [Tensor<f32>; 3] = feats.try_into().expect("three modalities");
    Ok(Conversation { id, speakers, labels, features })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_dataset_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        class_names: ds.class_names.clone(),
        modality_dims: ds.modality_dims,
        num_speakers: ds.num_speakers,
        split: ds.split,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for c in &ds.conversations {
        let rec = RecordOut {
            id: &c.id,
            speakers: &c.speakers,
            labels: c.labels.as_deref(),
            feat_t: Rows(&c.features[0]),
            feat_a: Rows(&c.features[1]),
            feat_v: Rows(&c.features[2]),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
