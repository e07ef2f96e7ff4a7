//! Classifier heads, cross-entropy, the two distillation terms and the
//! weighted total loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::mask_rows;
use crate::error::{shape_err, Error, Result};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;

/// A classifier head: one per modality plus the fused one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "x")]
    Fused,
}

impl Head {
    pub fn tag(self) -> char {
        match self {
            Head::Text => 't',
            Head::Audio => 'a',
            Head::Visual => 'v',
            Head::Fused => 'x',
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            Head::Text => Some(Modality::Text),
            Head::Audio => Some(Modality::Audio),
            Head::Visual => Some(Modality::Visual),
            Head::Fused => None,
        }
    }
}

impl From<Modality> for Head {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Text => Head::Text,
            Modality::Audio => Head::Audio,
            Modality::Visual => Head::Visual,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(Head::Text),
            "a" => Ok(Head::Audio),
            "v" => Ok(Head::Visual),
            "x" => Ok(Head::Fused),
            other => Err(Error::Config(format!("unknown head {other} (expected t, a, v or x)"))),
        }
    }
}

/// Scale applied to the classifier's initial weights so every head starts
/// close to the uniform distribution.
pub const CLASSIFIER_INIT_SCALE: f64 = 0.1;

pub fn register_classifier<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    classes: usize,
    rng: &mut R,
) -> Result<()> {
    let path = format!("{prefix}.weight");
    store.init_weight(path.as_str(), &[d, classes], d, rng)?;
    let scale = T::lit(CLASSIFIER_INIT_SCALE);
    for w in store.get_mut(&path).expect("just registered").data_mut() {
        *w = *w * scale;
    }
    store.init_zeros(format!("{prefix}.bias"), &[classes])?;
    Ok(())
}

/// Row-wise `softmax(h W + b)`.
pub fn classify<T: Scalar>(g: &mut Graph<'_, T>, h: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let logits = g.affine(h, w, b)?;
    g.softmax(logits, None)
}

fn valid_positions(labels: &[usize], mask: &[bool], classes: usize) -> Result<usize> {
    if labels.len() != mask.len() {
        return Err(shape_err(format!("{} labels for {} positions", labels.len(), mask.len())));
    }
    let mut count = 0;
    for (&y, &m) in labels.iter().zip(mask) {
        if m && y < classes {
            count += 1;
        } else if m && y > classes {
            return Err(Error::BadLabel(format!("label {y} with {classes} classes")));
        }
    }
    Ok(count)
}

/// Mask selecting positions that are real and carry a label.
pub fn labelled_mask(labels: &[usize], mask: &[bool], classes: usize) -> Vec<bool> {
    labels.iter().zip(mask).map(|(&y, &m)| m && y < classes).collect()
}

/// `-(1/n) sum_i log p[i, y_i]` over valid, labelled positions. Label value
/// `C` marks an ignored position.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    let (n, c) = (g.value(probs).rows(), g.value(probs).cols());
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for {n} rows", labels.len())));
    }
    let valid = valid_positions(labels, mask, c)?;
    if valid == 0 {
        return Err(Error::Invalid("cross-entropy over no labelled positions".into()));
    }
    let mut onehot = vec![T::zero(); n * c];
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m && y < c {
            onehot[i * c + y] = T::one();
        }
    }
    let onehot = g.constant(Tensor::new(vec![n, c], onehot)?);
    let logp = g.log_clamped(probs, T::lit(LOG_FLOOR));
    let picked = g.mul(onehot, logp)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / T::from_usize(valid).expect("count")))
}

/// Squared Frobenius distance over valid rows; the teacher is a constant.
pub fn low_level_distill<T: Scalar>(g: &mut Graph<'_, T>, teacher: Var, student: Var, mask: &[bool]) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(shape_err(format!("teacher {:?} vs student {:?}", g.shape(teacher), g.shape(student))));
    }
    let t = g.detach(teacher);
    let diff = g.sub(t, student)?;
    let diff = mask_rows(g, diff, mask)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

/// Mean over valid rows of `KL(teacher || student)`; the teacher is a
/// constant and both logs are clamped.
pub fn high_level_distill<T: Scalar>(
    g: &mut Graph<'_, T>,
    teacher: Var,
    student: Var,
    mask: &[bool],
) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(shape_err(format!("teacher {:?} vs student {:?}", g.shape(teacher), g.shape(student))));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Invalid("distillation over no valid positions".into()));
    }
    let floor = T::lit(LOG_FLOOR);
    let t = g.detach(teacher);
    let log_t = g.log_clamped(t, floor);
    let log_s = g.log_clamped(student, floor);
    let ratio = g.sub(log_t, log_s)?;
    let kl = g.mul(t, ratio)?;
    let kl = mask_rows(g, kl, mask)?;
    let total = g.sum(kl);
    Ok(g.scale(total, T::one() / T::from_usize(valid).expect("count")))
}

/// Named loss terms and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub re: f64,
    pub ce: BTreeMap<Head, f64>,
    pub mse: BTreeMap<Modality, f64>,
    pub kl: BTreeMap<Modality, f64>,
    pub total: f64,
    pub gammas: (f64, f64),
}

impl LossParts {
    pub fn ce_sum(&self) -> f64 {
        self.ce.values().sum()
    }

    pub fn mse_sum(&self) -> f64 {
        self.mse.values().sum()
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl.values().sum()
    }

    /// `sum ce + re + g1 * sum mse + g2 * sum kl` from the stored parts.
    pub fn recompose(&self) -> f64 {
        self.ce_sum() + self.re + self.gammas.0 * self.mse_sum() + self.gammas.1 * self.kl_sum()
    }

    /// Element-wise mean of several part sets sharing the same keys and
    /// weights; the total is recomputed from the averaged parts.
    pub fn mean(parts: &[LossParts]) -> Result<LossParts> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let k = parts.len() as f64;
        let avg_map = |get: &dyn Fn(&LossParts) -> Vec<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; get(first).len()];
            for p in parts {
                for (a, v) in acc.iter_mut().zip(get(p)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / k).collect()
        };
        let ce = first.ce.keys().copied().zip(avg_map(&|p| p.ce.values().copied().collect())).collect();
        let mse = first.mse.keys().copied().zip(avg_map(&|p| p.mse.values().copied().collect())).collect();
        let kl = first.kl.keys().copied().zip(avg_map(&|p| p.kl.values().copied().collect())).collect();
        let re = parts.iter().map(|p| p.re).sum::<f64>() / k;
        total_loss(re, ce, mse, kl, first.gammas)
    }
}

/// Assembles [`LossParts`], rejecting non-finite terms.
pub fn total_loss(
    re: f64,
    ce: BTreeMap<Head, f64>,
    mse: BTreeMap<Modality, f64>,
    kl: BTreeMap<Modality, f64>,
    gammas: (f64, f64),
) -> Result<LossParts> {
    let check = |name: String, v: f64| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("loss term {name}")))
        }
    };
    check("re".into(), re)?;
    for (h, &v) in &ce {
        check(format!("ce[{h}]"), v)?;
    }
    for (m, &v) in &mse {
        check(format!("mse[{m}]"), v)?;
    }
    for (m, &v) in &kl {
        check(format!("kl[{m}]"), v)?;
    }
    let mut parts = LossParts { re, ce, mse, kl, total: 0.0, gammas };
    parts.total = parts.recompose();
    Ok(parts)
}
