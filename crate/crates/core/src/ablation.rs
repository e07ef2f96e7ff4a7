//! Named ablation variants and a multi-seed runner that reports test metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::modality::ModalitySet;
use crate::objectives::Head;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutMr,
    WithoutCma,
    WithoutLld,
    WithoutHld,
    WithoutHd,
    Subset(ModalitySet),
}

impl Variant {
    /// Component ablations followed by the six proper modality subsets.
    pub fn standard() -> Vec<Variant> {
        let mut v = vec![
            Variant::Full,
            Variant::WithoutMr,
            Variant::WithoutCma,
            Variant::WithoutLld,
            Variant::WithoutHld,
            Variant::WithoutHd,
        ];
        for s in ["t", "a", "v", "ta", "tv", "av"] {
            v.push(Variant::Subset(s.parse().expect("valid subset")));
        }
        v
    }

    /// `base` with this variant's change applied. Subset variants evaluate
    /// with the fused head.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match *self {
            Variant::Full => {}
            Variant::WithoutMr => c.without_mr = true,
            Variant::WithoutCma => c.without_cma = true,
            Variant::WithoutLld => c.without_lld = true,
            Variant::WithoutHld => c.without_hld = true,
            Variant::WithoutHd => {
                c.without_lld = true;
                c.without_hld = true;
            }
            Variant::Subset(s) => {
                c.modalities = s;
                c.eval_head = Head::Fused;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::WithoutMr => f.write_str("w/o MR"),
            Variant::WithoutCma => f.write_str("w/o CMA-T"),
            Variant::WithoutLld => f.write_str("w/o LLD"),
            Variant::WithoutHld => f.write_str("w/o HLD"),
            Variant::WithoutHd => f.write_str("w/o HD"),
            Variant::Subset(s) => {
                let names: Vec<&str> = s.members().iter().map(|m| m.name()).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

/// Accepts the display names ("w/o CMA-T", "Text+Audio"), dashed forms
/// ("wo-cma-t") and bare subset tags ("ta"); case-insensitive.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.trim().to_ascii_lowercase().chars().filter(|c| !matches!(c, ' ' | '_')).collect();
        let key = key.replace('-', "").replace("w/o", "wo");
        let v = match key.as_str() {
            "full" => Variant::Full,
            "womr" => Variant::WithoutMr,
            "wocmat" | "wocma" => Variant::WithoutCma,
            "wolld" => Variant::WithoutLld,
            "wohld" => Variant::WithoutHld,
            "wohd" => Variant::WithoutHd,
            _ => {
                let tags: Option<String> = key
                    .split('+')
                    .map(|part| match part {
                        "text" | "t" => Some('t'),
                        "audio" | "a" => Some('a'),
                        "visual" | "v" => Some('v'),
                        _ => None,
                    })
                    .collect();
                let subset = match tags {
                    Some(t) if !t.is_empty() => t.parse().ok(),
                    _ => key.parse::<ModalitySet>().ok(),
                };
                Variant::Subset(subset.ok_or_else(|| Error::Config(format!("unknown ablation variant \"{s}\"")))?)
            }
        };
        Ok(v)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<SeedRun>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_weighted_f1: f64,
    pub std_weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>17} {:>17}", "variant", "ACC", "W-F1")?;
        for s in &self.variants {
            writeln!(
                f,
                "{:<20} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                s.variant.to_string(),
                s.mean_accuracy,
                s.std_accuracy,
                s.mean_weighted_f1,
                s.std_weighted_f1
            )?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant once per seed and evaluates the selected checkpoint
/// on `test_ds`. The seed overrides `base.seed`; all variants share seeds.
pub fn ablate(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    test_ds: &Dataset,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    train_ds.check_compatible(test_ds)?;
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..variant.apply(base) };
            let outcome = train(train_ds, val_ds, &cfg)?;
            let test = evaluate(&outcome.best.model, test_ds, cfg.eval_head)?;
            runs.push(SeedRun { seed, best_epoch: outcome.history.best_epoch, test });
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
        let f1s: Vec<f64> = runs.iter().map(|r| r.test.weighted_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let (mean_weighted_f1, std_weighted_f1) = mean_std(&f1s);
        out.push(VariantSummary { variant, runs, mean_accuracy, std_accuracy, mean_weighted_f1, std_weighted_f1 });
    }
    Ok(AblationReport { seeds: seeds.to_vec(), variants: out })
}
