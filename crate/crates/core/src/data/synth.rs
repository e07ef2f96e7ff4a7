//! Synthetic conversations with controllable per-modality label signal.
//!
//! Every class `c` owns a latent prototype `e_c` (one-hot in `R^C`), and every
//! modality owns a fixed random projection `A_m: R^C -> R^{d_m}`. An
//! utterance's modality features are `A_m a_m + noise`, where the latent code
//! `a_m` is either
//!
//! * `w_m e_c` (the label is visible in modality `m` with weight `w_m`), or
//! * for cross-modal-only utterances, `e_c / 3 + s_m` with shares
//!   `s_t + s_a + s_v = 0` drawn with spread [`CROSS_MODAL_SHARE_SCALE`]. Each
//!   code alone is dominated by its share, while the codes sum to `e_c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the zero-sum shares hiding the label in
/// cross-modal-only utterances.
pub const CROSS_MODAL_SHARE_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    IemocapLike,
    MeldLike,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iemocap-like" => Ok(Preset::IemocapLike),
            "meld-like" => Ok(Preset::MeldLike),
            other => Err(Error::Config(format!(
                "unknown preset {other} (expected iemocap-like or meld-like)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub num_speakers: usize,
    pub speakers_per_conversation: usize,
    /// `(d_t, d_a, d_v)`
    pub modality_dims: [usize; 3],
    /// label signal weight per modality, each in `[0, 1]`
    pub informativeness: [f32; 3],
    /// probability that an utterance's label is only recoverable jointly
    pub cross_modal_only: f32,
    pub noise: f32,
    pub seed: u64,
    pub class_names: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            conversations: 20,
            min_len: 8,
            max_len: 16,
            num_classes: 4,
            num_speakers: 2,
            speakers_per_conversation: 2,
            modality_dims: [32, 24, 16],
            informativeness: [1.0, 1.0, 1.0],
            cross_modal_only: 0.0,
            noise: 0.0,
            seed: 0,
            class_names: None,
        }
    }
}

impl SynthConfig {
    /// Shapes of the two benchmark corpora: utterance feature widths of the
    /// usual text/audio/visual extractors, class sets and conversation lengths.
    pub fn preset(p: Preset) -> Self {
        let names = |xs: &[&str]| Some(xs.iter().map(|s| s.to_string()).collect());
        match p {
            Preset::IemocapLike => Self {
                conversations: 24,
                min_len: 40,
                max_len: 60,
                num_classes: 6,
                num_speakers: 10,
                speakers_per_conversation: 2,
                modality_dims: [1024, 1582, 342],
                informativeness: [1.0, 0.6, 0.3],
                cross_modal_only: 0.3,
                noise: 0.5,
                seed: 0,
                class_names: names(&["Happy", "Sad", "Neutral", "Angry", "Excited", "Frustrated"]),
            },
            Preset::MeldLike => Self {
                conversations: 64,
                min_len: 3,
                max_len: 16,
                num_classes: 7,
                num_speakers: 12,
                speakers_per_conversation: 3,
                modality_dims: [1024, 300, 342],
                informativeness: [1.0, 0.5, 0.3],
                cross_modal_only: 0.2,
                noise: 0.5,
                seed: 0,
                class_names: names(&["Neutral", "Surprise", "Fear", "Sadness", "Joy", "Disgust", "Angry"]),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conversations == 0 {
            return bad("conversations must be at least 1");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_speakers == 0 {
            return bad("num_speakers must be at least 1");
        }
        if self.speakers_per_conversation == 0 || self.speakers_per_conversation > self.num_speakers {
            return bad("speakers_per_conversation must be in 1..=num_speakers");
        }
        if self.modality_dims.contains(&0) {
            return bad("modality dims must be positive");
        }
        if self.informativeness.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("informativeness weights must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cross_modal_only) {
            return bad("cross_modal_only must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return bad("class_names length differs from num_classes");
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_classes;
    // A_m stored row-major as d_m x C
    let projections: Vec<Vec<f64>> = cfg
        .modality_dims
        .iter()
        .map(|&d| (0..d * c).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut conversations = Vec::with_capacity(cfg.conversations);
    for ci in 0..cfg.conversations {
        let n = rng.random_range(cfg.min_len..=cfg.max_len);
        let cast = rand::seq::index::sample(&mut rng, cfg.num_speakers, cfg.speakers_per_conversation)
            .into_vec();
        let mut speakers = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut feats: [Vec<f32>; 3] =
            std::array::from_fn(|m| Vec::with_capacity(n * cfg.modality_dims[m]));
        for _ in 0..n {
            speakers.push(cast[rng.random_range(0..cast.len())]);
            let y = rng.random_range(0..c);
            labels.push(y);
            let joint_only = rng.random::<f32>() < cfg.cross_modal_only;
            let codes: [Vec<f64>; 3] = if joint_only {
                let raw: [Vec<f64>; 3] = std::array::from_fn(|_| {
                    (0..c).map(|_| normal(&mut rng) * CROSS_MODAL_SHARE_SCALE).collect()
                });
                std::array::from_fn(|m| {
                    (0..c)
                        .map(|k| {
                            let centre = (raw[0][k] + raw[1][k] + raw[2][k]) / 3.0;
                            let proto = if k == y { 1.0 / 3.0 } else { 0.0 };
                            proto + raw[m][k] - centre
                        })
                        .collect()
                })
            } else {
                std::array::from_fn(|m| {
                    (0..c)
                        .map(|k| if k == y { f64::from(cfg.informativeness[m]) } else { 0.0 })
                        .collect()
                })
            };
            for m in 0..3 {
                let a = &projections[m];
                for r in 0..cfg.modality_dims[m] {
                    let mut v: f64 = (0..c).map(|k| a[r * c + k] * codes[m][k]).sum();
                    if cfg.noise > 0.0 {
                        v += f64::from(cfg.noise) * normal(&mut rng);
                    }
                    feats[m].push(v as f32);
                }
            }
        }
        let features = std::array::from_fn(|m| {
            Tensor::new(vec![n, cfg.modality_dims[m]], std::mem::take(&mut feats[m]))
                .expect("synthetic shape")
        });
        conversations.push(Conversation {
            id: format!("conv{ci:04}"),
            speakers,
            labels: Some(labels),
            features,
        });
    }

    let class_names = cfg
        .class_names
        .clone()
        .unwrap_or_else(|| (0..c).map(|k| format!("class{k}")).collect());
    let ds = Dataset {
        conversations,
        class_names,
        modality_dims: cfg.modality_dims,
        num_speakers: cfg.num_speakers,
        split: None,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig { seed: 5, noise: 0.3, cross_modal_only: 0.5, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 6, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = SynthConfig { conversations: 20, min_len: 40, max_len: 60, num_classes: 6, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.conversations.len(), 20);
        assert_eq!(ds.num_classes(), 6);
        let mean = ds.num_utterances() as f64 / 20.0;
        assert!((48.0..=52.0).contains(&mean), "mean length {mean}");
        for c in &ds.conversations {
            assert!((40..=60).contains(&c.len()));
            assert!(c.speakers.iter().all(|&s| s < 2));
        }
    }

    #[test]
    fn labels_roughly_balanced() {
        let cfg = SynthConfig { conversations: 50, num_classes: 5, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let counts = ds.class_counts();
        let expected = ds.num_utterances() as f64 / 5.0;
        for k in counts {
            assert!((k as f64 - expected).abs() < 0.25 * expected, "{k} vs {expected}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { min_len: 5, max_len: 4, ..base.clone() },
            SynthConfig { informativeness: [1.5, 0.0, 0.0], ..base.clone() },
            SynthConfig { cross_modal_only: -0.1, ..base.clone() },
            SynthConfig { num_classes: 1, ..base.clone() },
            SynthConfig { speakers_per_conversation: 3, ..base.clone() },
        ] {
            assert!(generate_synthetic(&cfg).is_err());
        }
    }

    #[test]
    fn presets_carry_benchmark_shapes() {
        let p = SynthConfig::preset(Preset::IemocapLike);
        assert_eq!(p.modality_dims, [1024, 1582, 342]);
        assert_eq!(p.num_classes, 6);
        let m = SynthConfig::preset(Preset::MeldLike);
        assert_eq!(m.modality_dims, [1024, 300, 342]);
        assert_eq!(m.num_classes, 7);
        assert!("iemocap-like".parse::<Preset>().is_ok());
        assert!("other".parse::<Preset>().is_err());
    }
}
