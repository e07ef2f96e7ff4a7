//! The full network: modality reconstruction, one cross-modality transformer
//! stack per central modality, variational fusion and four classifier heads.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cma::{cma_forward, register_block, AttentionShape, Dropout};
use crate::data::{ConvInput, Dataset};
use crate::encoder::{
    assemble_modality, conv_decode, conv_encode, mask_rows, positional_encoding, reconstruction_loss,
    register_conv, speaker_embeddings,
};
use crate::error::{Error, Result};
use crate::fusion::{mix_gaussians, modality_gaussian, register_fusion, reparameterize};
use crate::modality::{Modality, ModalitySet};
use crate::objectives::{
    classify, cross_entropy, high_level_distill, labelled_mask, low_level_distill, register_classifier,
    total_loss, Head, LossParts,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Architecture plus the data shape it was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// convolution kernel extent per modality `(k_t, k_a, k_v)`
    pub kernel_sizes: [usize; 3],
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// hidden width of the fusion MLPs
    pub d_h: usize,
    pub dropout: f64,
    pub without_mr: bool,
    pub without_cma: bool,
    pub modalities: ModalitySet,
    pub modality_dims: [usize; 3],
    pub num_classes: usize,
    /// known speakers; ids at or beyond this share one unknown-speaker row
    pub num_speakers: usize,
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn small(modality_dims: [usize; 3], num_classes: usize, num_speakers: usize, d: usize) -> Self {
        Self {
            d,
            kernel_sizes: [1, 1, 1],
            heads: if d % 4 == 0 { 4 } else { 2 },
            layers: 1,
            d_ff: 4 * d,
            d_h: d,
            dropout: 0.0,
            without_mr: false,
            without_cma: false,
            modalities: ModalitySet::all(),
            modality_dims,
            num_classes,
            num_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("d = {} must be positive and even", self.d));
        }
        AttentionShape { d: self.d, heads: self.heads, d_ff: self.d_ff }.validate()?;
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.d_h == 0 {
            return bad("d_h must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} must be odd"));
        }
        if self.modality_dims.contains(&0) {
            return bad("modality dims must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.modalities.is_empty() {
            return bad("modality subset must not be empty".into());
        }
        Ok(())
    }

    /// Rejects datasets whose feature widths or class count differ.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.modality_dims != self.modality_dims {
            return Err(Error::Config(format!(
                "dataset modality dims {:?}, model built for {:?}",
                ds.modality_dims, self.modality_dims
            )));
        }
        if ds.num_classes() != self.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model built for {}",
                ds.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn heads_in_use(&self) -> Vec<Head> {
        let mut hs: Vec<Head> = self.modalities.members().into_iter().map(Head::from).collect();
        hs.push(Head::Fused);
        hs
    }

    fn speaker_row(&self, id: usize) -> usize {
        id.min(self.num_speakers)
    }
}

/// `Eval` disables sampling and dropout; `Train` draws both from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Registers every parameter of the network in a fixed order.
pub fn build_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let members = cfg.modalities.members();
    let d = cfg.d;
    for &m in &members {
        let (dm, k) = (cfg.modality_dims[m.index()], cfg.kernel_sizes[m.index()]);
        if cfg.without_mr {
            register_conv(&mut store, &format!("enc.{m}"), 1, dm, d, &mut rng)?;
        } else {
            register_conv(&mut store, &format!("enc.{m}"), k, dm, d, &mut rng)?;
            register_conv(&mut store, &format!("dec.{m}"), k, d, dm, &mut rng)?;
        }
    }
    store.init_weight("speaker.table", &[d, cfg.num_speakers + 1], d, &mut rng)?;
    if !cfg.without_cma {
        let shape = AttentionShape { d, heads: cfg.heads, d_ff: cfg.d_ff };
        for &m in &members {
            let aux: Vec<char> = cfg.modalities.auxiliaries(m).iter().map(|a| a.tag()).collect();
            for layer in 0..cfg.layers {
                register_block(&mut store, "cma", m.tag(), layer, &aux, shape, &mut rng)?;
            }
        }
    }
    for &m in &members {
        register_fusion(&mut store, &format!("fusion.{m}"), d, cfg.d_h, &mut rng)?;
    }
    for h in cfg.heads_in_use() {
        register_classifier(&mut store, &format!("cls.{h}"), d, cfg.num_classes, &mut rng)?;
    }
    Ok(store)
}

/// Graph handles produced by one forward pass over one conversation.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H_m` after speaker and position embeddings
    pub embedded: BTreeMap<Modality, Var>,
    /// `H'_m`
    pub augmented: BTreeMap<Modality, Var>,
    /// `H'_x`
    pub fused: Var,
    pub probs: BTreeMap<Head, Var>,
    /// scalar total loss when labels are present
    pub loss: Option<Var>,
    pub parts: Option<LossParts>,
}

/// Fixed values standing in for the distillation teachers (`H'_x` and the
/// fused-head distribution).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTeachers<T: Scalar> {
    pub fused: Tensor<T>,
    pub fused_probs: Tensor<T>,
}

/// Builds the forward pass (and, with labels, the weighted loss) for one
/// conversation on `g`.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<'_, T>,
    input: &ConvInput,
    mode: ForwardMode,
    gammas: (f64, f64),
) -> Result<ForwardOutput> {
    forward_with_teachers(cfg, g, input, mode, gammas, None)
}

/// As [`forward`], but the distillation terms read their teachers from
/// `teachers` when given. Since teachers are detached, the tape gradient is
/// the same either way when the frozen values equal the live ones.
pub fn forward_with_teachers<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<'_, T>,
    input: &ConvInput,
    mode: ForwardMode,
    gammas: (f64, f64),
    teachers: Option<&FrozenTeachers<T>>,
) -> Result<ForwardOutput> {
    let n = input.len();
    let mask = &input.mask;
    if n == 0 || input.speakers.len() != n || input.labels.len() != n {
        return Err(Error::RaggedConversation(format!("{}: inconsistent input lengths", input.id)));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttentionRow);
    }
    let mut rng = match mode {
        ForwardMode::Eval => None,
        ForwardMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut drop = match rng.as_mut() {
        Some(r) => Dropout::new(cfg.dropout, r.next_u64()),
        None => Dropout::off(),
    };
    let members = cfg.modalities.members();

    let ids: Vec<usize> = input.speakers.iter().map(|&s| cfg.speaker_row(s)).collect();
    let table = g.param("speaker.table")?;
    let spk = speaker_embeddings(g, &ids, table)?;
    let pos = g.constant(positional_encoding::<T>(n, cfg.d)?);

    let mut re_terms = Vec::new();
    let mut embedded = BTreeMap::new();
    for &m in &members {
        let f = input.feature(m);
        if f.rows() != n || f.cols() != cfg.modality_dims[m.index()] {
            return Err(Error::Shape(format!(
                "{}: {} features {:?}, expected {n} x {}",
                input.id,
                m.name(),
                f.shape(),
                cfg.modality_dims[m.index()]
            )));
        }
        let u = g.constant(f.cast::<T>());
        let latent = conv_encode(g, u, &format!("enc.{m}"))?;
        let latent = mask_rows(g, latent, mask)?;
        if !cfg.without_mr {
            let recon = conv_decode(g, latent, &format!("dec.{m}"))?;
            re_terms.push(reconstruction_loss(g, u, recon, mask)?);
        }
        embedded.insert(m, assemble_modality(g, latent, spk, pos)?);
    }

    let mut augmented = BTreeMap::new();
    for &m in &members {
        let h = if cfg.without_cma {
            embedded[&m]
        } else {
            let aux: Vec<(char, Var)> =
                cfg.modalities.auxiliaries(m).iter().map(|a| (a.tag(), embedded[a])).collect();
            cma_forward(g, "cma", (m.tag(), embedded[&m]), &aux, cfg.layers, cfg.heads, mask, &mut drop)?.fused
        };
        augmented.insert(m, h);
    }

    let pairs = members
        .iter()
        .map(|m| modality_gaussian(g, augmented[m], &format!("fusion.{m}")))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix_gaussians(g, &pairs)?;
    let fused = reparameterize(g, mixed, rng.as_mut())?;

    let mut probs = BTreeMap::new();
    for &m in &members {
        probs.insert(Head::from(m), classify(g, augmented[&m], &format!("cls.{m}"))?);
    }
    probs.insert(Head::Fused, classify(g, fused, "cls.x")?);

    let labelled = labelled_mask(&input.labels, mask, cfg.num_classes);
    let (loss, parts) = if labelled.iter().any(|&l| l) {
        let (teacher, teacher_probs) = match teachers {
            Some(t) => (g.constant(t.fused.clone()), g.constant(t.fused_probs.clone())),
            None => (fused, probs[&Head::Fused]),
        };
        let (loss, parts) =
            weighted_loss(g, input, &re_terms, &augmented, (teacher, teacher_probs), &probs, gammas)?;
        (Some(loss), Some(parts))
    } else {
        (None, None)
    };
    Ok(ForwardOutput { embedded, augmented, fused, probs, loss, parts })
}

#[allow(clippy::too_many_arguments)]
fn weighted_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    input: &ConvInput,
    re_terms: &[Var],
    augmented: &BTreeMap<Modality, Var>,
    (teacher, teacher_probs): (Var, Var),
    probs: &BTreeMap<Head, Var>,
    gammas: (f64, f64),
) -> Result<(Var, LossParts)> {
    let mask = &input.mask;
    let item = |g: &Graph<'_, T>, v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);

    let mut terms = Vec::new();
    let mut ce = BTreeMap::new();
    for (&h, &p) in probs {
        let l = cross_entropy(g, p, &input.labels, mask)?;
        ce.insert(h, item(g, l));
        terms.push(l);
    }
    let mut re = 0.0;
    for &r in re_terms {
        re += item(g, r);
        terms.push(r);
    }
    let (g1, g2) = (T::lit(gammas.0), T::lit(gammas.1));
    let mut mse = BTreeMap::new();
    let mut kl = BTreeMap::new();
    for (&m, &h) in augmented {
        let l = low_level_distill(g, teacher, h, mask)?;
        mse.insert(m, item(g, l));
        terms.push(g.scale(l, g1));
        let k = high_level_distill(g, teacher_probs, probs[&Head::from(m)], mask)?;
        kl.insert(m, item(g, k));
        terms.push(g.scale(k, g2));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let parts = total_loss(re, ce, mse, kl, gammas)?;
    Ok((total, parts))
}

/// Evaluation-mode outputs of one conversation, unpadded rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub probs: BTreeMap<Head, Tensor<f32>>,
    pub fused: Tensor<f32>,
    /// argmax of the requested head per valid position
    pub labels: Vec<usize>,
}

/// A configured network with its trainable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Per-conversation loss and gradients.
    pub fn loss_and_grads(
        &self,
        input: &ConvInput,
        mode: ForwardMode,
        gammas: (f64, f64),
    ) -> Result<Option<(LossParts, crate::params::Gradients<f32>)>> {
        let mut g = Graph::new(&self.params);
        let out = forward(&self.config, &mut g, input, mode, gammas)?;
        match (out.loss, out.parts) {
            (Some(loss), Some(parts)) => Ok(Some((parts, g.backward(loss)?))),
            _ => Ok(None),
        }
    }

    /// Deterministic forward pass; `head` selects the labels reported.
    pub fn predict(&self, input: &ConvInput, head: Head) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let out = forward(&self.config, &mut g, input, ForwardMode::Eval, (0.0, 0.0))?;
        let p = *out.probs.get(&head).ok_or_else(|| {
            Error::Config(format!("head {head} is not part of modality subset {}", self.config.modalities))
        })?;
        let rows: Vec<usize> = (0..input.len()).filter(|&i| input.mask[i]).collect();
        let take = |v: Var| -> Result<Tensor<f32>> {
            let t = g.value(v);
            let data: Vec<f32> = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new(vec![rows.len(), t.cols()], data)
        };
        let probs = out.probs.iter().map(|(&h, &v)| Ok((h, take(v)?))).collect::<Result<BTreeMap<_, _>>>()?;
        let labels = rows.iter().map(|&r| argmax(g.value(p).row(r))).collect();
        Ok(Prediction { id: input.id.clone(), probs, fused: take(out.fused)?, labels })
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn toy() -> (ModelConfig, Dataset) {
        let ds = generate_synthetic(&SynthConfig {
            conversations: 3,
            min_len: 3,
            max_len: 5,
            modality_dims: [5, 4, 3],
            ..Default::default()
        })
        .unwrap();
        (ModelConfig::small(ds.modality_dims, ds.num_classes(), ds.num_speakers, 8), ds)
    }

    #[test]
    fn registration_is_reproducible() {
        let (cfg, _) = toy();
        let a = build_params::<f32>(&cfg, 3).unwrap();
        let b = build_params::<f32>(&cfg, 3).unwrap();
        assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        assert!(a.get("cma.t.layer0.cross_a.query.weight").is_some());
        assert!(a.get("cma.v.layer0.gate.weight").unwrap().shape() == [24, 3]);
        assert_eq!(a.get("speaker.table").unwrap().shape(), &[8, cfg.num_speakers + 1]);
    }

    #[test]
    fn forward_shapes_and_loss() {
        let (cfg, ds) = toy();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let input = ConvInput::from_conversation(&ds.conversations[0], cfg.num_classes);
        let mut g = Graph::new(&model.params);
        let out = forward(&cfg, &mut g, &input, ForwardMode::Train { seed: 1 }, (1.0, 1.0)).unwrap();
        assert_eq!(g.shape(out.fused), &[input.len(), 8]);
        assert_eq!(out.probs.len(), 4);
        let parts = out.parts.unwrap();
        assert!((parts.total - g.value(out.loss.unwrap()).item() as f64).abs() < 1e-4 * parts.total.abs());
    }

    #[test]
    fn unknown_speakers_share_a_row() {
        let (cfg, ds) = toy();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut a = ConvInput::from_conversation(&ds.conversations[0], cfg.num_classes);
        a.speakers = vec![cfg.num_speakers; a.len()];
        let mut b = a.clone();
        b.speakers = vec![cfg.num_speakers + 40; b.len()];
        assert_eq!(model.predict(&a, Head::Fused).unwrap(), model.predict(&b, Head::Fused).unwrap());
    }

    #[test]
    fn ablations_change_parameter_set() {
        let (cfg, _) = toy();
        let no_mr = build_params::<f32>(&ModelConfig { without_mr: true, ..cfg.clone() }, 0).unwrap();
        assert!(no_mr.names().all(|n| !n.starts_with("dec.")));
        let no_cma = build_params::<f32>(&ModelConfig { without_cma: true, ..cfg.clone() }, 0).unwrap();
        assert!(no_cma.names().all(|n| !n.starts_with("cma.")));
        let text: ModalitySet = "t".parse().unwrap();
        let only_t = build_params::<f32>(&ModelConfig { modalities: text, ..cfg }, 0).unwrap();
        assert!(only_t.get("cma.t.layer0.gate.weight").unwrap().shape() == [8, 1]);
        assert!(only_t.get("cls.a.weight").is_none());
    }

    #[test]
    fn eval_is_deterministic() {
        let (cfg, ds) = toy();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let input = ConvInput::from_conversation(&ds.conversations[1], cfg.num_classes);
        assert_eq!(model.predict(&input, Head::Fused).unwrap(), model.predict(&input, Head::Fused).unwrap());
        let text = Model::new(ModelConfig { modalities: "t".parse().unwrap(), ..cfg }, 0).unwrap();
        assert!(text.predict(&input, Head::Audio).is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        let (cfg, _) = toy();
        for bad in [
            ModelConfig { d: 7, ..cfg.clone() },
            ModelConfig { heads: 3, ..cfg.clone() },
            ModelConfig { kernel_sizes: [2, 1, 1], ..cfg.clone() },
            ModelConfig { layers: 0, ..cfg.clone() },
            ModelConfig { dropout: 1.0, ..cfg.clone() },
        ] {
            assert!(Model::new(bad, 0).is_err());
        }
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[0.2f32, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0f32]), 0);
    }
}
