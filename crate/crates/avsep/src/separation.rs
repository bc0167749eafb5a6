//! The core math and training loop: embedding-weighted mask fusion, the
//! appearance attention branch with positive/negative pairing, the joint
//! loss, the four conditioning variants, and end-to-end inference.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioClip, FreqMap, SAMPLE_RATE, STANDARD_SAMPLES};
use crate::error::{AvsepError, Result};
use crate::metrics::{self, EvalOutput};
use crate::nets::{
    save_checkpoint, AppearanceNet, Binder, Classifier, ParamStore, SoundNet, SoundNetKind,
    DEFAULT_K,
};
use crate::synthdata::{make_mixture, mixture_pairs, AvSample, Corpus, MixtureExample, Split};
use crate::tensor::{NodeId, Tape};

// ---------------------------------------------------------------------------
// Variants and configuration
// ---------------------------------------------------------------------------

/// How the appearance embedding `e` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Learned embedding from the appearance net; separation loss only.
    Plain,
    /// Learned embedding plus the attention branch and its pair loss.
    Attention,
    /// Frozen pretrained classifier probabilities as the embedding (K = C).
    Classifier,
    /// One-hot category embedding (K = C).
    Catemb,
}

pub const VARIANTS: [Variant; 4] =
    [Variant::Plain, Variant::Attention, Variant::Classifier, Variant::Catemb];

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "attention" => Ok(Self::Attention),
            "classifier" => Ok(Self::Classifier),
            "catemb" => Ok(Self::Catemb),
            other => Err(AvsepError::Config(format!(
                "unknown variant {other:?}; expected plain, attention, classifier, or catemb"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Attention => "attention",
            Self::Classifier => "classifier",
            Self::Catemb => "catemb",
        }
    }

    /// Whether the variant trains the attention pair loss.
    pub fn uses_attention(self) -> bool {
        matches!(self, Self::Attention)
    }

    /// Whether K is forced to the category count.
    pub fn forces_k_to_classes(self) -> bool {
        matches!(self, Self::Classifier | Self::Catemb)
    }
}

/// Everything a training run needs; fully serialized into checkpoints,
/// logs, and reports so runs are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Embedding width; ignored (forced to C) for classifier/catemb.
    pub k: usize,
    pub sound_net: SoundNetKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub sep_weight: f64,
    pub att_weight: f64,
    /// Global L2 gradient-norm clip per batch; 0 disables clipping.
    pub grad_clip: f64,
    /// Training mixtures drawn (deterministically) per epoch.
    pub mixtures_per_epoch: usize,
    /// Validation mixtures scored after each epoch.
    pub val_mixtures: usize,
    /// Epochs for the frozen-classifier pretraining stage.
    pub classifier_epochs: usize,
    /// Learning rate for classifier pretraining.
    pub classifier_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Plain,
            k: DEFAULT_K,
            sound_net: SoundNetKind::UnetTiny,
            batch_size: 8,
            learning_rate: 0.2,
            momentum: 0.9,
            epochs: 12,
            seed: 0,
            sep_weight: 1.0,
            att_weight: 1.0,
            grad_clip: 5.0,
            mixtures_per_epoch: 96,
            val_mixtures: 8,
            classifier_epochs: 4,
            classifier_lr: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.mixtures_per_epoch == 0 {
            return Err(AvsepError::Config(
                "batch_size, epochs, and mixtures_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(AvsepError::Config("bad learning_rate/momentum".into()));
        }
        if self.k == 0 {
            return Err(AvsepError::Config("k must be >= 1".into()));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return Err(AvsepError::Config("grad_clip must be finite and >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Masks and attention maps
// ---------------------------------------------------------------------------

/// Predicted separation mask: the sigmoid (soft) map and its 0.5-threshold
/// binarization, always kept consistent.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub soft: Array2<f64>,
    pub binary: Array2<f64>,
}

impl MaskPair {
    pub fn from_soft(soft: Array2<f64>) -> Self {
        let binary = soft.mapv(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        Self { soft, binary }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Attention response of an embedding against appearance feature maps.
#[derive(Debug, Clone)]
pub struct LocationMask {
    pub p_hat: Array2<f64>,
    pub polarity: Polarity,
}

// ---------------------------------------------------------------------------
// Core ops (graph-level builders plus value-level conveniences)
// ---------------------------------------------------------------------------

fn check_channels(tape: &Tape, e: NodeId, maps: NodeId, what: &str) -> Result<()> {
    let k = tape.value(e).len();
    let c = tape.value(maps).shape()[0];
    if k != c {
        return Err(AvsepError::Validation(format!(
            "{what}: embedding length {k} does not match {c} channels"
        )));
    }
    Ok(())
}

/// Mask fusion, pre-threshold: soft = sigmoid(sum_k e_k * s_k).
pub fn fuse_graph(tape: &mut Tape, e: NodeId, sound: NodeId) -> Result<NodeId> {
    check_channels(tape, e, sound, "fuse")?;
    let z = tape.channel_weighted_sum(e, sound);
    Ok(tape.sigmoid(z))
}

/// Value-level fusion: returns the soft map and its thresholded binary mask.
pub fn fuse(e: &Array1<f64>, sound: &Array3<f64>) -> Result<MaskPair> {
    let mut tape = Tape::new();
    let en = tape.leaf1(e.clone());
    let sn = tape.leaf3(sound.clone());
    let soft = fuse_graph(&mut tape, en, sn)?;
    let soft: Array2<f64> = tape.value(soft).clone().into_dimensionality().unwrap();
    Ok(MaskPair::from_soft(soft))
}

/// Attention response: p_hat = sigmoid(sum_k e_k * feats_k), per location.
pub fn attend_graph(tape: &mut Tape, e: NodeId, feats: NodeId) -> Result<NodeId> {
    check_channels(tape, e, feats, "attend")?;
    let z = tape.channel_weighted_sum(e, feats);
    Ok(tape.sigmoid(z))
}

/// Value-level attention map with its pair polarity.
pub fn attend(e: &Array1<f64>, feats: &Array3<f64>, polarity: Polarity) -> Result<LocationMask> {
    let mut tape = Tape::new();
    let en = tape.leaf1(e.clone());
    let fnode = tape.leaf3(feats.clone());
    let p = attend_graph(&mut tape, en, fnode)?;
    let p_hat: Array2<f64> = tape.value(p).clone().into_dimensionality().unwrap();
    Ok(LocationMask { p_hat, polarity })
}

/// One-hot category embedding (the catemb conditioning).
pub fn make_catemb(category: usize, k: usize) -> Result<Array1<f64>> {
    if category >= k {
        return Err(AvsepError::UnknownCategory(category));
    }
    let mut e = Array1::<f64>::zeros(k);
    e[category] = 1.0;
    Ok(e)
}

/// The joint loss graph and its scalar readout.
pub struct LossNodes {
    pub total: NodeId,
    pub sep: NodeId,
    pub att: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sep_bce: f64,
    pub att_bce: f64,
    pub total: f64,
}

/// Builds the joint loss: mean per-bin BCE of each soft mask against its
/// binary ground truth, plus the mean over attention pairs of
/// BCE(global-spatial-max(p_hat), label). `att_pairs` hold the *sigmoid*
/// attention map node and its scalar label (1 same-category, 0 different);
/// the spatial max commutes with the sigmoid, so maxing the soft map equals
/// Eq.-style sigmoid-of-max.
pub fn joint_loss_graph(
    tape: &mut Tape,
    sep_terms: &[(NodeId, &Array2<f64>)],
    att_pairs: &[(NodeId, f64)],
    sep_weight: f64,
    att_weight: f64,
) -> Result<LossNodes> {
    if sep_terms.is_empty() {
        return Err(AvsepError::Validation("joint loss needs at least one mask".into()));
    }
    let mut sep_nodes = Vec::new();
    for &(soft, gt) in sep_terms {
        if tape.value(soft).shape() != gt.shape() {
            return Err(AvsepError::Shape(format!(
                "mask {:?} vs ground truth {:?}",
                tape.value(soft).shape(),
                gt.shape()
            )));
        }
        if gt.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(AvsepError::Validation("ground-truth mask must be binary".into()));
        }
        let l = tape.bce_mean(soft, gt.clone().into_dyn());
        sep_nodes.push(l);
    }
    let w = 1.0 / sep_nodes.len() as f64;
    let terms: Vec<(NodeId, f64)> = sep_nodes.iter().map(|&n| (n, w)).collect();
    let sep = tape.add_scalars(&terms);

    let att = if att_pairs.is_empty() {
        None
    } else {
        let mut pair_nodes = Vec::new();
        for &(p_hat, label) in att_pairs {
            if label != 0.0 && label != 1.0 {
                return Err(AvsepError::Validation("pair labels must be 0 or 1".into()));
            }
            let shape = tape.value(p_hat).shape().to_vec();
            let (h, wd) = (shape[0], shape[1]);
            let as_chw = tape.reshape(p_hat, &[1, h, wd]);
            let maxed = tape.global_max_pool(as_chw);
            let target = ArrayD::from_elem(ndarray::IxDyn(&[1]), label);
            pair_nodes.push(tape.bce_mean(maxed, target));
        }
        let w = 1.0 / pair_nodes.len() as f64;
        let terms: Vec<(NodeId, f64)> = pair_nodes.iter().map(|&n| (n, w)).collect();
        Some(tape.add_scalars(&terms))
    };

    let total = match att {
        Some(a) => tape.add_scalars(&[(sep, sep_weight), (a, att_weight)]),
        None => tape.add_scalars(&[(sep, sep_weight)]),
    };
    Ok(LossNodes { total, sep, att })
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            sep_bce: tape.scalar(self.sep),
            att_bce: self.att.map(|a| tape.scalar(a)).unwrap_or(0.0),
            total: tape.scalar(self.total),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// A conditioning variant bound to its networks and parameters. The sound
/// and appearance networks are shared (weights tied) across the two sources
/// of a mixture.
pub struct Model {
    pub config: TrainConfig,
    pub classes: usize,
    pub k: usize,
    pub store: ParamStore,
    sound: SoundNet,
    appearance: Option<AppearanceNet>,
    classifier: Option<Classifier>,
    /// Parameter indices excluded from optimizer updates (frozen classifier).
    frozen: HashSet<usize>,
}

impl Model {
    pub fn new(config: &TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(AvsepError::Config("need at least 2 categories".into()));
        }
        let k = if config.variant.forces_k_to_classes() { classes } else { config.k };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let sound = SoundNet::new(&mut store, &mut rng, config.sound_net, k);
        let appearance = matches!(config.variant, Variant::Plain | Variant::Attention)
            .then(|| AppearanceNet::new(&mut store, &mut rng, k));
        let before = store.len();
        let classifier = matches!(config.variant, Variant::Classifier)
            .then(|| Classifier::new(&mut store, &mut rng, classes));
        let frozen: HashSet<usize> = (before..store.len()).collect();
        Ok(Self {
            config: config.clone(),
            classes,
            k,
            store,
            sound,
            appearance,
            classifier,
            frozen,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Runs the sound net on a compressed log spectrogram, value-level.
    pub fn sound_features(&self, logspec: &Array2<f64>) -> Result<Array3<f64>> {
        let input = logspec.clone().insert_axis(Axis(0));
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = self.sound.forward(&mut tape, &mut binder, &self.store, &input)?;
        Ok(tape.value(out).clone().into_dimensionality().unwrap())
    }

    /// Embedding (and appearance feature maps, when the variant has an
    /// appearance branch) for one image, value-level.
    pub fn appearance_embedding(&self, image: &Array3<f64>) -> Result<(Array1<f64>, Option<Array3<f64>>)> {
        match self.config.variant {
            Variant::Plain | Variant::Attention => {
                let net = self.appearance.as_ref().unwrap();
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let out = net.forward(&mut tape, &mut binder, &self.store, image)?;
                let e: Array1<f64> =
                    tape.value(out.embedding).clone().into_dimensionality().unwrap();
                let maps: Array3<f64> = tape.value(out.maps).clone().into_dimensionality().unwrap();
                Ok((e, Some(maps)))
            }
            Variant::Classifier => {
                let net = self.classifier.as_ref().unwrap();
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let (probs, _) = net.forward(&mut tape, &mut binder, &self.store, image)?;
                let e: Array1<f64> = tape.value(probs).clone().into_dimensionality().unwrap();
                Ok((e, None))
            }
            Variant::Catemb => Err(AvsepError::Validation(
                "catemb conditioning takes a category id, not an image".into(),
            )),
        }
    }

    pub fn save(&self, path: &Path, epoch: usize, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "schema_version": MODEL_SCHEMA_VERSION,
            "config": self.config,
            "classes": self.classes,
            "epoch": epoch,
            "extra": extra,
        });
        save_checkpoint(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (header, tensors) = crate::nets::load_checkpoint(path)?;
        let schema = header["schema_version"].as_u64().unwrap_or(0);
        if schema != MODEL_SCHEMA_VERSION as u64 {
            return Err(AvsepError::Checkpoint(format!("unsupported model schema {schema}")));
        }
        let config: TrainConfig = serde_json::from_value(header["config"].clone())?;
        let classes = header["classes"]
            .as_u64()
            .ok_or_else(|| AvsepError::Checkpoint("missing class count".into()))?
            as usize;
        let mut model = Model::new(&config, classes)?;
        model.store.load_values(&tensors)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Stochastic gradient descent with classical momentum.
/// Rescales `grads` so their joint L2 norm is at most `clip` (0 = off).
fn clip_grads(grads: &mut [ArrayD<f64>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
}

pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
        Self { lr, momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>], frozen: &HashSet<usize>) {
        for i in 0..store.len() {
            if frozen.contains(&i) {
                continue;
            }
            let v = &mut self.velocity[i];
            v.zip_mut_with(&grads[i], |vi, &gi| *vi = self.momentum * *vi + gi);
            store.value_mut(i).zip_mut_with(v, |p, &vi| *p -= self.lr * vi);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sep_bce: f64,
    pub att_bce: f64,
    pub total: f64,
    pub val_sdr: f64,
    pub val_sir: f64,
    pub val_sar: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_sdr: f64,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub classifier_accuracy: Option<f64>,
}

fn load_prepared(corpus: &Corpus, row: &crate::synthdata::ManifestRow) -> Result<AvSample> {
    let mut sample = corpus.load_sample(row)?;
    sample.audio = dsp::prepare_clip(&sample.audio);
    Ok(sample)
}

/// The per-example training graph: one tied sound forward on the mixture,
/// per-source embeddings, fused masks against ground truth, and (for the
/// attention variant) the 2 positive + 2 negative pair terms.
fn example_loss(
    model: &Model,
    tape: &mut Tape,
    binder: &mut Binder,
    ex: &MixtureExample,
) -> Result<LossNodes> {
    let input = ex.mix_logspec.compressed().insert_axis(Axis(0));
    let sound = model.sound.forward(tape, binder, &model.store, &input)?;

    let mut embeddings = Vec::new();
    let mut app_maps = Vec::new();
    for src in &ex.sources {
        match model.config.variant {
            Variant::Catemb => {
                let e = make_catemb(src.category, model.k)?;
                embeddings.push(tape.leaf1(e));
            }
            Variant::Classifier => {
                // frozen conditioning: computed off-graph, inserted as a leaf
                let (e, _) = model.appearance_embedding(&src.image)?;
                embeddings.push(tape.leaf1(e));
            }
            Variant::Plain | Variant::Attention => {
                let net = model.appearance.as_ref().unwrap();
                let out = net.forward(tape, binder, &model.store, &src.image)?;
                embeddings.push(out.embedding);
                app_maps.push(out.maps);
            }
        }
    }

    let mut softs = Vec::new();
    for &e in &embeddings {
        softs.push(fuse_graph(tape, e, sound)?);
    }
    let sep_terms: Vec<(NodeId, &Array2<f64>)> =
        softs.iter().zip(&ex.gt_masks).map(|(&s, gt)| (s, gt)).collect();

    let mut att_pairs = Vec::new();
    if model.config.variant.uses_attention() {
        // exactly 2 positive (n,n) and 2 negative (n,m) pairs for N=2
        for n in 0..2 {
            for m in 0..2 {
                let p = attend_graph(tape, embeddings[n], app_maps[m])?;
                let label = if ex.sources[n].category == ex.sources[m].category { 1.0 } else { 0.0 };
                att_pairs.push((p, label));
            }
        }
    }

    joint_loss_graph(
        tape,
        &sep_terms,
        &att_pairs,
        model.config.sep_weight,
        model.config.att_weight,
    )
}

/// Pretrains the frozen classifier on the train split; returns val accuracy.
fn pretrain_classifier(model: &mut Model, corpus: &Corpus) -> Result<f64> {
    let net = model.classifier.as_ref().unwrap().clone();
    let train_rows = corpus.rows_for(Split::Train);
    let val_rows = corpus.rows_for(Split::Val);
    let mut sgd = Sgd::new(&model.store, model.config.classifier_lr, model.config.momentum);
    let unfrozen = HashSet::new();
    // only classifier parameters get gradients here, so updating "all" is safe
    for epoch in 0..model.config.classifier_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0xc1a55);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train_rows.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_grads: Option<Vec<ArrayD<f64>>> = None;
        let mut in_batch = 0usize;
        for &ri in &order {
            let sample = corpus.load_sample(train_rows[ri])?;
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let (_, logits) = net.forward(&mut tape, &mut binder, &model.store, &sample.image)?;
            let loss = tape.cross_entropy(logits, sample.category);
            if !tape.scalar(loss).is_finite() {
                return Err(AvsepError::Diverged(format!(
                    "classifier loss diverged on sample {}",
                    sample.id
                )));
            }
            let grads = binder.collect(&model.store, &tape.backward(loss));
            match &mut batch_grads {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        *a += g;
                    }
                }
                None => batch_grads = Some(grads),
            }
            in_batch += 1;
            if in_batch == model.config.batch_size {
                let mut acc = batch_grads.take().unwrap();
                for g in &mut acc {
                    *g /= in_batch as f64;
                }
                clip_grads(&mut acc, model.config.grad_clip);
                sgd.step(&mut model.store, &acc, &unfrozen);
                in_batch = 0;
            }
        }
        if let Some(mut acc) = batch_grads.take() {
            for g in &mut acc {
                *g /= in_batch as f64;
            }
            clip_grads(&mut acc, model.config.grad_clip);
            sgd.step(&mut model.store, &acc, &unfrozen);
        }
    }
    // held-out accuracy
    let mut correct = 0usize;
    for row in &val_rows {
        let sample = corpus.load_sample(row)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (probs, _) = net.forward(&mut tape, &mut binder, &model.store, &sample.image)?;
        let p = tape.value(probs);
        let pred = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        correct += (pred == row.category) as usize;
    }
    Ok(correct as f64 / val_rows.len().max(1) as f64)
}

/// Scores the model on validation mixtures; returns (SDR, SIR, SAR) means.
fn validation_scores(model: &Model, corpus: &Corpus) -> Result<(f64, f64, f64)> {
    let mut predict = model_predictor(model);
    let report = metrics::evaluate_mixtures(
        corpus,
        Split::Val,
        Some(model.config.val_mixtures),
        serde_json::Value::Null,
        "val",
        &mut predict,
    )?;
    Ok((report.mean_sdr, report.mean_sir, report.mean_sar))
}

/// Trains a model per the config, logging one record per epoch and saving a
/// checkpoint at the best validation SDR. Deterministic under fixed
/// (config, corpus): two runs produce byte-identical logs and checkpoints.
pub fn train(corpus: &Corpus, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = corpus.meta.config.categories;
    let mut model = Model::new(config, classes)?;
    std::fs::create_dir_all(out_dir)?;

    let classifier_accuracy = if config.variant == Variant::Classifier {
        Some(pretrain_classifier(&mut model, corpus)?)
    } else {
        None
    };

    let train_rows = corpus.rows_for(Split::Train);
    let pool = mixture_pairs(&train_rows, classes);
    if pool.is_empty() {
        return Err(AvsepError::Data("no cross-category training pairs".into()));
    }

    let mut sgd = Sgd::new(&model.store, config.learning_rate, config.momentum);
    let mut log = Vec::new();
    let mut best_val_sdr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamStore> = None;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ea1);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(config.mixtures_per_epoch.min(pool.len()));

        let map = FreqMap::new();
        let mut sums = LossBreakdown { sep_bce: 0.0, att_bce: 0.0, total: 0.0 };
        let mut seen = 0usize;
        let mut batch_grads: Option<Vec<ArrayD<f64>>> = None;
        let mut in_batch = 0usize;
        for &pi in &order {
            let (i, j) = pool[pi];
            let a = load_prepared(corpus, train_rows[i])?;
            let b = load_prepared(corpus, train_rows[j])?;
            let ex = make_mixture(&a, &b, &map)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let loss = example_loss(&model, &mut tape, &mut binder, &ex)?;
            let bd = loss.breakdown(&tape);
            if !bd.total.is_finite() {
                let dump = out_dir.join("diverged.json");
                let _ = std::fs::write(
                    &dump,
                    serde_json::to_vec_pretty(&serde_json::json!({
                        "epoch": epoch,
                        "mixture": ex.id,
                        "loss": {"sep": bd.sep_bce, "att": bd.att_bce},
                    }))
                    .unwrap_or_default(),
                );
                return Err(AvsepError::Diverged(format!(
                    "non-finite loss at epoch {epoch} on mixture {} (details in {})",
                    ex.id,
                    dump.display()
                )));
            }
            sums.sep_bce += bd.sep_bce;
            sums.att_bce += bd.att_bce;
            sums.total += bd.total;
            seen += 1;

            let grads = binder.collect(&model.store, &tape.backward(loss.total));
            match &mut batch_grads {
                Some(acc) => {
                    for (g, n) in acc.iter_mut().zip(&grads) {
                        *g += n;
                    }
                }
                None => batch_grads = Some(grads),
            }
            in_batch += 1;
            if in_batch == config.batch_size {
                let mut acc = batch_grads.take().unwrap();
                for g in &mut acc {
                    *g /= in_batch as f64;
                }
                clip_grads(&mut acc, config.grad_clip);
                sgd.step(&mut model.store, &acc, &model.frozen);
                in_batch = 0;
            }
        }
        if let Some(mut acc) = batch_grads.take() {
            for g in &mut acc {
                *g /= in_batch as f64;
            }
            clip_grads(&mut acc, config.grad_clip);
            sgd.step(&mut model.store, &acc, &model.frozen);
        }

        let (val_sdr, val_sir, val_sar) = validation_scores(&model, corpus)?;
        let n = seen.max(1) as f64;
        log.push(EpochRecord {
            epoch,
            sep_bce: sums.sep_bce / n,
            att_bce: sums.att_bce / n,
            total: sums.total / n,
            val_sdr,
            val_sir,
            val_sar,
        });
        if val_sdr > best_val_sdr {
            best_val_sdr = val_sdr;
            best_epoch = epoch;
            best_params = Some(model.store.clone());
        }
    }

    let checkpoint = out_dir.join("model.ckpt");
    let live = std::mem::replace(&mut model.store, best_params.expect("at least one epoch ran"));
    model.save(
        &checkpoint,
        best_epoch,
        serde_json::json!({"best_val_sdr": best_val_sdr, "classifier_accuracy": classifier_accuracy}),
    )?;
    model.store = live;

    let log_path = out_dir.join("train_log.jsonl");
    let mut text = String::new();
    for rec in &log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;

    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_sdr,
        checkpoint,
        log_path,
        classifier_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// How a separation request identifies the target source.
pub enum Conditioning<'a> {
    Image(&'a Array3<f64>),
    Category(usize),
}

pub struct Separated {
    pub estimate: AudioClip,
    pub mask: MaskPair,
    /// Positive self-attention map (low resolution); a flat 0.5 map for
    /// variants without an appearance branch.
    pub heatmap: Array2<f64>,
}

fn embedding_and_heatmap(
    model: &Model,
    cond: &Conditioning,
) -> Result<(Array1<f64>, Array2<f64>)> {
    match (model.config.variant, cond) {
        (Variant::Catemb, Conditioning::Category(c)) => {
            Ok((make_catemb(*c, model.k)?, Array2::from_elem((1, 1), 0.5)))
        }
        (Variant::Catemb, Conditioning::Image(_)) => Err(AvsepError::Validation(
            "catemb checkpoints take a category id, not an image".into(),
        )),
        (_, Conditioning::Category(_)) => Err(AvsepError::Validation(format!(
            "{} checkpoints take an image, not a category id",
            model.config.variant.name()
        ))),
        (_, Conditioning::Image(img)) => {
            let (e, maps) = model.appearance_embedding(img)?;
            let heatmap = match maps {
                Some(m) => attend(&e, &m, Polarity::Positive)?.p_hat,
                None => Array2::from_elem((1, 1), 0.5),
            };
            Ok((e, heatmap))
        }
    }
}

/// Reverses the centering of `prepare_clip`: extracts the segment of the
/// standard-length reconstruction that corresponds to the original input.
fn uncenter(recon: &AudioClip, original_len: usize) -> AudioClip {
    let std_len = recon.len();
    let samples = if original_len <= std_len {
        let left = (std_len - original_len) / 2;
        recon.samples()[left..left + original_len].to_vec()
    } else {
        let mut out = vec![0.0; original_len];
        let start = (original_len - std_len) / 2;
        out[start..start + std_len].copy_from_slice(recon.samples());
        out
    };
    AudioClip::new(samples, recon.sample_rate()).expect("uncentered clip is valid")
}

/// End-to-end inference: STFT -> log grid -> sound net -> fusion ->
/// mask application -> waveform, plus the localization heatmap.
pub fn separate(model: &Model, cond: Conditioning, mixture: &AudioClip) -> Result<Separated> {
    if mixture.sample_rate() != SAMPLE_RATE {
        return Err(AvsepError::Validation(format!(
            "expected {SAMPLE_RATE} Hz input, got {}",
            mixture.sample_rate()
        )));
    }
    let prepared = dsp::prepare_clip(mixture);
    let spec = dsp::stft(&prepared)?;
    let map = FreqMap::new();
    let logspec = dsp::to_log_spec(&spec, &map)?;
    let (e, heatmap) = embedding_and_heatmap(model, &cond)?;
    let sound = model.sound_features(&logspec.compressed())?;
    let mask = fuse(&e, &sound)?;
    let recon = dsp::apply_mask_and_reconstruct(&spec, &mask.binary, &map, STANDARD_SAMPLES)?;
    let estimate = uncenter(&recon, mixture.len());
    Ok(Separated { estimate, mask, heatmap })
}

/// Evaluation predictor that conditions per the model's variant and caches
/// the sound features per mixture (both sources share one sound forward).
pub fn model_predictor<'m>(
    model: &'m Model,
) -> impl FnMut(&MixtureExample, usize) -> Result<EvalOutput> + 'm {
    let map = FreqMap::new();
    let mut cache: Option<(String, Array3<f64>)> = None;
    move |ex, s| {
        let sound = match &cache {
            Some((id, v)) if *id == ex.id => v.clone(),
            _ => {
                let v = model.sound_features(&ex.mix_logspec.compressed())?;
                cache = Some((ex.id.clone(), v.clone()));
                v
            }
        };
        let src = &ex.sources[s];
        let (e, heatmap) = match model.config.variant {
            Variant::Catemb => (make_catemb(src.category, model.k)?, None),
            Variant::Classifier => (model.appearance_embedding(&src.image)?.0, None),
            Variant::Plain | Variant::Attention => {
                let (e, maps) = model.appearance_embedding(&src.image)?;
                let h = attend(&e, maps.as_ref().unwrap(), Polarity::Positive)?.p_hat;
                (e, Some(h))
            }
        };
        let mask = fuse(&e, &sound)?;
        let estimate =
            dsp::apply_mask_and_reconstruct(&ex.mix_spec, &mask.binary, &map, ex.mix.len())?;
        Ok(EvalOutput { estimate, heatmap })
    }
}

/// Convenience: evaluate a model checkpoint over a split.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    limit: Option<usize>,
    config_echo: serde_json::Value,
) -> Result<metrics::SeparationReport> {
    let mut predict = model_predictor(model);
    metrics::evaluate_mixtures(
        corpus,
        split,
        limit,
        config_echo,
        &format!("model:{}", model.config.variant.name()),
        &mut predict,
    )
}
