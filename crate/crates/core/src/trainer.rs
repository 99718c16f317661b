//! Training loop: seeded mini-batch shuffling, random fixed-length crops,
//! Adam on the embedding network, SGD on the loss head, step-decay learning
//! rate, and best-dev-EER model selection.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::loss::{HeadConfig, LabeledBatch, LossHead, LossKind};
use crate::metrics::{eer, ScoreRecord};
use crate::net::{EmbeddingNet, NetConfig};
use crate::optim::{adam_step, lr_at_epoch, sgd_step, AdamState};
use crate::protocol::{fix_length, fix_length_at, Key, ProtocolEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOptimizer {
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub head_optimizer: HeadOptimizer,
    /// Head learning rate; defaults to `lr`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_head: Option<f64>,
    /// L2 penalty added to the network gradients; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip for the network; 0 disables it.
    pub clip_norm: f64,
    pub seed: u64,
    /// Frames per training example after repeat-padding or cropping.
    pub target_len: usize,
    pub loss: LossKind,
    pub alpha: f64,
    pub margin: f64,
    pub m0: f64,
    pub m1: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let head = HeadConfig::default();
        Self {
            batch_size: 64,
            epochs: 100,
            lr: 0.0003,
            lr_decay: 0.5,
            lr_decay_every: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            head_optimizer: HeadOptimizer::Sgd,
            lr_head: None,
            weight_decay: 0.0,
            clip_norm: 0.0,
            seed: 0,
            target_len: 750,
            loss: head.kind,
            alpha: head.alpha,
            margin: head.margin,
            m0: head.m0,
            m1: head.m1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("[train] {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.target_len == 0 {
            return bad("target_len must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.lr_head() > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be non-negative");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        Ok(())
    }

    pub fn lr_head(&self) -> f64 {
        self.lr_head.unwrap_or(self.lr)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig { kind: self.loss, alpha: self.alpha, margin: self.margin, m0: self.m0, m1: self.m1 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at_epoch(epoch, self.lr, self.lr_decay, self.lr_decay_every)
    }
}

/// Labeled utterances with features, addressed by index.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn utt_id(&self, i: usize) -> &str;
    fn key(&self, i: usize) -> Key;
    fn attack_id(&self, i: usize) -> &str;
    fn features(&self, i: usize) -> Result<Cow<'_, FeatureMatrix>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub entry: ProtocolEntry,
    pub features: FeatureMatrix,
}

/// Everything held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub examples: Vec<Example>,
}

impl FeatureSource for InMemorySource {
    fn len(&self) -> usize {
        self.examples.len()
    }
    fn utt_id(&self, i: usize) -> &str {
        &self.examples[i].entry.utt_id
    }
    fn key(&self, i: usize) -> Key {
        self.examples[i].entry.key
    }
    fn attack_id(&self, i: usize) -> &str {
        &self.examples[i].entry.attack_id
    }
    fn features(&self, i: usize) -> Result<Cow<'_, FeatureMatrix>> {
        Ok(Cow::Borrowed(&self.examples[i].features))
    }
}

/// Features read lazily from `<dir>/<utt_id>.lfcc`.
#[derive(Debug, Clone)]
pub struct CacheDirSource {
    pub entries: Vec<ProtocolEntry>,
    pub dir: PathBuf,
}

impl CacheDirSource {
    pub fn path_of(&self, i: usize) -> PathBuf {
        self.dir.join(format!("{}.lfcc", self.entries[i].utt_id))
    }
}

impl FeatureSource for CacheDirSource {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn utt_id(&self, i: usize) -> &str {
        &self.entries[i].utt_id
    }
    fn key(&self, i: usize) -> Key {
        self.entries[i].key
    }
    fn attack_id(&self, i: usize) -> &str {
        &self.entries[i].attack_id
    }
    fn features(&self, i: usize) -> Result<Cow<'_, FeatureMatrix>> {
        Ok(Cow::Owned(FeatureMatrix::read_cache(&self.path_of(i))?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,dev_eer,lr\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.dev_eer, r.lr);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Training stopped on a non-finite loss or gradient. `last_good` is the
/// best checkpoint so far, or the initialization if no epoch completed.
#[derive(Debug, Clone)]
pub struct Diverged {
    pub message: String,
    pub epoch: usize,
    pub last_good: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Debug)]
pub enum TrainError {
    Failed(Error),
    Diverged(Box<Diverged>),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Failed(e) => write!(f, "{e}"),
            TrainError::Diverged(d) => write!(f, "training diverged in epoch {}: {}", d.epoch, d.message),
        }
    }
}

impl std::error::Error for TrainError {}

/// Network, head and optimizer state being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: EmbeddingNet,
    pub head: LossHead,
    pub adam: AdamState,
}

impl Model {
    /// Network from the model seed; head directions from the training seed.
    pub fn init(net_cfg: &NetConfig, train_cfg: &TrainConfig) -> Result<Self> {
        net_cfg.validate()?;
        train_cfg.validate()?;
        let net = EmbeddingNet::new(net_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x6865_6164);
        let head = LossHead::init(&train_cfg.head_config(), net_cfg.embed_dim, &mut rng)?;
        let sizes: Vec<usize> = net.params().tensors().iter().map(|t| t.value.len()).collect();
        let adam = AdamState::new(&sizes, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps);
        Ok(Self { net, head, adam })
    }

    pub fn score(&self, features: &FeatureMatrix) -> Result<f64> {
        self.head.score(self.net.embed(features)?.view())
    }
}

/// Embeddings of every item, using the first `target_len` frames (repeat
/// padded when shorter).
pub fn embed_all<S: FeatureSource + ?Sized>(net: &EmbeddingNet, src: &S, target_len: usize) -> Result<Vec<Array1<f64>>> {
    (0..src.len())
        .into_par_iter()
        .map(|i| {
            let x = fix_length_at(&*src.features(i)?, target_len, 0)?;
            net.embed(&x)
        })
        .collect()
}

/// CM scores with the deterministic offset-0 crop.
pub fn score_all<S: FeatureSource + ?Sized>(model: &Model, src: &S, target_len: usize) -> Result<Vec<ScoreRecord>> {
    let emb = embed_all(&model.net, src, target_len)?;
    emb.iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(ScoreRecord {
                utt_id: src.utt_id(i).to_string(),
                score: model.head.score(e.view())?,
                key: src.key(i),
                attack_id: src.attack_id(i).to_string(),
            })
        })
        .collect()
}

pub fn dev_eer<S: FeatureSource + ?Sized>(model: &Model, dev: &S, target_len: usize) -> Result<f64> {
    Ok(eer(&score_all(model, dev, target_len)?)?.0)
}

struct StepResult {
    loss_sum: f64,
}

fn global_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Forward, loss and backward over one mini-batch, then one optimizer step.
fn train_step<S: FeatureSource + ?Sized>(
    model: &mut Model,
    src: &S,
    batch: &[usize],
    offsets_rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepResult> {
    // crop offsets are drawn in batch order before any parallel work
    let mut crops = Vec::with_capacity(batch.len());
    for &i in batch {
        crops.push(fix_length(&*src.features(i)?, cfg.target_len, offsets_rng)?);
    }
    let net = &model.net;
    let forwards: Vec<_> = crops.par_iter().map(|x| net.forward(x)).collect::<Result<_>>()?;
    let dim = net.config().embed_dim;
    let mut emb = Array2::zeros((batch.len(), dim));
    for (mut row, (e, _)) in emb.rows_mut().into_iter().zip(&forwards) {
        row.assign(e);
    }
    let labels: Vec<u8> = batch.iter().map(|&i| src.key(i).label()).collect();
    let out = model.head.loss(&LabeledBatch::new(emb, labels)?)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", out.loss)));
    }
    let per_example: Vec<_> = forwards
        .par_iter()
        .enumerate()
        .map(|(n, (_, cache))| net.backward(cache, out.d_embeddings.row(n)).map(|g| g.tensors))
        .collect::<Result<_>>()?;
    let mut grads = per_example.into_iter();
    let mut total = grads.next().expect("non-empty batch");
    for g in grads {
        for (acc, gi) in total.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    if cfg.weight_decay > 0.0 {
        for (g, t) in total.iter_mut().zip(model.net.params().tensors()) {
            g.scaled_add(cfg.weight_decay, &t.value);
        }
    }
    if cfg.clip_norm > 0.0 {
        let norm = global_norm(&total);
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            total.iter_mut().for_each(|g| *g *= s);
        }
    }
    let head_grads: Vec<Array1<f64>> = out.head_grads().into_iter().cloned().collect();

    let grad_slices: Vec<&[f64]> = total.iter().map(|g| g.as_slice().expect("standard layout")).collect();
    let tensors = model.net.params_mut().tensors_mut();
    let mut param_slices: Vec<&mut [f64]> =
        tensors.iter_mut().map(|t| t.value.as_slice_mut().expect("standard layout")).collect();
    adam_step(&mut param_slices, &grad_slices, &mut model.adam, lr)?;

    let head_slices: Vec<&[f64]> = head_grads.iter().map(|g| g.as_slice().expect("contiguous")).collect();
    let mut head_params = model.head.tensors_mut();
    let mut head_mut: Vec<&mut [f64]> =
        head_params.iter_mut().map(|p| p.as_slice_mut().expect("contiguous")).collect();
    sgd_step(&mut head_mut, &head_slices, cfg.lr_head())?;

    Ok(StepResult { loss_sum: out.loss * batch.len() as f64 })
}

/// Mean training loss without updating anything (offset-0 crops).
fn forward_loss<S: FeatureSource + ?Sized>(model: &Model, src: &S, cfg: &TrainConfig) -> Result<f64> {
    let emb = embed_all(&model.net, src, cfg.target_len)?;
    let mut m = Array2::zeros((emb.len(), model.net.config().embed_dim));
    for (mut row, e) in m.rows_mut().into_iter().zip(&emb) {
        row.assign(e);
    }
    let labels = (0..src.len()).map(|i| src.key(i).label()).collect();
    Ok(model.head.loss(&LabeledBatch::new(m, labels)?)?.loss)
}

fn check_classes<S: FeatureSource + ?Sized>(src: &S, what: &str) -> Result<()> {
    let bona = (0..src.len()).filter(|&i| src.key(i) == Key::Bonafide).count();
    if bona == 0 || bona == src.len() {
        return Err(Error::InvalidInput(format!("{what} split needs both bona fide and spoof utterances")));
    }
    Ok(())
}

/// Full training run. Returns the checkpoint with the lowest dev EER (ties go
/// to the earlier epoch) and one log row per epoch. With `epochs = 0` the
/// initialization is evaluated once and logged as epoch 0.
pub fn train<S, D>(train_src: &S, dev_src: &D, net_cfg: &NetConfig, cfg: &TrainConfig) -> std::result::Result<TrainOutcome, TrainError>
where
    S: FeatureSource + ?Sized,
    D: FeatureSource + ?Sized,
{
    check_classes(train_src, "training")?;
    check_classes(dev_src, "development")?;
    let mut model = Model::init(net_cfg, cfg)?;
    let mut log = Vec::new();

    if cfg.epochs == 0 {
        let eer0 = dev_eer(&model, dev_src, cfg.target_len)?;
        let loss0 = forward_loss(&model, train_src, cfg)?;
        log.push(EpochLog { epoch: 0, train_loss: loss0, dev_eer: eer0, lr: cfg.lr_at(0) });
        let best = Checkpoint::snapshot(&model, net_cfg, cfg, 0, eer0);
        return Ok(TrainOutcome { best, log });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_src.len()).collect();
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            match train_step(&mut model, train_src, batch, &mut rng, cfg, lr) {
                Ok(step) => loss_sum += step.loss_sum,
                Err(Error::NonFinite(msg)) => {
                    let last_good = match best {
                        Some(b) => b,
                        None => {
                            let fresh = Model::init(net_cfg, cfg)?;
                            let e0 = dev_eer(&fresh, dev_src, cfg.target_len)?;
                            Checkpoint::snapshot(&fresh, net_cfg, cfg, 0, e0)
                        }
                    };
                    return Err(TrainError::Diverged(Box::new(Diverged { message: msg, epoch: epoch + 1, last_good, log })));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = loss_sum / train_src.len() as f64;
        let dev = dev_eer(&model, dev_src, cfg.target_len)?;
        log::info!("epoch {} loss {train_loss:.6} dev EER {:.4}% lr {lr}", epoch + 1, 100.0 * dev);
        log.push(EpochLog { epoch: epoch + 1, train_loss, dev_eer: dev, lr });
        if best.as_ref().is_none_or(|b| dev < b.dev_eer) {
            best = Some(Checkpoint::snapshot(&model, net_cfg, cfg, epoch + 1, dev));
        }
    }
    Ok(TrainOutcome { best: best.expect("at least one epoch"), log })
}
