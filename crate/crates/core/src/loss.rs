//! Classification heads over utterance embeddings: plain two-class Softmax,
//! additive-margin Softmax, and the one-class OC-Softmax.
//!
//! Every loss is a batch mean of `softplus(z_i)` for a per-sample logit
//! margin `z_i`, so all three share the same backward skeleton:
//! `dL/dz_i = sigmoid(z_i) / N`, then the chain rule through `z_i`.
//! Normalized vectors are differentiated through `(I − v̂v̂ᵀ)/‖v‖`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log(1 + e^z)` without overflow for large |z|.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn unit(v: ArrayView1<'_, f64>, what: &str) -> Result<(Array1<f64>, f64)> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if norm == 0.0 {
        return Err(Error::Degenerate(format!("{what} has zero norm")));
    }
    Ok((&v / norm, norm))
}

/// Pull a gradient w.r.t. `v̂` back to `v`.
fn unit_backward(v_hat: &Array1<f64>, norm: f64, grad_hat: &Array1<f64>) -> Array1<f64> {
    (grad_hat - &(v_hat * v_hat.dot(grad_hat))) / norm
}

fn check_finite(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `N × D` embeddings with labels `y_i ∈ {0, 1}` (0 = bona fide).
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    embeddings: Array2<f64>,
    labels: Vec<u8>,
}

impl LabeledBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if embeddings.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|y| **y > 1) {
            return Err(Error::InvalidInput(format!("label {y} not in {{0, 1}}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHeadParams {
    pub w0: Array1<f64>,
    pub w1: Array1<f64>,
    pub alpha: f64,
    pub margin: f64,
}

impl BinaryHeadParams {
    pub fn new(w0: Array1<f64>, w1: Array1<f64>, alpha: f64, margin: f64) -> Result<Self> {
        if w0.len() != w1.len() {
            return Err(Error::Shape("w0 and w1 differ in dimension".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..=1.0).contains(&margin) {
            return Err(Error::Config(format!("margin must lie in [0, 1], got {margin}")));
        }
        Ok(Self { w0, w1, alpha, margin })
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.w0.len() != dim || self.w1.len() != dim {
            return Err(Error::Shape(format!(
                "head dimension {} does not match embedding dimension {dim}",
                self.w0.len()
            )));
        }
        check_finite(self.w0.view(), "w0")?;
        check_finite(self.w1.view(), "w1")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcHeadParams {
    pub w0: Array1<f64>,
    pub alpha: f64,
    pub m0: f64,
    pub m1: f64,
}

impl OcHeadParams {
    pub fn new(w0: Array1<f64>, alpha: f64, m0: f64, m1: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if !(-1.0..=1.0).contains(&m0) || !(-1.0..=1.0).contains(&m1) {
            return Err(Error::Config(format!("margins must lie in [-1, 1], got m0={m0}, m1={m1}")));
        }
        if m0 <= m1 {
            return Err(Error::Config(format!("need m0 > m1, got m0={m0}, m1={m1}")));
        }
        Ok(Self { w0, alpha, m0, m1 })
    }
}

/// Batch-mean loss and its gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_embeddings: Array2<f64>,
    pub d_w0: Array1<f64>,
    /// Absent for the one-class head.
    pub d_w1: Option<Array1<f64>>,
}

/// `(1/N) Σ log(1 + exp((w_{1−y} − w_y)ᵀ x))`.
pub fn softmax_loss(batch: &LabeledBatch, params: &BinaryHeadParams) -> Result<LossOutput> {
    params.check(batch.dim())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_x = Array2::zeros(batch.embeddings.raw_dim());
    let mut d_w = [Array1::zeros(batch.dim()), Array1::zeros(batch.dim())];
    let w = [&params.w0, &params.w1];
    for (i, (x, &y)) in batch.embeddings.rows().into_iter().zip(&batch.labels).enumerate() {
        let (own, other) = (y as usize, 1 - y as usize);
        let diff = w[other] - w[own];
        let z = diff.dot(&x);
        loss += softplus(z);
        let s = sigmoid(z) / n;
        d_x.row_mut(i).assign(&(&diff * s));
        d_w[other].scaled_add(s, &x);
        d_w[own].scaled_add(-s, &x);
    }
    let [d_w0, d_w1] = d_w;
    Ok(LossOutput { loss: loss / n, d_embeddings: d_x, d_w0, d_w1: Some(d_w1) })
}

/// `(1/N) Σ log(1 + exp(α(m − (ŵ_y − ŵ_{1−y})ᵀ x̂)))`.
pub fn am_softmax_loss(batch: &LabeledBatch, params: &BinaryHeadParams) -> Result<LossOutput> {
    params.check(batch.dim())?;
    let n = batch.len() as f64;
    let (w0_hat, w0_norm) = unit(params.w0.view(), "w0")?;
    let (w1_hat, w1_norm) = unit(params.w1.view(), "w1")?;
    let w_hat = [&w0_hat, &w1_hat];
    let mut loss = 0.0;
    let mut d_x = Array2::zeros(batch.embeddings.raw_dim());
    let mut g_hat = [Array1::zeros(batch.dim()), Array1::zeros(batch.dim())];
    for (i, (x, &y)) in batch.embeddings.rows().into_iter().zip(&batch.labels).enumerate() {
        let (x_hat, x_norm) = unit(x, &format!("embedding {i}"))?;
        let (own, other) = (y as usize, 1 - y as usize);
        let diff = w_hat[own] - w_hat[other];
        let z = params.alpha * (params.margin - diff.dot(&x_hat));
        loss += softplus(z);
        let s = sigmoid(z) / n;
        let g_x_hat = &diff * (-params.alpha * s);
        d_x.row_mut(i).assign(&unit_backward(&x_hat, x_norm, &g_x_hat));
        g_hat[own].scaled_add(-params.alpha * s, &x_hat);
        g_hat[other].scaled_add(params.alpha * s, &x_hat);
    }
    Ok(LossOutput {
        loss: loss / n,
        d_embeddings: d_x,
        d_w0: unit_backward(&w0_hat, w0_norm, &g_hat[0]),
        d_w1: Some(unit_backward(&w1_hat, w1_norm, &g_hat[1])),
    })
}

/// `(1/N) Σ log(1 + exp(α(m_y − ŵ0ᵀx̂)(−1)^y))`.
pub fn oc_softmax_loss(batch: &LabeledBatch, params: &OcHeadParams) -> Result<LossOutput> {
    if params.w0.len() != batch.dim() {
        return Err(Error::Shape(format!(
            "head dimension {} does not match embedding dimension {}",
            params.w0.len(),
            batch.dim()
        )));
    }
    let n = batch.len() as f64;
    let (w_hat, w_norm) = unit(params.w0.view(), "w0")?;
    let mut loss = 0.0;
    let mut d_x = Array2::zeros(batch.embeddings.raw_dim());
    let mut g_w_hat = Array1::zeros(batch.dim());
    for (i, (x, &y)) in batch.embeddings.rows().into_iter().zip(&batch.labels).enumerate() {
        let (x_hat, x_norm) = unit(x, &format!("embedding {i}"))?;
        let cos = w_hat.dot(&x_hat);
        let (margin, sign) = if y == 0 { (params.m0, 1.0) } else { (params.m1, -1.0) };
        let z = params.alpha * (margin - cos) * sign;
        loss += softplus(z);
        // dL/dcos for this sample
        let g_cos = -params.alpha * sign * sigmoid(z) / n;
        d_x.row_mut(i).assign(&unit_backward(&x_hat, x_norm, &(&w_hat * g_cos)));
        g_w_hat.scaled_add(g_cos, &x_hat);
    }
    Ok(LossOutput {
        loss: loss / n,
        d_embeddings: d_x,
        d_w0: unit_backward(&w_hat, w_norm, &g_w_hat),
        d_w1: None,
    })
}

/// Cosine similarity between the embedding and the target direction.
pub fn cm_score(x: ArrayView1<'_, f64>, params: &OcHeadParams) -> Result<f64> {
    cosine(x, params.w0.view())
}

fn cosine(x: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::Shape(format!("embedding dim {} vs head dim {}", x.len(), w.len())));
    }
    let (x_hat, _) = unit(x, "embedding")?;
    let (w_hat, _) = unit(w, "w0")?;
    Ok(x_hat.dot(&w_hat).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    AmSoftmax,
    OcSoftmax,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::AmSoftmax => "am_softmax",
            LossKind::OcSoftmax => "oc_softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: LossKind,
    pub alpha: f64,
    /// AM-Softmax margin.
    pub margin: f64,
    /// OC-Softmax bona fide margin.
    pub m0: f64,
    /// OC-Softmax spoof margin.
    pub m1: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { kind: LossKind::OcSoftmax, alpha: 20.0, margin: 0.9, m0: 0.9, m1: 0.2 }
    }
}

/// A configured head with its trainable direction vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum LossHead {
    Softmax(BinaryHeadParams),
    AmSoftmax(BinaryHeadParams),
    OcSoftmax(OcHeadParams),
}

impl LossHead {
    /// Directions drawn from a unit-variance Gaussian; stored unnormalized.
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, dim: usize, rng: &mut R) -> Result<Self> {
        let mut draw = || Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Self::from_parts(cfg, draw(), (cfg.kind != LossKind::OcSoftmax).then(&mut draw))
    }

    pub fn from_parts(cfg: &HeadConfig, w0: Array1<f64>, w1: Option<Array1<f64>>) -> Result<Self> {
        let need_w1 = || w1.clone().ok_or_else(|| Error::Checkpoint("binary head needs w1".into()));
        Ok(match cfg.kind {
            LossKind::Softmax => LossHead::Softmax(BinaryHeadParams::new(w0, need_w1()?, cfg.alpha, cfg.margin)?),
            LossKind::AmSoftmax => {
                LossHead::AmSoftmax(BinaryHeadParams::new(w0, need_w1()?, cfg.alpha, cfg.margin)?)
            }
            LossKind::OcSoftmax => LossHead::OcSoftmax(OcHeadParams::new(w0, cfg.alpha, cfg.m0, cfg.m1)?),
        })
    }

    pub fn kind(&self) -> LossKind {
        match self {
            LossHead::Softmax(_) => LossKind::Softmax,
            LossHead::AmSoftmax(_) => LossKind::AmSoftmax,
            LossHead::OcSoftmax(_) => LossKind::OcSoftmax,
        }
    }

    pub fn loss(&self, batch: &LabeledBatch) -> Result<LossOutput> {
        match self {
            LossHead::Softmax(p) => softmax_loss(batch, p),
            LossHead::AmSoftmax(p) => am_softmax_loss(batch, p),
            LossHead::OcSoftmax(p) => oc_softmax_loss(batch, p),
        }
    }

    /// Countermeasure score, higher meaning more bona fide. For the binary
    /// heads this is the bona fide logit minus the spoof logit (cosine
    /// logits for AM-Softmax).
    pub fn score(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        match self {
            LossHead::Softmax(p) => {
                if x.len() != p.w0.len() {
                    return Err(Error::Shape("embedding / head dimension mismatch".into()));
                }
                Ok((&p.w0 - &p.w1).dot(&x))
            }
            LossHead::AmSoftmax(p) => Ok(cosine(x, p.w0.view())? - cosine(x, p.w1.view())?),
            LossHead::OcSoftmax(p) => cm_score(x, p),
        }
    }

    /// Trainable vectors in a fixed order: `head.w0`, then `head.w1` if present.
    pub fn tensors(&self) -> Vec<(&'static str, &Array1<f64>)> {
        match self {
            LossHead::Softmax(p) | LossHead::AmSoftmax(p) => vec![("head.w0", &p.w0), ("head.w1", &p.w1)],
            LossHead::OcSoftmax(p) => vec![("head.w0", &p.w0)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array1<f64>> {
        match self {
            LossHead::Softmax(p) | LossHead::AmSoftmax(p) => vec![&mut p.w0, &mut p.w1],
            LossHead::OcSoftmax(p) => vec![&mut p.w0],
        }
    }
}

impl LossOutput {
    /// Head gradients in the order of [`LossHead::tensors`].
    pub fn head_grads(&self) -> Vec<&Array1<f64>> {
        let mut out = vec![&self.d_w0];
        out.extend(self.d_w1.as_ref());
        out
    }
}
