//! Utterance embedding network: a frame-level encoder, temporal pooling, and
//! a final affine projection to the embedding dimension.
//!
//! Every encoder layer is a 1-D convolution over time (kernel 1 for the
//! frame-local MLP) followed by `tanh`. Attentive pooling is single-head
//! additive attention:
//!
//! ```text
//! e_t = v_aᵀ tanh(W_a h_t),   a = softmax_t(e),   pooled = Σ_t a_t h_t
//! ```
//!
//! `forward` returns a cache that `backward` turns into exact gradients for
//! every parameter tensor and for the input features.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Frame-local dense layers.
    MlpSmall,
    /// Temporal convolutions.
    ConvSmall,
    /// Stem convolution plus two residual blocks per stage width.
    Resnet18Like,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Attentive,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub encoder: EncoderKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub pooling: PoolingKind,
    /// Width of the attention projection; 0 means "same as the last hidden width".
    pub attention_dim: usize,
    /// Temporal kernel width for the convolutional encoders (odd).
    pub kernel: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::MlpSmall,
            input_dim: 60,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            pooling: PoolingKind::Attentive,
            attention_dim: 0,
            kernel: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("[model] {m}")));
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty and positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.encoder != EncoderKind::MlpSmall && self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        Ok(())
    }

    fn last_hidden(&self) -> usize {
        *self.hidden_dims.last().expect("validated")
    }

    fn attention_width(&self) -> usize {
        if self.attention_dim == 0 {
            self.last_hidden()
        } else {
            self.attention_dim
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: ArrayD<f64>,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    weight: usize,
    bias: usize,
    kernel: usize,
}

#[derive(Debug, Clone)]
enum LayerSpec {
    Plain(ConvSpec),
    Residual { conv1: ConvSpec, conv2: ConvSpec, proj: Option<ConvSpec> },
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerSpec>,
    att_w: usize,
    att_v: usize,
    out_w: usize,
    out_b: usize,
}

/// Parameters in a fixed order. Every mutable borrow bumps the version so a
/// cache from an earlier forward pass is rejected by `backward`.
#[derive(Debug, Clone)]
pub struct NetParams {
    tensors: Vec<Tensor>,
    version: u64,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl NetParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        self.version = fresh_version();
        &mut self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

struct LayoutBuilder<'a, R: Rng> {
    tensors: Vec<Tensor>,
    rng: &'a mut R,
}

impl<R: Rng> LayoutBuilder<'_, R> {
    fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-limit..=limit)).collect();
        self.push(name, ArrayD::from_shape_vec(shape.to_vec(), data).unwrap())
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, ArrayD::zeros(shape.to_vec()))
    }

    fn push(&mut self, name: String, value: ArrayD<f64>) -> usize {
        self.tensors.push(Tensor { name, value });
        self.tensors.len() - 1
    }

    fn conv(&mut self, prefix: &str, kernel: usize, input: usize, output: usize) -> ConvSpec {
        let weight = self.glorot(format!("{prefix}.w"), &[kernel, output, input], input * kernel, output * kernel);
        let bias = self.zeros(format!("{prefix}.b"), &[output]);
        ConvSpec { weight, bias, kernel }
    }
}

fn build_layout<R: Rng>(cfg: &NetConfig, rng: &mut R) -> (Layout, Vec<Tensor>) {
    let mut b = LayoutBuilder { tensors: Vec::new(), rng };
    let mut layers = Vec::new();
    let mut width = cfg.input_dim;
    match cfg.encoder {
        EncoderKind::MlpSmall | EncoderKind::ConvSmall => {
            let k = if cfg.encoder == EncoderKind::MlpSmall { 1 } else { cfg.kernel };
            for (l, &h) in cfg.hidden_dims.iter().enumerate() {
                layers.push(LayerSpec::Plain(b.conv(&format!("enc.{l}"), k, width, h)));
                width = h;
            }
        }
        EncoderKind::Resnet18Like => {
            let k = cfg.kernel;
            layers.push(LayerSpec::Plain(b.conv("enc.stem", k, width, cfg.hidden_dims[0])));
            width = cfg.hidden_dims[0];
            for (stage, &h) in cfg.hidden_dims.iter().enumerate() {
                for block in 0..2 {
                    let p = format!("enc.s{stage}.b{block}");
                    let conv1 = b.conv(&format!("{p}.conv1"), k, width, h);
                    let conv2 = b.conv(&format!("{p}.conv2"), k, h, h);
                    let proj = (width != h).then(|| b.conv(&format!("{p}.proj"), 1, width, h));
                    layers.push(LayerSpec::Residual { conv1, conv2, proj });
                    width = h;
                }
            }
        }
    }
    let a = cfg.attention_width();
    let att_w = b.glorot("pool.att_w".into(), &[a, width], width, a);
    let att_v = b.glorot("pool.att_v".into(), &[a], a, 1);
    let out_w = b.glorot("out.w".into(), &[cfg.embed_dim, width], width, cfg.embed_dim);
    let out_b = b.zeros("out.b".into(), &[cfg.embed_dim]);
    (Layout { layers, att_w, att_v, out_w, out_b }, b.tensors)
}

fn conv_forward(x: ArrayView2<'_, f64>, w: ArrayView3<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let (t_len, k) = (x.nrows(), w.shape()[0]);
    let half = (k / 2) as isize;
    let mut y = Array2::zeros((t_len, w.shape()[1]));
    y += &b;
    for j in 0..k {
        let off = j as isize - half;
        let (t0, t1) = valid_range(t_len, off);
        if t0 >= t1 {
            continue;
        }
        let src = x.slice(s![(t0 as isize + off) as usize..(t1 as isize + off) as usize, ..]);
        let contrib = src.dot(&w.index_axis(Axis(0), j).t());
        let mut dst = y.slice_mut(s![t0..t1, ..]);
        dst += &contrib;
    }
    y
}

/// Accumulates weight/bias grads and returns the input gradient.
fn conv_backward(
    x: ArrayView2<'_, f64>,
    w: ArrayView3<'_, f64>,
    dy: ArrayView2<'_, f64>,
    dw: &mut Array3<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (t_len, k) = (x.nrows(), w.shape()[0]);
    let half = (k / 2) as isize;
    *db += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(x.raw_dim());
    for j in 0..k {
        let off = j as isize - half;
        let (t0, t1) = valid_range(t_len, off);
        if t0 >= t1 {
            continue;
        }
        let (s0, s1) = ((t0 as isize + off) as usize, (t1 as isize + off) as usize);
        let dy_part = dy.slice(s![t0..t1, ..]);
        let mut dw_j = dw.index_axis_mut(Axis(0), j);
        dw_j += &dy_part.t().dot(&x.slice(s![s0..s1, ..]));
        let mut dx_part = dx.slice_mut(s![s0..s1, ..]);
        dx_part += &dy_part.dot(&w.index_axis(Axis(0), j));
    }
    dx
}

/// Output rows `t0..t1` whose shifted source row `t + off` is in bounds.
fn valid_range(t_len: usize, off: isize) -> (usize, usize) {
    let t0 = (-off).max(0) as usize;
    let t1 = (t_len as isize - off.max(0)).max(0) as usize;
    (t0.min(t_len), t1)
}

fn tanh_backward(out: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut d = d_out.clone();
    d.zip_mut_with(out, |g, y| *g *= 1.0 - y * y);
    d
}

/// Softmax-weighted sum of rows. Returns `(weights, pooled)`.
pub fn attentive_pool(h: ArrayView2<'_, f64>, logits: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut a = logits.mapv(|e| (e - max).exp());
    let z = a.sum();
    a /= z;
    let pooled = a.dot(&h);
    (a, pooled)
}

/// Gradients of [`attentive_pool`] w.r.t. `h` and the logits.
pub fn attentive_pool_backward(
    h: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    d_pooled: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array1<f64>) {
    let mut d_h = Array2::zeros(h.raw_dim());
    for (t, mut row) in d_h.rows_mut().into_iter().enumerate() {
        row.assign(&(&d_pooled * weights[t]));
    }
    let d_a = h.dot(&d_pooled);
    let mean = weights.dot(&d_a);
    let d_logits = &weights * &(d_a - mean);
    (d_h, d_logits)
}

#[derive(Debug, Clone)]
enum LayerCache {
    Plain { input: Array2<f64>, out: Array2<f64> },
    Residual { input: Array2<f64>, mid: Array2<f64>, out: Array2<f64> },
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input_shape: (usize, usize),
    layers: Vec<LayerCache>,
    hidden: Array2<f64>,
    att_hidden: Option<Array2<f64>>,
    weights: Array1<f64>,
    pooled: Array1<f64>,
}

impl ForwardCache {
    /// Temporal pooling weights (uniform for mean pooling).
    pub fn attention_weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn pooled(&self) -> ArrayView1<'_, f64> {
        self.pooled.view()
    }

    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.view()
    }
}

/// Gradients aligned with [`NetParams::tensors`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub tensors: Vec<ArrayD<f64>>,
    pub d_input: Array2<f64>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Vec<ArrayD<f64>> {
        params.tensors.iter().map(|t| ArrayD::zeros(t.value.raw_dim())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    cfg: NetConfig,
    layout: Layout,
    params: NetParams,
}

// the layout is a function of the config
impl PartialEq for EmbeddingNet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl EmbeddingNet {
    /// Glorot-uniform weights and zero biases drawn from `cfg.seed`.
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (layout, tensors) = build_layout(cfg, &mut rng);
        Ok(Self { cfg: cfg.clone(), layout, params: NetParams { tensors, version: fresh_version() } })
    }

    /// Rebuild with stored tensors (names and shapes must match the config).
    pub fn with_tensors(cfg: &NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::new(cfg)?;
        if tensors.len() != net.params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} network tensors, found {}",
                net.params.tensors.len(),
                tensors.len()
            )));
        }
        for (have, want) in tensors.iter().zip(&net.params.tensors) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        net.params = NetParams { tensors, version: fresh_version() };
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetParams {
        &mut self.params
    }

    fn w2(&self, idx: usize) -> ArrayView2<'_, f64> {
        self.params.tensors[idx].value.view().into_dimensionality::<Ix2>().expect("layout")
    }

    fn w1(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.params.tensors[idx].value.view().into_dimensionality::<Ix1>().expect("layout")
    }

    fn w3(&self, idx: usize) -> ArrayView3<'_, f64> {
        self.params.tensors[idx].value.view().into_dimensionality::<Ix3>().expect("layout")
    }

    fn conv(&self, spec: ConvSpec, x: ArrayView2<'_, f64>) -> Array2<f64> {
        conv_forward(x, self.w3(spec.weight), self.w1(spec.bias))
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<(Array1<f64>, ForwardCache)> {
        if features.n_dims() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "features have {} dims, network expects {}",
                features.n_dims(),
                self.cfg.input_dim
            )));
        }
        let mut x = features.view().to_owned();
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            match *layer {
                LayerSpec::Plain(c) => {
                    let out = self.conv(c, x.view()).mapv(f64::tanh);
                    layers.push(LayerCache::Plain { input: x, out: out.clone() });
                    x = out;
                }
                LayerSpec::Residual { conv1, conv2, proj } => {
                    let mid = self.conv(conv1, x.view()).mapv(f64::tanh);
                    let skip = match proj {
                        Some(p) => self.conv(p, x.view()),
                        None => x.clone(),
                    };
                    let out = (self.conv(conv2, mid.view()) + skip).mapv(f64::tanh);
                    layers.push(LayerCache::Residual { input: x, mid, out: out.clone() });
                    x = out;
                }
            }
        }
        let t_len = x.nrows();
        let (att_hidden, weights, pooled) = match self.cfg.pooling {
            PoolingKind::Attentive => {
                let u = x.dot(&self.w2(self.layout.att_w).t()).mapv(f64::tanh);
                let logits = u.dot(&self.w1(self.layout.att_v));
                let (a, pooled) = attentive_pool(x.view(), logits.view());
                (Some(u), a, pooled)
            }
            PoolingKind::Mean => {
                let a = Array1::from_elem(t_len, 1.0 / t_len as f64);
                let pooled = x.mean_axis(Axis(0)).expect("non-empty");
                (None, a, pooled)
            }
        };
        let embedding = self.w2(self.layout.out_w).dot(&pooled) + self.w1(self.layout.out_b);
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network activation".into()));
        }
        let cache = ForwardCache {
            version: self.params.version,
            input_shape: (features.n_frames(), features.n_dims()),
            layers,
            hidden: x,
            att_hidden,
            weights,
            pooled,
        };
        Ok((embedding, cache))
    }

    pub fn embed(&self, features: &FeatureMatrix) -> Result<Array1<f64>> {
        self.forward(features).map(|(e, _)| e)
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView1<'_, f64>) -> Result<NetGrads> {
        if cache.version != self.params.version {
            return Err(Error::InvalidInput("forward cache is stale: parameters changed since forward".into()));
        }
        if upstream.len() != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, embedding has {}",
                upstream.len(),
                self.cfg.embed_dim
            )));
        }
        let mut grads = NetGrads::zeros_like(&self.params);
        let l = &self.layout;

        // output affine
        let d_out_w = upstream
            .to_owned()
            .insert_axis(Axis(1))
            .dot(&cache.pooled.view().insert_axis(Axis(0)));
        grads[l.out_w] += &d_out_w.into_dyn();
        grads[l.out_b] += &upstream.to_owned().into_dyn();
        let d_pooled = self.w2(l.out_w).t().dot(&upstream);

        // pooling
        let h = cache.hidden.view();
        let mut d_h = match (self.cfg.pooling, &cache.att_hidden) {
            (PoolingKind::Attentive, Some(u)) => {
                let (mut d_h, d_logits) = attentive_pool_backward(h, cache.weights.view(), d_pooled.view());
                let d_v = u.t().dot(&d_logits);
                grads[l.att_v] += &d_v.into_dyn();
                // d(pre-tanh) = d_logits ⊗ v ⊙ (1 − u²)
                let v = self.w1(l.att_v);
                let mut d_pre = d_logits.insert_axis(Axis(1)).dot(&v.insert_axis(Axis(0)));
                d_pre.zip_mut_with(u, |g, y| *g *= 1.0 - y * y);
                grads[l.att_w] += &d_pre.t().dot(&h).into_dyn();
                d_h += &d_pre.dot(&self.w2(l.att_w));
                d_h
            }
            _ => {
                let mut d_h = Array2::zeros(h.raw_dim());
                for (t, mut row) in d_h.rows_mut().into_iter().enumerate() {
                    row.assign(&(&d_pooled * cache.weights[t]));
                }
                d_h
            }
        };

        // encoder, last layer first
        for (spec, layer_cache) in l.layers.iter().zip(&cache.layers).rev() {
            d_h = match (spec, layer_cache) {
                (LayerSpec::Plain(c), LayerCache::Plain { input, out }) => {
                    let d_pre = tanh_backward(out, &d_h);
                    self.conv_grad(*c, input.view(), d_pre.view(), &mut grads)
                }
                (LayerSpec::Residual { conv1, conv2, proj }, LayerCache::Residual { input, mid, out }) => {
                    let d_pre2 = tanh_backward(out, &d_h);
                    let d_mid = self.conv_grad(*conv2, mid.view(), d_pre2.view(), &mut grads);
                    let d_pre1 = tanh_backward(mid, &d_mid);
                    let mut d_in = self.conv_grad(*conv1, input.view(), d_pre1.view(), &mut grads);
                    match proj {
                        Some(p) => d_in += &self.conv_grad(*p, input.view(), d_pre2.view(), &mut grads),
                        None => d_in += &d_pre2,
                    }
                    d_in
                }
                _ => return Err(Error::InvalidInput("forward cache does not match network layout".into())),
            };
        }
        if d_h.dim() != cache.input_shape {
            return Err(Error::InvalidInput("forward cache does not match network layout".into()));
        }
        Ok(NetGrads { tensors: grads, d_input: d_h })
    }

    fn conv_grad(&self, spec: ConvSpec, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, g: &mut [ArrayD<f64>]) -> Array2<f64> {
        let mut dw: Array3<f64> = Array3::zeros(self.w3(spec.weight).raw_dim());
        let mut db: Array1<f64> = Array1::zeros(dy.ncols());
        let dx = conv_backward(x, self.w3(spec.weight), dy, &mut dw, &mut db);
        debug_assert_eq!(dw.shape()[0], spec.kernel);
        g[spec.weight] += &dw.into_dyn();
        g[spec.bias] += &db.into_dyn();
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn small_cfg(encoder: EncoderKind, pooling: PoolingKind) -> NetConfig {
        NetConfig {
            encoder,
            input_dim: 4,
            hidden_dims: vec![6, 5],
            embed_dim: 3,
            pooling,
            attention_dim: 4,
            kernel: 3,
            seed: 9,
        }
    }

    fn random_features(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_fn((t, d), |_| rng.sample::<f64, _>(StandardNormal))).unwrap()
    }

    #[test]
    fn identical_frames_pool_to_single_frame_encoding() {
        let net = EmbeddingNet::new(&small_cfg(EncoderKind::MlpSmall, PoolingKind::Attentive)).unwrap();
        let one = random_features(1, 4, 1);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| one.frame(0).to_vec()).collect();
        let many = FeatureMatrix::from_rows(&rows).unwrap();
        let (e1, _) = net.forward(&one).unwrap();
        let (e7, cache) = net.forward(&many).unwrap();
        for (a, b) in e1.iter().zip(e7.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cache.attention_weights().iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn mean_pool_single_frame() {
        let net = EmbeddingNet::new(&small_cfg(EncoderKind::ConvSmall, PoolingKind::Mean)).unwrap();
        let (_, cache) = net.forward(&random_features(1, 4, 2)).unwrap();
        assert_eq!(cache.pooled().to_vec(), cache.hidden().row(0).to_vec());
    }

    #[test]
    fn output_shape_and_attention_simplex() {
        for enc in [EncoderKind::MlpSmall, EncoderKind::ConvSmall, EncoderKind::Resnet18Like] {
            let net = EmbeddingNet::new(&small_cfg(enc, PoolingKind::Attentive)).unwrap();
            let (e, cache) = net.forward(&random_features(11, 4, 3)).unwrap();
            assert_eq!(e.len(), 3);
            assert!(e.iter().all(|v| v.is_finite()));
            let w = cache.attention_weights();
            assert!(w.iter().all(|v| *v >= 0.0));
            assert!((w.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = EmbeddingNet::new(&small_cfg(EncoderKind::Resnet18Like, PoolingKind::Attentive)).unwrap();
        let (_, cache) = net.forward(&random_features(5, 4, 4)).unwrap();
        let g = net.backward(&cache, Array1::zeros(3).view()).unwrap();
        assert!(g.tensors.iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(g.d_input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = EmbeddingNet::new(&small_cfg(EncoderKind::MlpSmall, PoolingKind::Attentive)).unwrap();
        let (_, cache) = net.forward(&random_features(5, 4, 5)).unwrap();
        net.params_mut().tensors_mut()[0].value[[0, 0, 0]] += 1.0;
        assert!(net.backward(&cache, Array1::ones(3).view()).is_err());
        let other = EmbeddingNet::new(&small_cfg(EncoderKind::MlpSmall, PoolingKind::Attentive)).unwrap();
        assert!(other.backward(&cache, Array1::ones(3).view()).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = EmbeddingNet::new(&small_cfg(EncoderKind::MlpSmall, PoolingKind::Mean)).unwrap();
        assert!(matches!(net.forward(&random_features(5, 7, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_logit_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let logits = Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal));
        let shifted = &logits + 3.7;
        let (a1, p1) = attentive_pool(h.view(), logits.view());
        let (a2, p2) = attentive_pool(h.view(), shifted.view());
        let d = Array1::from(vec![0.3, -1.0, 2.0]);
        let (dh1, dl1) = attentive_pool_backward(h.view(), a1.view(), d.view());
        let (dh2, dl2) = attentive_pool_backward(h.view(), a2.view(), d.view());
        for (x, y) in p1.iter().zip(&p2).chain(dh1.iter().zip(&dh2)).chain(dl1.iter().zip(&dl2)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = small_cfg(EncoderKind::ConvSmall, PoolingKind::Attentive);
        assert_eq!(EmbeddingNet::new(&cfg).unwrap().params(), EmbeddingNet::new(&cfg).unwrap().params());
        let other = NetConfig { seed: 10, ..cfg.clone() };
        assert_ne!(EmbeddingNet::new(&cfg).unwrap().params(), EmbeddingNet::new(&other).unwrap().params());
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, -1), (1, 5));
        assert_eq!(valid_range(5, 1), (0, 4));
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(1, 1), (0, 0));
    }
}
