mod common;

use common::{numeric_grad, rel_error};
use ndarray::{Array1, Array2};
use ocspoof_core::loss::{
    am_softmax_loss, oc_softmax_loss, softmax_loss, BinaryHeadParams, LabeledBatch, LossOutput, OcHeadParams,
};
use ocspoof_core::net::{EmbeddingNet, EncoderKind, NetConfig, PoolingKind};
use ocspoof_core::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LOSS_TOL: f64 = 1e-5;
const NET_TOL: f64 = 1e-4;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

struct Instance {
    x: Vec<f64>,
    w0: Vec<f64>,
    w1: Vec<f64>,
    labels: Vec<u8>,
    n: usize,
    d: usize,
}

fn instance(seed: u64, n: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_vec(&mut rng, n * d);
    let w0 = normal_vec(&mut rng, d);
    let w1 = normal_vec(&mut rng, d);
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    Instance { x, w0, w1, labels, n, d }
}

fn batch(x: &[f64], labels: &[u8], n: usize, d: usize) -> LabeledBatch {
    LabeledBatch::new(Array2::from_shape_vec((n, d), x.to_vec()).unwrap(), labels.to_vec()).unwrap()
}

/// Checks d/dx, d/dw0 and (for binary heads) d/dw1 of a head loss.
fn check_head(inst: &Instance, binary: bool, eval: impl Fn(&LabeledBatch, &[f64], &[f64]) -> LossOutput) -> f64 {
    let (n, d) = (inst.n, inst.d);
    let out = eval(&batch(&inst.x, &inst.labels, n, d), &inst.w0, &inst.w1);
    let num_x = numeric_grad(&inst.x, |x| eval(&batch(x, &inst.labels, n, d), &inst.w0, &inst.w1).loss);
    let num_w0 = numeric_grad(&inst.w0, |w| eval(&batch(&inst.x, &inst.labels, n, d), w, &inst.w1).loss);
    let mut worst = rel_error(out.d_embeddings.as_slice().unwrap(), &num_x)
        .max(rel_error(out.d_w0.as_slice().unwrap(), &num_w0));
    if binary {
        let num_w1 = numeric_grad(&inst.w1, |w| eval(&batch(&inst.x, &inst.labels, n, d), &inst.w0, w).loss);
        worst = worst.max(rel_error(out.d_w1.as_ref().unwrap().as_slice().unwrap(), &num_w1));
    } else {
        assert!(out.d_w1.is_none());
    }
    worst
}

fn binary(w0: &[f64], w1: &[f64]) -> BinaryHeadParams {
    BinaryHeadParams::new(Array1::from(w0.to_vec()), Array1::from(w1.to_vec()), 20.0, 0.9).unwrap()
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed, 8, 16);
        let err = check_head(&inst, true, |b, w0, w1| softmax_loss(b, &binary(w0, w1)).unwrap());
        assert!(err <= LOSS_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn am_softmax_gradients_match_finite_differences() {
    for seed in 0..100 {
        let inst = instance(1000 + seed, 8, 16);
        let err = check_head(&inst, true, |b, w0, w1| am_softmax_loss(b, &binary(w0, w1)).unwrap());
        assert!(err <= LOSS_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn oc_softmax_gradients_match_finite_differences() {
    for seed in 0..100 {
        let inst = instance(2000 + seed, 8, 16);
        let err = check_head(&inst, false, |b, w0, _| {
            oc_softmax_loss(b, &OcHeadParams::new(Array1::from(w0.to_vec()), 20.0, 0.9, 0.2).unwrap()).unwrap()
        });
        assert!(err <= LOSS_TOL, "seed {seed}: {err:e}");
    }
}

fn net_cfg(encoder: EncoderKind, pooling: PoolingKind, seed: u64) -> NetConfig {
    NetConfig {
        encoder,
        input_dim: 4,
        hidden_dims: vec![8, 6],
        embed_dim: 5,
        pooling,
        attention_dim: 4,
        kernel: 3,
        seed,
    }
}

/// Worst relative error over every parameter tensor and the input features
/// for the scalar objective `cᵀ embed(x)`.
fn check_net(cfg: &NetConfig, t_len: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let feats = normal_vec(&mut rng, t_len * cfg.input_dim);
    let upstream = Array1::from(normal_vec(&mut rng, cfg.embed_dim));
    let fm = |v: &[f64]| FeatureMatrix::new(Array2::from_shape_vec((t_len, cfg.input_dim), v.to_vec()).unwrap()).unwrap();

    let net = EmbeddingNet::new(cfg).unwrap();
    let (_, cache) = net.forward(&fm(&feats)).unwrap();
    let grads = net.backward(&cache, upstream.view()).unwrap();

    let objective = |net: &EmbeddingNet, x: &[f64]| net.embed(&fm(x)).unwrap().dot(&upstream);
    let mut worst = rel_error(
        grads.d_input.as_slice().unwrap(),
        &numeric_grad(&feats, |x| objective(&net, x)),
    );
    for (idx, analytic) in grads.tensors.iter().enumerate() {
        let base = net.params().tensors()[idx].value.as_slice().unwrap().to_vec();
        let mut probe = net.clone();
        let numeric = numeric_grad(&base, |p| {
            probe.params_mut().tensors_mut()[idx].value.as_slice_mut().unwrap().copy_from_slice(p);
            objective(&probe, &feats)
        });
        let err = rel_error(analytic.as_slice().unwrap(), &numeric);
        assert!(err.is_finite(), "{}", net.params().tensors()[idx].name);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn mlp_attentive_network_gradients() {
    for seed in 0..100 {
        let err = check_net(&net_cfg(EncoderKind::MlpSmall, PoolingKind::Attentive, seed), 5, seed);
        assert!(err <= NET_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn conv_and_residual_network_gradients() {
    for seed in 0..20 {
        for enc in [EncoderKind::ConvSmall, EncoderKind::Resnet18Like] {
            for pooling in [PoolingKind::Attentive, PoolingKind::Mean] {
                let err = check_net(&net_cfg(enc, pooling, seed), 5, seed);
                assert!(err <= NET_TOL, "{enc:?}/{pooling:?} seed {seed}: {err:e}");
            }
        }
    }
}

#[test]
fn single_frame_network_gradients() {
    for enc in [EncoderKind::MlpSmall, EncoderKind::ConvSmall, EncoderKind::Resnet18Like] {
        let err = check_net(&net_cfg(enc, PoolingKind::Attentive, 3), 1, 3);
        assert!(err <= NET_TOL, "{enc:?}: {err:e}");
    }
}

#[test]
fn end_to_end_loss_to_features() {
    // OC-Softmax over a batch of three utterances, differentiated back to
    // the frames of the first one.
    let cfg = net_cfg(EncoderKind::MlpSmall, PoolingKind::Attentive, 77);
    let net = EmbeddingNet::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let utts: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut rng, 5 * 4)).collect();
    let labels = vec![0u8, 1, 0];
    let head = OcHeadParams::new(Array1::from(normal_vec(&mut rng, 5)), 20.0, 0.9, 0.2).unwrap();
    let fm = |v: &[f64]| FeatureMatrix::new(Array2::from_shape_vec((5, 4), v.to_vec()).unwrap()).unwrap();

    let loss_of = |first: &[f64]| {
        let mut emb = Array2::zeros((3, 5));
        for (i, u) in utts.iter().enumerate() {
            let x = if i == 0 { first } else { u.as_slice() };
            emb.row_mut(i).assign(&net.embed(&fm(x)).unwrap());
        }
        oc_softmax_loss(&LabeledBatch::new(emb, labels.clone()).unwrap(), &head).unwrap()
    };
    let out = loss_of(&utts[0]);
    let (_, cache) = net.forward(&fm(&utts[0])).unwrap();
    let grads = net.backward(&cache, out.d_embeddings.row(0)).unwrap();
    let numeric = numeric_grad(&utts[0], |x| loss_of(x).loss);
    let err = rel_error(grads.d_input.as_slice().unwrap(), &numeric);
    assert!(err <= NET_TOL, "{err:e}");
}
