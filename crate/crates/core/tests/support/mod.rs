//! Shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use prodcat::autodiff::{gradient_check, gradient_check_params, Graph, NodeId, Tensor};
use prodcat::error::Result;
use prodcat::losses_metrics::{multi_head_loss, LossConfig};
use prodcat::models::{forward, init_parameters, Arch, AttentionConfig, LstmLayer, ModelConfig, Pooling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-6;
/// Step for whole-model checks. At 1e-5 the rounding noise in a loss of
/// order 1 (about 1e-11 per difference) swamps coordinates whose gradient
/// is below 1e-7; 1e-4 keeps both noise and truncation under the bound.
pub const MODEL_EPS: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random weighting so that
/// every output coordinate matters.
fn weighted_sum(g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
    let w = random(g.shape(x), 999);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p, None)
}

pub fn op_error(point: Tensor, f: impl Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>) -> f64 {
    gradient_check(
        |g, x| {
            let y = f(g, x)?;
            weighted_sum(g, y)
        },
        &point,
        EPS,
    )
    .unwrap()
}

/// Relative error of every op check, by name.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let x = random(&[3, 4], 1);
    push("sigmoid", op_error(x.clone(), |g, x| g.sigmoid(x)));
    push("tanh", op_error(x.clone(), |g, x| g.tanh(x)));
    push("gelu", op_error(x.clone(), |g, x| g.gelu(x)));
    push("scale", op_error(x.clone(), |g, x| g.scale(x, -2.5)));
    // Shift away from zero so no coordinate sits at the kink.
    let shifted = Tensor::new(
        vec![3, 4],
        x.data().iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v }).collect(),
    )
    .unwrap();
    push("relu", op_error(shifted, |g, x| g.relu(x)));
    push("mul", op_error(x.clone(), |g, x| g.mul(x, x)));
    push("add", op_error(x, |g, x| g.add(x, x)));

    let a = random(&[3, 4], 2);
    let b = random(&[4], 3);
    let m = random(&[4, 2], 4);
    push("add lhs", op_error(a.clone(), |g, x| {
        let c = g.constant(b.clone());
        g.add(x, c)
    }));
    push("add broadcast rhs", op_error(b.clone(), |g, x| {
        let c = g.constant(a.clone());
        g.add(c, x)
    }));
    push("mul broadcast rhs", op_error(b, |g, x| {
        let c = g.constant(a.clone());
        g.mul(c, x)
    }));
    push("matmul lhs", op_error(a.clone(), |g, x| {
        let c = g.constant(m.clone());
        g.matmul(x, c)
    }));
    push("matmul rhs", op_error(m, |g, x| {
        let c = g.constant(a.clone());
        g.matmul(c, x)
    }));

    let x = random(&[3, 4], 5);
    push("transpose", op_error(x.clone(), |g, x| g.transpose(x)));
    push("slice rows", op_error(x.clone(), |g, x| g.slice(x, 0, 1, 2)));
    push("slice cols", op_error(x.clone(), |g, x| g.slice(x, 1, 1, 3)));
    push("concat cols", op_error(x.clone(), |g, x| {
        let c = g.constant(random(&[3, 2], 6));
        g.concat(&[c, x, x], 1)
    }));
    push("concat rows", op_error(x.clone(), |g, x| g.concat(&[x, x], 0)));
    push("select", op_error(x.clone(), |g, x| {
        let y = g.scale(x, 3.0)?;
        g.select(&[true, false, true], x, y)
    }));
    push("mask_mul", op_error(x.clone(), |g, x| g.mask_mul(x, &random(&[3, 4], 7))));
    push("dropout", op_error(x.clone(), |g, x| g.dropout(x, 0.4, 11, true)));
    push("embedding", op_error(x, |g, x| g.embedding(x, &[2, 0, 2, 1], true)));

    let x = random(&[2, 3, 4], 8);
    for axis in 0..3 {
        push(&format!("sum axis {axis}"), op_error(x.clone(), move |g, x| g.sum(x, Some(axis))));
        push(&format!("mean axis {axis}"), op_error(x.clone(), move |g, x| g.mean(x, Some(axis))));
        push(&format!("softmax axis {axis}"), op_error(x.clone(), move |g, x| g.softmax(x, axis)));
    }
    push("sum all", op_error(x.clone(), |g, x| g.sum(x, None)));
    push("mean all", op_error(x, |g, x| g.mean(x, None)));
    let m = random(&[3, 5], 9);
    push("masked softmax", op_error(m.clone(), |g, x| {
        g.softmax_masked(x, 1, Some(&[true, false, true, true, false]))
    }));
    push("layer_norm", op_error(m.clone(), |g, x| g.layer_norm(x, 1e-5)));
    push("focal", op_error(m, |g, x| g.focal_loss(x, &[4, 0, 2], 2.0, 0.25)));
    out
}

/// Vocabulary 12, sequence length 7, every width at most 8, dropout off.
pub fn micro(arch: Arch) -> ModelConfig {
    let mut cfg = ModelConfig::for_arch(arch, 12, [2, 3, 3, 4]);
    cfg.max_len = 7;
    cfg.spatial_dropout = 0.0;
    cfg.head_dropout = 0.0;
    match arch {
        Arch::BiLstm => {
            cfg.embed_dim = 4;
            cfg.lstm_layers = vec![
                LstmLayer { units: 3, dropout: 0.0 },
                LstmLayer { units: 4, dropout: 0.0 },
            ];
        }
        Arch::Transformer => {
            cfg.embed_dim = 8;
            cfg.attention = AttentionConfig {
                num_heads: 2,
                d_model: 8,
                d_k: 4,
                ff_dim: 8,
                num_blocks: 2,
                pooling: Pooling::First,
                positional: true,
            };
        }
    }
    cfg
}

/// Worst relative error over a few random points with all parameters drawn
/// from uniform(-1, 1), so no gradient is vanishingly small by construction.
pub fn model_error(cfg: &ModelConfig, loss: &LossConfig) -> f64 {
    (0..3).map(|seed| model_error_at(cfg, loss, seed)).fold(0.0, f64::max)
}

fn model_error_at(cfg: &ModelConfig, loss: &LossConfig, seed: u64) -> f64 {
    let mut store = init_parameters(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let ids = vec![
        vec![2, 5, 7, 11, 3, 0, 0],
        vec![4, 1, 9, 0, 0, 0, 0],
        vec![6, 8, 10, 2, 3, 4, 5],
    ];
    let labels = [[0, 2, 1, 3], [1, 0, 2, 0], [1, 1, 0, 2]];
    gradient_check_params(
        &mut store,
        |g, store| {
            let z = forward(cfg, g, store, &ids, None)?;
            multi_head_loss(g, z, &labels, loss, 3.0)
        },
        MODEL_EPS,
    )
    .unwrap()
}

/// Whole-model checks: BiLSTM with focal and cross-entropy loss, the
/// transformer with both poolings.
pub fn model_errors() -> Vec<(String, f64)> {
    let mut out = vec![
        (
            "bilstm focal".to_string(),
            model_error(&micro(Arch::BiLstm), &LossConfig::focal([2.0; 4], 0.25)),
        ),
        (
            "bilstm cross-entropy".to_string(),
            model_error(&micro(Arch::BiLstm), &LossConfig::cross_entropy()),
        ),
    ];
    for pooling in [Pooling::First, Pooling::Mean] {
        let mut cfg = micro(Arch::Transformer);
        cfg.attention.pooling = pooling;
        out.push((
            format!("transformer {} pooling", pooling.name()),
            model_error(&cfg, &LossConfig::focal([2.0, 1.0, 1.0, 2.0], 1.0)),
        ));
    }
    out
}

/// Scalar peephole LSTM step written out longhand:
/// `[i, f, o, c, h]` for weights `w = [w_xi, w_hi, w_ci, b_i, w_xf, w_hf,
/// w_cf, b_f, w_xc, w_hc, b_c, w_xo, w_ho, w_co, b_o]`.
pub fn scalar_lstm(w: &[f64; 15], x: f64, h: f64, c: f64) -> [f64; 5] {
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let i = s(w[0] * x + w[1] * h + w[2] * c + w[3]);
    let f = s(w[4] * x + w[5] * h + w[6] * c + w[7]);
    let c_new = f * c + i * (w[8] * x + w[9] * h + w[10]).tanh();
    let o = s(w[11] * x + w[12] * h + w[13] * c_new + w[14]);
    [i, f, o, c_new, o * c_new.tanh()]
}

/// Adam on one scalar, written out longhand. Returns the parameter after
/// each step.
pub fn scalar_adam(p0: f64, grads: &[f64], lr: f64, decay: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * decay * p;
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

/// Macro-F1 from an explicit confusion matrix.
pub fn brute_force_f1(truth: &[usize], pred: &[usize], n: usize) -> f64 {
    let mut cm = vec![vec![0usize; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        cm[t][p] += 1;
    }
    let mut sum = 0.0;
    for k in 0..n {
        let tp = cm[k][k] as f64;
        let col: usize = (0..n).map(|r| cm[r][k]).sum();
        let row: usize = cm[k].iter().sum();
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = if row == 0 { 0.0 } else { tp / row as f64 };
        sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    sum / n as f64
}
