//! Small transformer encoder: token + position embeddings, post-norm
//! blocks of multi-head self-attention and a GELU feed-forward layer, then
//! a pooled vector for the heads.
//!
//! The key projection has no bias. It would add the same amount to every
//! score of a query, which the softmax cancels.

use rand_chacha::ChaCha8Rng;

use super::{glorot, param, sequence_length, uniform, ModelConfig, Pooling, EMBEDDING_PARAM};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::embedding_io::OOV_INIT;
use crate::error::{Error, Result};
use crate::vocab::PAD;

pub const POSITION_PARAM: &str = "pos";
const LN_EPS: f64 = 1e-5;

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for `Q: n_q × d_k`, `K: n_k × d_k`,
/// `V: n_k × d_v`. Keys with `key_mask[j] == false` get zero weight.
pub fn attention(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let (_, dq) = g.value(q).dims2("attention")?;
    let (nk, dk) = g.value(k).dims2("attention")?;
    let (nv, _) = g.value(v).dims2("attention")?;
    if dq != dk {
        return Err(Error::Shape {
            op: "attention (d_k)",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    if nk != nv {
        return Err(Error::Shape {
            op: "attention (keys vs values)",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt())?;
    let w = g.softmax_masked(s, 1, key_mask)?;
    g.matmul(w, v)
}

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let a = &cfg.attention;
    let d = a.d_model;
    let inner = a.num_heads * a.d_k;
    if a.positional {
        store.add(POSITION_PARAM, uniform(&[cfg.max_len, d], OOV_INIT, rng));
    }
    for blk in 0..a.num_blocks {
        let p = |n: &str| format!("t{blk}.{n}");
        store.add(p("w_q"), glorot(d, inner, rng));
        store.add(p("b_q"), Tensor::zeros(&[inner]));
        store.add(p("w_k"), glorot(d, inner, rng));
        store.add(p("w_v"), glorot(d, inner, rng));
        store.add(p("b_v"), Tensor::zeros(&[inner]));
        store.add(p("w_o"), glorot(inner, d, rng));
        store.add(p("b_o"), Tensor::zeros(&[d]));
        store.add(p("ln1.g"), Tensor::full(&[d], 1.0));
        store.add(p("ln1.b"), Tensor::zeros(&[d]));
        store.add(p("ff1.w"), glorot(d, a.ff_dim, rng));
        store.add(p("ff1.b"), Tensor::zeros(&[a.ff_dim]));
        store.add(p("ff2.w"), glorot(a.ff_dim, d, rng));
        store.add(p("ff2.b"), Tensor::zeros(&[d]));
        store.add(p("ln2.g"), Tensor::full(&[d], 1.0));
        store.add(p("ln2.b"), Tensor::zeros(&[d]));
    }
}

fn affine<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let w = param(g, store, w)?;
    let b = param(g, store, b)?;
    let z = g.matmul(x, w)?;
    g.add(z, b)
}

fn add_norm<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId, y: NodeId, prefix: &str) -> Result<NodeId> {
    let s = g.add(x, y)?;
    let n = g.layer_norm(s, LN_EPS)?;
    let gain = param(g, store, &format!("{prefix}.g"))?;
    let bias = param(g, store, &format!("{prefix}.b"))?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

/// `batch × d_model` pooled representation.
pub(super) fn trunk<'a>(
    cfg: &ModelConfig,
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &[Vec<usize>],
    _rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let a = &cfg.attention;
    let b = ids.len();
    let lens: Vec<usize> = ids.iter().map(|r| sequence_length(r)).collect();
    let t = lens.iter().copied().max().unwrap_or(0).max(1);
    if t > cfg.max_len {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: cfg.max_len,
        });
    }
    // Rows are sequence-major: row `s * t + j` is position `j` of sequence `s`.
    let flat: Vec<usize> = ids.iter().flat_map(|r| r[..t].iter().copied()).collect();
    let emb = param(g, store, EMBEDDING_PARAM)?;
    let mut x = g.embedding(emb, &flat, true)?;
    if a.positional {
        let pos = param(g, store, POSITION_PARAM)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let p = g.embedding(pos, &positions, false)?;
        x = g.add(x, p)?;
    }
    let masks: Vec<Vec<bool>> = ids.iter().map(|r| r[..t].iter().map(|&i| i != PAD).collect()).collect();

    for blk in 0..a.num_blocks {
        let p = |n: &str| format!("t{blk}.{n}");
        let q = affine(g, store, x, &p("w_q"), &p("b_q"))?;
        let w_k = param(g, store, &p("w_k"))?;
        let k = g.matmul(x, w_k)?;
        let v = affine(g, store, x, &p("w_v"), &p("b_v"))?;
        let mut per_seq = Vec::with_capacity(b);
        for (s, mask) in masks.iter().enumerate() {
            let qs = g.slice(q, 0, s * t, t)?;
            let ks = g.slice(k, 0, s * t, t)?;
            let vs = g.slice(v, 0, s * t, t)?;
            let mut heads = Vec::with_capacity(a.num_heads);
            for h in 0..a.num_heads {
                let qh = g.slice(qs, 1, h * a.d_k, a.d_k)?;
                let kh = g.slice(ks, 1, h * a.d_k, a.d_k)?;
                let vh = g.slice(vs, 1, h * a.d_k, a.d_k)?;
                heads.push(attention(g, qh, kh, vh, Some(mask))?);
            }
            per_seq.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        let att = if per_seq.len() == 1 { per_seq[0] } else { g.concat(&per_seq, 0)? };
        let att = affine(g, store, att, &p("w_o"), &p("b_o"))?;
        x = add_norm(g, store, x, att, &p("ln1"))?;
        let f = affine(g, store, x, &p("ff1.w"), &p("ff1.b"))?;
        let f = g.gelu(f)?;
        let f = affine(g, store, f, &p("ff2.w"), &p("ff2.b"))?;
        x = add_norm(g, store, x, f, &p("ln2"))?;
    }

    let mut pool = vec![0.0; b * b * t];
    for (s, &len) in lens.iter().enumerate() {
        let row = &mut pool[s * b * t..(s + 1) * b * t];
        match a.pooling {
            Pooling::First => row[s * t] = 1.0,
            Pooling::Mean => {
                for j in 0..len {
                    row[s * t + j] = 1.0 / len as f64;
                }
            }
        }
    }
    let pool = g.constant(Tensor::matrix(b, b * t, pool));
    g.matmul(pool, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.5], &[0.0, 0.0]]));
        let k = g.constant(Tensor::from_rows(&[&[1.0, 4.0]]));
        let v = g.constant(Tensor::from_rows(&[&[7.0, -3.0, 0.25]]));
        let o = attention(&mut g, q, k, v, None).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(o).row(r), [7.0, -3.0, 0.25]);
        }
    }

    #[test]
    fn two_keys_hand_case() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0]]));
        let k = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let v = g.constant(Tensor::from_rows(&[&[2.0], &[4.0]]));
        let o = attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(o).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_change_nothing() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[0.2, 0.7]]));
        let k = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.5, -0.5]]));
        let v = g.constant(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let base = attention(&mut g, q, k, v, None).unwrap();
        let k2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.5, -0.5], &[9.0, 9.0]]));
        let v2 = g.constant(Tensor::from_rows(&[&[1.0], &[3.0], &[100.0]]));
        let masked = attention(&mut g, q, k2, v2, Some(&[true, true, false])).unwrap();
        assert_eq!(g.value(base).data(), g.value(masked).data());
    }

    #[test]
    fn key_width_mismatch_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let k = g.constant(Tensor::zeros(&[1, 3]));
        let v = g.constant(Tensor::zeros(&[1, 1]));
        assert!(matches!(attention(&mut g, q, k, v, None), Err(Error::Shape { .. })));
    }
}
