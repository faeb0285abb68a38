//! Peephole LSTM cell and the stacked bidirectional trunk.
//!
//! Per step, with `⊙` elementwise and peephole weights stored as vectors:
//!
//! ```text
//! i = σ(x W_xi + h W_hi + c_prev ⊙ w_ci + b_i)
//! f = σ(x W_xf + h W_hf + c_prev ⊙ w_cf + b_f)
//! c = f ⊙ c_prev + i ⊙ tanh(x W_xc + h W_hc + b_c)
//! o = σ(x W_xo + h W_ho + c ⊙ w_co + b_o)
//! h = o ⊙ tanh(c)
//! ```
//!
//! The output gate reads the updated cell `c`, not `c_prev`.

use rand_chacha::ChaCha8Rng;

use super::{glorot, glorot_bound, param, sequence_length, uniform, ModelConfig, EMBEDDING_PARAM};
use crate::autodiff::{dropout_mask, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Weights of one cell. Input matrices are `input × hidden`, recurrent
/// matrices `hidden × hidden`, peepholes and biases length `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellWeights {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_ci: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_cf: Tensor,
    pub b_f: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_co: Tensor,
    pub b_o: Tensor,
}

const FIELDS: [&str; 15] = [
    "w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f", "w_xc", "w_hc", "b_c", "w_xo",
    "w_ho", "w_co", "b_o",
];

impl LstmCellWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let x = || Tensor::zeros(&[input, hidden]);
        let h = || Tensor::zeros(&[hidden, hidden]);
        let v = || Tensor::zeros(&[hidden]);
        Self {
            w_xi: x(),
            w_hi: h(),
            w_ci: v(),
            b_i: v(),
            w_xf: x(),
            w_hf: h(),
            w_cf: v(),
            b_f: v(),
            w_xc: x(),
            w_hc: h(),
            b_c: v(),
            w_xo: x(),
            w_ho: h(),
            w_co: v(),
            b_o: v(),
        }
    }

    /// Glorot-uniform matrices, peepholes uniform within the recurrent
    /// bound, forget bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let peep = glorot_bound(hidden, hidden);
        let mut w = Self::zeros(input, hidden);
        w.w_xi = glorot(input, hidden, rng);
        w.w_hi = glorot(hidden, hidden, rng);
        w.w_ci = uniform(&[hidden], peep, rng);
        w.w_xf = glorot(input, hidden, rng);
        w.w_hf = glorot(hidden, hidden, rng);
        w.w_cf = uniform(&[hidden], peep, rng);
        w.b_f = Tensor::full(&[hidden], 1.0);
        w.w_xc = glorot(input, hidden, rng);
        w.w_hc = glorot(hidden, hidden, rng);
        w.w_xo = glorot(input, hidden, rng);
        w.w_ho = glorot(hidden, hidden, rng);
        w.w_co = uniform(&[hidden], peep, rng);
        w
    }

    fn fields(&self) -> [&Tensor; 15] {
        [
            &self.w_xi, &self.w_hi, &self.w_ci, &self.b_i, &self.w_xf, &self.w_hf, &self.w_cf,
            &self.b_f, &self.w_xc, &self.w_hc, &self.b_c, &self.w_xo, &self.w_ho, &self.w_co,
            &self.b_o,
        ]
    }

    pub fn add_to(self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in FIELDS.iter().zip(self.fields()) {
            store.add(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| -> Result<Tensor> {
            store
                .by_name(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{prefix}.{n}`")))
        };
        Ok(Self {
            w_xi: get("w_xi")?,
            w_hi: get("w_hi")?,
            w_ci: get("w_ci")?,
            b_i: get("b_i")?,
            w_xf: get("w_xf")?,
            w_hf: get("w_hf")?,
            w_cf: get("w_cf")?,
            b_f: get("b_f")?,
            w_xc: get("w_xc")?,
            w_hc: get("w_hc")?,
            b_c: get("b_c")?,
            w_xo: get("w_xo")?,
            w_ho: get("w_ho")?,
            w_co: get("w_co")?,
            b_o: get("b_o")?,
        })
    }
}

/// Hidden and cell state, each `batch × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// Gate weights fused as `[i | f | c | o]` along the output axis.
struct CellNodes {
    w_x: NodeId,
    w_h: NodeId,
    b: NodeId,
    w_ci: NodeId,
    w_cf: NodeId,
    w_co: NodeId,
    hidden: usize,
}

impl CellNodes {
    fn fuse(g: &mut Graph<'_>, p: [NodeId; 15]) -> Result<Self> {
        let [w_xi, w_hi, w_ci, b_i, w_xf, w_hf, w_cf, b_f, w_xc, w_hc, b_c, w_xo, w_ho, w_co, b_o] = p;
        let hidden = g.shape(w_hi)[0];
        Ok(Self {
            w_x: g.concat(&[w_xi, w_xf, w_xc, w_xo], 1)?,
            w_h: g.concat(&[w_hi, w_hf, w_hc, w_ho], 1)?,
            b: g.concat(&[b_i, b_f, b_c, b_o], 0)?,
            w_ci,
            w_cf,
            w_co,
            hidden,
        })
    }

    fn from_params<'a>(g: &mut Graph<'a>, store: &'a ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = [NodeId::default(); 15];
        for (slot, name) in ids.iter_mut().zip(FIELDS) {
            *slot = param(g, store, &format!("{prefix}.{name}"))?;
        }
        Self::fuse(g, ids)
    }

    /// `x W_x + b` for every row of `x`.
    fn project(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let z = g.matmul(x, self.w_x)?;
        g.add(z, self.b)
    }

    /// One step given the projected input `xw`.
    fn step(&self, g: &mut Graph<'_>, xw: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let n = self.hidden;
        let hw = g.matmul(h, self.w_h)?;
        let z = g.add(xw, hw)?;
        let zi = g.slice(z, 1, 0, n)?;
        let zf = g.slice(z, 1, n, n)?;
        let zc = g.slice(z, 1, 2 * n, n)?;
        let zo = g.slice(z, 1, 3 * n, n)?;

        let pi = g.mul(c, self.w_ci)?;
        let zi = g.add(zi, pi)?;
        let i = g.sigmoid(zi)?;
        let pf = g.mul(c, self.w_cf)?;
        let zf = g.add(zf, pf)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zc)?;

        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;

        let po = g.mul(c_new, self.w_co)?;
        let zo = g.add(zo, po)?;
        let o = g.sigmoid(zo)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// Evaluates one cell step on plain tensors. `x` is `batch × input`.
pub fn lstm_cell_step(w: &LstmCellWeights, x: &Tensor, prev: &LstmState) -> Result<LstmState> {
    let mut g = Graph::inference();
    let mut ids = [NodeId::default(); 15];
    for (slot, t) in ids.iter_mut().zip(w.fields()) {
        *slot = g.constant(t.clone());
    }
    let cell = CellNodes::fuse(&mut g, ids)?;
    let xn = g.constant(x.clone());
    let h = g.constant(prev.h.clone());
    let c = g.constant(prev.c.clone());
    let xw = cell.project(&mut g, xn)?;
    let (h, c) = cell.step(&mut g, xw, h, c)?;
    Ok(LstmState {
        h: g.value(h).clone(),
        c: g.value(c).clone(),
    })
}

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut input = cfg.embed_dim;
    for (l, layer) in cfg.lstm_layers.iter().enumerate() {
        for dir in ["fw", "bw"] {
            LstmCellWeights::init(input, layer.units, rng).add_to(store, &format!("l{l}.{dir}"));
        }
        input = 2 * layer.units;
    }
}

/// Runs one direction over time-major projected inputs `xw`
/// (`(t_max · batch) × 4h`). Rows past a sequence's length leave its
/// state untouched, so trailing PAD never reaches the state. Returns the
/// hidden state after each time index, and the final one.
fn run_direction(
    g: &mut Graph<'_>,
    cell: &CellNodes,
    xw: NodeId,
    lens: &[usize],
    t_max: usize,
    reverse: bool,
) -> Result<(Vec<NodeId>, NodeId)> {
    let b = lens.len();
    let mut h = g.constant(Tensor::zeros(&[b, cell.hidden]));
    let mut c = h;
    let mut outs = vec![h; t_max];
    let order: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };
    for t in order {
        let mask: Vec<bool> = lens.iter().map(|&l| t < l).collect();
        if mask.iter().any(|&m| m) {
            let xs = g.slice(xw, 0, t * b, b)?;
            let (hn, cn) = cell.step(g, xs, h, c)?;
            if mask.iter().all(|&m| m) {
                (h, c) = (hn, cn);
            } else {
                h = g.select(&mask, hn, h)?;
                c = g.select(&mask, cn, c)?;
            }
        }
        outs[t] = h;
    }
    Ok((outs, h))
}

fn apply_dropout(
    g: &mut Graph<'_>,
    x: NodeId,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(g.shape(x), rate, rng)?;
            g.mask_mul(x, &mask)
        }
        _ => Ok(x),
    }
}

/// `batch × 2h` representation: last forward state ++ first backward
/// state of the top layer.
pub(super) fn trunk<'a>(
    cfg: &ModelConfig,
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &[Vec<usize>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let b = ids.len();
    let lens: Vec<usize> = ids.iter().map(|r| sequence_length(r)).collect();
    let t_max = lens.iter().copied().max().unwrap_or(0).max(1);
    let flat: Vec<usize> = (0..t_max).flat_map(|t| ids.iter().map(move |r| r[t])).collect();

    let emb = param(g, store, EMBEDDING_PARAM)?;
    let mut x = g.embedding(emb, &flat, true)?;
    if let Some(rng) = rng.as_deref_mut() {
        if cfg.spatial_dropout > 0.0 {
            // One mask per sequence, shared by all of its time steps.
            let m = dropout_mask(&[b, cfg.embed_dim], cfg.spatial_dropout, rng)?;
            let tiled: Vec<f64> = (0..t_max).flat_map(|_| m.data().iter().copied()).collect();
            let tiled = Tensor::matrix(t_max * b, cfg.embed_dim, tiled);
            x = g.mask_mul(x, &tiled)?;
        }
    }

    let top = cfg.lstm_layers.len() - 1;
    for (l, layer) in cfg.lstm_layers.iter().enumerate() {
        let fw = CellNodes::from_params(g, store, &format!("l{l}.fw"))?;
        let bw = CellNodes::from_params(g, store, &format!("l{l}.bw"))?;
        let xw_f = fw.project(g, x)?;
        let xw_b = bw.project(g, x)?;
        let (outs_f, last_f) = run_direction(g, &fw, xw_f, &lens, t_max, false)?;
        let (outs_b, first_b) = run_direction(g, &bw, xw_b, &lens, t_max, true)?;
        if l == top {
            let rep = g.concat(&[last_f, first_b], 1)?;
            return apply_dropout(g, rep, layer.dropout, rng);
        }
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            steps.push(g.concat(&[outs_f[t], outs_b[t]], 1)?);
        }
        let seq = g.concat(&steps, 0)?;
        x = apply_dropout(g, seq, layer.dropout, rng.as_deref_mut())?;
    }
    unreachable!("validated config has at least one layer")
}
