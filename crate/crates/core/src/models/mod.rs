//! The two classifiers. Both map a batch of padded id sequences to four
//! logit matrices, one per hierarchy level, from a shared trunk.

mod lstm;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::vocab::PAD;

pub use lstm::{lstm_cell_step, LstmCellWeights, LstmState};
pub use transformer::attention;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    BiLstm,
    Transformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::BiLstm => "bilstm",
            Arch::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Arch::BiLstm),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::Invalid(format!(
                "unknown model `{s}` (expected bilstm or transformer)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmLayer {
    pub units: usize,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Hidden state at position 0.
    First,
    /// Mean over non-PAD positions.
    Mean,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::First => "first",
            Pooling::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Pooling::First),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Invalid(format!("unknown pooling `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub ff_dim: usize,
    pub num_blocks: usize,
    pub pooling: Pooling,
    /// Learned positional embeddings. Off only for ablations.
    pub positional: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 4,
            d_model: 64,
            d_k: 16,
            ff_dim: 128,
            num_blocks: 2,
            pooling: Pooling::First,
            positional: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub spatial_dropout: f64,
    pub lstm_layers: Vec<LstmLayer>,
    pub attention: AttentionConfig,
    pub head_dropout: f64,
    /// Class counts for segment, category, subcategory, product.
    pub label_sizes: [usize; 4],
}

impl ModelConfig {
    /// Embedding 100, spatial dropout 0.2, layers of 100 and 200 units with
    /// dropout 0.2.
    pub fn bilstm(vocab_size: usize, label_sizes: [usize; 4]) -> Self {
        Self {
            arch: Arch::BiLstm,
            vocab_size,
            embed_dim: 100,
            max_len: crate::vocab::DEFAULT_MAX_LEN,
            spatial_dropout: 0.2,
            lstm_layers: vec![
                LstmLayer {
                    units: 100,
                    dropout: 0.2,
                },
                LstmLayer {
                    units: 200,
                    dropout: 0.2,
                },
            ],
            attention: AttentionConfig::default(),
            head_dropout: 0.0,
            label_sizes,
        }
    }

    /// Two blocks, four heads, d_model 64, feed-forward 128, dropout 0.5
    /// before the heads.
    pub fn transformer(vocab_size: usize, label_sizes: [usize; 4]) -> Self {
        let attention = AttentionConfig::default();
        Self {
            arch: Arch::Transformer,
            vocab_size,
            embed_dim: attention.d_model,
            max_len: crate::vocab::DEFAULT_MAX_LEN,
            spatial_dropout: 0.0,
            lstm_layers: Vec::new(),
            attention,
            head_dropout: 0.5,
            label_sizes,
        }
    }

    pub fn for_arch(arch: Arch, vocab_size: usize, label_sizes: [usize; 4]) -> Self {
        match arch {
            Arch::BiLstm => Self::bilstm(vocab_size, label_sizes),
            Arch::Transformer => Self::transformer(vocab_size, label_sizes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |key: &str, r: f64| {
            if (0.0..1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::config(key, format!("dropout {r} not in [0, 1)")))
            }
        };
        let positive = |key: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(Error::config(key, "must be > 0"))
            }
        };
        positive("model.vocab_size", self.vocab_size)?;
        positive("model.embed_dim", self.embed_dim)?;
        positive("model.max_len", self.max_len)?;
        rate("model.spatial_dropout", self.spatial_dropout)?;
        rate("model.head_dropout", self.head_dropout)?;
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "needs room for PAD and UNK"));
        }
        for (i, &n) in self.label_sizes.iter().enumerate() {
            positive(["labels.segment", "labels.category", "labels.subcategory", "labels.product"][i], n)?;
        }
        match self.arch {
            Arch::BiLstm => {
                if self.lstm_layers.is_empty() {
                    return Err(Error::config("model.lstm_layers", "at least one layer"));
                }
                for l in &self.lstm_layers {
                    positive("model.lstm_layers", l.units)?;
                    rate("model.lstm_layers", l.dropout)?;
                }
            }
            Arch::Transformer => {
                let a = &self.attention;
                positive("attention.num_heads", a.num_heads)?;
                positive("attention.d_model", a.d_model)?;
                positive("attention.d_k", a.d_k)?;
                positive("attention.ff_dim", a.ff_dim)?;
                positive("attention.num_blocks", a.num_blocks)?;
                if self.embed_dim != a.d_model {
                    return Err(Error::config(
                        "model.embed_dim",
                        format!("must equal attention.d_model ({})", a.d_model),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the shared representation fed to the heads.
    pub fn trunk_dim(&self) -> usize {
        match self.arch {
            Arch::BiLstm => 2 * self.lstm_layers.last().map_or(0, |l| l.units),
            Arch::Transformer => self.attention.d_model,
        }
    }
}

pub const EMBEDDING_PARAM: &str = "emb";
pub const HEAD_NAMES: [&str; 4] = ["segment", "category", "subcategory", "product"];

/// Uniform(±bound) with `bound = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[rows, cols], glorot_bound(rows, cols), rng)
}

/// Fresh parameters for `cfg`, deterministic per seed. Insertion order is
/// fixed and is also the checkpoint order.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut emb = uniform(&[cfg.vocab_size, cfg.embed_dim], crate::embedding_io::OOV_INIT, &mut rng);
    emb.data_mut()[..cfg.embed_dim].iter_mut().for_each(|v| *v = 0.0);
    store.add(EMBEDDING_PARAM, emb);
    match cfg.arch {
        Arch::BiLstm => lstm::init(cfg, &mut store, &mut rng),
        Arch::Transformer => transformer::init(cfg, &mut store, &mut rng),
    }
    let trunk = cfg.trunk_dim();
    for (name, &n) in HEAD_NAMES.iter().zip(&cfg.label_sizes) {
        store.add(format!("head.{name}.w"), glorot(trunk, n, &mut rng));
        store.add(format!("head.{name}.b"), Tensor::zeros(&[n]));
    }
    Ok(store)
}

/// Overwrites the embedding table, e.g. with pre-trained vectors.
pub fn set_embeddings(store: &mut ParamStore, weights: Tensor) -> Result<()> {
    let id = param_id(store, EMBEDDING_PARAM)?;
    store.set_value(id, weights)
}

pub(crate) fn param_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

pub(crate) fn param<'a>(g: &mut Graph<'a>, store: &'a ParamStore, name: &str) -> Result<NodeId> {
    Ok(g.param(store, param_id(store, name)?))
}

/// Number of tokens before the trailing PAD run.
pub fn sequence_length(ids: &[usize]) -> usize {
    ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1)
}

/// Affine head `x · w + b` for every level.
fn heads<'a>(g: &mut Graph<'a>, store: &'a ParamStore, rep: NodeId) -> Result<[NodeId; 4]> {
    let mut out = [rep; 4];
    for (slot, name) in out.iter_mut().zip(HEAD_NAMES) {
        let w = param(g, store, &format!("head.{name}.w"))?;
        let b = param(g, store, &format!("head.{name}.b"))?;
        let z = g.matmul(rep, w)?;
        *slot = g.add(z, b)?;
    }
    Ok(out)
}

/// Four `(batch, n_level)` logit nodes for a batch of padded id rows.
/// `dropout` carries the rng for training-mode dropout; `None` is inference.
pub fn forward<'a>(
    cfg: &ModelConfig,
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &[Vec<usize>],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<[NodeId; 4]> {
    if ids.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let width = ids[0].len();
    if let Some(bad) = ids.iter().find(|r| r.len() != width) {
        return Err(Error::Shape {
            op: "batch",
            lhs: vec![ids.len(), width],
            rhs: vec![bad.len()],
        });
    }
    if let Some(&id) = ids.iter().flatten().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange {
            index: id,
            bound: cfg.vocab_size,
        });
    }
    let rep = match cfg.arch {
        Arch::BiLstm => lstm::trunk(cfg, g, store, ids, dropout.as_deref_mut())?,
        Arch::Transformer => transformer::trunk(cfg, g, store, ids, dropout.as_deref_mut())?,
    };
    let rep = match dropout {
        Some(rng) if cfg.head_dropout > 0.0 => {
            let mask = crate::autodiff::dropout_mask(g.shape(rep), cfg.head_dropout, rng)?;
            g.mask_mul(rep, &mask)?
        }
        _ => rep,
    };
    heads(g, store, rep)
}

/// Config plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Inference-mode logits, one row per input sequence, per head.
    pub fn logits(&self, ids: &[Vec<usize>]) -> Result<[Vec<Vec<f64>>; 4]> {
        let mut g = Graph::inference();
        let out = forward(&self.config, &mut g, &self.params, ids, None)?;
        Ok(out.map(|n| {
            let t = g.value(n);
            (0..ids.len()).map(|r| t.row(r).to_vec()).collect()
        }))
    }
}
