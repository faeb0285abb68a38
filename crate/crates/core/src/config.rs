//! TOML run configuration. Every key is optional; missing keys fall back
//! to the per-architecture defaults, and command-line flags override the
//! file. Unknown keys are rejected.
//!
//! ```toml
//! seed = 42
//!
//! [norm]
//! min_token_len = 2
//! units = ["g", "kg", "ml", "l"]
//!
//! [split]
//! ratios = [0.7, 0.15, 0.15]
//! stratify_by = "product"
//!
//! [model]
//! embed_dim = 100
//! lstm_units = [100, 200]
//! lstm_dropout = [0.2, 0.2]
//!
//! [train]
//! lr = 1e-5
//! batch_size = 64
//!
//! [focal]
//! gamma = [2, 2, 2, 2]
//! alpha = 0.25
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::corpus::{Level, SplitSpec};
use crate::error::{Error, Result};
use crate::losses_metrics::{LossConfig, LossKind};
use crate::models::{Arch, LstmLayer, ModelConfig, Pooling};
use crate::textnorm::{NormConfig, UnitPatternSet};
use crate::train::{OptimizerKind, TrainConfig};
use crate::vocab::{DEFAULT_MAX_LEN, DEFAULT_MAX_WORDS};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub norm: NormSection,
    pub split: SplitSection,
    pub vocab: VocabSection,
    pub embeddings: EmbeddingSection,
    pub model: ModelSection,
    pub attention: AttentionSection,
    pub train: TrainSection,
    pub focal: FocalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    pub min_token_len: Option<usize>,
    pub units: Option<Vec<String>>,
    pub keep_chars: Option<String>,
    pub stop_singletons: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub stratify_by: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub max_words: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub file: Option<String>,
    pub freeze: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Option<String>,
    pub embed_dim: Option<usize>,
    pub spatial_dropout: Option<f64>,
    pub lstm_units: Option<Vec<usize>>,
    pub lstm_dropout: Option<Vec<f64>>,
    pub head_dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub num_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_k: Option<usize>,
    pub ff_dim: Option<usize>,
    pub num_blocks: Option<usize>,
    pub pooling: Option<String>,
    pub positional: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub optimizer: Option<String>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub loss: Option<String>,
    pub shards: Option<usize>,
    pub retrain_with_val: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalSection {
    pub gamma: Option<Vec<f64>>,
    pub alpha: Option<f64>,
}

/// Pulls the offending key out of a serde message like
/// "unknown field `foo`, expected ...".
fn key_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map_or_else(|| "config".to_string(), str::to_string)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(key_of(&msg), msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn norm_config(&self) -> Result<NormConfig> {
        let n = &self.norm;
        let mut cfg = NormConfig::default();
        if let Some(v) = n.min_token_len {
            cfg.min_token_len = v;
        }
        if let Some(u) = &n.units {
            cfg.units = UnitPatternSet::new(u)?;
        }
        if let Some(k) = &n.keep_chars {
            cfg.keep_chars = k.chars().collect();
        }
        if let Some(s) = &n.stop_singletons {
            if let Some(bad) = s.iter().find(|t| t.is_empty() || t.contains(|c: char| c == ',' || c.is_whitespace())) {
                return Err(Error::config("norm.stop_singletons", format!("invalid token {bad:?}")));
            }
            cfg.stop_singletons = s.iter().cloned().collect();
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let s = &self.split;
        let mut spec = SplitSpec::default();
        if let Some(r) = &s.ratios {
            spec.ratios = <[f64; 3]>::try_from(r.as_slice())
                .map_err(|_| Error::config("split.ratios", "expected three values"))?;
        }
        if let Some(seed) = s.seed.or(self.seed) {
            spec.seed = seed;
        }
        if let Some(l) = &s.stratify_by {
            spec.stratify = l
                .parse::<Level>()
                .map_err(|e| Error::config("split.stratify_by", e.to_string()))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn max_words(&self) -> usize {
        self.vocab.max_words.unwrap_or(DEFAULT_MAX_WORDS)
    }

    pub fn max_len(&self) -> usize {
        self.vocab.max_len.unwrap_or(DEFAULT_MAX_LEN)
    }

    /// `model.arch`, if the file names one.
    pub fn arch(&self) -> Result<Option<Arch>> {
        self.model
            .arch
            .as_deref()
            .map(|a| a.parse().map_err(|e: Error| Error::config("model.arch", e.to_string())))
            .transpose()
    }

    pub fn model_config(&self, arch: Arch, vocab_size: usize, label_sizes: [usize; 4]) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::for_arch(arch, vocab_size, label_sizes);
        cfg.max_len = self.max_len();
        if let Some(v) = m.spatial_dropout {
            cfg.spatial_dropout = v;
        }
        if let Some(v) = m.head_dropout {
            cfg.head_dropout = v;
        }
        match (&m.lstm_units, &m.lstm_dropout) {
            (Some(u), Some(d)) if u.len() != d.len() => {
                return Err(Error::config(
                    "model.lstm_dropout",
                    "needs one rate per entry of model.lstm_units",
                ));
            }
            (Some(u), d) => {
                cfg.lstm_layers = u
                    .iter()
                    .enumerate()
                    .map(|(i, &units)| LstmLayer {
                        units,
                        dropout: d.as_ref().map_or(0.2, |d| d[i]),
                    })
                    .collect();
            }
            (None, Some(d)) => {
                if d.len() != cfg.lstm_layers.len() {
                    return Err(Error::config(
                        "model.lstm_dropout",
                        "needs one rate per layer",
                    ));
                }
                for (l, &r) in cfg.lstm_layers.iter_mut().zip(d) {
                    l.dropout = r;
                }
            }
            (None, None) => {}
        }
        let a = &self.attention;
        let at = &mut cfg.attention;
        if let Some(v) = a.num_heads {
            at.num_heads = v;
        }
        if let Some(v) = a.d_model {
            at.d_model = v;
        }
        if let Some(v) = a.d_k {
            at.d_k = v;
        }
        if let Some(v) = a.ff_dim {
            at.ff_dim = v;
        }
        if let Some(v) = a.num_blocks {
            at.num_blocks = v;
        }
        if let Some(p) = &a.pooling {
            at.pooling = p
                .parse::<Pooling>()
                .map_err(|e| Error::config("attention.pooling", e.to_string()))?;
        }
        if let Some(v) = a.positional {
            at.positional = v;
        }
        cfg.embed_dim = match (m.embed_dim, arch) {
            (Some(v), _) => v,
            (None, Arch::Transformer) => cfg.attention.d_model,
            (None, Arch::BiLstm) => cfg.embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings; `loss` (e.g. from a flag) wins over `train.loss`.
    pub fn train_config(&self, arch: Arch, loss: Option<LossKind>) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig::for_arch(arch);
        if let Some(v) = t.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(o) = &t.optimizer {
            cfg.optimizer.kind = o.parse::<OptimizerKind>()?;
        }
        if let Some(v) = t.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = t.patience {
            cfg.patience = v;
        }
        if let Some(v) = t.shards {
            cfg.shards = v;
        }
        cfg.clip_norm = t.clip_norm.or(cfg.clip_norm);
        if let Some(v) = t.retrain_with_val {
            cfg.retrain_with_val = v;
        }
        if let Some(v) = self.embeddings.freeze {
            cfg.freeze_embeddings = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let kind = match (loss, &t.loss) {
            (Some(k), _) => k,
            (None, Some(s)) => s
                .parse::<LossKind>()
                .map_err(|e| Error::config("train.loss", e.to_string()))?,
            (None, None) => cfg.loss.kind,
        };
        let mut gamma = cfg.loss.gamma;
        if let Some(g) = &self.focal.gamma {
            gamma = <[f64; 4]>::try_from(g.as_slice())
                .map_err(|_| Error::config("focal.gamma", "expected four values"))?;
        }
        let alpha = self.focal.alpha.unwrap_or(cfg.loss.alpha);
        cfg.loss = match kind {
            LossKind::Focal => LossConfig::focal(gamma, alpha),
            LossKind::CrossEntropy => LossConfig::cross_entropy(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section, so a bad key fails before any work starts.
    pub fn validate(&self, arch: Arch) -> Result<()> {
        self.norm_config()?;
        self.split_spec()?;
        if self.max_words() < 3 {
            return Err(Error::config("vocab.max_words", "must be >= 3"));
        }
        self.model_config(arch, 2, [1; 4])?;
        self.train_config(arch, None)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ConfigFile::parse("").unwrap();
        assert_eq!(c.split_spec().unwrap(), SplitSpec::default());
        assert_eq!(c.norm_config().unwrap(), NormConfig::default());
        let t = c.train_config(Arch::BiLstm, None).unwrap();
        assert_eq!(t, TrainConfig::bilstm());
        c.validate(Arch::Transformer).unwrap();
    }

    #[test]
    fn ratios_not_summing_to_one_name_the_key() {
        let c = ConfigFile::parse("[split]\nratios = [0.5, 0.3, 0.3]\n").unwrap();
        let err = c.validate(Arch::BiLstm).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "split.ratios"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ConfigFile::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "learning_rate"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let text = "seed = 9\n[model]\nembed_dim = 8\nlstm_units = [4]\nlstm_dropout = [0.0]\n\
                    [train]\nlr = 0.01\nloss = \"ce\"\noptimizer = \"adamw\"\n\
                    [focal]\ngamma = [1, 1, 1, 1]\n";
        let c = ConfigFile::parse(text).unwrap();
        let m = c.model_config(Arch::BiLstm, 10, [2; 4]).unwrap();
        assert_eq!(m.embed_dim, 8);
        assert_eq!(m.lstm_layers, vec![LstmLayer { units: 4, dropout: 0.0 }]);
        let t = c.train_config(Arch::BiLstm, None).unwrap();
        assert_eq!(t.seed, 9);
        assert_eq!(t.optimizer.lr, 0.01);
        assert_eq!(t.optimizer.kind, OptimizerKind::AdamW);
        assert_eq!(t.loss, LossConfig::cross_entropy());
        let t = c.train_config(Arch::BiLstm, Some(LossKind::Focal)).unwrap();
        assert_eq!(t.loss.gamma, [1.0; 4]);
    }

    #[test]
    fn mismatched_lstm_lists() {
        let c = ConfigFile::parse("[model]\nlstm_units = [4, 5]\nlstm_dropout = [0.1]\n").unwrap();
        let err = c.model_config(Arch::BiLstm, 10, [2; 4]).unwrap_err();
        assert!(err.to_string().contains("model.lstm_dropout"));
    }

    #[test]
    fn transformer_embed_follows_d_model() {
        let c = ConfigFile::parse("[attention]\nd_model = 8\nd_k = 4\nnum_heads = 2\n").unwrap();
        let m = c.model_config(Arch::Transformer, 10, [2; 4]).unwrap();
        assert_eq!(m.embed_dim, 8);
    }
}
