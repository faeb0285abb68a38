//! Binary model checkpoints.
//!
//! Layout: the bytes `HCKP`, a version byte (1), a UTF-8 header of
//! `key=value` lines ended by an empty line, then every parameter in the
//! order listed by the `params` header key as its name and a newline, a
//! little-endian `u32` value count and that many little-endian `f32`s.
//!
//! The header holds the full model configuration, the normalization
//! settings, both label spaces, the creation seed and the SHA-256 of the
//! vocabulary file. The vocabulary itself is written next to the
//! checkpoint as `<checkpoint>.vocab`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::{LabelSpace, LabelVocab, Level};
use crate::error::{Error, Result};
use crate::models::{init_parameters, Arch, AttentionConfig, LstmLayer, Model, ModelConfig};
use crate::textnorm::{NormConfig, UnitPatternSet};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"HCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: NormConfig,
    pub labels: LabelSpace,
    pub vocab_sha256: String,
    pub vocab_max_words: usize,
    pub seed: u64,
}

pub fn vocab_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn new(model: Model, norm: NormConfig, labels: LabelSpace, vocab: &Vocabulary, seed: u64) -> Self {
        Self {
            model,
            norm,
            labels,
            vocab_sha256: vocab.sha256_hex(),
            vocab_max_words: vocab.max_words(),
            seed,
        }
    }

    fn header(&self) -> String {
        let c = &self.model.config;
        let a = &c.attention;
        let mut h = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(h, "{k}={v}");
        };
        kv("arch", c.arch.name().into());
        kv("vocab_size", c.vocab_size.to_string());
        kv("embed_dim", c.embed_dim.to_string());
        kv("max_len", c.max_len.to_string());
        kv("spatial_dropout", c.spatial_dropout.to_string());
        kv(
            "lstm_layers",
            join(c.lstm_layers.iter().map(|l| format!("{}:{}", l.units, l.dropout))),
        );
        kv("attention.num_heads", a.num_heads.to_string());
        kv("attention.d_model", a.d_model.to_string());
        kv("attention.d_k", a.d_k.to_string());
        kv("attention.ff_dim", a.ff_dim.to_string());
        kv("attention.num_blocks", a.num_blocks.to_string());
        kv("attention.pooling", a.pooling.name().into());
        kv("attention.positional", a.positional.to_string());
        kv("head_dropout", c.head_dropout.to_string());
        kv("norm.min_token_len", self.norm.min_token_len.to_string());
        kv("norm.units", join(self.norm.units.units()));
        // Code points in hex so any character survives the line format.
        kv(
            "norm.keep_chars",
            join(self.norm.keep_chars.iter().map(|&ch| format!("{:x}", ch as u32))),
        );
        kv("norm.stop_singletons", join(&self.norm.stop_singletons));
        kv("vocab.sha256", self.vocab_sha256.clone());
        kv("vocab.max_words", self.vocab_max_words.to_string());
        kv("seed", self.seed.to_string());
        for l in Level::ALL {
            let labels = self.labels.level(l).labels();
            kv(&format!("labels.{l}.count"), labels.len().to_string());
            for (i, s) in labels.iter().enumerate() {
                kv(&format!("labels.{l}.{i}"), s.clone());
            }
        }
        let params = &self.model.params;
        kv("params", join(params.iter().map(|p| p.name.as_str())));
        for p in params.iter() {
            kv(
                &format!("param.{}.shape", p.name),
                p.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
            );
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.model.params.num_values());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(self.header().as_bytes());
        out.push(b'\n');
        for p in self.model.params.iter() {
            out.extend_from_slice(p.name.as_bytes());
            out.push(b'\n');
            out.extend_from_slice(&(p.value.len() as u32).to_le_bytes());
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", bytes[4])));
        }
        let rest = &bytes[5..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("header is not terminated".into()))?;
        let header = std::str::from_utf8(&rest[..end + 1])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let h = Header::parse(header)?;
        let mut ck = h.build()?;
        read_params(&rest[end + 2..], &h, &mut ck.model)?;
        Ok(ck)
    }

    /// Writes the checkpoint and its vocabulary sidecar.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        if vocab.sha256_hex() != self.vocab_sha256 {
            return Err(Error::VocabHash {
                expected: self.vocab_sha256.clone(),
                found: vocab.sha256_hex(),
            });
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        vocab.save(&vocab_sidecar(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads the vocabulary from `path` (default: the sidecar next to
    /// `checkpoint_path`) and checks it against the recorded hash.
    pub fn load_vocab(&self, checkpoint_path: &Path, path: Option<&Path>) -> Result<Vocabulary> {
        let p = path.map_or_else(|| vocab_sidecar(checkpoint_path), Path::to_path_buf);
        let vocab = Vocabulary::load(&p, self.vocab_max_words)?;
        self.check_vocab(&vocab)?;
        Ok(vocab)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.sha256_hex();
        if found != self.vocab_sha256 {
            return Err(Error::VocabHash {
                expected: self.vocab_sha256.clone(),
                found,
            });
        }
        Ok(())
    }
}

struct Header {
    map: BTreeMap<String, String>,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate header key `{k}`")));
            }
        }
        Ok(Self { map })
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key `{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<&str>> {
        let v = self.str(key)?;
        Ok(if v.is_empty() { Vec::new() } else { v.split(',').collect() })
    }

    fn build(&self) -> Result<Checkpoint> {
        let bad = |key: &str| Error::Checkpoint(format!("bad value for `{key}`"));
        let arch: Arch = self.str("arch")?.parse()?;
        let lstm_layers = self
            .list("lstm_layers")?
            .into_iter()
            .map(|s| {
                let (u, d) = s.split_once(':').ok_or_else(|| bad("lstm_layers"))?;
                Ok(LstmLayer {
                    units: u.parse().map_err(|_| bad("lstm_layers"))?,
                    dropout: d.parse().map_err(|_| bad("lstm_layers"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = AttentionConfig {
            num_heads: self.get("attention.num_heads")?,
            d_model: self.get("attention.d_model")?,
            d_k: self.get("attention.d_k")?,
            ff_dim: self.get("attention.ff_dim")?,
            num_blocks: self.get("attention.num_blocks")?,
            pooling: self.str("attention.pooling")?.parse()?,
            positional: self.get("attention.positional")?,
        };
        let mut levels: [LabelVocab; 4] = Default::default();
        for l in Level::ALL {
            let n: usize = self.get(&format!("labels.{l}.count"))?;
            let labels = (0..n)
                .map(|i| self.str(&format!("labels.{l}.{i}")).map(str::to_string))
                .collect::<Result<Vec<_>>>()?;
            let vocab = LabelVocab::new(labels.clone());
            if vocab.labels() != labels.as_slice() {
                return Err(Error::Checkpoint(format!("labels of `{l}` are not sorted and unique")));
            }
            levels[l.index()] = vocab;
        }
        let labels = LabelSpace { levels };
        let config = ModelConfig {
            arch,
            vocab_size: self.get("vocab_size")?,
            embed_dim: self.get("embed_dim")?,
            max_len: self.get("max_len")?,
            spatial_dropout: self.get("spatial_dropout")?,
            lstm_layers,
            attention,
            head_dropout: self.get("head_dropout")?,
            label_sizes: labels.sizes(),
        };
        let keep_chars = self
            .list("norm.keep_chars")?
            .into_iter()
            .map(|s| {
                u32::from_str_radix(s, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| bad("norm.keep_chars"))
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = NormConfig {
            units: UnitPatternSet::new(&self.list("norm.units")?)?,
            min_token_len: self.get("norm.min_token_len")?,
            keep_chars,
            stop_singletons: self
                .list("norm.stop_singletons")?
                .into_iter()
                .map(str::to_string)
                .collect(),
        };
        // Build the expected parameter set and check names and shapes.
        let params = init_parameters(&config, 0)?;
        let declared = self.list("params")?;
        let expected: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        if declared != expected {
            return Err(Error::Checkpoint(
                "parameter list does not match the model configuration".into(),
            ));
        }
        for p in params.iter() {
            let key = format!("param.{}.shape", p.name);
            let shape = self
                .str(&key)?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(&key)))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {shape:?}, configuration implies {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Checkpoint {
            model: Model { config, params },
            norm,
            labels,
            vocab_sha256: self.str("vocab.sha256")?.to_string(),
            vocab_max_words: self.get("vocab.max_words")?,
            seed: self.get("seed")?,
        })
    }
}

fn read_params(mut body: &[u8], h: &Header, model: &mut Model) -> Result<()> {
    let truncated = || Error::Checkpoint("parameter data is truncated".into());
    for name in h.list("params")? {
        let nl = body.iter().position(|&b| b == b'\n').ok_or_else(truncated)?;
        if &body[..nl] != name.as_bytes() {
            return Err(Error::Checkpoint(format!("expected parameter `{name}`")));
        }
        body = &body[nl + 1..];
        let count = u32::from_le_bytes(body.get(..4).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        body = &body[4..];
        let raw = body.get(..count * 4).ok_or_else(truncated)?;
        body = &body[count * 4..];
        let id = model.params.id(name).expect("checked against the configuration");
        let shape = model.params.value(id).shape().to_vec();
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.params.set_value(id, Tensor::new(shape, data)?)?;
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(())
}

/// Parameters rounded to what a checkpoint stores.
pub fn round_to_stored(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    let ids: Vec<_> = out.ids().collect();
    for id in ids {
        for v in out.get_mut(id).value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}
