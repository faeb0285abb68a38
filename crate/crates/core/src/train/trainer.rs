use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::early_stop::{EarlyStopping, StopDecision};
use super::inference::predict_batch;
use super::optimizer::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::autodiff::{Graph, ParamGrads};
use crate::corpus::{label_space, Corpus, LabelSpace, Level, TRAIN_SOURCE};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses_metrics::{f1_macro, multi_head_loss, LossConfig};
use crate::models::{forward, param_id, Arch, Model, EMBEDDING_PARAM};
use crate::vocab::{build_vocabulary, encode, Vocabulary};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_macro_f1_mean,seg_f1,cat_f1,sub_f1,prod_f1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Global gradient-norm bound; off unless set.
    pub clip_norm: Option<f64>,
    /// Every mini-batch is cut into this many pieces whose gradients are
    /// computed independently and summed in order. Fixed, so results do not
    /// depend on the thread count.
    pub shards: usize,
    pub freeze_embeddings: bool,
    /// After model selection, train again from the initial weights on
    /// train + validation for the selected number of epochs.
    pub retrain_with_val: bool,
    pub exec: Exec,
}

impl TrainConfig {
    /// Adam, lr 1e-5, batch 64, 50 epochs, patience 3, focal loss with
    /// gamma 2 on every head and alpha 0.25.
    pub fn bilstm() -> Self {
        Self {
            optimizer: AdamConfig::adam(1e-5),
            batch_size: 64,
            max_epochs: 50,
            patience: 3,
            seed: 42,
            loss: LossConfig::focal([2.0; 4], 0.25),
            clip_norm: None,
            shards: 16,
            freeze_embeddings: false,
            retrain_with_val: false,
            exec: Exec::Parallel,
        }
    }

    /// AdamW, lr 5e-5, batch 32, 40 epochs, patience 10, gammas 2/1/1/2.
    pub fn transformer() -> Self {
        Self {
            optimizer: AdamConfig::adamw(5e-5),
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            loss: LossConfig::focal([2.0, 1.0, 1.0, 2.0], 1.0),
            ..Self::bilstm()
        }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::BiLstm => Self::bilstm(),
            Arch::Transformer => Self::transformer(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        for (key, v) in [
            ("train.batch_size", self.batch_size),
            ("train.max_epochs", self.max_epochs),
            ("train.shards", self.shards),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Encoded inputs and label indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub ids: Vec<Vec<usize>>,
    pub targets: Vec<[usize; 4]>,
}

impl Dataset {
    /// Fails when any record carries a label outside `labels`, reporting how
    /// many and the first one.
    pub fn encode(corpus: &Corpus, vocab: &Vocabulary, labels: &LabelSpace, max_len: usize) -> Result<Self> {
        let mut out = Dataset::default();
        let mut unseen = 0;
        let mut first = None;
        for rec in corpus.records() {
            match labels.encode(rec) {
                Some(t) => {
                    out.ids.push(encode(&rec.item_text, vocab, max_len).ids);
                    out.targets.push(t);
                }
                None => {
                    unseen += 1;
                    if first.is_none() {
                        let l = Level::ALL
                            .into_iter()
                            .find(|&l| labels.level(l).index_of(rec.label(l)).is_none())
                            .expect("some level is unknown");
                        first = Some(format!("{l} `{}`", rec.label(l)));
                    }
                }
            }
        }
        if let Some(first) = first {
            return Err(Error::Invalid(format!(
                "{unseen} of {} records have labels outside the training label space (first: {first})",
                corpus.len()
            )));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut d = self.clone();
        d.ids.extend(other.ids.iter().cloned());
        d.targets.extend(other.targets.iter().copied());
        d
    }
}

/// Training records must all come from the training split.
pub fn check_training_provenance(corpus: &Corpus) -> Result<()> {
    match corpus.provenance().iter().position(|p| p != TRAIN_SOURCE) {
        Some(i) => Err(Error::Invalid(format!(
            "training record {i} comes from `{}`, expected `{TRAIN_SOURCE}`",
            corpus.provenance()[i]
        ))),
        None => Ok(()),
    }
}

/// Vocabulary, label space and encoded splits, built from training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub train: Dataset,
    pub val: Dataset,
}

pub fn prepare(train: &Corpus, val: &Corpus, max_words: usize, max_len: usize) -> Result<Prepared> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    check_training_provenance(train)?;
    let vocab = build_vocabulary(train.records().iter().map(|r| r.item_text.as_str()), max_words)?;
    let labels = label_space(train)?;
    let train_ds = Dataset::encode(train, &vocab, &labels, max_len)?;
    let val_ds = Dataset::encode(val, &vocab, &labels, max_len)?;
    Ok(Prepared {
        vocab,
        labels,
        train: train_ds,
        val: val_ds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean: f64,
    pub val_f1: [f64; 4],
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch (the initial weights if no
    /// epoch finished).
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient ended training.
    pub divergence: Option<Error>,
}

/// Mixes the run seed with a position into an independent stream seed.
fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x = splitmix(x ^ splitmix(p));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shard_gradient(
    model: &Model,
    data: &Dataset,
    rows: &[usize],
    denom: f64,
    cfg: &TrainConfig,
    key: [u64; 3],
) -> Result<(f64, ParamGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &key));
    let ids: Vec<Vec<usize>> = rows.iter().map(|&i| data.ids[i].clone()).collect();
    let targets: Vec<[usize; 4]> = rows.iter().map(|&i| data.targets[i]).collect();
    let mut g = Graph::new();
    let z = forward(&model.config, &mut g, &model.params, &ids, Some(&mut rng))?;
    let loss = multi_head_loss(&mut g, z, &targets, &cfg.loss, denom)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

/// One pass over `data`; returns the mean per-sample loss.
fn run_epoch(model: &mut Model, adam: &mut AdamState, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[epoch as u64])));
    let mut total = 0.0;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let shards: Vec<&[usize]> = batch.chunks(batch.len().div_ceil(cfg.shards)).collect();
        let denom = batch.len() as f64;
        let results = cfg.exec.map_indexed(&shards, |s, rows| {
            shard_gradient(model, data, rows, denom, cfg, [epoch as u64, b as u64, s as u64])
        });
        model.params.zero_grad();
        let mut batch_loss = 0.0;
        for r in results {
            let (loss, grads) = r?;
            batch_loss += loss;
            model.params.accumulate(&grads);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {}", b + 1)));
        }
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut model.params, c);
        }
        adam_step(&mut model.params, adam, &cfg.optimizer)?;
        total += batch_loss * denom;
    }
    Ok(total / data.len() as f64)
}

fn head_f1(model: &Model, data: &Dataset, exec: Exec) -> Result<[f64; 4]> {
    let preds = predict_batch(model, &data.ids, exec)?;
    let mut out = [0.0; 4];
    for h in 0..4 {
        let truth: Vec<usize> = data.targets.iter().map(|t| t[h]).collect();
        let pred: Vec<usize> = preds[h].iter().map(|p| p.0).collect();
        out[h] = f1_macro(&truth, &pred, model.config.label_sizes[h]);
    }
    Ok(out)
}

fn apply_freeze(model: &mut Model, cfg: &TrainConfig) -> Result<()> {
    let id = param_id(&model.params, EMBEDDING_PARAM)?;
    model.params.set_trainable(id, !cfg.freeze_embeddings);
    Ok(())
}

/// Trains with early stopping on the mean of the four validation
/// macro-F1 scores and returns the best weights seen.
pub fn train(mut model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    apply_freeze(&mut model, cfg)?;
    let mut adam = AdamState::new(&model.params);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut divergence = None;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = match run_epoch(&mut model, &mut adam, train, cfg, epoch) {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                divergence = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let val_f1 = head_f1(&model, val, cfg.exec)?;
        let val_mean = val_f1.iter().sum::<f64>() / 4.0;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mean,
            val_f1,
        });
        match stop.observe(epoch, val_mean) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch: stop.best().map(|b| b.0),
        history,
        stopped_early,
        divergence,
    })
}

/// Trains for exactly `epochs` epochs with no validation; returns the
/// final weights and the per-epoch training loss.
pub fn retrain(mut model: Model, data: &Dataset, epochs: usize, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split"));
    }
    apply_freeze(&mut model, cfg)?;
    let mut adam = AdamState::new(&model.params);
    let losses = (1..=epochs)
        .map(|e| run_epoch(&mut model, &mut adam, data, cfg, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, losses))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_mean, r.val_f1[0], r.val_f1[1], r.val_f1[2], r.val_f1[3]
        );
    }
    s
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
