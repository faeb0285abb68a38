use std::path::Path;

use serde::Serialize;

use super::trainer::Dataset;
use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, Level};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses_metrics::{EvalReport, HeadReport};
use crate::models::Model;
use crate::textnorm::normalize;
use crate::vocab::{encode, Vocabulary};

/// Rows per forward pass during batch inference.
pub const INFER_BATCH: usize = 128;

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Greedy `(class, probability)` per row and head, dropout off. Chunks of
/// [`INFER_BATCH`] rows are independent, so `exec` only changes speed.
pub fn predict_batch(model: &Model, ids: &[Vec<usize>], exec: Exec) -> Result<[Vec<(usize, f64)>; 4]> {
    let chunks: Vec<&[Vec<usize>]> = ids.chunks(INFER_BATCH).collect();
    let parts = exec.map(&chunks, |c| model.logits(c));
    let mut out: [Vec<(usize, f64)>; 4] = Default::default();
    for part in parts {
        for (h, rows) in part?.iter().enumerate() {
            out[h].extend(rows.iter().map(|r| {
                let k = argmax(r);
                (k, softmax_row(r)[k])
            }));
        }
    }
    Ok(out)
}

/// Per-head report for an encoded dataset.
pub fn evaluate(model: &Model, data: &Dataset, labels: &crate::corpus::LabelSpace, exec: Exec) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let preds = predict_batch(model, &data.ids, exec)?;
    let heads = Level::ALL
        .iter()
        .map(|&l| {
            let h = l.index();
            let truth: Vec<usize> = data.targets.iter().map(|t| t[h]).collect();
            let pred: Vec<usize> = preds[h].iter().map(|p| p.0).collect();
            HeadReport::new(l.name(), labels.level(l).labels(), &truth, &pred)
        })
        .collect();
    Ok(EvalReport::new(data.len(), heads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelPick {
    pub level: &'static str,
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Prediction {
    /// Nothing left after normalization.
    Unclassifiable { text: String },
    Classified { text: String, heads: Vec<LabelPick> },
}

/// A loaded checkpoint together with its verified vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
}

impl Classifier {
    pub fn new(checkpoint: Checkpoint, vocab: Vocabulary) -> Result<Self> {
        checkpoint.check_vocab(&vocab)?;
        Ok(Self { checkpoint, vocab })
    }

    /// Reads a checkpoint and its vocabulary (`vocab`, or the sidecar).
    pub fn load(path: &Path, vocab: Option<&Path>) -> Result<Self> {
        let checkpoint = Checkpoint::load(path)?;
        let vocab = checkpoint.load_vocab(path, vocab)?;
        Ok(Self { checkpoint, vocab })
    }

    pub fn dataset(&self, corpus: &Corpus) -> Result<Dataset> {
        Dataset::encode(
            corpus,
            &self.vocab,
            &self.checkpoint.labels,
            self.checkpoint.model.config.max_len,
        )
    }

    pub fn evaluate(&self, corpus: &Corpus, exec: Exec) -> Result<EvalReport> {
        let data = self.dataset(corpus)?;
        evaluate(&self.checkpoint.model, &data, &self.checkpoint.labels, exec)
    }

    pub fn predict(&self, raw: &str) -> Result<Prediction> {
        let text = normalize(raw, &self.checkpoint.norm);
        if text.is_empty() {
            return Ok(Prediction::Unclassifiable { text: String::new() });
        }
        let ids = encode(&text, &self.vocab, self.checkpoint.model.config.max_len).ids;
        let preds = predict_batch(&self.checkpoint.model, &[ids], Exec::Sequential)?;
        let heads = Level::ALL
            .iter()
            .map(|&l| {
                let (k, p) = preds[l.index()][0];
                LabelPick {
                    level: l.name(),
                    label: self.checkpoint.labels.level(l).labels()[k].clone(),
                    probability: p,
                }
            })
            .collect();
        Ok(Prediction::Classified {
            text: text.into_string(),
            heads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[f64::NAN, 1.0]), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_row(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }
}
