//! Pre-trained word vectors in the word2vec/GloVe text format.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, PAD};

/// Range of the uniform initializer used for tokens without a vector.
pub const OOV_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Adds a vector unless the token is already present. Returns whether
    /// it was inserted.
    pub fn insert(&mut self, token: &str, v: Vec<f64>) -> Result<bool> {
        if v.len() != self.dim {
            return Err(Error::Invalid(format!(
                "vector for `{token}` has {} components, expected {}",
                v.len(),
                self.dim
            )));
        }
        if self.vectors.contains_key(token) {
            return Ok(false);
        }
        self.vectors.insert(token.to_string(), v);
        Ok(true)
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn parse_header(line: &str) -> Option<usize> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts[..] {
        [count, dim] => {
            count.parse::<usize>().ok()?;
            dim.parse::<usize>().ok()
        }
        _ => None,
    }
}

/// Lines are `token v1 .. vd`. An optional first line of exactly two
/// integers `count dim` fixes the dimension; otherwise the first vector
/// line does. Blank lines are skipped; repeated tokens keep the first.
pub fn read_embeddings(reader: impl BufRead) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 {
            if let Some(dim) = parse_header(line) {
                if dim == 0 {
                    return Err(Error::Embedding {
                        line: lineno,
                        message: "header declares dimension 0".into(),
                    });
                }
                table = Some(EmbeddingTable::new(dim));
                continue;
            }
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default();
        let mut v = Vec::new();
        for p in parts {
            let x: f64 = p.parse().map_err(|_| Error::Embedding {
                line: lineno,
                message: format!("non-numeric component `{p}`"),
            })?;
            if !x.is_finite() {
                return Err(Error::Embedding {
                    line: lineno,
                    message: format!("non-finite component `{p}`"),
                });
            }
            v.push(x);
        }
        if v.is_empty() {
            return Err(Error::Embedding {
                line: lineno,
                message: format!("token `{token}` has no vector"),
            });
        }
        let t = table.get_or_insert_with(|| EmbeddingTable::new(v.len()));
        if v.len() != t.dim {
            return Err(Error::Embedding {
                line: lineno,
                message: format!("expected {} components, found {}", t.dim, v.len()),
            });
        }
        t.insert(token, v)?;
    }
    table.ok_or(Error::Empty("embedding file"))
}

/// Initial embedding weights aligned to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub weights: Tensor,
    /// Fraction of real tokens (PAD and UNK excluded) found in the table.
    pub coverage: f64,
    pub found: usize,
}

/// Copies table vectors for known tokens; everything else except PAD,
/// including UNK, draws from uniform(±[`OOV_INIT`]). PAD is zero.
pub fn build_matrix(table: &EmbeddingTable, vocab: &Vocabulary, seed: u64) -> EmbeddingMatrix {
    let dim = table.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut found = 0;
    for id in 0..vocab.len() {
        let tok = vocab.token(id).unwrap_or_default();
        let known = if id >= 2 { table.get(tok) } else { None };
        match known {
            Some(v) => {
                found += 1;
                data.extend_from_slice(v);
            }
            None => {
                // Draw even for PAD so rows keep their stream positions.
                let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-OOV_INIT..=OOV_INIT)).collect();
                if id == PAD {
                    data.extend(std::iter::repeat_n(0.0, dim));
                } else {
                    data.extend(row);
                }
            }
        }
    }
    let real = vocab.len().saturating_sub(2);
    EmbeddingMatrix {
        weights: Tensor::matrix(vocab.len(), dim, data),
        coverage: if real == 0 { 0.0 } else { found as f64 / real as f64 },
        found,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocabulary;

    fn read(s: &str) -> Result<EmbeddingTable> {
        read_embeddings(s.as_bytes())
    }

    #[test]
    fn header_and_inference() {
        let t = read("2 3\na 1 0 0\nb 0 1 0").unwrap();
        assert_eq!((t.dim(), t.len()), (3, 2));
        let t = read("a 0.5 0.5\n").unwrap();
        assert_eq!(t.dim(), 2);
    }

    #[test]
    fn reports_line_numbers() {
        match read("3 3\na 1 0 0\nb 0 1 0\nc 1 2") {
            Err(Error::Embedding { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read("a 1 x"), Err(Error::Embedding { line: 1, .. })));
        assert!(matches!(read("a 1 NaN"), Err(Error::Embedding { .. })));
    }

    #[test]
    fn duplicates_keep_first() {
        let t = read("a 1 2\na 3 4\n").unwrap();
        assert_eq!(t.get("a").unwrap(), [1.0, 2.0]);
    }

    #[test]
    fn matrix_rows() {
        let vocab = build_vocabulary(["a"], 10).unwrap();
        let t = read("a 1 0\n").unwrap();
        let m = build_matrix(&t, &vocab, 3);
        assert_eq!(m.weights.row(2), [1.0, 0.0]);
        assert_eq!(m.weights.row(PAD), [0.0, 0.0]);
        assert_eq!(m.coverage, 1.0);
        assert!(m.weights.row(1).iter().all(|v| v.abs() <= OOV_INIT));

        let vocab = build_vocabulary(["a zz"], 10).unwrap();
        let m = build_matrix(&t, &vocab, 3);
        assert_eq!(m.coverage, 0.5);
        assert!(m.weights.row(3).iter().all(|v| v.abs() <= OOV_INIT));
        assert_eq!(m, build_matrix(&t, &vocab, 3));
        assert_ne!(m, build_matrix(&t, &vocab, 4));
    }
}
