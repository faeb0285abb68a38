//! Token vocabulary and fixed-length integer encoding.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textnorm::NormalizedText;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default capacity, PAD and UNK included.
pub const DEFAULT_MAX_WORDS: usize = 42_000;
pub const DEFAULT_MAX_LEN: usize = 38;

/// PAD and UNK are always present, so a vocabulary is never empty.
#[allow(clippy::len_without_is_empty)]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    max_words: usize,
}

impl Vocabulary {
    fn with_tokens(tokens: Vec<String>, max_words: usize) -> Result<Self> {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut token_to_id = HashMap::with_capacity(tokens.len() + 2);
        for t in tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("invalid vocabulary token {t:?}")));
            }
            if token_to_id.insert(t.clone(), id_to_token.len()).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
            id_to_token.push(t);
        }
        if id_to_token.len() > max_words {
            return Err(Error::Invalid(format!(
                "vocabulary has {} entries, capacity is {max_words}",
                id_to_token.len()
            )));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            max_words,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Real tokens (ids 2..) in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    /// File form: one token per line, first line is id 2.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn sha256_hex(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, max_words: usize) -> Result<Self> {
        let tokens = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::with_tokens(tokens, max_words)
    }

    pub fn load(path: &Path, max_words: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, max_words)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Keeps the `max_words - 2` most frequent whitespace tokens, ties broken
/// by first occurrence. Build from the training split only.
pub fn build_vocabulary<'a, I>(texts: I, max_words: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_words < 3 {
        return Err(Error::Invalid(format!("max_words must be >= 3, got {max_words}")));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut seen_any = false;
    let mut order = 0usize;
    for text in texts {
        seen_any = true;
        for tok in text.split_whitespace() {
            counts
                .entry(tok)
                .and_modify(|e| e.0 += 1)
                .or_insert((1, order));
            order += 1;
        }
    }
    if !seen_any {
        return Err(Error::Empty("training texts for vocabulary"));
    }
    let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    let tokens = ranked
        .into_iter()
        .take(max_words - 2)
        .map(|(t, _)| t.to_string())
        .collect();
    Vocabulary::with_tokens(tokens, max_words)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    /// Token count after truncation (the unpadded prefix of `ids`).
    pub length: usize,
}

/// Maps tokens to ids (UNK when absent), keeps the leftmost `max_len`,
/// and post-pads with PAD.
pub fn encode(text: &NormalizedText, vocab: &Vocabulary, max_len: usize) -> EncodedSequence {
    encode_str(text.as_str(), vocab, max_len)
}

pub fn encode_str(text: &str, vocab: &Vocabulary, max_len: usize) -> EncodedSequence {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    let length = ids.len();
    ids.resize(max_len, PAD);
    EncodedSequence { ids, length }
}

/// Inverse of [`encode`]; PAD ids are dropped, UNK decodes to `<unk>`.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .filter(|&&id| id != PAD)
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or(Error::IndexOutOfRange {
                    index: id,
                    bound: vocab.len(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> Vocabulary {
        build_vocabulary(["a b", "a"], 10).unwrap()
    }

    #[test]
    fn build_examples() {
        let v = ab();
        assert_eq!(v.len(), 4);
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));

        let v = build_vocabulary(["a b"], 3).unwrap();
        assert_eq!(v.tokens(), ["a"]);

        let v = build_vocabulary(["  a   b  "], 10).unwrap();
        assert_eq!(v.tokens(), ["a", "b"]);
        assert!(v.get("").is_none());
    }

    #[test]
    fn build_errors() {
        assert!(build_vocabulary(std::iter::empty::<&str>(), 10).is_err());
        assert!(build_vocabulary(["a"], 2).is_err());
    }

    #[test]
    fn frequency_then_first_occurrence() {
        let v = build_vocabulary(["c b a", "a b", "a"], 10).unwrap();
        assert_eq!(v.tokens(), ["a", "b", "c"]);
    }

    #[test]
    fn encode_examples() {
        let v = ab();
        let e = encode_str("", &v, 5);
        assert_eq!((e.ids, e.length), (vec![0; 5], 0));
        let e = encode_str("a b", &v, 4);
        assert_eq!(e.ids, [2, 3, 0, 0]);
        let long: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
        let e = encode_str(&long.join(" "), &v, 38);
        assert_eq!((e.ids.len(), e.length), (38, 38));
        assert_eq!(encode_str("a zzz", &v, 3).ids, [2, UNK, 0]);
    }

    #[test]
    fn decode_examples() {
        let v = ab();
        assert_eq!(decode(&[2, 3, 0, 0], &v).unwrap(), ["a", "b"]);
        assert!(decode(&[0, 0], &v).unwrap().is_empty());
        assert_eq!(decode(&[1], &v).unwrap(), [UNK_TOKEN]);
        assert!(matches!(
            decode(&[9], &v),
            Err(Error::IndexOutOfRange { index: 9, .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocabulary(["x y z", "y"], 100).unwrap();
        let text = v.to_file_string();
        assert_eq!(text, "y\nx\nz\n");
        assert_eq!(Vocabulary::parse(&text, 100).unwrap(), v);
        assert!(Vocabulary::parse("a\na\n", 100).is_err());
        assert!(Vocabulary::parse("a\nb\n", 3).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(toks in proptest::collection::vec("[a-e]{1,3}", 0..10)) {
            let text = toks.join(" ");
            let v = build_vocabulary([text.as_str()], 1000).unwrap();
            let e = encode_str(&text, &v, 12);
            prop_assert_eq!(e.ids.len(), 12);
            prop_assert_eq!(decode(&e.ids, &v).unwrap(), toks);
        }

        #[test]
        fn unseen_tokens_are_unk(train in "[a-c]{1,3}( [a-c]{1,3}){0,4}", val in "[x-z]{1,3}( [x-z]{1,3}){0,4}") {
            let v = build_vocabulary([train.as_str()], 1000).unwrap();
            let e = encode_str(&val, &v, 8);
            prop_assert!(e.ids[..e.length].iter().all(|&id| id == UNK));
            prop_assert!(e.ids.iter().all(|&id| id < v.len()));
        }
    }
}
