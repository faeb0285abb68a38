//! Five-stage normalization of raw item descriptions:
//! lowercase → character cleaning → unit extraction → space condensing →
//! short-token filtering.
//!
//! ```
//! use prodcat::textnorm::{normalize, NormConfig};
//!
//! let cfg = NormConfig::default();
//! assert_eq!(normalize("sab johns baby 80ghora sono.", &cfg).as_str(), "sab johns baby 80g hora sono");
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Units recognised after a number when no other list is configured.
pub const DEFAULT_UNITS: [&str; 9] = ["g", "kg", "mg", "ml", "l", "un", "cm", "mm", "m"];

/// Accented letters (Portuguese-centric) and their unaccented base letter.
pub const TRANSLITERATION: &[(char, char)] = &[
    ('á', 'a'),
    ('à', 'a'),
    ('â', 'a'),
    ('ã', 'a'),
    ('ä', 'a'),
    ('å', 'a'),
    ('ª', 'a'),
    ('é', 'e'),
    ('è', 'e'),
    ('ê', 'e'),
    ('ë', 'e'),
    ('í', 'i'),
    ('ì', 'i'),
    ('î', 'i'),
    ('ï', 'i'),
    ('ó', 'o'),
    ('ò', 'o'),
    ('ô', 'o'),
    ('õ', 'o'),
    ('ö', 'o'),
    ('º', 'o'),
    ('ú', 'u'),
    ('ù', 'u'),
    ('û', 'u'),
    ('ü', 'u'),
    ('ç', 'c'),
    ('ñ', 'n'),
    ('ý', 'y'),
    ('ÿ', 'y'),
];

fn transliterate(c: char) -> Option<char> {
    TRANSLITERATION
        .iter()
        .find(|(from, _)| *from == c)
        .map(|&(_, to)| to)
}

/// Output of the full pipeline: lowercase, `[a-z0-9 ]` plus the keep-list,
/// single spaces, no leading or trailing space.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedText(String);

impl NormalizedText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }
}

impl fmt::Display for NormalizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One quantity+unit recognition rule: a run of ASCII digits immediately
/// followed by `unit`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitRule {
    unit: String,
}

impl UnitRule {
    pub fn unit(&self) -> &str {
        &self.unit
    }
}

/// Ordered set of unit rules. Longer units are tried before shorter ones
/// (so `ml` wins over `m`); units of equal length keep their declared order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitPatternSet {
    rules: Vec<UnitRule>,
}

impl UnitPatternSet {
    pub fn new<S: AsRef<str>>(units: &[S]) -> Result<Self> {
        let mut rules: Vec<UnitRule> = Vec::with_capacity(units.len());
        for u in units {
            let unit = u.as_ref().trim().to_lowercase();
            if unit.is_empty() || !unit.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::config(
                    "norm.units",
                    format!("unit `{}` must be non-empty ASCII letters", u.as_ref()),
                ));
            }
            if !rules.iter().any(|r| r.unit == unit) {
                rules.push(UnitRule { unit });
            }
        }
        if rules.is_empty() {
            return Err(Error::config("norm.units", "at least one unit is required"));
        }
        rules.sort_by(|a, b| b.unit.len().cmp(&a.unit.len()));
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[UnitRule] {
        &self.rules
    }

    pub fn units(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|r| r.unit.as_str())
    }

    pub fn is_unit(&self, token: &str) -> bool {
        self.rules.iter().any(|r| r.unit == token)
    }

    /// `digits` followed by exactly one configured unit, e.g. `80g`, `1kg`.
    pub fn is_quantity(&self, token: &str) -> bool {
        let digits = token.bytes().take_while(u8::is_ascii_digit).count();
        digits > 0 && self.is_unit(&token[digits..])
    }

    /// Byte offset at which a token fused as `<digits><unit><letters...>`
    /// should be split, if any.
    fn split_point(&self, token: &str) -> Option<usize> {
        let digits = token.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        let rest = &token[digits..];
        let letters = rest.bytes().take_while(u8::is_ascii_lowercase).count();
        if letters == 0 || self.is_unit(&rest[..letters]) {
            return None;
        }
        let rule = self.rules.iter().find(|r| rest.starts_with(&r.unit))?;
        Some(digits + rule.unit.len())
    }
}

impl Default for UnitPatternSet {
    fn default() -> Self {
        Self::new(&DEFAULT_UNITS).expect("default unit list is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormConfig {
    pub units: UnitPatternSet,
    pub min_token_len: usize,
    /// Extra characters allowed through `clean_chars`.
    pub keep_chars: Vec<char>,
    /// Tokens shorter than `min_token_len` that are dropped even when they
    /// would otherwise be exempt (digits, units).
    pub stop_singletons: BTreeSet<String>,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            units: UnitPatternSet::default(),
            min_token_len: 2,
            keep_chars: Vec::new(),
            stop_singletons: BTreeSet::new(),
        }
    }
}

/// Character-wise lowercase. Characters whose lowercase form expands to
/// several code points keep only the first, so the character count is
/// unchanged.
pub fn to_lowercase(text: &str) -> String {
    text.chars()
        .map(|c| c.to_lowercase().next().unwrap_or(c))
        .collect()
}

/// Transliterates accented letters, then replaces everything outside
/// `[a-z0-9 ]` and `keep` with one space per character.
pub fn clean_chars(text: &str, keep: &[char]) -> String {
    text.chars()
        .map(|c| {
            let c = transliterate(c).unwrap_or(c);
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || keep.contains(&c) {
                c
            } else {
                ' '
            }
        })
        .collect()
}

/// Inserts a space after a quantity+unit that is fused with following
/// letters (`80ghora` → `80g hora`). Standalone quantities are untouched.
pub fn extract_units(text: &str, rules: &UnitPatternSet) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let mut token_start = true;
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        if token_start && c.is_ascii_digit() {
            let end = text[i..]
                .find(char::is_whitespace)
                .map_or(text.len(), |e| i + e);
            let token = &text[i..end];
            match rules.split_point(token) {
                Some(at) => {
                    out.push_str(&token[..at]);
                    out.push(' ');
                    out.push_str(&token[at..]);
                }
                None => out.push_str(token),
            }
            i = end;
            token_start = false;
            continue;
        }
        out.push(c);
        token_start = c.is_whitespace();
        i += c.len_utf8();
    }
    out
}

/// Collapses every whitespace run to a single space and trims both ends.
pub fn condense_spaces(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops tokens shorter than `min_token_len` unless they are pure digits,
/// a quantity+unit, or a bare unit. Tokens listed in `stop_singletons` are
/// dropped when short regardless of the exemptions.
pub fn filter_chars(
    text: &str,
    min_token_len: usize,
    stop_singletons: &BTreeSet<String>,
    rules: &UnitPatternSet,
) -> String {
    text.split_whitespace()
        .filter(|tok| {
            if tok.chars().count() >= min_token_len {
                return true;
            }
            if stop_singletons.contains(*tok) {
                return false;
            }
            tok.bytes().all(|b| b.is_ascii_digit()) || rules.is_quantity(tok) || rules.is_unit(tok)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize(text: &str, cfg: &NormConfig) -> NormalizedText {
    let s = to_lowercase(text);
    let s = clean_chars(&s, &cfg.keep_chars);
    let s = extract_units(&s, &cfg.units);
    let s = condense_spaces(&s);
    NormalizedText(filter_chars(
        &s,
        cfg.min_token_len,
        &cfg.stop_singletons,
        &cfg.units,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn units() -> UnitPatternSet {
        UnitPatternSet::default()
    }

    #[test]
    fn lowercase_examples() {
        assert_eq!(to_lowercase("SAB Johns"), "sab johns");
        assert_eq!(to_lowercase("abc123"), "abc123");
        assert_eq!(to_lowercase("CUECA SUNGA LUPO G817"), "cueca sunga lupo g817");
        // Expanding lowercase maps keep the character count.
        assert_eq!(to_lowercase("İx").chars().count(), 2);
    }

    #[test]
    fn clean_examples() {
        assert_eq!(clean_chars("sab. johns!", &[]), "sab  johns ");
        assert_eq!(clean_chars("maçã", &[]), "maca");
        assert_eq!(clean_chars("80g/100g", &[]), "80g 100g");
        assert_eq!(clean_chars("a-b", &['-']), "a-b");
        assert_eq!(clean_chars("tab\there", &[]), "tab here");
    }

    #[test]
    fn unit_examples() {
        let r = units();
        assert_eq!(extract_units("80ghora", &r), "80g hora");
        assert_eq!(extract_units("1kg", &r), "1kg");
        assert_eq!(extract_units("500mlx2", &r), "500ml x2");
        assert_eq!(extract_units("carne suin espinhaco 1kg", &r), "carne suin espinhaco 1kg");
        // A longer unit written out in full is not split into a shorter one.
        assert_eq!(extract_units("80mm", &r), "80mm");
        // Digits in the middle of a word are not a quantity.
        assert_eq!(extract_units("g817", &r), "g817");
        assert_eq!(extract_units("abc12gx", &r), "abc12gx");
    }

    #[test]
    fn condense_examples() {
        assert_eq!(condense_spaces("a  b   c"), "a b c");
        assert_eq!(condense_spaces(" x "), "x");
        assert_eq!(condense_spaces("sab  johns "), "sab johns");
    }

    #[test]
    fn filter_examples() {
        let r = units();
        let none = BTreeSet::new();
        assert_eq!(filter_chars("sab x johns", 2, &none, &r), "sab johns");
        assert_eq!(filter_chars("coca 2 l", 2, &none, &r), "coca 2 l");
        assert_eq!(filter_chars("a b c", 2, &none, &r), "");
        let stop: BTreeSet<String> = ["l".to_string()].into();
        assert_eq!(filter_chars("coca 2 l", 2, &stop, &r), "coca 2");
    }

    #[test]
    fn normalize_examples() {
        let cfg = NormConfig::default();
        assert_eq!(
            normalize("sab johns baby 80ghora sono.", &cfg).as_str(),
            "sab johns baby 80g hora sono"
        );
        assert_eq!(normalize("", &cfg).as_str(), "");
        assert_eq!(
            normalize("WHISKY Johnn Walker!!", &cfg).as_str(),
            "whisky johnn walker"
        );
        assert_eq!(
            normalize("CUECA SUNGA LUPO G817", &cfg).as_str(),
            "cueca sunga lupo g817"
        );
    }

    #[test]
    fn unit_set_validation() {
        assert!(UnitPatternSet::new::<&str>(&[]).is_err());
        assert!(UnitPatternSet::new(&["k9"]).is_err());
        let set = UnitPatternSet::new(&["m", "ml", "g"]).unwrap();
        let order: Vec<_> = set.units().collect();
        assert_eq!(order, ["ml", "m", "g"]);
    }

    fn digits(s: &str) -> Vec<char> {
        let mut d: Vec<char> = s.chars().filter(char::is_ascii_digit).collect();
        d.sort_unstable();
        d
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let cfg = NormConfig::default();
            let once = normalize(&s, &cfg);
            let twice = normalize(once.as_str(), &cfg);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn output_alphabet_and_spacing(s in "[a-zA-Z0-9 .,!çãé/\\-]{0,40}") {
            let out = normalize(&s, &NormConfig::default()).into_string();
            prop_assert!(out.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' '));
            prop_assert!(!out.contains("  "));
            prop_assert!(!out.starts_with(' ') && !out.ends_with(' '));
        }

        #[test]
        fn extract_units_preserves_digits(s in "[a-z0-9 ]{0,40}") {
            let out = extract_units(&s, &UnitPatternSet::default());
            prop_assert_eq!(digits(&s), digits(&out));
            prop_assert_eq!(out.replace(' ', ""), s.replace(' ', ""));
        }
    }
}
