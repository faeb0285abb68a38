//! Dataset ingestion: `;`-delimited CSV loading, cleaning and
//! de-duplication, merging of augmentation corpora with label
//! harmonization, stratified splitting and label-space construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::textnorm::{normalize, NormConfig, NormalizedText};

/// The four hierarchy levels, coarse to fine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Segment,
    Category,
    Subcategory,
    Product,
}

impl Level {
    pub const ALL: [Level; 4] = [
        Level::Segment,
        Level::Category,
        Level::Subcategory,
        Level::Product,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Segment => "segment",
            Level::Category => "category",
            Level::Subcategory => "subcategory",
            Level::Product => "product",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Invalid(format!("unknown hierarchy level `{s}`")))
    }
}

/// CSV header names for the item text and the four label columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub item: String,
    pub labels: [String; 4],
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            item: "nm_item".into(),
            labels: [
                "segmento".into(),
                "categoria".into(),
                "subcategoria".into(),
                "nm_product".into(),
            ],
        }
    }
}

impl ColumnMap {
    fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.item.as_str()).chain(self.labels.iter().map(String::as_str))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub item: String,
    pub labels: [String; 4],
    /// 1-based line number in the source file.
    pub line: usize,
}

impl RawRecord {
    fn has_missing_field(&self) -> bool {
        self.item.trim().is_empty() || self.labels.iter().any(|l| l.trim().is_empty())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    MissingField,
    FieldCount,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::MissingField => "missing_field",
            RejectReason::FieldCount => "field_count",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Default)]
pub struct LoadResult {
    pub records: Vec<RawRecord>,
    pub rejected: Vec<Rejected>,
}

pub fn load_csv(path: &Path, columns: &ColumnMap, delimiter: u8) -> Result<LoadResult> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, columns, delimiter).map_err(|e| match e {
        Error::Csv { message, .. } => Error::Csv {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(
    reader: R,
    columns: &ColumnMap,
    delimiter: u8,
) -> Result<LoadResult> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: Default::default(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let width = header.len();
    let mut positions = Vec::with_capacity(5);
    for name in columns.names() {
        let pos = header
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        positions.push(pos);
    }

    let mut out = LoadResult::default();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != width {
            out.rejected.push(Rejected {
                line,
                reason: RejectReason::FieldCount,
            });
            continue;
        }
        let field = |i: usize| row.get(positions[i]).unwrap_or("").to_string();
        let rec = RawRecord {
            item: field(0),
            labels: [field(1), field(2), field(3), field(4)],
            line,
        };
        if rec.has_missing_field() {
            out.rejected.push(Rejected {
                line,
                reason: RejectReason::MissingField,
            });
        } else {
            out.records.push(rec);
        }
    }
    Ok(out)
}

/// One normalized product description and its four labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledRecord {
    pub item_text: NormalizedText,
    pub labels: [String; 4],
}

impl LabeledRecord {
    pub fn label(&self, level: Level) -> &str {
        &self.labels[level.index()]
    }
}

/// Cleaned records plus the source identifier each one came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<LabeledRecord>,
    provenance: Vec<String>,
}

impl Corpus {
    /// Builds a corpus from already-clean records, dropping exact duplicates.
    pub fn from_records(records: Vec<LabeledRecord>, source: &str) -> Self {
        let n = records.len();
        let mut c = Corpus {
            records,
            provenance: vec![source.to_string(); n],
        };
        c.dedup();
        c
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabeledRecord, &str)> {
        self.records
            .iter()
            .zip(self.provenance.iter().map(String::as_str))
    }

    /// Relabels every record's provenance, e.g. to mark a split role.
    pub fn with_source(mut self, source: &str) -> Self {
        for p in &mut self.provenance {
            *p = source.to_string();
        }
        self
    }

    fn push(&mut self, rec: LabeledRecord, source: String) {
        self.records.push(rec);
        self.provenance.push(source);
    }

    /// Removes exact duplicates keeping the first occurrence; returns how
    /// many were dropped.
    fn dedup(&mut self) -> usize {
        let mut seen = HashSet::with_capacity(self.records.len());
        let before = self.records.len();
        let keep: Vec<bool> = self.records.iter().map(|r| seen.insert(r.clone())).collect();
        let mut k = keep.iter();
        self.records.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.provenance.retain(|_| *k.next().unwrap());
        before - self.records.len()
    }

    pub fn concat(mut self, other: Corpus) -> Corpus {
        self.records.extend(other.records);
        self.provenance.extend(other.provenance);
        self.dedup();
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CleanStats {
    pub input: usize,
    pub dropped_missing: usize,
    pub dropped_empty_text: usize,
    pub dropped_duplicates: usize,
}

impl CleanStats {
    pub fn dropped(&self) -> usize {
        self.dropped_missing + self.dropped_empty_text + self.dropped_duplicates
    }
}

fn clean_label(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_uppercase()
}

/// Drops incomplete records, normalizes item text, uppercases labels and
/// removes exact duplicates (first occurrence wins).
pub fn clean(
    records: &[RawRecord],
    source: &str,
    norm: &NormConfig,
    exec: Exec,
) -> (Corpus, CleanStats) {
    let mut stats = CleanStats {
        input: records.len(),
        ..Default::default()
    };
    let normalized = exec.map(records, |r| {
        if r.has_missing_field() {
            None
        } else {
            Some(normalize(&r.item, norm))
        }
    });
    let mut corpus = Corpus::default();
    for (raw, text) in records.iter().zip(normalized) {
        let Some(text) = text else {
            stats.dropped_missing += 1;
            continue;
        };
        if text.is_empty() {
            stats.dropped_empty_text += 1;
            continue;
        }
        let labels = [
            clean_label(&raw.labels[0]),
            clean_label(&raw.labels[1]),
            clean_label(&raw.labels[2]),
            clean_label(&raw.labels[3]),
        ];
        corpus.push(
            LabeledRecord {
                item_text: text,
                labels,
            },
            source.to_string(),
        );
    }
    stats.dropped_duplicates = corpus.dedup();
    (corpus, stats)
}

/// Writes a corpus in the input schema (header from `columns`).
pub fn write_csv(corpus: &Corpus, path: &Path, columns: &ColumnMap, delimiter: u8) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(corpus, file, columns, delimiter).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_csv_to<W: std::io::Write>(
    corpus: &Corpus,
    writer: W,
    columns: &ColumnMap,
    delimiter: u8,
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    w.write_record(columns.names())?;
    for r in &corpus.records {
        w.write_record(
            std::iter::once(r.item_text.as_str()).chain(r.labels.iter().map(String::as_str)),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes raw records (text as given, no normalization).
pub fn write_raw_csv(records: &[RawRecord], path: &Path, columns: &ColumnMap, delimiter: u8) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(file);
    w.write_record(columns.names()).map_err(csv_err)?;
    for r in records {
        w.write_record(std::iter::once(r.item.as_str()).chain(r.labels.iter().map(String::as_str)))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Exact-string label rewrite table for augmentation data.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HarmonizationMap {
    map: HashMap<String, String>,
}

impl HarmonizationMap {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        Self {
            map: pairs
                .into_iter()
                .map(|(k, v)| (clean_label(k.as_ref()), clean_label(v.as_ref())))
                .collect(),
        }
    }

    /// Reads a two-column `from;to` file. A literal `from;to` header row is
    /// skipped.
    pub fn load(path: &Path, delimiter: u8) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(false)
            .from_reader(file);
        let mut pairs = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            if row.len() != 2 {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected 2 fields, found {}", i + 1, row.len()),
                });
            }
            if i == 0 && row[0].trim() == "from" && row[1].trim() == "to" {
                continue;
            }
            pairs.push((row[0].to_string(), row[1].to_string()));
        }
        Ok(Self::new(pairs))
    }

    pub fn get(&self, label: &str) -> Option<&str> {
        self.map.get(label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub inputs: usize,
    pub rewritten: usize,
    /// Distinct extra-corpus labels with no harmonization entry.
    pub unmapped_labels: Vec<String>,
    pub dropped_duplicates: usize,
}

pub fn merge_augmentation(
    base: &Corpus,
    extra: &Corpus,
    map: &HarmonizationMap,
) -> (Corpus, MergeStats) {
    let mut stats = MergeStats {
        inputs: base.len() + extra.len(),
        ..Default::default()
    };
    let mut unmapped = std::collections::BTreeSet::new();
    let mut merged = base.clone();
    for (rec, src) in extra.iter() {
        let mut rec = rec.clone();
        for label in rec.labels.iter_mut() {
            match map.get(label) {
                Some(to) => {
                    if to != label {
                        stats.rewritten += 1;
                    }
                    *label = to.to_string();
                }
                None => {
                    unmapped.insert(label.clone());
                }
            }
        }
        merged.push(rec, src.to_string());
    }
    stats.dropped_duplicates = merged.dedup();
    stats.unmapped_labels = unmapped.into_iter().collect();
    (merged, stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: Level,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            seed: 42,
            stratify: Level::Product,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::config("split.ratios", "every ratio must be > 0"));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "split.ratios",
                format!("ratios must sum to 1, got {sum}"),
            ));
        }
        Ok(())
    }
}

/// Parses `a,b,c` into three ratios.
pub fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("split.ratios", format!("cannot parse `{s}`")))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| Error::config("split.ratios", "expected three comma-separated values"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

pub const TRAIN_SOURCE: &str = "split:train";
pub const VAL_SOURCE: &str = "split:val";
pub const TEST_SOURCE: &str = "split:test";

/// Seeded per-stratum partition. Strata with fewer than three records go
/// entirely to train. Within each split, records keep corpus order.
pub fn stratified_split(corpus: &Corpus, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus to split"));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        strata.entry(r.label(spec.stratify)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // 0 = train, 1 = val, 2 = test
    let mut assign = vec![0u8; corpus.len()];
    for idx in strata.values_mut() {
        let n = idx.len();
        if n < 3 {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = (n as f64 * spec.ratios[1]).round() as usize;
        let n_test = (n as f64 * spec.ratios[2]).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        for &i in &idx[n_train..n_train + n_val] {
            assign[i] = 1;
        }
        for &i in &idx[n_train + n_val..] {
            assign[i] = 2;
        }
    }
    let mut parts = [Corpus::default(), Corpus::default(), Corpus::default()];
    let sources = [TRAIN_SOURCE, VAL_SOURCE, TEST_SOURCE];
    for (i, rec) in corpus.records.iter().enumerate() {
        let k = assign[i] as usize;
        parts[k].push(rec.clone(), sources[k].to_string());
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}

/// Sorted-unique labels of one level with their index map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new(mut labels: Vec<String>) -> Self {
        labels.sort();
        labels.dedup();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSpace {
    pub levels: [LabelVocab; 4],
}

impl LabelSpace {
    pub fn level(&self, level: Level) -> &LabelVocab {
        &self.levels[level.index()]
    }

    pub fn sizes(&self) -> [usize; 4] {
        [
            self.levels[0].len(),
            self.levels[1].len(),
            self.levels[2].len(),
            self.levels[3].len(),
        ]
    }

    /// Index of each label, or `None` if any level's label is unknown.
    pub fn encode(&self, rec: &LabeledRecord) -> Option<[usize; 4]> {
        let mut out = [0; 4];
        for l in Level::ALL {
            out[l.index()] = self.level(l).index_of(rec.label(l))?;
        }
        Some(out)
    }
}

pub fn label_space(corpus: &Corpus) -> Result<LabelSpace> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus for label space"));
    }
    let collect = |l: Level| {
        LabelVocab::new(
            corpus
                .records
                .iter()
                .map(|r| r.label(l).to_string())
                .collect(),
        )
    };
    Ok(LabelSpace {
        levels: Level::ALL.map(collect),
    })
}
