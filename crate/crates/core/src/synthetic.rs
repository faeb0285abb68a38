//! Generated product descriptions over a small 3/6/9/12-label hierarchy.
//! Each product has two head nouns that appear only under it; brands,
//! descriptors and quantities are shared noise. Used by tests and
//! benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{clean, Corpus, RawRecord};
use crate::exec::Exec;
use crate::textnorm::NormConfig;

pub const PRODUCTS: usize = 12;

const NOUNS: [&str; 2 * PRODUCTS] = [
    "leite", "achocolatado", "iogurte", "coalhada", "queijo", "requeijao", "manteiga", "margarina",
    "sabonete", "sabonetinho", "shampoo", "condicionador", "fralda", "lenco", "cerveja", "chope",
    "vinho", "espumante", "arroz", "feijao", "biscoito", "bolacha", "detergente", "amaciante",
];
const BRANDS: [&str; 8] = ["nestle", "tio", "johns", "dove", "omo", "piracanjuba", "elege", "camil"];
const DESCRIPTORS: [&str; 10] = [
    "integral", "light", "zero", "kids", "premium", "tradicional", "grande", "mini", "sache", "pct",
];
const UNITS: [&str; 5] = ["g", "kg", "ml", "l", "un"];

/// Hierarchy indices `[segment, category, subcategory, product]`.
pub fn hierarchy(product: usize) -> [usize; 4] {
    let sub = product * 9 / PRODUCTS;
    let cat = sub * 6 / 9;
    [cat / 2, cat, sub, product]
}

pub fn label_names(product: usize) -> [String; 4] {
    let [s, c, sc, p] = hierarchy(product);
    [
        format!("SEGMENT {s}"),
        format!("CATEGORY {c}"),
        format!("SUBCATEGORY {sc}"),
        format!("PRODUCT {p}"),
    ]
}

/// `n` raw records, products cycling so every class is represented.
pub fn records(n: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = i % PRODUCTS;
            let mut parts = vec![
                NOUNS[2 * p + rng.gen_range(0..2)].to_string(),
                BRANDS.choose(&mut rng).unwrap().to_string(),
                format!("{}{}", rng.gen_range(1..1000), UNITS.choose(&mut rng).unwrap()),
            ];
            for _ in 0..rng.gen_range(0..3) {
                parts.push(DESCRIPTORS.choose(&mut rng).unwrap().to_string());
            }
            parts[1..].shuffle(&mut rng);
            let mut item = parts.join(" ");
            if rng.gen_bool(0.3) {
                item = item.to_uppercase();
            }
            if rng.gen_bool(0.2) {
                item.push('.');
            }
            RawRecord {
                item,
                labels: label_names(p),
                line: i + 2,
            }
        })
        .collect()
}

/// Cleaned corpus of (up to) `n` records; exact duplicates are dropped.
pub fn corpus(n: usize, seed: u64) -> Corpus {
    clean(&records(n, seed), "synthetic", &NormConfig::default(), Exec::Sequential).0
}
