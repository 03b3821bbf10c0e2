//! Deterministic toy corpora for desk runs and tests. Text is drawn from a
//! small grammar whose flavor depends on the source name (prose, code-like or
//! arithmetic), so a byte-level model has real structure to learn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusSet, MixtureSpec, Tokenizer};
use crate::error::Result;

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "river", "stone", "tree", "house", "child", "teacher", "window",
    "garden", "letter", "market", "engine", "cloud", "road",
];
const ADJS: &[&str] = &[
    "small", "red", "old", "quiet", "bright", "heavy", "green", "cold",
];
const VERBS: &[&str] = &[
    "sees", "finds", "holds", "moves", "likes", "builds", "paints", "follows",
];
const DETS: &[&str] = &["the", "a", "this", "every"];
const IDENTS: &[&str] = &["x", "y", "count", "total", "item", "value", "idx", "buf"];

#[derive(Clone, Copy)]
enum Flavor {
    Prose,
    Code,
    Math,
}

fn flavor(source_id: &str) -> Flavor {
    if ["code", "starcoder"].iter().any(|k| source_id.contains(k)) {
        Flavor::Code
    } else if source_id.contains("math") {
        Flavor::Math
    } else {
        Flavor::Prose
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("nonempty word list")
}

fn sentence(rng: &mut ChaCha8Rng, f: Flavor) -> String {
    match f {
        Flavor::Prose => format!(
            "{} {} {} {} {} {}.",
            pick(rng, DETS),
            pick(rng, ADJS),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, DETS),
            pick(rng, NOUNS)
        ),
        Flavor::Code => {
            let (a, b) = (pick(rng, IDENTS), pick(rng, IDENTS));
            match rng.gen_range(0..3) {
                0 => format!("let {a} = {b} + {};", rng.gen_range(0..10)),
                1 => format!("if {a} > {b} {{ {a} = {b}; }}"),
                _ => format!("fn {a}({b}) {{ return {b}; }}"),
            }
        }
        Flavor::Math => {
            let (a, b) = (rng.gen_range(0..10u32), rng.gen_range(0..10u32));
            format!("{a} + {b} = {}.", a + b)
        }
    }
}

fn source_rng(source_id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(source_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Documents for one source totalling at least `min_bytes` bytes.
pub fn synthetic_texts(source_id: &str, seed: u64, min_bytes: usize) -> Vec<String> {
    let mut rng = source_rng(source_id, seed);
    let f = flavor(source_id);
    let sep = if matches!(f, Flavor::Code) { "\n" } else { " " };
    let mut docs = Vec::new();
    let mut total = 0;
    while total < min_bytes {
        let n = rng.gen_range(2..8);
        let doc = (0..n)
            .map(|_| sentence(&mut rng, f))
            .collect::<Vec<_>>()
            .join(sep);
        total += doc.len() + 1;
        docs.push(doc);
    }
    docs
}

/// A byte-level corpus for every positive-weight source of `mixtures`,
/// sized in proportion to the source's largest weight (at least
/// `min_tokens_per_source`) out of `total_tokens`.
pub fn synthetic_corpora<'a>(
    mixtures: impl IntoIterator<Item = &'a MixtureSpec>,
    total_tokens: usize,
    min_tokens_per_source: usize,
    seed: u64,
) -> Result<CorpusSet> {
    let mut weights: std::collections::BTreeMap<&str, f64> = Default::default();
    for m in mixtures {
        for s in m.active() {
            let w = weights.entry(&s.source_id).or_insert(0.0);
            *w = w.max(s.weight);
        }
    }
    let tok = Tokenizer::byte_level();
    let mut set = CorpusSet::new();
    for (id, w) in weights {
        let size = ((total_tokens as f64 * w) as usize).max(min_tokens_per_source);
        set.insert(
            id,
            Corpus::from_texts(&tok, &synthetic_texts(id, seed, size))?,
        );
    }
    Ok(set)
}
