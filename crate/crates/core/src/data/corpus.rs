use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use super::{MixtureSpec, Tokenizer};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub ids: Vec<u32>,
}

#[derive(Deserialize)]
struct Record {
    doc_id: serde_json::Value,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    ids: Option<Vec<u32>>,
}

fn doc_id_string(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => bail!(Input, "doc_id must be a string or number, got {other}"),
    }
}

/// Documents of one source, in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<TokenizedDoc>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_docs(docs: Vec<TokenizedDoc>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.ids.is_empty() {
                bail!(Input, "document {:?} is empty", doc.doc_id);
            }
            if index.insert(doc.doc_id.clone(), i).is_some() {
                bail!(Input, "duplicate doc_id {:?}", doc.doc_id);
            }
        }
        Ok(Self { docs, index })
    }

    /// Tokenizes each text with `doc_id` = its position.
    pub fn from_texts<S: AsRef<str>>(tokenizer: &Tokenizer, texts: &[S]) -> Result<Self> {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| tokenizer.tokenize(i.to_string(), t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_docs(docs)
    }

    /// Newline-delimited JSON records `{"doc_id", "text" | "ids"}`.
    pub fn from_jsonl<R: BufRead>(reader: R, tokenizer: &Tokenizer) -> Result<Self> {
        let vocab = tokenizer.vocab_size();
        let mut docs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            let doc_id = doc_id_string(&rec.doc_id)?;
            let ids = match (rec.text, rec.ids) {
                (Some(text), None) => tokenizer.encode(&text)?,
                (None, Some(ids)) => {
                    if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
                        bail!(
                            Data,
                            "doc {doc_id:?}: id {bad} outside vocabulary of {vocab}"
                        );
                    }
                    ids
                }
                _ => bail!(
                    Data,
                    "line {}: record needs exactly one of \"text\" or \"ids\"",
                    lineno + 1
                ),
            };
            docs.push(TokenizedDoc { doc_id, ids });
        }
        Self::from_docs(docs)
    }

    pub fn load(path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(std::io::BufReader::new(file), tokenizer)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[TokenizedDoc] {
        &self.docs
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.ids.len()).sum()
    }
}

/// Corpora keyed by source id.
#[derive(Debug, Clone, Default)]
pub struct CorpusSet {
    sources: BTreeMap<String, Corpus>,
}

impl CorpusSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source_id: impl Into<String>, corpus: Corpus) {
        self.sources.insert(source_id.into(), corpus);
    }

    pub fn with(mut self, source_id: impl Into<String>, corpus: Corpus) -> Self {
        self.insert(source_id, corpus);
        self
    }

    pub fn get(&self, source_id: &str) -> Option<&Corpus> {
        self.sources.get(source_id)
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.sources.keys().map(String::as_str)
    }

    /// Loads every source with a positive weight in any of `mixtures`. A
    /// source id that appears with two different paths is a config error.
    pub fn load<'a>(
        mixtures: impl IntoIterator<Item = &'a MixtureSpec>,
        tokenizer: &Tokenizer,
    ) -> Result<Self> {
        let mut paths: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
        for mixture in mixtures {
            for src in mixture.sources.iter().filter(|s| s.weight > 0.0) {
                let Some(path) = &src.path else {
                    bail!(Config, "source {:?} has no path", src.source_id);
                };
                if let Some(prev) = paths.insert(src.source_id.clone(), path.clone()) {
                    if &prev != path {
                        bail!(
                            Config,
                            "source {:?} bound to both {} and {}",
                            src.source_id,
                            prev.display(),
                            path.display()
                        );
                    }
                }
            }
        }
        let mut set = Self::new();
        for (id, path) in paths {
            set.insert(id, Corpus::load(&path, tokenizer)?);
        }
        Ok(set)
    }
}
