use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{
    BatchManifest, Corpus, CorpusSet, ManifestEntry, ManifestHeader, MixtureSpec, RepeatPolicy,
    SpecialTokens, TokenizedDoc,
};
use crate::error::{bail, Error, Result};
use crate::rng::{self, Rng, RngState};

const EOS: u32 = SpecialTokens::DEFAULT.eos;

/// Concatenates documents with one eos after each, then cuts the stream into
/// `seq_len` windows. The trailing partial window is dropped.
pub fn pack_sequences<'a>(
    docs: impl IntoIterator<Item = &'a TokenizedDoc>,
    seq_len: usize,
) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        bail!(Config, "seq_len must be at least 2, got {seq_len}");
    }
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(seq_len);
    for doc in docs {
        for &id in doc.ids.iter().chain(std::iter::once(&EOS)) {
            cur.push(id);
            if cur.len() == seq_len {
                out.push(std::mem::replace(&mut cur, Vec::with_capacity(seq_len)));
            }
        }
    }
    Ok(out)
}

/// Position in a source's packed stream. `offset == doc.len()` is the eos
/// that follows the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cursor {
    pub doc: usize,
    pub offset: usize,
    /// Completed passes over the source.
    pub epoch: u64,
}

impl Cursor {
    fn token(&self, corpus: &Corpus) -> u32 {
        let ids = &corpus.docs()[self.doc].ids;
        ids.get(self.offset).copied().unwrap_or(EOS)
    }

    /// Tokens left before the end of the source.
    fn remaining(&self, corpus: &Corpus) -> usize {
        let docs = corpus.docs();
        let here = docs[self.doc].ids.len() + 1 - self.offset;
        here + docs[self.doc + 1..]
            .iter()
            .map(|d| d.ids.len() + 1)
            .sum::<usize>()
    }

    /// Moves forward `n` tokens, wrapping to the first document at the end.
    fn advance(&mut self, corpus: &Corpus, mut n: usize) {
        let docs = corpus.docs();
        while n > 0 {
            let left = docs[self.doc].ids.len() + 1 - self.offset;
            if n < left {
                self.offset += n;
                return;
            }
            n -= left;
            self.offset = 0;
            self.doc += 1;
            if self.doc == docs.len() {
                self.doc = 0;
                self.epoch += 1;
            }
        }
    }

    fn read(mut self, corpus: &Corpus, len: usize, out: &mut Vec<u32>) -> Self {
        for _ in 0..len {
            out.push(self.token(corpus));
            self.advance(corpus, 1);
        }
        self
    }
}

/// One training step's worth of sequences and where they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub step: u64,
    pub sequences: Vec<Vec<u32>>,
    pub entries: Vec<ManifestEntry>,
}

impl Batch {
    pub fn tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }
}

/// Everything needed to continue sampling exactly where a run stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rng: RngState,
    pub cursors: BTreeMap<String, Cursor>,
    pub step: u64,
    pub tokens: u64,
}

struct Source<'a> {
    id: String,
    policy: RepeatPolicy,
    corpus: Option<&'a Corpus>,
    cursor: Cursor,
}

/// Draws a source per sequence slot with probability equal to its weight and
/// reads the next `seq_len` tokens of that source's packed stream.
pub struct MixtureSampler<'a> {
    header: ManifestHeader,
    sources: Vec<Source<'a>>,
    dist: WeightedIndex<f64>,
    rng: Rng,
    step: u64,
    tokens: u64,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(
        mixture: &MixtureSpec,
        corpora: &'a CorpusSet,
        seq_len: usize,
        seed: u64,
        phase: usize,
    ) -> Result<Self> {
        mixture.validate()?;
        if seq_len < 2 {
            bail!(Config, "seq_len must be at least 2, got {seq_len}");
        }
        let sources: Vec<Source> = mixture
            .active()
            .map(|s| Source {
                id: s.source_id.clone(),
                policy: s.repeat_policy,
                corpus: corpora.get(&s.source_id),
                cursor: Cursor::default(),
            })
            .collect();
        let weights: Vec<f64> = mixture.active().map(|s| s.weight).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
        Ok(Self {
            header: ManifestHeader {
                seed,
                phase,
                seq_len,
            },
            sources,
            dist,
            rng: rng::stream(seed, rng::Stream::Data(phase)),
            step: 0,
            tokens: 0,
        })
    }

    pub fn header(&self) -> ManifestHeader {
        self.header
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rng: RngState::capture(&self.rng),
            cursors: self
                .sources
                .iter()
                .map(|s| (s.id.clone(), s.cursor))
                .collect(),
            step: self.step,
            tokens: self.tokens,
        }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<()> {
        for s in &mut self.sources {
            let c = state.cursors.get(&s.id).ok_or_else(|| {
                Error::Integrity(format!("sampler state lacks source {:?}", s.id))
            })?;
            if let Some(corpus) = s.corpus {
                if c.doc >= corpus.len() || c.offset > corpus.docs()[c.doc].ids.len() {
                    bail!(Integrity, "cursor for {:?} is outside its corpus", s.id);
                }
            }
            s.cursor = *c;
        }
        if state.cursors.len() != self.sources.len() {
            bail!(Integrity, "sampler state names sources outside the mixture");
        }
        self.rng = state.rng.restore()?;
        self.step = state.step;
        self.tokens = state.tokens;
        Ok(())
    }

    /// Chooses the source for the next slot and records where it starts,
    /// advancing that source's cursor. `tokens` receives the window if given.
    fn draw(&mut self, slot: usize, tokens: Option<&mut Vec<u32>>) -> Result<ManifestEntry> {
        let seq_len = self.header.seq_len;
        let idx = self.dist.sample(&mut self.rng);
        let src = &mut self.sources[idx];
        let corpus = match src.corpus {
            Some(c) if !c.is_empty() => c,
            Some(_) => bail!(Data, "source {:?} is empty", src.id),
            None => bail!(Data, "source {:?} has no loaded corpus", src.id),
        };
        if src.policy == RepeatPolicy::Truncate
            && (src.cursor.epoch > 0 || src.cursor.remaining(corpus) < seq_len)
        {
            bail!(
                Data,
                "source {:?} exhausted (repeat_policy = truncate)",
                src.id
            );
        }
        let entry = ManifestEntry {
            step: self.step,
            slot,
            source_id: src.id.clone(),
            doc_id: corpus.docs()[src.cursor.doc].doc_id.clone(),
            offset: src.cursor.offset,
            length: seq_len,
        };
        match tokens {
            Some(out) => src.cursor = src.cursor.read(corpus, seq_len, out),
            None => src.cursor.advance(corpus, seq_len),
        }
        Ok(entry)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        let mut batch = Batch {
            step: self.step,
            sequences: Vec::with_capacity(batch_size),
            entries: Vec::with_capacity(batch_size),
        };
        for slot in 0..batch_size {
            let mut seq = Vec::with_capacity(self.header.seq_len);
            batch.entries.push(self.draw(slot, Some(&mut seq))?);
            batch.sequences.push(seq);
        }
        self.step += 1;
        self.tokens += batch.tokens();
        Ok(batch)
    }

    /// Like [`MixtureSampler::next_batch`] without materializing tokens.
    pub fn next_entries(&mut self, batch_size: usize) -> Result<Vec<ManifestEntry>> {
        if batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        let entries = (0..batch_size)
            .map(|slot| self.draw(slot, None))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        self.tokens += (batch_size * self.header.seq_len) as u64;
        Ok(entries)
    }
}

/// Sequences the next step of a phase may take: the scheduled batch size,
/// trimmed so the phase never exceeds its budget. Zero once fewer than
/// `seq_len` tokens of budget remain, which ends the phase.
pub fn phase_batch_size(token_budget: u64, tokens: u64, seq_len: usize, scheduled: usize) -> usize {
    let left = token_budget.saturating_sub(tokens) / seq_len as u64;
    scheduled.min(left.min(usize::MAX as u64) as usize)
}

/// Runs a sampler until the phase budget is spent and returns the manifest. `batch_size_at` maps tokens seen so far in the phase to the
/// number of sequences in the next step.
pub fn plan_phase(
    mixture: &MixtureSpec,
    corpora: &CorpusSet,
    token_budget: u64,
    seq_len: usize,
    seed: u64,
    phase: usize,
    batch_size_at: impl Fn(u64) -> usize,
) -> Result<BatchManifest> {
    if token_budget < seq_len as u64 {
        bail!(
            Config,
            "token budget {token_budget} is shorter than one sequence"
        );
    }
    let mut sampler = MixtureSampler::new(mixture, corpora, seq_len, seed, phase)?;
    let mut manifest = BatchManifest::new(sampler.header());
    loop {
        let bs = phase_batch_size(
            token_budget,
            sampler.tokens(),
            seq_len,
            batch_size_at(sampler.tokens()),
        );
        if bs == 0 {
            break;
        }
        manifest.entries.extend(sampler.next_entries(bs)?);
    }
    Ok(manifest)
}

/// Rebuilds the batches of a recorded manifest, one per step.
pub fn replay_manifest<'a>(
    manifest: &'a BatchManifest,
    corpora: &'a CorpusSet,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    let mut i = 0;
    std::iter::from_fn(move || {
        let entries = &manifest.entries;
        if i >= entries.len() {
            return None;
        }
        let step = entries[i].step;
        let mut batch = Batch {
            step,
            sequences: Vec::new(),
            entries: Vec::new(),
        };
        while i < entries.len() && entries[i].step == step {
            let e = &entries[i];
            i += 1;
            match replay_entry(e, corpora) {
                Ok(seq) => batch.sequences.push(seq),
                Err(err) => {
                    i = entries.len();
                    return Some(Err(err));
                }
            }
            batch.entries.push(e.clone());
        }
        Some(Ok(batch))
    })
}

fn replay_entry(e: &ManifestEntry, corpora: &CorpusSet) -> Result<Vec<u32>> {
    let describe = || {
        format!(
            "manifest entry step {} slot {} (source {:?}, doc {:?})",
            e.step, e.slot, e.source_id, e.doc_id
        )
    };
    let Some(corpus) = corpora.get(&e.source_id) else {
        bail!(Integrity, "{}: unknown source", describe());
    };
    let Some(doc) = corpus.position(&e.doc_id) else {
        bail!(Integrity, "{}: doc_id not in corpus", describe());
    };
    if e.offset > corpus.docs()[doc].ids.len() {
        bail!(
            Integrity,
            "{}: offset {} past document end",
            describe(),
            e.offset
        );
    }
    let mut out = Vec::with_capacity(e.length);
    Cursor {
        doc,
        offset: e.offset,
        epoch: 0,
    }
    .read(corpus, e.length, &mut out);
    Ok(out)
}
