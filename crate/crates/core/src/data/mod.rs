//! Tokenization, corpora, weighted multi-source sampling and the batch
//! manifests that make every run replayable.
//!
//! Each source is read as one packed stream: its documents in file order,
//! each followed by a single eos. A sequence slot takes the next `seq_len`
//! tokens of one source, so a window may straddle documents. The manifest
//! records the document and offset where each window starts.

mod corpus;
mod manifest;
mod mixture;
mod sampler;
mod synthetic;
mod tokenizer;

pub use corpus::{Corpus, CorpusSet, TokenizedDoc};
pub use manifest::{BatchManifest, ManifestEntry, ManifestHeader, ManifestWriter};
pub use mixture::{MixtureSpec, RepeatPolicy, SourceSpec, WEIGHT_SUM_TOLERANCE};
pub use sampler::{
    pack_sequences, phase_batch_size, plan_phase, replay_manifest, Batch, Cursor, MixtureSampler,
    SamplerState,
};
pub use synthetic::{synthetic_corpora, synthetic_texts};
pub use tokenizer::{SpecialTokens, Tokenizer, TokenizerSpec, N_SPECIAL};

/// Vocabulary size of the byte-level tokenizer.
pub const BYTE_VOCAB_SIZE: usize = Tokenizer::BYTE_VOCAB_SIZE;
