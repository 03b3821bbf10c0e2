use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TokenizedDoc;
use crate::error::{bail, Error, Result};

/// Reserved ids shared by every tokenizer mode. They occupy `0..N_SPECIAL`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub eos: u32,
    pub mask: u32,
    pub unk: u32,
}

impl SpecialTokens {
    pub const DEFAULT: SpecialTokens = SpecialTokens {
        pad: 0,
        eos: 1,
        mask: 2,
        unk: 3,
    };

    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.eos || id == self.mask || id == self.unk
    }
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self::DEFAULT
    }
}

pub const N_SPECIAL: u32 = 4;

/// Serializable description of which tokenizer a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    #[default]
    ByteLevel,
    /// JSON array of token strings; ids follow the special tokens in file order.
    ExternalVocab { path: PathBuf },
}

#[derive(Debug, Clone)]
enum Mode {
    ByteLevel,
    External {
        pieces: Vec<Vec<u8>>,
        lookup: HashMap<Vec<u8>, u32>,
        max_len: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    mode: Mode,
    specials: SpecialTokens,
}

impl Tokenizer {
    /// 256 byte tokens after the specials.
    pub const BYTE_VOCAB_SIZE: usize = 256 + N_SPECIAL as usize;

    pub fn byte_level() -> Self {
        Self {
            mode: Mode::ByteLevel,
            specials: SpecialTokens::DEFAULT,
        }
    }

    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self> {
        match spec {
            TokenizerSpec::ByteLevel => Ok(Self::byte_level()),
            TokenizerSpec::ExternalVocab { path } => Self::from_vocab_file(path),
        }
    }

    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces: Vec<String> = serde_json::from_str(&text)?;
        Self::from_vocab(pieces)
    }

    pub fn from_vocab<S: AsRef<str>>(pieces: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut lookup = HashMap::new();
        let mut stored = Vec::new();
        for piece in pieces {
            let bytes = piece.as_ref().as_bytes().to_vec();
            if bytes.is_empty() {
                bail!(Config, "vocabulary contains an empty piece");
            }
            let id = N_SPECIAL + stored.len() as u32;
            if lookup.insert(bytes.clone(), id).is_some() {
                bail!(Config, "duplicate vocabulary piece {:?}", piece.as_ref());
            }
            stored.push(bytes);
        }
        let max_len = stored.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            mode: Mode::External {
                pieces: stored,
                lookup,
                max_len,
            },
            specials: SpecialTokens::DEFAULT,
        })
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn vocab_size(&self) -> usize {
        match &self.mode {
            Mode::ByteLevel => Self::BYTE_VOCAB_SIZE,
            Mode::External { pieces, .. } => N_SPECIAL as usize + pieces.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            bail!(Input, "cannot tokenize empty text");
        }
        Ok(self.encode_bytes(text.as_bytes()))
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        match &self.mode {
            Mode::ByteLevel => bytes.iter().map(|&b| b as u32 + N_SPECIAL).collect(),
            Mode::External {
                lookup, max_len, ..
            } => {
                let mut out = Vec::new();
                let mut i = 0;
                while i < bytes.len() {
                    let longest = (*max_len).min(bytes.len() - i);
                    let hit = (1..=longest)
                        .rev()
                        .find_map(|len| lookup.get(&bytes[i..i + len]).map(|&id| (id, len)));
                    match hit {
                        Some((id, len)) => {
                            out.push(id);
                            i += len;
                        }
                        None => {
                            out.push(self.specials.unk);
                            i += 1;
                        }
                    }
                }
                out
            }
        }
    }

    /// Bytes for the non-special ids; specials decode to nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if id < N_SPECIAL {
                continue;
            }
            let rel = (id - N_SPECIAL) as usize;
            match &self.mode {
                Mode::ByteLevel if rel < 256 => out.push(rel as u8),
                Mode::External { pieces, .. } if rel < pieces.len() => {
                    out.extend_from_slice(&pieces[rel])
                }
                _ => {}
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn tokenize(&self, doc_id: impl Into<String>, text: &str) -> Result<TokenizedDoc> {
        Ok(TokenizedDoc {
            doc_id: doc_id.into(),
            ids: self.encode(text)?,
        })
    }

    /// Id of a lone newline, if the vocabulary has one.
    pub fn newline_id(&self) -> Option<u32> {
        match self.encode_bytes(b"\n").as_slice() {
            [id] if *id != self.specials.unk => Some(*id),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_identity() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.encode("A").unwrap(), vec![65 + N_SPECIAL]);
        assert!(matches!(t.encode(""), Err(Error::Input(_))));
        assert_eq!(t.newline_id(), Some(10 + N_SPECIAL));
    }

    #[test]
    fn byte_round_trip_random() {
        let t = Tokenizer::byte_level();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let len = rng.gen_range(1..64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes)), bytes);
        }
    }

    #[test]
    fn external_vocab_longest_match() {
        let t = Tokenizer::from_vocab(["a", "b", "ab", "abc", " "]).unwrap();
        let ids = t.encode("abcab b").unwrap();
        // abc | ab | ' ' | b
        assert_eq!(ids, vec![7, 6, 8, 5]);
        assert_eq!(t.decode(&ids), "abcab b");
        assert_eq!(t.encode("z").unwrap(), vec![t.specials().unk]);
        assert_eq!(t.vocab_size(), 9);
        assert!(Tokenizer::from_vocab(["a", "a"]).is_err());
    }
}
