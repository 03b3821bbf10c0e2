//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "TWINLMCK" | version u32 | model config digest [32]
//! metadata_len u64 | metadata JSON
//! tensor_count u32 | per tensor: name_len u32, name, ndim u32, dims u64.., f32 data
//! has_optimizer u8 | [adam_step u64 | per tensor: m f32.., v f32..]
//! sha256 of everything above [32]
//! ```

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainRunConfig};
use crate::data::SamplerState;
use crate::error::{bail, Error, Result};
use crate::model::{AttentionMode, ModelConfig, TransformerModel};
use crate::objectives::ObjectiveKind;
use crate::rng::{self, RngState, Stream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TWINLMCK";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRngState {
    pub masking: RngState,
    pub dropout: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub mode: AttentionMode,
    pub objective: ObjectiveKind,
    pub tokens_seen: u64,
    pub step: u64,
    pub phase_index: usize,
    /// RoPE bases in effect (global, local).
    pub rope_bases: (f64, f64),
    /// Every phase of `run` has been consumed.
    pub completed: bool,
    pub rng: RunRngState,
    /// Cursor of the current phase's sampler; `None` at a phase start.
    pub sampler: Option<SamplerState>,
    pub run: TrainRunConfig,
    pub parameter_digest: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: TransformerModel<f32>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// The step-zero state of `run`, without optimizer moments.
    pub fn initial(run: &TrainRunConfig) -> Result<Self> {
        run.validate()?;
        let model = TransformerModel::build(run.model.clone(), run.seed)?;
        let phase = &run.phases[0];
        Ok(Self {
            meta: CheckpointMeta {
                model: run.model.clone(),
                mode: run.mode,
                objective: phase.objective.kind,
                tokens_seen: 0,
                step: 0,
                phase_index: 0,
                rope_bases: (phase.rope_base_global, phase.rope_base_local),
                completed: false,
                rng: RunRngState {
                    masking: RngState::capture(&rng::stream(run.seed, Stream::Masking)),
                    dropout: RngState::capture(&rng::stream(run.seed, Stream::Dropout)),
                },
                sampler: None,
                run: run.clone(),
                parameter_digest: model.parameter_digest(),
            },
            model,
            optimizer: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.model.digest());
        let meta = serde_json::to_vec(&self.meta).expect("checkpoint metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let params = self.model.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            bail!(Integrity, "not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            bail!(
                Integrity,
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            );
        }
        if bytes.len() < 12 + HASH_LEN * 2 {
            bail!(Integrity, "checkpoint is truncated");
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            bail!(
                Integrity,
                "checkpoint content hash mismatch (truncated or corrupted)"
            );
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_digest = r.take(HASH_LEN)?.to_vec();
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        if meta.model.digest().as_slice() != config_digest.as_slice() {
            bail!(
                Integrity,
                "checkpoint header digest does not match its model config"
            );
        }
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            named.push((name, Tensor::new(shape, data)?));
        }
        let mut model = TransformerModel::from_parameters(meta.model.clone(), named)
            .map_err(|e| Error::Integrity(format!("checkpoint tensors: {e}")))?;
        model.set_rope_base(meta.rope_bases.0, meta.rope_bases.1)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for p in model.parameters() {
                    m.push(r.f32s(p.value.numel())?);
                    v.push(r.f32s(p.value.numel())?);
                }
                Some(AdamState { step, m, v })
            }
            other => bail!(Integrity, "bad optimizer flag {other}"),
        };
        if r.pos != body.len() {
            bail!(
                Integrity,
                "{} trailing bytes in checkpoint",
                body.len() - r.pos
            );
        }
        if model.parameter_digest() != meta.parameter_digest {
            bail!(Integrity, "parameter digest mismatch");
        }
        Ok(Self {
            meta,
            model,
            optimizer,
        })
    }

    /// Writes to a temporary sibling, syncs it, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Integrity, "checkpoint ends early at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Integrity("tensor size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
