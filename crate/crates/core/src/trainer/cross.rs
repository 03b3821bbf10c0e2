use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, InitFrom, PhaseConfig, TrainRunConfig};
use crate::data::SpecialTokens;
use crate::error::{bail, Result};
use crate::model::AttentionMode;
use crate::objectives::{ObjectiveKind, ObjectiveSpec, MNTP_RATIO};
use crate::recipe::PhaseKind;
use crate::schedule::cross_objective_schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinueTarget {
    /// A finished decoder trained further with MNTP.
    #[serde(rename = "enc-from-dec")]
    EncoderFromDecoder,
    /// A finished encoder trained further with CLM.
    #[serde(rename = "dec-from-enc")]
    DecoderFromEncoder,
}

impl ContinueTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "enc-from-dec" | "encoder_from_decoder" => Ok(Self::EncoderFromDecoder),
            "dec-from-enc" | "decoder_from_encoder" => Ok(Self::DecoderFromEncoder),
            _ => bail!(Usage, "unknown continuation target {s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinueOptions {
    pub budget: u64,
    /// Keep causal attention for an encoder-from-decoder run (ablation).
    pub keep_causal: bool,
    pub seed: Option<u64>,
    pub checkpoint_interval_tokens: Option<u64>,
    pub bs_full: Option<usize>,
}

impl ContinueOptions {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            keep_causal: false,
            seed: None,
            checkpoint_interval_tokens: None,
            bs_full: None,
        }
    }
}

/// Builds the reverse-objective run for a finished checkpoint stored at
/// `path`: same weights, flipped objective and attention, the source run's
/// decay-phase data, and a fresh warmup/constant/decay schedule.
pub fn cross_objective_continue(
    ckpt: &Checkpoint,
    path: &Path,
    target: ContinueTarget,
    opts: &ContinueOptions,
) -> Result<TrainRunConfig> {
    let meta = &ckpt.meta;
    let source_is_decoder = match (meta.mode, meta.objective) {
        (AttentionMode::Causal, ObjectiveKind::Clm) => true,
        (AttentionMode::Bidirectional, ObjectiveKind::Mlm) => false,
        (mode, obj) => bail!(
            Usage,
            "checkpoint ({mode:?}, {obj:?}) is not a finished encoder or decoder run"
        ),
    };
    let (mode, objective) = match (target, source_is_decoder) {
        (ContinueTarget::EncoderFromDecoder, true) => {
            let mode = if opts.keep_causal {
                AttentionMode::Causal
            } else {
                AttentionMode::Bidirectional
            };
            (
                mode,
                ObjectiveSpec::mntp(MNTP_RATIO, SpecialTokens::DEFAULT),
            )
        }
        (ContinueTarget::DecoderFromEncoder, false) => (
            AttentionMode::Causal,
            ObjectiveSpec::clm(SpecialTokens::DEFAULT),
        ),
        _ => bail!(
            Usage,
            "{target:?} needs a finished {} checkpoint",
            if source_is_decoder {
                "encoder"
            } else {
                "decoder"
            }
        ),
    };
    if !meta.completed {
        bail!(
            Usage,
            "checkpoint at {} tokens is not a completed run",
            meta.tokens_seen
        );
    }
    let source = &meta.run;
    let data_phase = source
        .phases
        .iter()
        .rev()
        .find(|p| p.kind == PhaseKind::Decay)
        .unwrap_or_else(|| source.phases.last().expect("validated run has phases"));
    let bs_full = opts.bs_full.unwrap_or(source.schedule.bs_full);
    let run = TrainRunConfig {
        model: source.model.clone(),
        mode,
        phases: vec![PhaseConfig {
            kind: PhaseKind::Decay,
            mixture: data_phase.mixture.clone(),
            token_budget: opts.budget,
            seq_len: data_phase.seq_len,
            rope_base_global: data_phase.rope_base_global,
            rope_base_local: data_phase.rope_base_local,
            objective,
        }],
        schedule: cross_objective_schedule(source.schedule.peak_lr(), opts.budget, bs_full)?,
        checkpoint_interval_tokens: opts
            .checkpoint_interval_tokens
            .unwrap_or(source.checkpoint_interval_tokens),
        seed: opts.seed.unwrap_or(source.seed),
        optimizer: source.optimizer,
        dropout: source.dropout,
        init: Some(InitFrom {
            checkpoint: path.to_path_buf(),
            parameter_digest: meta.parameter_digest.clone(),
        }),
    };
    run.validate()?;
    Ok(run)
}
