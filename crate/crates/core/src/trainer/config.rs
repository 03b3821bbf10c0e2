use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MixtureSpec, SpecialTokens};
use crate::error::{bail, Result};
use crate::model::{AttentionMode, ModelConfig, SizePreset};
use crate::objectives::{ObjectiveKind, ObjectiveSpec};
use crate::recipe::{self, PhaseBudgets, PhaseKind, SizeHyper, CHECKPOINT_INTERVAL_TOKENS};
use crate::schedule::{recipe_schedule, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Encoder,
    Decoder,
}

impl Arch {
    pub fn mode(self) -> AttentionMode {
        match self {
            Arch::Encoder => AttentionMode::Bidirectional,
            Arch::Decoder => AttentionMode::Causal,
        }
    }

    pub fn objective(self, phase: PhaseKind) -> ObjectiveSpec {
        match self {
            Arch::Encoder => ObjectiveSpec::mlm(phase.mlm_ratio(), SpecialTokens::DEFAULT),
            Arch::Decoder => ObjectiveSpec::clm(SpecialTokens::DEFAULT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub kind: PhaseKind,
    pub mixture: MixtureSpec,
    pub token_budget: u64,
    pub seq_len: usize,
    pub rope_base_global: f64,
    pub rope_base_local: f64,
    pub objective: ObjectiveSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.98
    }
    pub fn eps() -> f64 {
        1e-6
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
}

impl OptimizerConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            grad_clip: defaults::grad_clip(),
        }
    }
}

/// Weights to start from instead of a fresh initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitFrom {
    pub checkpoint: PathBuf,
    /// Expected [`crate::model::TransformerModel::parameter_digest`] of the import.
    pub parameter_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub mode: AttentionMode,
    pub phases: Vec<PhaseConfig>,
    pub schedule: ScheduleSpec,
    pub checkpoint_interval_tokens: u64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Attention-output dropout during training.
    #[serde(default = "defaults::yes")]
    pub dropout: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitFrom>,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let opt = &self.optimizer;
        if !(opt.weight_decay >= 0.0
            && (0.0..1.0).contains(&opt.beta1)
            && (0.0..1.0).contains(&opt.beta2)
            && opt.eps > 0.0
            && opt.grad_clip > 0.0)
        {
            bail!(Config, "invalid optimizer settings {opt:?}");
        }
        if self.phases.is_empty() {
            bail!(Config, "run has no phases");
        }
        if self.checkpoint_interval_tokens == 0 {
            bail!(Config, "checkpoint interval must be positive");
        }
        for (i, p) in self.phases.iter().enumerate() {
            p.mixture.validate()?;
            p.objective.validate()?;
            if p.token_budget < p.seq_len as u64 {
                bail!(Config, "phase {i} budget is shorter than one sequence");
            }
            if p.seq_len < 2 || p.seq_len > self.model.max_seq_len {
                bail!(
                    Config,
                    "phase {i} seq_len {} must lie in [2, {}]",
                    p.seq_len,
                    self.model.max_seq_len
                );
            }
            if !(p.rope_base_global > 0.0 && p.rope_base_local > 0.0) {
                bail!(Config, "phase {i} has a non-positive RoPE base");
            }
            let ok = matches!(
                (self.mode, p.objective.kind),
                (AttentionMode::Bidirectional, ObjectiveKind::Mlm)
                    | (AttentionMode::Causal, ObjectiveKind::Clm)
                    | (_, ObjectiveKind::Mntp)
            );
            if !ok {
                bail!(
                    Config,
                    "phase {i}: {:?} attention cannot train with {:?}",
                    self.mode,
                    p.objective.kind
                );
            }
            if p.kind == PhaseKind::Decay
                && p.objective.kind == ObjectiveKind::Mlm
                && p.objective.mask_ratio != Some(PhaseKind::Decay.mlm_ratio())
            {
                bail!(
                    Config,
                    "decay-phase MLM must mask {} of tokens",
                    PhaseKind::Decay.mlm_ratio()
                );
            }
        }
        if self.total_tokens() != self.schedule.total_tokens() {
            bail!(
                Config,
                "phase budgets total {} tokens but the schedule spans {}",
                self.total_tokens(),
                self.schedule.total_tokens()
            );
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.phases.iter().map(|p| p.token_budget).sum()
    }

    /// Expected number of cadence checkpoints.
    pub fn checkpoint_count(&self) -> u64 {
        self.total_tokens() / self.checkpoint_interval_tokens
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Knobs for building a recipe run at some scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOptions {
    pub size: SizePreset,
    /// Every full-scale token count is divided by this.
    pub scale: f64,
    /// Sequences per step after batch-size warmup.
    pub bs_full: usize,
    pub seq_lens: [usize; 3],
    pub mixtures: [MixtureSpec; 3],
    pub seed: u64,
    pub dropout: bool,
    /// Overrides the scaled checkpoint cadence.
    pub checkpoint_interval_tokens: Option<u64>,
}

impl RecipeOptions {
    /// Recipe mixtures, 64 sequences per step, and phase sequence lengths
    /// from the recipe (the desk preset uses 64 then 128).
    pub fn new(size: SizePreset, scale: f64) -> Self {
        let seq_lens = if size == SizePreset::Desk {
            [64, 128, 128]
        } else {
            PhaseKind::ALL.map(PhaseKind::seq_len)
        };
        Self {
            size,
            scale,
            bs_full: 64,
            seq_lens,
            mixtures: PhaseKind::ALL.map(recipe::mixture),
            seed: 0,
            dropout: true,
            checkpoint_interval_tokens: None,
        }
    }
}

/// The shared three-phase recipe for one architecture.
pub fn recipe_run(arch: Arch, opts: &RecipeOptions) -> Result<TrainRunConfig> {
    let hyper = SizeHyper::for_size(opts.size).scaled(opts.scale)?;
    let budgets = PhaseBudgets::scaled(opts.scale)?;
    let schedule = recipe_schedule(&hyper, &budgets, opts.bs_full)?;
    let checkpoint_interval_tokens = match opts.checkpoint_interval_tokens {
        Some(t) => t,
        None => recipe::scale_tokens(CHECKPOINT_INTERVAL_TOKENS, opts.scale)?.max(1),
    };
    let phases = PhaseKind::ALL
        .iter()
        .zip(&opts.mixtures)
        .zip(opts.seq_lens)
        .map(|((&kind, mixture), seq_len)| PhaseConfig {
            kind,
            mixture: mixture.clone(),
            token_budget: budgets.get(kind),
            seq_len,
            rope_base_global: kind.rope_base(),
            rope_base_local: kind.rope_base(),
            objective: arch.objective(kind),
        })
        .collect();
    let mut model = opts.size.config();
    model.rope_base_global = PhaseKind::Pretrain.rope_base();
    model.rope_base_local = PhaseKind::Pretrain.rope_base();
    let run = TrainRunConfig {
        model,
        mode: arch.mode(),
        phases,
        schedule,
        checkpoint_interval_tokens,
        seed: opts.seed,
        optimizer: OptimizerConfig::with_weight_decay(hyper.weight_decay),
        dropout: opts.dropout,
        init: None,
    };
    run.validate()?;
    Ok(run)
}
