//! Constants of the shared three-phase recipe: per-size optimizer settings,
//! phase token budgets, per-phase data mixtures and context settings.

use serde::{Deserialize, Serialize};

use crate::data::MixtureSpec;
use crate::error::{bail, Result};
use crate::model::SizePreset;
use crate::objectives::{MLM_DECAY_RATIO, MLM_RATIO};

pub const PRETRAIN_TOKENS: u64 = 1_700_000_000_000;
pub const MID_TRAIN_TOKENS: u64 = 250_000_000_000;
pub const DECAY_TOKENS: u64 = 50_000_000_000;
pub const CHECKPOINT_INTERVAL_TOKENS: u64 = 8_500_000_000;

/// Budget of a reverse-objective continuation.
pub const CROSS_OBJECTIVE_TOKENS: u64 = 50_000_000_000;
/// Warmup and decay of the continuation schedule as fractions of its budget.
pub const CROSS_OBJECTIVE_WARMUP_FRACTION: (u64, u64) = (3, 50);
pub const CROSS_OBJECTIVE_DECAY_FRACTION: (u64, u64) = (10, 50);

/// Mid-training decays from the peak to this fraction of it...
pub const MID_TRAIN_END_FRACTION: f64 = 0.5;
/// ...and the decay phase continues down to this fraction of the peak.
pub const DECAY_END_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Pretrain,
    MidTrain,
    Decay,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 3] = [PhaseKind::Pretrain, PhaseKind::MidTrain, PhaseKind::Decay];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Pretrain => "pretrain",
            PhaseKind::MidTrain => "mid_train",
            PhaseKind::Decay => "decay",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| crate::Error::Config(format!("unknown phase {name:?}")))
    }

    /// MLM mask ratio for this phase.
    pub fn mlm_ratio(self) -> f64 {
        match self {
            PhaseKind::Decay => MLM_DECAY_RATIO,
            _ => MLM_RATIO,
        }
    }

    /// RoPE base for both global and local layers.
    pub fn rope_base(self) -> f64 {
        match self {
            PhaseKind::Pretrain => 10_000.0,
            _ => 160_000.0,
        }
    }

    pub fn seq_len(self) -> usize {
        match self {
            PhaseKind::Pretrain => 1024,
            _ => 7999,
        }
    }
}

/// Per-size optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeHyper {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_tokens: u64,
    pub bs_warmup_tokens: u64,
}

const B: u64 = 1_000_000_000;

impl SizeHyper {
    /// The desk preset borrows the smallest size's settings.
    pub fn for_size(size: SizePreset) -> Self {
        let (peak_lr, weight_decay, warmup_b, bs_warmup_b) = match size {
            SizePreset::Xxs17m | SizePreset::Desk => (3e-3, 3e-4, 4, 125),
            SizePreset::Xs32m => (3e-3, 3e-4, 4, 100),
            SizePreset::Small68m => (3e-3, 3e-4, 3, 75),
            SizePreset::Base150m => (8e-4, 1e-5, 3, 50),
            SizePreset::Large400m => (5e-4, 1e-5, 2, 10),
            SizePreset::Xl1b => (5e-4, 5e-5, 2, 3),
        };
        Self {
            peak_lr,
            weight_decay,
            warmup_tokens: warmup_b * B,
            bs_warmup_tokens: bs_warmup_b * B,
        }
    }

    /// Token spans divided by `scale`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        Ok(Self {
            warmup_tokens: scale_tokens(self.warmup_tokens, scale)?,
            bs_warmup_tokens: scale_tokens(self.bs_warmup_tokens, scale)?,
            ..*self
        })
    }
}

/// `tokens / scale`, rounded to the nearest token.
pub fn scale_tokens(tokens: u64, scale: f64) -> Result<u64> {
    if !(scale.is_finite() && scale >= 1.0) {
        bail!(Config, "scale must be a finite factor >= 1, got {scale}");
    }
    Ok((tokens as f64 / scale).round() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBudgets {
    pub pretrain: u64,
    pub mid_train: u64,
    pub decay: u64,
}

impl PhaseBudgets {
    pub const FULL: PhaseBudgets = PhaseBudgets {
        pretrain: PRETRAIN_TOKENS,
        mid_train: MID_TRAIN_TOKENS,
        decay: DECAY_TOKENS,
    };

    pub fn scaled(scale: f64) -> Result<Self> {
        let b = Self {
            pretrain: scale_tokens(PRETRAIN_TOKENS, scale)?,
            mid_train: scale_tokens(MID_TRAIN_TOKENS, scale)?,
            decay: scale_tokens(DECAY_TOKENS, scale)?,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain == 0 || self.mid_train == 0 || self.decay == 0 {
            bail!(Config, "every phase budget must be positive: {self:?}");
        }
        Ok(())
    }

    pub fn get(&self, phase: PhaseKind) -> u64 {
        match phase {
            PhaseKind::Pretrain => self.pretrain,
            PhaseKind::MidTrain => self.mid_train,
            PhaseKind::Decay => self.decay,
        }
    }

    pub fn total(&self) -> u64 {
        self.pretrain + self.mid_train + self.decay
    }
}

/// Tokens (billions) per source in each phase. Sources absent from a phase
/// are simply not listed.
pub fn source_tokens(phase: PhaseKind) -> &'static [(&'static str, f64)] {
    match phase {
        PhaseKind::Pretrain => &[
            ("dclm", 837.2),
            ("cc_head", 356.6),
            ("starcoder", 263.9),
            ("reddit", 80.3),
            ("pes2o", 57.3),
            ("arxiv", 28.0),
            ("stackexchange", 19.6),
            ("tulu_flan", 16.6),
            ("open_web_math", 12.7),
            ("algebraic_stackexchange", 12.6),
            ("cc_news", 7.3),
            ("wikipedia", 7.3),
            ("dolma_books", 5.3),
        ],
        PhaseKind::MidTrain => &[
            ("dclm_dolmino", 175.5),
            ("starcoder", 38.4),
            ("math_dolmino", 10.4),
            ("pes2o", 8.3),
            ("reddit", 6.2),
            ("arxiv", 4.1),
            ("stackexchange_dolmino", 2.7),
            ("tulu_flan", 2.4),
            ("dolma_books", 0.8),
            ("wikipedia", 0.5),
        ],
        PhaseKind::Decay => &[
            ("dclm_dolmino", 26.0),
            ("code_repos", 20.2),
            ("dolma_books", 10.5),
            ("math_dolmino", 5.0),
            ("tulu_flan", 4.1),
            ("stackexchange_dolmino", 4.0),
            ("arxiv", 3.0),
            ("wikipedia", 3.0),
            ("textbooks", 0.5),
        ],
    }
}

/// Sampling weights for a phase: each source's share of that phase's tokens.
pub fn mixture(phase: PhaseKind) -> MixtureSpec {
    MixtureSpec::from_counts(source_tokens(phase)).expect("recipe mixture is valid")
}
