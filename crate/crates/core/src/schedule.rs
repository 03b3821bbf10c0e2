//! Learning rate and batch size as pure functions of tokens seen.
//!
//! Inverse-square-root decay from `a` to `b` over a span `T` is
//! `a / sqrt(1 + k t / T)` with `k = (a / b)^2 - 1`, which hits both
//! endpoints exactly. Each decay segment starts a fresh curve.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::recipe::{
    PhaseBudgets, SizeHyper, CROSS_OBJECTIVE_DECAY_FRACTION, CROSS_OBJECTIVE_WARMUP_FRACTION,
    DECAY_END_FRACTION, MID_TRAIN_END_FRACTION,
};

/// Relative tolerance for continuity between adjacent segments.
const CONTINUITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    LinearWarmup,
    Constant,
    InverseSqrtDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub span: u64,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Segment {
    pub fn warmup(span: u64, peak: f64) -> Self {
        Self {
            kind: SegmentKind::LinearWarmup,
            span,
            lr_start: 0.0,
            lr_end: peak,
        }
    }

    pub fn constant(span: u64, lr: f64) -> Self {
        Self {
            kind: SegmentKind::Constant,
            span,
            lr_start: lr,
            lr_end: lr,
        }
    }

    pub fn inverse_sqrt(span: u64, from: f64, to: f64) -> Self {
        Self {
            kind: SegmentKind::InverseSqrtDecay,
            span,
            lr_start: from,
            lr_end: to,
        }
    }

    /// Learning rate `t` tokens into this segment, `0 <= t <= span`.
    pub fn lr(&self, t: u64) -> f64 {
        let frac = t as f64 / self.span as f64;
        match self.kind {
            SegmentKind::LinearWarmup => self.lr_end * frac,
            SegmentKind::Constant => self.lr_start,
            SegmentKind::InverseSqrtDecay => {
                let ratio = self.lr_start / self.lr_end;
                let k = ratio * ratio - 1.0;
                self.lr_start / (1.0 + k * frac).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub segments: Vec<Segment>,
    pub bs_warmup_tokens: u64,
    pub bs_min: usize,
    pub bs_full: usize,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            bail!(Config, "schedule has no segments");
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.span == 0 {
                bail!(Config, "segment {i} has an empty span");
            }
            if !(s.lr_start.is_finite() && s.lr_end.is_finite() && s.lr_start >= 0.0) {
                bail!(Config, "segment {i} has invalid learning rates");
            }
            match s.kind {
                SegmentKind::LinearWarmup if s.lr_start != 0.0 || s.lr_end <= 0.0 => {
                    bail!(
                        Config,
                        "warmup segment {i} must rise from 0 to a positive peak"
                    )
                }
                SegmentKind::Constant if s.lr_start != s.lr_end => {
                    bail!(Config, "constant segment {i} changes its learning rate")
                }
                SegmentKind::InverseSqrtDecay if !(s.lr_end > 0.0 && s.lr_end < s.lr_start) => {
                    bail!(Config, "decay segment {i} needs 0 < lr_end < lr_start")
                }
                _ => {}
            }
        }
        let scale = self
            .segments
            .iter()
            .map(|s| s.lr_start.max(s.lr_end))
            .fold(0.0, f64::max);
        for (i, w) in self.segments.windows(2).enumerate() {
            if (w[0].lr_end - w[1].lr_start).abs() > CONTINUITY_TOLERANCE * scale {
                bail!(
                    Config,
                    "learning rate jumps from {} to {} at segment boundary {}",
                    w[0].lr_end,
                    w[1].lr_start,
                    i + 1
                );
            }
        }
        if self.bs_full == 0 || self.bs_min > self.bs_full {
            bail!(
                Config,
                "batch sizes must satisfy 1 <= bs_min <= bs_full (got {} and {})",
                self.bs_min,
                self.bs_full
            );
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.segments.iter().map(|s| s.span).sum()
    }

    /// Token positions where each segment ends.
    pub fn boundaries(&self) -> Vec<u64> {
        self.segments
            .iter()
            .scan(0, |end, s| {
                *end += s.span;
                Some(*end)
            })
            .collect()
    }

    pub fn peak_lr(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.lr_start.max(s.lr_end))
            .fold(0.0, f64::max)
    }

    /// A segment owns its closed end, so a boundary evaluates to the value
    /// the finishing segment reaches. Past the end the final value is held.
    pub fn lr_at(&self, tokens: u64) -> f64 {
        let mut start = 0;
        for s in &self.segments {
            if tokens <= start + s.span {
                return s.lr(tokens - start);
            }
            start += s.span;
        }
        log::warn!(
            "lr requested at {tokens} tokens, past the schedule end at {start}; holding final value"
        );
        self.segments.last().map_or(0.0, |s| s.lr_end)
    }

    pub fn batch_size_at(&self, tokens: u64) -> usize {
        let lo = self.bs_min.max(1);
        if tokens >= self.bs_warmup_tokens || self.bs_full <= lo {
            return self.bs_full.max(1);
        }
        let extra = (self.bs_full - lo) as u128 * tokens as u128 / self.bs_warmup_tokens as u128;
        lo + extra as usize
    }

    /// Tab-separated `tokens lr batch_size` rows at `points + 1` evenly
    /// spaced positions plus every segment boundary.
    pub fn dump_table(&self, points: usize) -> String {
        let total = self.total_tokens();
        let mut ts: Vec<u64> = (0..=points.max(1))
            .map(|i| (total as u128 * i as u128 / points.max(1) as u128) as u64)
            .chain(self.boundaries())
            .collect();
        ts.sort_unstable();
        ts.dedup();
        let mut out = String::from("tokens\tlr\tbatch_size\n");
        for t in ts {
            let _ = writeln!(out, "{t}\t{:e}\t{}", self.lr_at(t), self.batch_size_at(t));
        }
        out
    }
}

fn default_bs_min(bs_full: usize) -> usize {
    (bs_full / 16).max(1)
}

/// The three-phase recipe: warmup then constant through base pretraining,
/// inverse-sqrt to half the peak over mid-training, then inverse-sqrt to
/// 0.02 of the peak over the decay phase.
pub fn recipe_schedule(
    hyper: &SizeHyper,
    budgets: &PhaseBudgets,
    bs_full: usize,
) -> Result<ScheduleSpec> {
    budgets.validate()?;
    let peak = hyper.peak_lr;
    if hyper.warmup_tokens == 0 || hyper.warmup_tokens >= budgets.pretrain {
        bail!(
            Config,
            "warmup of {} tokens must be positive and shorter than pretraining ({})",
            hyper.warmup_tokens,
            budgets.pretrain
        );
    }
    let mid = peak * MID_TRAIN_END_FRACTION;
    let spec = ScheduleSpec {
        segments: vec![
            Segment::warmup(hyper.warmup_tokens, peak),
            Segment::constant(budgets.pretrain - hyper.warmup_tokens, peak),
            Segment::inverse_sqrt(budgets.mid_train, peak, mid),
            Segment::inverse_sqrt(budgets.decay, mid, peak * DECAY_END_FRACTION),
        ],
        bs_warmup_tokens: hyper.bs_warmup_tokens,
        bs_min: default_bs_min(bs_full),
        bs_full,
    };
    spec.validate()?;
    Ok(spec)
}

fn fraction(budget: u64, (num, den): (u64, u64)) -> u64 {
    (budget as u128 * num as u128 / den as u128) as u64
}

/// Schedule of a reverse-objective continuation: warmup over 3/50 of the
/// budget, constant, and an inverse-sqrt decay to 0.02 of the peak over the
/// final 10/50. There is no batch-size warmup.
pub fn cross_objective_schedule(peak_lr: f64, budget: u64, bs_full: usize) -> Result<ScheduleSpec> {
    let warmup = fraction(budget, CROSS_OBJECTIVE_WARMUP_FRACTION);
    let decay = fraction(budget, CROSS_OBJECTIVE_DECAY_FRACTION);
    if warmup == 0 || decay == 0 || warmup + decay >= budget {
        bail!(
            Config,
            "continuation budget of {budget} tokens is too small"
        );
    }
    let spec = ScheduleSpec {
        segments: vec![
            Segment::warmup(warmup, peak_lr),
            Segment::constant(budget - warmup - decay, peak_lr),
            Segment::inverse_sqrt(decay, peak_lr, peak_lr * DECAY_END_FRACTION),
        ],
        bs_warmup_tokens: 0,
        bs_min: bs_full,
        bs_full,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SizePreset;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn full_scale_boundaries() {
        let hyper = SizeHyper::for_size(SizePreset::Base150m);
        let s = recipe_schedule(&hyper, &PhaseBudgets::FULL, 64).unwrap();
        let b = s.boundaries();
        assert_eq!(b[1], 1_700_000_000_000);
        assert_eq!(b[2], 1_950_000_000_000);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(b[0]), 8e-4);
        assert!(rel(s.lr_at(b[2]), 4e-4) < 1e-12);
        assert!(rel(s.lr_at(b[3]), 0.02 * 8e-4) < 1e-12);
    }

    #[test]
    fn continuity_and_monotone_pieces() {
        let hyper = SizeHyper::for_size(SizePreset::Xxs17m).scaled(1e5).unwrap();
        let s = recipe_schedule(&hyper, &PhaseBudgets::scaled(1e5).unwrap(), 64).unwrap();
        for w in s.segments.windows(2) {
            assert!((w[0].lr(w[0].span) - w[1].lr(0)).abs() < 1e-12 * s.peak_lr());
        }
        let b = s.boundaries();
        let mut prev = f64::INFINITY;
        for t in (b[1]..=b[3]).step_by(997) {
            let lr = s.lr_at(t);
            assert!(lr <= prev);
            prev = lr;
        }
        // past the end the last value is held
        assert_eq!(s.lr_at(b[3] + 10), s.lr_at(b[3]));
    }

    #[test]
    fn batch_size_ramp() {
        let s = ScheduleSpec {
            segments: vec![Segment::constant(100, 1.0)],
            bs_warmup_tokens: 1000,
            bs_min: 4,
            bs_full: 64,
        };
        assert_eq!(s.batch_size_at(0), 4);
        assert_eq!(s.batch_size_at(500), 34);
        assert_eq!(s.batch_size_at(1000), 64);
        assert_eq!(s.batch_size_at(u64::MAX), 64);
        let zero_min = ScheduleSpec {
            bs_min: 0,
            ..s.clone()
        };
        assert_eq!(zero_min.batch_size_at(0), 1);
    }

    #[test]
    fn rejects_discontinuous_or_rising_decay() {
        let mut s = ScheduleSpec {
            segments: vec![Segment::warmup(10, 1.0), Segment::constant(10, 0.9)],
            bs_warmup_tokens: 0,
            bs_min: 1,
            bs_full: 1,
        };
        assert!(s.validate().is_err());
        s.segments = vec![Segment::inverse_sqrt(10, 1.0, 2.0)];
        assert!(s.validate().is_err());
    }

    #[test]
    fn cross_objective_fractions() {
        let s = cross_objective_schedule(5e-4, 50_000_000_000, 64).unwrap();
        let b = s.boundaries();
        assert_eq!(b[0], 3_000_000_000);
        assert_eq!(b[2] - b[1], 10_000_000_000);
        let desk = cross_objective_schedule(3e-3, 500_000, 16).unwrap();
        assert_eq!(desk.segments[0].span, 30_000);
        assert_eq!(desk.segments[2].span, 100_000);
    }

    #[test]
    fn dump_lists_boundaries() {
        let s = cross_objective_schedule(1e-3, 5000, 8).unwrap();
        let table = s.dump_table(4);
        assert!(table.starts_with("tokens\tlr\tbatch_size\n"));
        assert!(table.contains("\n300\t1e-3\t8\n"));
    }
}
