use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Tolerance on the sum of a phase's weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepeatPolicy {
    /// Restart from the first document, in the original order.
    #[default]
    Repeat,
    /// Running out of tokens is an error.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub weight: f64,
    #[serde(default)]
    pub repeat_policy: RepeatPolicy,
}

impl SourceSpec {
    pub fn new(source_id: impl Into<String>, weight: f64) -> Self {
        Self {
            source_id: source_id.into(),
            path: None,
            weight,
            repeat_policy: RepeatPolicy::Repeat,
        }
    }

    pub fn with_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn with_policy(mut self, policy: RepeatPolicy) -> Self {
        self.repeat_policy = policy;
        self
    }
}

/// The weighted source plan of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub sources: Vec<SourceSpec>,
}

impl MixtureSpec {
    pub fn new(sources: Vec<SourceSpec>) -> Result<Self> {
        let m = Self { sources };
        m.validate()?;
        Ok(m)
    }

    /// Weights proportional to `counts` (e.g. tokens per source).
    pub fn from_counts<S: AsRef<str>>(counts: &[(S, f64)]) -> Result<Self> {
        let total: f64 = counts.iter().map(|(_, c)| c).sum();
        if !(total > 0.0 && total.is_finite()) {
            bail!(Config, "mixture counts must have a positive finite sum");
        }
        Self::new(
            counts
                .iter()
                .map(|(id, c)| SourceSpec::new(id.as_ref(), c / total))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            bail!(Config, "mixture has no sources");
        }
        let mut seen = HashSet::new();
        let mut sum = 0.0;
        for s in &self.sources {
            if s.source_id.is_empty() {
                bail!(Config, "source with empty id");
            }
            if !seen.insert(s.source_id.as_str()) {
                bail!(Config, "source {:?} listed twice", s.source_id);
            }
            if !(s.weight.is_finite() && s.weight >= 0.0) {
                bail!(Config, "source {:?} has weight {}", s.source_id, s.weight);
            }
            sum += s.weight;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            bail!(Config, "mixture weights sum to {sum}, expected 1");
        }
        Ok(())
    }

    pub fn weight(&self, source_id: &str) -> f64 {
        self.sources
            .iter()
            .find(|s| s.source_id == source_id)
            .map_or(0.0, |s| s.weight)
    }

    /// Sources that can actually be drawn.
    pub fn active(&self) -> impl Iterator<Item = &SourceSpec> {
        self.sources.iter().filter(|s| s.weight > 0.0)
    }

    /// Fills in `path` for every source from `dir/<source_id>.jsonl` when unset.
    pub fn resolve_paths(&mut self, dir: &std::path::Path) {
        for s in &mut self.sources {
            if s.path.is_none() {
                s.path = Some(dir.join(format!("{}.jsonl", s.source_id)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_sum_is_checked() {
        assert!(
            MixtureSpec::new(vec![SourceSpec::new("a", 0.5), SourceSpec::new("b", 0.5)]).is_ok()
        );
        assert!(
            MixtureSpec::new(vec![SourceSpec::new("a", 0.5), SourceSpec::new("b", 0.4)]).is_err()
        );
        assert!(MixtureSpec::new(vec![SourceSpec::new("a", 1.0 + 1e-10)]).is_ok());
        assert!(
            MixtureSpec::new(vec![SourceSpec::new("a", -0.5), SourceSpec::new("b", 1.5)]).is_err()
        );
        assert!(
            MixtureSpec::new(vec![SourceSpec::new("a", 0.5), SourceSpec::new("a", 0.5)]).is_err()
        );
        assert!(MixtureSpec::new(vec![]).is_err());
    }

    #[test]
    fn counts_normalize() {
        let m = MixtureSpec::from_counts(&[("a", 3.0), ("b", 1.0), ("c", 0.0)]).unwrap();
        assert_eq!(m.weight("a"), 0.75);
        assert_eq!(m.active().count(), 2);
    }
}
