use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

/// Architecture of one model size. The same config serves the encoder and
/// the decoder; only the attention mode passed to `forward` differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "defaults::rope_base")]
    pub rope_base_global: f64,
    #[serde(default = "defaults::rope_base")]
    pub rope_base_local: f64,
    #[serde(default = "defaults::sliding_window")]
    pub sliding_window: usize,
    /// Every n-th layer (from layer 0) attends globally; 0 means none do.
    #[serde(default = "defaults::global_every")]
    pub global_every: usize,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "defaults::attn_output_dropout")]
    pub attn_output_dropout: f64,
    #[serde(default = "defaults::yes")]
    pub embedding_norm: bool,
    #[serde(default = "defaults::yes")]
    pub final_norm: bool,
    #[serde(default = "defaults::yes")]
    pub skip_first_prenorm: bool,
    #[serde(default = "defaults::yes")]
    pub tie_embeddings: bool,
}

mod defaults {
    pub fn vocab_size() -> usize {
        50_368
    }
    pub fn max_seq_len() -> usize {
        7999
    }
    pub fn rope_base() -> f64 {
        10_000.0
    }
    pub fn sliding_window() -> usize {
        128
    }
    pub fn global_every() -> usize {
        3
    }
    pub fn norm_eps() -> f64 {
        1e-12
    }
    pub fn attn_output_dropout() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
}

/// Named model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizePreset {
    #[serde(rename = "17m")]
    Xxs17m,
    #[serde(rename = "32m")]
    Xs32m,
    #[serde(rename = "68m")]
    Small68m,
    #[serde(rename = "150m")]
    Base150m,
    #[serde(rename = "400m")]
    Large400m,
    #[serde(rename = "1b")]
    Xl1b,
    /// A two-layer toy shape for laptop runs and tests.
    #[serde(rename = "desk")]
    Desk,
}

impl SizePreset {
    pub const ALL: [SizePreset; 7] = [
        SizePreset::Xxs17m,
        SizePreset::Xs32m,
        SizePreset::Small68m,
        SizePreset::Base150m,
        SizePreset::Large400m,
        SizePreset::Xl1b,
        SizePreset::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Xxs17m => "17m",
            SizePreset::Xs32m => "32m",
            SizePreset::Small68m => "68m",
            SizePreset::Base150m => "150m",
            SizePreset::Large400m => "400m",
            SizePreset::Xl1b => "1b",
            SizePreset::Desk => "desk",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| crate::Error::Config(format!("unknown model size {name:?}")))
    }

    /// (layers, hidden, intermediate, heads)
    fn shape(self) -> (usize, usize, usize, usize) {
        match self {
            SizePreset::Xxs17m => (7, 256, 384, 4),
            SizePreset::Xs32m => (10, 384, 576, 6),
            SizePreset::Small68m => (19, 512, 768, 8),
            SizePreset::Base150m => (22, 768, 1152, 12),
            SizePreset::Large400m => (28, 1024, 2624, 16),
            SizePreset::Xl1b => (28, 1792, 3840, 28),
            SizePreset::Desk => (2, 64, 96, 4),
        }
    }

    pub fn config(self) -> ModelConfig {
        let (num_layers, hidden_size, intermediate_size, num_heads) = self.shape();
        let mut cfg = ModelConfig {
            num_layers,
            hidden_size,
            intermediate_size,
            num_heads,
            vocab_size: defaults::vocab_size(),
            max_seq_len: defaults::max_seq_len(),
            rope_base_global: defaults::rope_base(),
            rope_base_local: defaults::rope_base(),
            sliding_window: defaults::sliding_window(),
            global_every: defaults::global_every(),
            norm_eps: defaults::norm_eps(),
            attn_output_dropout: defaults::attn_output_dropout(),
            embedding_norm: true,
            final_norm: true,
            skip_first_prenorm: true,
            tie_embeddings: true,
        };
        if self == SizePreset::Desk {
            cfg.vocab_size = crate::data::BYTE_VOCAB_SIZE;
            cfg.sliding_window = 32;
            cfg.max_seq_len = 128;
        }
        cfg
    }
}

impl ModelConfig {
    pub fn preset(size: SizePreset) -> Self {
        size.config()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.intermediate_size == 0 {
            bail!(Config, "layer count and widths must be positive");
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            bail!(
                Config,
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size,
                self.num_heads
            );
        }
        if !self.head_dim().is_multiple_of(2) {
            bail!(Config, "head dimension {} must be even", self.head_dim());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            bail!(Config, "vocab_size and max_seq_len must be positive");
        }
        if self.sliding_window < 2 || !self.sliding_window.is_multiple_of(2) {
            bail!(
                Config,
                "sliding_window must be even and >= 2, got {}",
                self.sliding_window
            );
        }
        if !(self.rope_base_global > 0.0 && self.rope_base_local > 0.0) {
            bail!(Config, "RoPE bases must be positive");
        }
        if !(0.0..1.0).contains(&self.attn_output_dropout) {
            bail!(Config, "attn_output_dropout must lie in [0, 1)");
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            bail!(Config, "norm_eps must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in SizePreset::ALL {
            p.config().validate().unwrap();
            assert_eq!(SizePreset::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let mut c = SizePreset::Desk.config();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        let mut c = SizePreset::Desk.config();
        c.hidden_size = 12;
        c.num_heads = 4; // head dim 3
        assert!(c.validate().is_err());
        let mut c = SizePreset::Desk.config();
        c.sliding_window = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let c: ModelConfig = toml::from_str(
            "num_layers = 22\nhidden_size = 768\nintermediate_size = 1152\nnum_heads = 12\n",
        )
        .unwrap();
        assert_eq!(c, SizePreset::Base150m.config());
        assert_eq!(c.digest(), SizePreset::Base150m.config().digest());
    }
}
