//! The shared transformer: token embedding → embedding norm → prenorm
//! attention / gated-MLP blocks → final norm → (tied) vocabulary head.
//!
//! All linear maps are bias-free. Layers alternate between global attention
//! and symmetric sliding-window attention; the attention mode (bidirectional
//! or causal) is a per-call argument and is never stored in the weights.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ModelConfig, SizePreset};

use crate::error::{bail, Result};
use crate::tensor::{AttentionMask, Scalar, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLayout {
    Global,
    Local,
}

/// Global on every `global_every`-th layer starting at layer 0, local
/// otherwise. `global_every == 0` makes every layer local.
pub fn attention_layout(config: &ModelConfig, layer_idx: usize) -> AttentionLayout {
    if config.global_every != 0 && layer_idx.is_multiple_of(config.global_every) {
        AttentionLayout::Global
    } else {
        AttentionLayout::Local
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub embedding: usize,
    pub non_embedding: usize,
}

/// Closed-form parameter count. The embedding bucket is the token-embedding
/// matrix alone; an untied output head counts as non-embedding.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let (h, i, v, l) = (
        config.hidden_size,
        config.intermediate_size,
        config.vocab_size,
        config.num_layers,
    );
    let embedding = v * h;
    let attention = 3 * h * h + h * h;
    let mlp = h * 2 * i + i * h;
    let norms_per_layer = 2 * h;
    let mut non_embedding = l * (attention + mlp + norms_per_layer);
    if config.skip_first_prenorm {
        non_embedding -= h;
    }
    if config.embedding_norm {
        non_embedding += h;
    }
    if config.final_norm {
        non_embedding += h;
    }
    if !config.tie_embeddings {
        non_embedding += v * h;
    }
    ParamCount {
        total: embedding + non_embedding,
        embedding,
        non_embedding,
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    attn_norm: Option<usize>,
    wqkv: usize,
    wo: usize,
    mlp_norm: usize,
    wi: usize,
    wo_mlp: usize,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    tok_embeddings: usize,
    emb_norm: Option<usize>,
    final_norm: Option<usize>,
    head: Option<usize>,
}

type Shapes = Vec<(String, Vec<usize>)>;

/// Parameter names and shapes in storage order.
fn parameter_layout(config: &ModelConfig) -> (Shapes, Slots, Vec<LayerSlots>) {
    let (h, i, v) = (
        config.hidden_size,
        config.intermediate_size,
        config.vocab_size,
    );
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        specs.push((name, shape));
        specs.len() - 1
    };
    let tok_embeddings = push("embeddings.tok_embeddings.weight".into(), vec![v, h]);
    let emb_norm = config
        .embedding_norm
        .then(|| push("embeddings.norm.weight".into(), vec![h]));
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let attn_norm = (!(l == 0 && config.skip_first_prenorm))
            .then(|| push(format!("layers.{l}.attn_norm.weight"), vec![h]));
        let wqkv = push(format!("layers.{l}.attn.Wqkv.weight"), vec![3 * h, h]);
        let wo = push(format!("layers.{l}.attn.Wo.weight"), vec![h, h]);
        let mlp_norm = push(format!("layers.{l}.mlp_norm.weight"), vec![h]);
        let wi = push(format!("layers.{l}.mlp.Wi.weight"), vec![2 * i, h]);
        let wo_mlp = push(format!("layers.{l}.mlp.Wo.weight"), vec![h, i]);
        layers.push(LayerSlots {
            attn_norm,
            wqkv,
            wo,
            mlp_norm,
            wi,
            wo_mlp,
        });
    }
    let final_norm = config
        .final_norm
        .then(|| push("final_norm.weight".into(), vec![h]));
    let head = (!config.tie_embeddings).then(|| push("head.weight".into(), vec![v, h]));
    (
        specs,
        Slots {
            tok_embeddings,
            emb_norm,
            final_norm,
            head,
        },
        layers,
    )
}

/// Names and shapes of the tensors [`TransformerModel::build`] allocates,
/// in storage order.
pub fn parameter_shapes(config: &ModelConfig) -> Shapes {
    parameter_layout(config).0
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm.weight")
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T: Scalar> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    slots: Slots,
    layers: Vec<LayerSlots>,
    rope_base_global: f64,
    rope_base_local: f64,
}

impl<T: Scalar> TransformerModel<T> {
    /// Builds a model with N(0, 0.02) matrices and unit norm gains. Values are
    /// drawn in f64 from a ChaCha stream seeded by `seed`, so the same seed
    /// gives the same weights regardless of `T` (up to rounding).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, slots, layers) = parameter_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data: Vec<T> = if is_norm(&name) {
                    vec![T::one(); numel]
                } else {
                    (0..numel)
                        .map(|_| T::from_f64(normal.sample(&mut rng)))
                        .collect()
                };
                Parameter {
                    value: Tensor::new(shape, data).expect("layout shapes are consistent"),
                    name,
                }
            })
            .collect();
        Ok(Self {
            rope_base_global: config.rope_base_global,
            rope_base_local: config.rope_base_local,
            config,
            params,
            slots,
            layers,
        })
    }

    /// Rebuilds a model from named tensors, e.g. loaded from a checkpoint.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, slots, layers) = parameter_layout(&config);
        if specs.len() != named.len() {
            bail!(
                Config,
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            );
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (got_name, value)) in specs.into_iter().zip(named) {
            if name != got_name || value.shape() != shape.as_slice() {
                bail!(
                    Config,
                    "parameter mismatch: expected {name} {shape:?}, got {got_name} {:?}",
                    value.shape()
                );
            }
            params.push(Parameter { name, value });
        }
        Ok(Self {
            rope_base_global: config.rope_base_global,
            rope_base_local: config.rope_base_local,
            config,
            params,
            slots,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Number of scalars across all parameter tensors.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn rope_bases(&self) -> (f64, f64) {
        (self.rope_base_global, self.rope_base_local)
    }

    /// Changes the RoPE bases used by subsequent forwards. Weights are untouched.
    pub fn set_rope_base(&mut self, base_global: f64, base_local: f64) -> Result<()> {
        if !(base_global > 0.0 && base_local > 0.0) {
            bail!(Config, "RoPE bases must be positive");
        }
        self.rope_base_global = base_global;
        self.rope_base_local = base_local;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            slots: self.slots,
            layers: self.layers.clone(),
            rope_base_global: self.rope_base_global,
            rope_base_local: self.rope_base_local,
        }
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Whether decoupled weight decay applies to parameter `idx`.
    pub fn decays(&self, idx: usize) -> bool {
        !is_norm(&self.params[idx].name)
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    fn check_inputs(&self, batch: &[&[u32]]) -> Result<usize> {
        let Some(first) = batch.first() else {
            bail!(Input, "empty batch");
        };
        let seq = first.len();
        if seq == 0 {
            bail!(Input, "empty sequence");
        }
        if seq > self.config.max_seq_len {
            bail!(
                Input,
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            );
        }
        for ids in batch {
            if ids.len() != seq {
                bail!(Input, "ragged batch: lengths {seq} and {}", ids.len());
            }
            if let Some(&bad) = ids
                .iter()
                .find(|&&id| id as usize >= self.config.vocab_size)
            {
                bail!(
                    Input,
                    "token id {bad} out of range for vocabulary {}",
                    self.config.vocab_size
                );
            }
        }
        Ok(seq)
    }

    /// Forward over equal-length sequences; returns `[batch·seq × vocab]`
    /// logits. Dropout is applied only when `dropout` carries an RNG.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &[&[u32]],
        mode: AttentionMode,
        mut dropout: Option<&mut R>,
    ) -> Result<Var> {
        let seq = self.check_inputs(batch)?;
        let cfg = &self.config;
        let (hidden, heads, d) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim());
        let ids: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let rows = ids.len();
        let positions: Vec<usize> = (0..rows).map(|r| r % seq).collect();
        let eps = cfg.norm_eps;

        let mut x = tape.embedding(params[self.slots.tok_embeddings], &ids)?;
        if let Some(g) = self.slots.emb_norm {
            x = tape.layer_norm(x, params[g], eps)?;
        }
        for (l, slots) in self.layers.iter().enumerate() {
            let (window, base) = match attention_layout(cfg, l) {
                AttentionLayout::Global => (None, self.rope_base_global),
                AttentionLayout::Local => (Some(cfg.sliding_window / 2), self.rope_base_local),
            };
            let h = match slots.attn_norm {
                Some(g) => tape.layer_norm(x, params[g], eps)?,
                None => x,
            };
            let qkv = tape.linear(h, params[slots.wqkv])?;
            let mut parts = [qkv; 3];
            for (p, part) in parts.iter_mut().enumerate() {
                *part = tape.slice_cols(qkv, p * hidden, (p + 1) * hidden)?;
            }
            let [q, k, v] = parts;
            let q = self.rotate(tape, q, &positions, base, heads, d)?;
            let k = self.rotate(tape, k, &positions, base, heads, d)?;
            let mask = AttentionMask {
                seq_len: seq,
                causal: mode == AttentionMode::Causal,
                window,
            };
            let attn = tape.attention(q, k, v, heads, mask)?;
            let mut out = tape.linear(attn, params[slots.wo])?;
            if let Some(rng) = dropout.as_deref_mut() {
                out = tape.dropout(out, cfg.attn_output_dropout, rng);
            }
            x = tape.add(x, out)?;

            let h = tape.layer_norm(x, params[slots.mlp_norm], eps)?;
            let up = tape.linear(h, params[slots.wi])?;
            let act = tape.geglu(up)?;
            let down = tape.linear(act, params[slots.wo_mlp])?;
            x = tape.add(x, down)?;
        }
        if let Some(g) = self.slots.final_norm {
            x = tape.layer_norm(x, params[g], eps)?;
        }
        let head = self.slots.head.unwrap_or(self.slots.tok_embeddings);
        tape.linear(x, params[head])
    }

    fn rotate(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        positions: &[usize],
        base: f64,
        heads: usize,
        d: usize,
    ) -> Result<Var> {
        let rows = positions.len();
        let x3 = tape.reshape(x, vec![rows, heads, d])?;
        let r = tape.rotary(x3, positions, base)?;
        tape.reshape(r, vec![rows, heads * d])
    }

    /// Inference forward over a single sequence: `[seq × vocab]` logits,
    /// dropout off.
    pub fn forward(&self, ids: &[u32], mode: AttentionMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let logits = self.forward_batch::<ChaCha8Rng>(&mut tape, &params, &[ids], mode, None)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            intermediate_size: 12,
            num_heads: 2,
            vocab_size: 17,
            max_seq_len: 32,
            ..SizePreset::Desk.config()
        }
    }

    #[test]
    fn minimal_config_runs() {
        let m = TransformerModel::<f64>::build(tiny(), 1).unwrap();
        let logits = m.forward(&[1, 2, 3], AttentionMode::Bidirectional).unwrap();
        assert_eq!(logits.shape(), &[3, 17]);
        assert!(logits.is_finite());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = TransformerModel::<f32>::build(tiny(), 42).unwrap();
        let b = TransformerModel::<f32>::build(tiny(), 42).unwrap();
        let c = TransformerModel::<f32>::build(tiny(), 43).unwrap();
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        assert_ne!(a.parameter_digest(), c.parameter_digest());
    }

    #[test]
    fn layout_pattern() {
        let cfg = SizePreset::Base150m.config();
        assert_eq!(attention_layout(&cfg, 0), AttentionLayout::Global);
        assert_eq!(attention_layout(&cfg, 1), AttentionLayout::Local);
        assert_eq!(attention_layout(&cfg, 2), AttentionLayout::Local);
        assert_eq!(attention_layout(&cfg, 3), AttentionLayout::Global);
        let globals = (0..cfg.num_layers)
            .filter(|&l| attention_layout(&cfg, l) == AttentionLayout::Global)
            .count();
        assert_eq!(globals, 8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TransformerModel::<f64>::build(tiny(), 1).unwrap();
        assert!(matches!(
            m.forward(&[17], AttentionMode::Causal),
            Err(crate::Error::Input(_))
        ));
        assert!(matches!(
            m.forward(&[1; 33], AttentionMode::Causal),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn analytic_count_matches_enumeration_for_variants() {
        for (skip, emb, fin, tie) in [
            (true, true, true, true),
            (false, false, false, false),
            (true, false, true, false),
        ] {
            let cfg = ModelConfig {
                skip_first_prenorm: skip,
                embedding_norm: emb,
                final_norm: fin,
                tie_embeddings: tie,
                num_layers: 3,
                ..tiny()
            };
            let m = TransformerModel::<f32>::build(cfg.clone(), 0).unwrap();
            let c = count_parameters(&cfg);
            assert_eq!(c.total, m.num_parameters());
            assert_eq!(c.total, c.embedding + c.non_embedding);
        }
    }

    #[test]
    fn rope_base_change_is_position_dependent() {
        let mut m = TransformerModel::<f64>::build(tiny(), 3).unwrap();
        let ids = [4u32, 9, 2, 11];
        let before = m.forward(&ids, AttentionMode::Bidirectional).unwrap();
        m.set_rope_base(10_000.0, 10_000.0).unwrap();
        assert_eq!(
            before,
            m.forward(&ids, AttentionMode::Bidirectional).unwrap()
        );
        m.set_rope_base(160_000.0, 160_000.0).unwrap();
        let after = m.forward(&ids, AttentionMode::Bidirectional).unwrap();
        assert_ne!(before.data(), after.data());

        let single_a = m.forward(&[5], AttentionMode::Causal).unwrap();
        m.set_rope_base(1.5, 3.0).unwrap();
        assert_eq!(single_a, m.forward(&[5], AttentionMode::Causal).unwrap());
        assert!(m.set_rope_base(0.0, 1.0).is_err());
    }

    #[test]
    fn single_token_is_mode_independent() {
        let m = TransformerModel::<f64>::build(tiny(), 8).unwrap();
        assert_eq!(
            m.forward(&[3], AttentionMode::Causal).unwrap(),
            m.forward(&[3], AttentionMode::Bidirectional).unwrap()
        );
    }
}
