//! Training targets for masked (MLM), causal (CLM) and masked-next-token
//! (MNTP) language modeling.
//!
//! Masking is an independent Bernoulli draw per maskable token and a selected
//! token is always replaced by the mask id (no random/keep split). Special
//! tokens are never selected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SpecialTokens;
use crate::error::{bail, Result};
use crate::tensor::{CrossEntropy, Label, Scalar, Tape, Var};

/// Recipe mask ratio for MLM during base pretraining and mid-training.
pub const MLM_RATIO: f64 = 0.30;
/// Recipe mask ratio for MLM in the decay phase.
pub const MLM_DECAY_RATIO: f64 = 0.15;
/// Mask ratio when continuing a decoder with MNTP.
pub const MNTP_RATIO: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mlm,
    Clm,
    Mntp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    pub specials: SpecialTokens,
}

impl ObjectiveSpec {
    pub fn mlm(mask_ratio: f64, specials: SpecialTokens) -> Self {
        Self {
            kind: ObjectiveKind::Mlm,
            mask_ratio: Some(mask_ratio),
            specials,
        }
    }

    pub fn clm(specials: SpecialTokens) -> Self {
        Self {
            kind: ObjectiveKind::Clm,
            mask_ratio: None,
            specials,
        }
    }

    pub fn mntp(mask_ratio: f64, specials: SpecialTokens) -> Self {
        Self {
            kind: ObjectiveKind::Mntp,
            mask_ratio: Some(mask_ratio),
            specials,
        }
    }

    pub fn mask_token_id(&self) -> u32 {
        self.specials.mask
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.mask_ratio) {
            (ObjectiveKind::Clm, None) => Ok(()),
            (ObjectiveKind::Clm, Some(_)) => bail!(Config, "CLM takes no mask ratio"),
            (_, Some(r)) if r > 0.0 && r <= 1.0 => Ok(()),
            (kind, r) => bail!(Config, "{kind:?} needs a mask ratio in (0, 1], got {r:?}"),
        }
    }
}

/// One sequence's model input and per-position supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetBatch {
    pub input_ids: Vec<u32>,
    /// Target for the logits at each position; `None` is ignored.
    pub labels: Vec<Label>,
    /// Input positions that were replaced by the mask id (empty for CLM).
    pub masked_positions: Vec<usize>,
}

impl TargetBatch {
    pub fn supervised(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

fn select_masks<R: Rng + ?Sized>(
    ids: &[u32],
    ratio: f64,
    specials: &SpecialTokens,
    first_maskable: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let maskable = |i: usize| i >= first_maskable && !specials.contains(ids[i]);
    if !(0..ids.len()).any(maskable) {
        bail!(Input, "sequence has no maskable tokens");
    }
    // Draw for every position so the RNG stream advances by exactly len(ids).
    let mut picked = Vec::new();
    for i in 0..ids.len() {
        let draw = rng.gen::<f64>();
        if maskable(i) && draw < ratio {
            picked.push(i);
        }
    }
    Ok(picked)
}

fn require(spec: &ObjectiveSpec, kind: ObjectiveKind) -> Result<f64> {
    if spec.kind != kind {
        bail!(Usage, "expected a {kind:?} objective, got {:?}", spec.kind);
    }
    spec.validate()?;
    Ok(spec.mask_ratio.unwrap_or(0.0))
}

/// Masked language modeling: labels carry the original id at each masked
/// position.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    ids: &[u32],
    spec: &ObjectiveSpec,
    rng: &mut R,
) -> Result<TargetBatch> {
    let ratio = require(spec, ObjectiveKind::Mlm)?;
    let masked = select_masks(ids, ratio, &spec.specials, 0, rng)?;
    let mut input_ids = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for &i in &masked {
        input_ids[i] = spec.mask_token_id();
        labels[i] = Some(ids[i]);
    }
    Ok(TargetBatch {
        input_ids,
        labels,
        masked_positions: masked,
    })
}

/// Next-token prediction: position `i` is supervised with `ids[i + 1]`.
pub fn clm_targets(ids: &[u32]) -> Result<TargetBatch> {
    if ids.len() < 2 {
        bail!(Input, "CLM needs at least two tokens, got {}", ids.len());
    }
    let mut labels: Vec<Label> = ids[1..].iter().map(|&t| Some(t)).collect();
    labels.push(None);
    Ok(TargetBatch {
        input_ids: ids.to_vec(),
        labels,
        masked_positions: Vec::new(),
    })
}

/// Masked next-token prediction: a token masked at `i` is predicted from
/// the logits at `i - 1`. Position 0 is never masked.
pub fn mntp_targets<R: Rng + ?Sized>(
    ids: &[u32],
    spec: &ObjectiveSpec,
    rng: &mut R,
) -> Result<TargetBatch> {
    let ratio = require(spec, ObjectiveKind::Mntp)?;
    let masked = select_masks(ids, ratio, &spec.specials, 1, rng)?;
    if masked.is_empty() {
        log::warn!("mntp_targets: no positions selected; batch carries no supervision");
    }
    let mut input_ids = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for &i in &masked {
        input_ids[i] = spec.mask_token_id();
        labels[i - 1] = Some(ids[i]);
    }
    Ok(TargetBatch {
        input_ids,
        labels,
        masked_positions: masked,
    })
}

/// Dispatches on `spec.kind`.
pub fn build_targets<R: Rng + ?Sized>(
    ids: &[u32],
    spec: &ObjectiveSpec,
    rng: &mut R,
) -> Result<TargetBatch> {
    match spec.kind {
        ObjectiveKind::Mlm => apply_mlm_mask(ids, spec, rng),
        ObjectiveKind::Clm => clm_targets(ids),
        ObjectiveKind::Mntp => mntp_targets(ids, spec, rng),
    }
}

/// Mean cross-entropy over the supervised positions of every batch row.
/// `logits` must hold `Σ len(input_ids)` rows in batch order.
pub fn objective_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    batch: &[TargetBatch],
) -> Result<CrossEntropy> {
    let labels: Vec<Label> = batch
        .iter()
        .flat_map(|b| b.labels.iter().copied())
        .collect();
    let rows = tape.value(logits).rows();
    if rows != labels.len() {
        bail!(
            Dimension,
            "logits carry {rows} positions but targets carry {}",
            labels.len()
        );
    }
    tape.cross_entropy(logits, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SP: SpecialTokens = SpecialTokens {
        pad: 0,
        eos: 1,
        mask: 2,
        unk: 3,
    };

    #[test]
    fn mlm_ratio_extremes() {
        let ids: Vec<u32> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = apply_mlm_mask(&ids, &ObjectiveSpec::mlm(1e-12, SP), &mut rng).unwrap();
        assert!(b.masked_positions.is_empty());
        assert!(b.labels.iter().all(|l| l.is_none()));

        let b = apply_mlm_mask(&ids, &ObjectiveSpec::mlm(1.0, SP), &mut rng).unwrap();
        assert_eq!(b.masked_positions.len(), 10);
        assert!(b.input_ids.iter().all(|&t| t == SP.mask));
        assert_eq!(b.labels, ids.iter().map(|&t| Some(t)).collect::<Vec<_>>());
    }

    #[test]
    fn mlm_ratio_concentrates() {
        let ids: Vec<u32> = (0..100_000).map(|i| 10 + (i % 200) as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = apply_mlm_mask(&ids, &ObjectiveSpec::mlm(0.30, SP), &mut rng).unwrap();
        let frac = b.masked_positions.len() as f64 / ids.len() as f64;
        assert!((frac - 0.30).abs() <= 0.01, "{frac}");
        let bound = 4.0 * (0.3f64 * 0.7 / 100_000.0).sqrt();
        assert!((frac - 0.30).abs() <= bound);
    }

    #[test]
    fn specials_are_never_masked() {
        let ids = vec![1, 10, 0, 11, 2, 12, 3, 1];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = apply_mlm_mask(&ids, &ObjectiveSpec::mlm(1.0, SP), &mut rng).unwrap();
            assert_eq!(b.masked_positions, vec![1, 3, 5]);
            let b = mntp_targets(&ids, &ObjectiveSpec::mntp(1.0, SP), &mut rng).unwrap();
            assert_eq!(b.masked_positions, vec![1, 3, 5]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_mlm_mask(&[0, 1, 2, 3], &ObjectiveSpec::mlm(0.5, SP), &mut rng),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn clm_shifts() {
        let b = clm_targets(&[7, 8, 9]).unwrap();
        assert_eq!(b.input_ids, vec![7, 8, 9]);
        assert_eq!(b.labels, vec![Some(8), Some(9), None]);
        assert_eq!(clm_targets(&[7, 8]).unwrap().supervised(), 1);
        assert!(clm_targets(&[7]).is_err());
    }

    #[test]
    fn mntp_attaches_label_to_previous_position() {
        let ids = [10u32, 11, 12, 13, 14];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = mntp_targets(&ids, &ObjectiveSpec::mntp(0.4, SP), &mut rng).unwrap();
            assert!(!b.masked_positions.contains(&0));
            for j in 0..ids.len() {
                let expect = b.masked_positions.contains(&(j + 1)).then(|| ids[j + 1]);
                assert_eq!(b.labels[j], expect);
            }
            if b.masked_positions == [3] {
                assert_eq!(b.labels[2], Some(13));
                assert_eq!(b.input_ids, vec![10, 11, 12, SP.mask, 14]);
            }
        }
    }

    #[test]
    fn wrong_kind_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_mlm_mask(&[10, 11], &ObjectiveSpec::clm(SP), &mut rng),
            Err(crate::Error::Usage(_))
        ));
        assert!(ObjectiveSpec::mlm(0.0, SP).validate().is_err());
        assert!(ObjectiveSpec::mlm(1.5, SP).validate().is_err());
    }

    #[test]
    fn loss_of_uniform_and_perfect_logits() {
        let vocab = 37;
        let batch = vec![clm_targets(&[5, 6, 7]).unwrap()];
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[3, vocab]));
        let ce = objective_loss(&mut tape, logits, &batch).unwrap();
        assert!((tape.value(ce.loss).item() - (vocab as f64).ln()).abs() < 1e-12);

        let mut perfect = vec![0.0; 3 * vocab];
        perfect[6] = 1e4;
        perfect[vocab + 7] = 1e4;
        let logits = tape.leaf(Tensor::new(vec![3, vocab], perfect).unwrap());
        let ce = objective_loss(&mut tape, logits, &batch).unwrap();
        assert!(tape.value(ce.loss).item() < 1e-12);
    }
}
