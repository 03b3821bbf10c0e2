//! Evaluation mechanics: multiple-choice scoring, encoder mask-fill and
//! greedy causal generation, and pronoun prediction for WinoGender-style
//! items. Everything is deterministic; ties always go to a fixed order.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{SpecialTokens, Tokenizer};
use crate::error::{bail, Error, Result};
use crate::model::{AttentionMode, TransformerModel};
use crate::tensor::Scalar;

/// Anything that maps a token sequence to per-position next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// One row of `vocab_size` logits per input position.
    fn logits(&self, ids: &[u32], mode: AttentionMode) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> LanguageModel for TransformerModel<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn logits(&self, ids: &[u32], mode: AttentionMode) -> Result<Vec<Vec<f64>>> {
        let t = self.forward(ids, mode)?;
        Ok((0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value, skipping `exclude`; the lowest index wins ties.
fn argmax(row: &[f64], exclude: Option<u32>) -> u32 {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if Some(i as u32) == exclude {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i as u32)
}

fn check_len(model: &dyn LanguageModel, len: usize) -> Result<()> {
    if len > model.max_seq_len() {
        bail!(
            Input,
            "sequence of {len} tokens exceeds the model limit of {}",
            model.max_seq_len()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultipleChoiceItem {
    #[serde(default)]
    pub id: Option<String>,
    pub context: String,
    pub choices: Vec<String>,
    pub gold: usize,
}

impl MultipleChoiceItem {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            bail!(Input, "a multiple-choice item needs at least two choices");
        }
        if self.gold >= self.choices.len() {
            bail!(Input, "gold index {} out of range", self.gold);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScores {
    pub chosen: usize,
    pub log_likelihoods: Vec<f64>,
}

fn pick_choice(scores: Vec<f64>) -> ChoiceScores {
    let chosen = argmax(&scores, None) as usize;
    ChoiceScores {
        chosen,
        log_likelihoods: scores,
    }
}

/// Sum of `log p(choice token | context, earlier choice tokens)` per choice,
/// under causal attention. The highest sum wins, lowest index on ties.
pub fn score_choices_causal(
    model: &dyn LanguageModel,
    tok: &Tokenizer,
    item: &MultipleChoiceItem,
) -> Result<ChoiceScores> {
    item.validate()?;
    let ctx = tok.encode(&item.context)?;
    let mut scores = Vec::with_capacity(item.choices.len());
    for choice in &item.choices {
        let cont = tok.encode(choice)?;
        let ids: Vec<u32> = ctx.iter().chain(&cont).copied().collect();
        check_len(model, ids.len())?;
        let logits = model.logits(&ids, AttentionMode::Causal)?;
        let ll: f64 = (ctx.len()..ids.len())
            .map(|p| log_softmax(&logits[p - 1])[ids[p] as usize])
            .sum();
        scores.push(ll);
    }
    Ok(pick_choice(scores))
}

/// Encoder alternative to [`score_choices_causal`]: the pseudo
/// log-likelihood of each choice, masking one choice token at a time with
/// everything else visible.
pub fn score_choices_masked(
    model: &dyn LanguageModel,
    tok: &Tokenizer,
    item: &MultipleChoiceItem,
) -> Result<ChoiceScores> {
    item.validate()?;
    let mask = tok.specials().mask;
    let ctx = tok.encode(&item.context)?;
    let mut scores = Vec::with_capacity(item.choices.len());
    for choice in &item.choices {
        let cont = tok.encode(choice)?;
        let ids: Vec<u32> = ctx.iter().chain(&cont).copied().collect();
        check_len(model, ids.len())?;
        let mut ll = 0.0;
        for p in ctx.len()..ids.len() {
            let mut masked = ids.clone();
            masked[p] = mask;
            let logits = model.logits(&masked, AttentionMode::Bidirectional)?;
            ll += log_softmax(&logits[p])[ids[p] as usize];
        }
        scores.push(ll);
    }
    Ok(pick_choice(scores))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFlags {
    /// End each probe with a newline instead of eos, and stop on newline.
    #[serde(default)]
    pub newline_stop: bool,
    /// Never predict eos.
    #[serde(default)]
    pub lambada_noeos: bool,
}

/// Encoder generation: append three masks and a terminator, commit the
/// argmax at the first mask, repeat. Stops after `max_new` tokens, after
/// committing the stop token, or when the probe no longer fits.
pub fn generate_encoder_maskfill(
    model: &dyn LanguageModel,
    prompt: &[u32],
    max_new: usize,
    specials: SpecialTokens,
    newline: Option<u32>,
    flags: TaskFlags,
) -> Result<Vec<u32>> {
    let terminator = if flags.newline_stop {
        newline.ok_or_else(|| Error::Input("newline_stop needs a newline token".into()))?
    } else {
        specials.eos
    };
    let probe = [specials.mask, specials.mask, specials.mask, terminator];
    if prompt.len() + probe.len() > model.max_seq_len() {
        bail!(
            Input,
            "prompt of {} tokens leaves no room for the mask probe (limit {})",
            prompt.len(),
            model.max_seq_len()
        );
    }
    let exclude = flags.lambada_noeos.then_some(specials.eos);
    let mut out = Vec::new();
    while out.len() < max_new {
        let mut seq: Vec<u32> = prompt.iter().chain(&out).copied().collect();
        let at = seq.len();
        seq.extend_from_slice(&probe);
        if seq.len() > model.max_seq_len() {
            break;
        }
        let logits = model.logits(&seq, AttentionMode::Bidirectional)?;
        let next = argmax(&logits[at], exclude);
        out.push(next);
        if next == specials.eos || next == terminator {
            break;
        }
    }
    Ok(out)
}

/// Decoder generation: repeatedly append the argmax next token.
pub fn generate_causal_greedy(
    model: &dyn LanguageModel,
    prompt: &[u32],
    max_new: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        bail!(Input, "causal generation needs a nonempty prompt");
    }
    if prompt.len() >= model.max_seq_len() {
        bail!(
            Input,
            "prompt already fills the model limit of {}",
            model.max_seq_len()
        );
    }
    let mut seq = prompt.to_vec();
    while seq.len() - prompt.len() < max_new && seq.len() < model.max_seq_len() {
        let logits = model.logits(&seq, AttentionMode::Causal)?;
        let next = argmax(logits.last().expect("nonempty"), None);
        seq.push(next);
        if next == eos {
            break;
        }
    }
    Ok(seq.split_off(prompt.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pronoun {
    Male,
    Female,
    Neutral,
}

impl Pronoun {
    /// Candidate order; an earlier candidate wins a tie.
    pub const TIE_ORDER: [Pronoun; 3] = [Pronoun::Neutral, Pronoun::Female, Pronoun::Male];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounForms {
    pub male: String,
    pub female: String,
    pub neutral: String,
}

impl PronounForms {
    pub fn get(&self, p: Pronoun) -> &str {
        match p {
            Pronoun::Male => &self.male,
            Pronoun::Female => &self.female,
            Pronoun::Neutral => &self.neutral,
        }
    }
}

pub const PRONOUN_SLOT: &str = "{pronoun}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinoGenderItem {
    #[serde(default)]
    pub id: Option<String>,
    /// Sentence with exactly one `{pronoun}` slot.
    pub template: String,
    pub pronouns: PronounForms,
    /// Gender the occupation is stereotypically associated with; never
    /// neutral.
    pub stereotype: Pronoun,
}

impl WinoGenderItem {
    /// Text before and after the slot.
    pub fn split(&self) -> Result<(&str, &str)> {
        if self.template.matches(PRONOUN_SLOT).count() != 1 {
            bail!(
                Input,
                "template must contain exactly one {PRONOUN_SLOT} slot"
            );
        }
        if self.stereotype == Pronoun::Neutral {
            bail!(Input, "stereotype label must be male or female");
        }
        Ok(self.template.split_once(PRONOUN_SLOT).expect("one slot"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounPrediction {
    pub pronoun: Pronoun,
    /// Mean log-probability per candidate, in [`Pronoun::TIE_ORDER`].
    pub scores: Vec<f64>,
}

/// Encoders: fill the slot with one mask per candidate token and score the
/// candidate by the mean log-probability of its tokens at those masks.
/// Decoders: score each full sentence (after a leading eos) by mean token
/// log-probability, i.e. pick the lowest per-token perplexity.
pub fn winogender_predict(
    model: &dyn LanguageModel,
    tok: &Tokenizer,
    item: &WinoGenderItem,
    mode: AttentionMode,
) -> Result<PronounPrediction> {
    let (before, after) = item.split()?;
    let sp = tok.specials();
    let prefix = tok.encode_bytes(before.as_bytes());
    let suffix = tok.encode_bytes(after.as_bytes());
    let mut scores = Vec::with_capacity(3);
    for p in Pronoun::TIE_ORDER {
        let cand = tok.encode(item.pronouns.get(p))?;
        let score = match mode {
            AttentionMode::Bidirectional => {
                let mut seq = prefix.clone();
                seq.extend(std::iter::repeat_n(sp.mask, cand.len()));
                seq.extend_from_slice(&suffix);
                check_len(model, seq.len())?;
                let logits = model.logits(&seq, mode)?;
                let total: f64 = cand
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| log_softmax(&logits[prefix.len() + j])[t as usize])
                    .sum();
                total / cand.len() as f64
            }
            AttentionMode::Causal => {
                let seq: Vec<u32> = std::iter::once(sp.eos)
                    .chain(prefix.iter().copied())
                    .chain(cand)
                    .chain(suffix.iter().copied())
                    .collect();
                check_len(model, seq.len())?;
                mean_causal_log_prob(model, &seq)?
            }
        };
        scores.push(score);
    }
    Ok(PronounPrediction {
        pronoun: Pronoun::TIE_ORDER[pick_with_ties(&scores)],
        scores,
    })
}

/// Relative gap below which two candidate scores count as tied. Means over
/// different token counts round differently even when every term is equal.
const TIE_TOLERANCE: f64 = 1e-12;

/// Earliest index whose score no later candidate beats by more than
/// [`TIE_TOLERANCE`].
fn pick_with_ties(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if s - b > TIE_TOLERANCE * s.abs().max(b.abs()).max(1.0) {
            best = i;
        }
    }
    best
}

/// Mean of `log p(seq[i] | seq[..i])` over `i >= 1`.
pub fn mean_causal_log_prob(model: &dyn LanguageModel, seq: &[u32]) -> Result<f64> {
    if seq.len() < 2 {
        bail!(Input, "need at least two tokens to score a sentence");
    }
    let logits = model.logits(seq, AttentionMode::Causal)?;
    let total: f64 = (1..seq.len())
        .map(|i| log_softmax(&logits[i - 1])[seq[i] as usize])
        .sum();
    Ok(total / (seq.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounDistribution {
    pub n: usize,
    pub counts: BTreeMap<Pronoun, usize>,
    pub shares: BTreeMap<Pronoun, f64>,
}

impl PronounDistribution {
    fn from_predictions(preds: impl Iterator<Item = Pronoun>) -> Self {
        let mut counts: BTreeMap<Pronoun, usize> =
            Pronoun::TIE_ORDER.iter().map(|&p| (p, 0)).collect();
        let mut n = 0;
        for p in preds {
            *counts.get_mut(&p).expect("all pronouns present") += 1;
            n += 1;
        }
        let shares = counts
            .iter()
            .map(|(&p, &c)| (p, if n == 0 { 0.0 } else { c as f64 / n as f64 }))
            .collect();
        Self { n, counts, shares }
    }

    pub fn share(&self, p: Pronoun) -> f64 {
        self.shares[&p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub overall: PronounDistribution,
    /// Keyed by stereotype label.
    pub by_stereotype: BTreeMap<Pronoun, PronounDistribution>,
}

/// Overall pronoun shares plus shares per stereotype label. Input pairs are
/// `(stereotype, predicted)`.
pub fn aggregate_distribution(predictions: &[(Pronoun, Pronoun)]) -> Result<DistributionReport> {
    if predictions.is_empty() {
        bail!(Input, "no predictions to aggregate");
    }
    let by_stereotype = [Pronoun::Male, Pronoun::Female]
        .into_iter()
        .map(|label| {
            let dist = PronounDistribution::from_predictions(
                predictions
                    .iter()
                    .filter(|(s, _)| *s == label)
                    .map(|(_, p)| *p),
            );
            (label, dist)
        })
        .collect();
    Ok(DistributionReport {
        overall: PronounDistribution::from_predictions(predictions.iter().map(|(_, p)| *p)),
        by_stereotype,
    })
}

/// A prompt for generative evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationItem {
    #[serde(default)]
    pub id: Option<String>,
    pub prompt: String,
    /// Expected completion; compared after trimming whitespace.
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default, flatten)]
    pub flags: TaskFlags,
}

fn default_max_new() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Mc,
    Genfill,
    Winogender,
}

/// JSON report written for every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub kind: EvalKind,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionReport>,
    pub items: Vec<serde_json::Value>,
}

/// Reads newline-delimited JSON items.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Runs every item of a task through the procedure matching `kind` and the
/// model's attention mode.
pub fn run_task(
    model: &dyn LanguageModel,
    tok: &Tokenizer,
    mode: AttentionMode,
    kind: EvalKind,
    task: &str,
    items_path: &Path,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    let (accuracy, distribution) = match kind {
        EvalKind::Mc => {
            let items: Vec<MultipleChoiceItem> = load_jsonl(items_path)?;
            let mut correct = 0;
            for item in &items {
                let s = match mode {
                    AttentionMode::Causal => score_choices_causal(model, tok, item)?,
                    AttentionMode::Bidirectional => score_choices_masked(model, tok, item)?,
                };
                correct += usize::from(s.chosen == item.gold);
                records.push(serde_json::json!({
                    "id": item.id, "gold": item.gold, "chosen": s.chosen,
                    "log_likelihoods": s.log_likelihoods,
                }));
            }
            (Some(ratio(correct, items.len())), None)
        }
        EvalKind::Genfill => {
            let items: Vec<GenerationItem> = load_jsonl(items_path)?;
            let sp = tok.specials();
            let mut correct = 0;
            let mut scored = 0;
            for item in &items {
                let prompt = tok.encode(&item.prompt)?;
                let ids = match mode {
                    AttentionMode::Bidirectional => generate_encoder_maskfill(
                        model,
                        &prompt,
                        item.max_new,
                        sp,
                        tok.newline_id(),
                        item.flags,
                    )?,
                    AttentionMode::Causal => {
                        generate_causal_greedy(model, &prompt, item.max_new, sp.eos)?
                    }
                };
                let text = tok.decode(&ids);
                let hit = item.answer.as_ref().map(|a| a.trim() == text.trim());
                if let Some(h) = hit {
                    scored += 1;
                    correct += usize::from(h);
                }
                records.push(serde_json::json!({
                    "id": item.id, "generated": text, "ids": ids, "correct": hit,
                }));
            }
            ((scored > 0).then(|| ratio(correct, scored)), None)
        }
        EvalKind::Winogender => {
            let items: Vec<WinoGenderItem> = load_jsonl(items_path)?;
            let mut preds = Vec::with_capacity(items.len());
            for item in &items {
                let p = winogender_predict(model, tok, item, mode)?;
                preds.push((item.stereotype, p.pronoun));
                records.push(serde_json::json!({
                    "id": item.id, "stereotype": item.stereotype, "predicted": p.pronoun,
                    "scores": p.scores,
                }));
            }
            (None, Some(aggregate_distribution(&preds)?))
        }
    };
    Ok(EvalReport {
        task: task.to_string(),
        kind,
        n: records.len(),
        accuracy,
        distribution,
        items: records,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
