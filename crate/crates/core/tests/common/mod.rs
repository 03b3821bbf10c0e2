//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twinlm::data::{synthetic_corpora, CorpusSet, SpecialTokens, Tokenizer};
use twinlm::eval::{LanguageModel, Pronoun, PronounForms, TaskFlags, WinoGenderItem};
use twinlm::model::{AttentionMode, ModelConfig, SizePreset, TransformerModel};
use twinlm::objectives::{clm_targets, objective_loss};
use twinlm::tensor::{AttentionMask, Label, Tape, Tensor, Var};
use twinlm::trainer::{recipe_run, Arch, RecipeOptions, TrainRunConfig};
use twinlm::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn small_config(
    layers: usize,
    hidden: usize,
    heads: usize,
    inter: usize,
    vocab: usize,
) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: hidden,
        intermediate_size: inter,
        num_heads: heads,
        vocab_size: vocab,
        ..SizePreset::Desk.config()
    }
}

/// `||a - b|| / max(||a||, ||b||)`, with 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Central-difference check of `build` with respect to every input. The
/// op's output is reduced to a scalar through fixed random weights.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let h = 1e-6;
    let loss_of = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        reduce(&mut tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(random_tensor(&shape, 99));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += h;
            let up = loss_of(&vals);
            vals[i].data_mut()[j] -= 2.0 * h;
            let down = loss_of(&vals);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn reduce(tape: &mut Tape<f64>, out: Var) -> f64 {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(random_tensor(&shape, 99));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.value(loss).item()
}

/// Relative gradient error of every differentiable op.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let m = |r, c, s| random_tensor(&[r, c], s);
    let mut out = Vec::new();
    let mut push =
        |name, inputs: Vec<Tensor<f64>>, f: Box<Build>| out.push((name, gradcheck(&inputs, &*f)));
    push(
        "matmul",
        vec![m(3, 4, 1), m(4, 5, 2)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );
    push(
        "linear",
        vec![m(3, 4, 1), m(5, 4, 2)],
        Box::new(|t, v| t.linear(v[0], v[1])),
    );
    push(
        "add",
        vec![m(3, 4, 1), m(3, 4, 2)],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "mul",
        vec![m(3, 4, 1), m(3, 4, 2)],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    push(
        "scale",
        vec![m(3, 4, 1)],
        Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
    );
    push("sum", vec![m(3, 4, 1)], Box::new(|t, v| Ok(t.sum(v[0]))));
    push(
        "reshape",
        vec![m(3, 4, 1)],
        Box::new(|t, v| t.reshape(v[0], vec![2, 6])),
    );
    push(
        "slice_cols",
        vec![m(3, 6, 1)],
        Box::new(|t, v| t.slice_cols(v[0], 2, 5)),
    );
    push(
        "softmax",
        vec![m(3, 5, 1)],
        Box::new(|t, v| t.softmax_last(v[0])),
    );
    push(
        "layer_norm",
        vec![m(3, 6, 1), random_tensor(&[6], 2)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], 1e-12)),
    );
    push("gelu", vec![m(3, 4, 1)], Box::new(|t, v| Ok(t.gelu(v[0]))));
    push("geglu", vec![m(3, 8, 1)], Box::new(|t, v| t.geglu(v[0])));
    push(
        "rotary",
        vec![random_tensor(&[5, 2, 4], 1)],
        Box::new(|t, v| t.rotary(v[0], &[0, 1, 2, 3, 4], 10_000.0)),
    );
    for (name, causal, window) in [
        ("attention bidirectional", false, None),
        ("attention causal", true, None),
        ("attention local", false, Some(1)),
        ("attention causal local", true, Some(1)),
    ] {
        push(
            name,
            vec![m(8, 6, 1), m(8, 6, 2), m(8, 6, 3)],
            Box::new(move |t, v| {
                let mask = AttentionMask {
                    seq_len: 4,
                    causal,
                    window,
                };
                t.attention(v[0], v[1], v[2], 2, mask)
            }),
        );
    }
    push(
        "embedding",
        vec![m(6, 3, 1)],
        Box::new(|t, v| t.embedding(v[0], &[1, 4, 1, 0])),
    );
    push(
        "dropout",
        vec![m(4, 5, 1)],
        Box::new(|t, v| Ok(t.dropout(v[0], 0.3, &mut rng(7)))),
    );
    push(
        "cross_entropy",
        vec![m(4, 6, 1)],
        Box::new(|t, v| {
            let labels: [Label; 4] = [Some(2), None, Some(5), Some(0)];
            Ok(t.cross_entropy(v[0], &labels)?.loss)
        }),
    );
    out
}

/// Gradient check of a whole 2-layer model (one global, one local layer)
/// under a CLM loss, over every parameter.
pub fn model_gradcheck(mode: AttentionMode) -> f64 {
    let mut cfg = small_config(2, 8, 2, 6, 11);
    cfg.sliding_window = 2;
    cfg.global_every = 2;
    let model = TransformerModel::<f64>::build(cfg, 3).unwrap();
    let ids: Vec<u32> = vec![4, 7, 1, 9, 3, 10];
    let targets = clm_targets(&ids).unwrap();
    let loss_of = |params: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let logits = model
            .forward_batch::<ChaCha8Rng>(&mut tape, &vars, &[&ids], mode, None)
            .unwrap();
        let ce = objective_loss(&mut tape, logits, std::slice::from_ref(&targets)).unwrap();
        tape.value(ce.loss).item()
    };
    let base: Vec<Tensor<f64>> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model
        .forward_batch::<ChaCha8Rng>(&mut tape, &vars, &[&ids], mode, None)
        .unwrap();
    let ce = objective_loss(&mut tape, logits, std::slice::from_ref(&targets)).unwrap();
    tape.backward(ce.loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for (i, p) in base.iter().enumerate() {
        analytic.extend_from_slice(tape.grad(vars[i]).unwrap());
        for j in 0..p.numel() {
            let mut vals = base.clone();
            vals[i].data_mut()[j] += h;
            let up = loss_of(&vals);
            vals[i].data_mut()[j] -= 2.0 * h;
            let down = loss_of(&vals);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// For every position `p` of a random sequence, replaces token `p` and
/// reports whether any logit row before `p` changed in any bit.
pub fn causal_leaks(model: &TransformerModel<f32>, len: usize) -> usize {
    let mut r = rng(11);
    let vocab = model.config().vocab_size as u32;
    let ids: Vec<u32> = (0..len).map(|_| r.gen_range(4..vocab)).collect();
    let base = model.forward(&ids, AttentionMode::Causal).unwrap();
    let mut leaks = 0;
    for p in 0..len {
        let mut alt = ids.clone();
        alt[p] = if ids[p] + 1 < vocab { ids[p] + 1 } else { 4 };
        let out = model.forward(&alt, AttentionMode::Causal).unwrap();
        for q in 0..p {
            if base
                .row(q)
                .iter()
                .zip(out.row(q))
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                leaks += 1;
            }
        }
    }
    leaks
}

/// Perturbs token `p` and returns which positions' logits moved.
pub fn influence(model: &TransformerModel<f32>, ids: &[u32], p: usize) -> Vec<bool> {
    let base = model.forward(ids, AttentionMode::Bidirectional).unwrap();
    let mut alt = ids.to_vec();
    alt[p] = if ids[p] == 4 { 5 } else { 4 };
    let out = model.forward(&alt, AttentionMode::Bidirectional).unwrap();
    (0..ids.len())
        .map(|q| {
            base.row(q)
                .iter()
                .zip(out.row(q))
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .collect()
}

/// Table 9: (size, total, embedding, non-embedding) in millions.
pub const TABLE9: [(SizePreset, f64, f64, f64); 6] = [
    (SizePreset::Xxs17m, 16.8, 12.9, 3.9),
    (SizePreset::Xs32m, 31.9, 19.3, 12.5),
    (SizePreset::Small68m, 68.1, 25.8, 42.4),
    (SizePreset::Base150m, 149.0, 38.7, 110.3),
    (SizePreset::Large400m, 394.8, 51.6, 343.2),
    (SizePreset::Xl1b, 1028.1, 90.3, 937.8),
];

/// Desk recipe for one architecture with a synthetic corpus covering every
/// source of its mixtures.
pub fn desk_run(arch: Arch, seed: u64, scale: f64, bs_full: usize) -> TrainRunConfig {
    let mut opts = RecipeOptions::new(SizePreset::Desk, scale);
    opts.seed = seed;
    opts.bs_full = bs_full;
    recipe_run(arch, &opts).unwrap()
}

/// About one million synthetic tokens spread over the recipe's sources.
pub fn desk_corpora(run: &TrainRunConfig) -> CorpusSet {
    synthetic_corpora(run.phases.iter().map(|p| &p.mixture), 1_000_000, 2_000, 0).unwrap()
}

/// A hand-written model: logits are any function of the input ids.
pub struct Rigged<F> {
    pub vocab: usize,
    pub max_len: usize,
    pub f: F,
}

impl<F: Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> LanguageModel for Rigged<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_seq_len(&self) -> usize {
        self.max_len
    }

    fn logits(&self, ids: &[u32], mode: AttentionMode) -> Result<Vec<Vec<f64>>> {
        Ok((self.f)(ids, mode))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// Evaluation fixtures and oracles.

pub const V: usize = 260;
pub const SP: SpecialTokens = SpecialTokens::DEFAULT;

pub fn toy(seed: u64) -> TransformerModel<f64> {
    TransformerModel::build(small_config(2, 16, 2, 24, V), seed).unwrap()
}

/// A model that puts all its mass on continuing one of `paths`: wherever the
/// input so far is a proper prefix of a path, the next path token gets a
/// large logit; elsewhere logits are flat.
pub fn path_follower(
    paths: Vec<Vec<u32>>,
) -> Rigged<impl Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> {
    Rigged {
        vocab: V,
        max_len: 512,
        f: move |ids: &[u32], _| {
            (0..ids.len())
                .map(|i| {
                    let mut row = vec![0.0; V];
                    if let Some(p) = paths
                        .iter()
                        .find(|p| p.len() > i + 1 && p[..=i] == ids[..=i])
                    {
                        row[p[i + 1] as usize] = 100.0;
                    }
                    row
                })
                .collect()
        },
    }
}

pub fn flat() -> Rigged<impl Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> {
    Rigged {
        vocab: V,
        max_len: 512,
        f: |ids: &[u32], _| vec![vec![0.0; V]; ids.len()],
    }
}

pub fn first_max(row: &[f64], allowed: impl Fn(u32) -> bool) -> u32 {
    let ok: Vec<u32> = (0..row.len() as u32).filter(|&t| allowed(t)).collect();
    *ok.iter()
        .find(|&&t| ok.iter().all(|&u| row[u as usize] <= row[t as usize]))
        .unwrap()
}

/// Recomputes every step from scratch without reusing anything.
pub fn maskfill_oracle(
    model: &dyn LanguageModel,
    prompt: &[u32],
    max_new: usize,
    flags: TaskFlags,
) -> Vec<u32> {
    let newline = 10 + 4;
    let term = if flags.newline_stop { newline } else { SP.eos };
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_new {
        let mut seq: Vec<u32> = prompt.iter().chain(out.iter()).copied().collect();
        let first_mask = seq.len();
        seq.extend([SP.mask, SP.mask, SP.mask, term]);
        if seq.len() > model.max_seq_len() {
            break;
        }
        let rows = model.logits(&seq, AttentionMode::Bidirectional).unwrap();
        let t = first_max(&rows[first_mask], |t| !(flags.lambada_noeos && t == SP.eos));
        out.push(t);
        if t == SP.eos || t == term {
            break;
        }
    }
    out
}

/// Hashed logits with many ties and a fair chance of eos or newline winning.
pub fn hashed(salt: u64) -> Rigged<impl Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> {
    Rigged {
        vocab: V,
        max_len: 40,
        f: move |ids: &[u32], _| {
            let ctx: u64 = ids.iter().map(|&t| t as u64).sum::<u64>() * 7 + salt;
            (0..ids.len())
                .map(|p| {
                    (0..V as u64)
                        .map(|t| {
                            let boosted = if t == 1 || t == 14 { 5 } else { 0 };
                            ((ctx + p as u64 * 3 + t * 17) % 13 + boosted) as f64
                        })
                        .collect()
                })
                .collect()
        },
    }
}

pub fn forms(case: usize) -> PronounForms {
    let (m, f, n) = [
        ("he", "she", "they"),
        ("him", "her", "them"),
        ("his", "her", "their"),
    ][case];
    PronounForms {
        male: m.into(),
        female: f.into(),
        neutral: n.into(),
    }
}

pub fn fixture() -> Vec<WinoGenderItem> {
    let jobs = [
        "nurse", "engineer", "baker", "pilot", "clerk", "surgeon", "tailor", "judge", "chef",
        "guard",
    ];
    let mut items = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        for (k, template) in [
            format!("The {job} said that {{pronoun}} would be late."),
            format!("The patient thanked the {job} for {{pronoun}} help."),
        ]
        .into_iter()
        .enumerate()
        {
            items.push(WinoGenderItem {
                id: Some(format!("{job}-{k}")),
                template,
                pronouns: forms(if k == 0 { 0 } else { 2 }),
                stereotype: if (i + k) % 2 == 0 {
                    Pronoun::Male
                } else {
                    Pronoun::Female
                },
            });
        }
    }
    items
}

pub fn sentence(tok: &Tokenizer, it: &WinoGenderItem, p: Pronoun) -> Vec<u32> {
    let text = it.template.replace("{pronoun}", it.pronouns.get(p));
    std::iter::once(SP.eos)
        .chain(tok.encode(&text).unwrap())
        .collect()
}

/// Decoder that continues the male rendering of every fixture item with
/// certainty.
pub fn male_decoder(
    tok: &Tokenizer,
    items: &[WinoGenderItem],
) -> Rigged<impl Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> {
    path_follower(
        items
            .iter()
            .map(|it| sentence(tok, it, Pronoun::Male))
            .collect(),
    )
}

/// Encoder that fills a run of masks with the male form: "he" for a run of
/// two, "his" otherwise (the fixture's only male forms).
pub fn male_encoder() -> Rigged<impl Fn(&[u32], AttentionMode) -> Vec<Vec<f64>>> {
    Rigged {
        vocab: V,
        max_len: 512,
        f: |ids: &[u32], _| {
            let mut rows = vec![vec![0.0; V]; ids.len()];
            let Some(first) = ids.iter().position(|&t| t == SP.mask) else {
                return rows;
            };
            let run = ids[first..].iter().take_while(|&&t| t == SP.mask).count();
            let male: &[u8] = if run == 2 { b"he" } else { b"his" };
            for (k, &b) in male.iter().enumerate().take(run) {
                rows[first + k][b as usize + 4] = 100.0;
            }
            rows
        },
    }
}
