use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, RunRngState};
use super::optim::{adamw_step, AdamState};
use super::TrainRunConfig;
use crate::data::{
    phase_batch_size, BatchManifest, CorpusSet, ManifestWriter, MixtureSampler, SamplerState,
};
use crate::error::{bail, Error, Result};
use crate::model::TransformerModel;
use crate::objectives::{build_targets, objective_loss, TargetBatch};
use crate::rng::{self, Rng, RngState, Stream};
use crate::tensor::Tape;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: f64,
    pub phase: usize,
}

/// Artifact layout under a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = Self { root: root.into() };
        for sub in [d.checkpoints(), d.manifests(), d.logs(), d.reports()] {
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        Ok(d)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.logs().join("metrics.jsonl")
    }

    pub fn manifest(&self, phase: usize) -> PathBuf {
        self.manifests().join(format!("phase{phase}.jsonl"))
    }

    /// Cadence checkpoint `k`, taken once `k * interval` tokens were seen.
    pub fn checkpoint(&self, k: u64) -> PathBuf {
        self.checkpoints().join(format!("ckpt_{k:05}.bin"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.bin")
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Drives a [`TrainRunConfig`] step by step.
pub struct Trainer<'a> {
    run: TrainRunConfig,
    corpora: &'a CorpusSet,
    model: TransformerModel<f32>,
    adam: AdamState,
    tokens_seen: u64,
    step: u64,
    phase_index: usize,
    sampler_state: Option<SamplerState>,
    masking_rng: Rng,
    dropout_rng: Rng,
    metrics: Vec<MetricRecord>,
    manifests: Vec<BatchManifest>,
    dir: Option<RunDir>,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Fresh run. Weights come from `run.init` when set, else from `run.seed`.
    pub fn new(run: TrainRunConfig, corpora: &'a CorpusSet) -> Result<Self> {
        let model = match &run.init {
            Some(init) => Checkpoint::load(&init.checkpoint)?.model,
            None => TransformerModel::build(run.model.clone(), run.seed)?,
        };
        Self::with_model(run, corpora, model)
    }

    /// Fresh run starting from `model`, which must match `run.init` if set.
    pub fn with_model(
        run: TrainRunConfig,
        corpora: &'a CorpusSet,
        model: TransformerModel<f32>,
    ) -> Result<Self> {
        run.validate()?;
        if model.config() != &run.model {
            bail!(
                Config,
                "initial model does not match the run's model config"
            );
        }
        if let Some(init) = &run.init {
            if model.parameter_digest() != init.parameter_digest {
                bail!(
                    Integrity,
                    "imported weights do not match the recorded digest"
                );
            }
        }
        let adam = AdamState::zeros(&model);
        Ok(Self {
            masking_rng: rng::stream(run.seed, Stream::Masking),
            dropout_rng: rng::stream(run.seed, Stream::Dropout),
            manifests: Vec::new(),
            run,
            corpora,
            model,
            adam,
            tokens_seen: 0,
            step: 0,
            phase_index: 0,
            sampler_state: None,
            metrics: Vec::new(),
            dir: None,
            last_good: None,
        })
    }

    /// Continues `run` from one of its own checkpoints.
    pub fn resume(ckpt: Checkpoint, run: TrainRunConfig, corpora: &'a CorpusSet) -> Result<Self> {
        run.validate()?;
        if ckpt.meta.model != run.model {
            bail!(Config, "checkpoint model config differs from the run's");
        }
        if ckpt.meta.run.digest() != run.digest() {
            bail!(
                Config,
                "checkpoint was written by a different run configuration"
            );
        }
        let Some(adam) = ckpt.optimizer else {
            bail!(
                Config,
                "checkpoint carries no optimizer state and cannot be resumed"
            );
        };
        adam.check_matches(&ckpt.model)?;
        Ok(Self {
            masking_rng: ckpt.meta.rng.masking.restore()?,
            dropout_rng: ckpt.meta.rng.dropout.restore()?,
            manifests: Vec::new(),
            run,
            corpora,
            model: ckpt.model,
            adam,
            tokens_seen: ckpt.meta.tokens_seen,
            step: ckpt.meta.step,
            phase_index: ckpt.meta.phase_index,
            sampler_state: ckpt.meta.sampler,
            metrics: Vec::new(),
            dir: None,
            last_good: None,
        })
    }

    /// Writes manifests, metrics and checkpoints under `dir`. When resuming,
    /// records at or after the resume step are dropped and re-emitted.
    pub fn with_run_dir(mut self, dir: RunDir) -> Result<Self> {
        let log = dir.metrics_log();
        if self.step == 0 {
            File::create(&log).map_err(|e| Error::io(&log, e))?;
        } else {
            let mut kept = read_metrics(&log)?;
            kept.retain(|m| m.step < self.step);
            let mut f = File::create(&log).map_err(|e| Error::io(&log, e))?;
            for m in &kept {
                writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&log, e))?;
            }
            self.metrics = kept;
            for phase in 0..self.phase_index.min(self.run.phases.len()) {
                self.manifests
                    .push(BatchManifest::load(&dir.manifest(phase))?);
            }
        }
        self.dir = Some(dir);
        Ok(self)
    }

    pub fn run_config(&self) -> &TrainRunConfig {
        &self.run
    }

    pub fn model(&self) -> &TransformerModel<f32> {
        &self.model
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    /// Manifests of the phases run by this process (complete phases and the
    /// current one). A resumed in-memory run lacks the steps before resume.
    pub fn manifests(&self) -> &[BatchManifest] {
        &self.manifests
    }

    pub fn is_complete(&self) -> bool {
        self.phase_index >= self.run.phases.len()
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot(self.phase_index, self.sampler_state.clone())
    }

    fn snapshot(&self, phase_index: usize, sampler: Option<SamplerState>) -> Checkpoint {
        let phases = &self.run.phases;
        let phase = &phases[phase_index.min(phases.len() - 1)];
        Checkpoint {
            meta: CheckpointMeta {
                model: self.run.model.clone(),
                mode: self.run.mode,
                objective: phase.objective.kind,
                tokens_seen: self.tokens_seen,
                step: self.step,
                phase_index,
                rope_bases: self.model.rope_bases(),
                completed: phase_index >= phases.len(),
                rng: RunRngState {
                    masking: RngState::capture(&self.masking_rng),
                    dropout: RngState::capture(&self.dropout_rng),
                },
                sampler,
                run: self.run.clone(),
                parameter_digest: self.model.parameter_digest(),
            },
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    /// Trains until every phase is consumed, or until `stop_after_step`
    /// steps have been taken in total.
    pub fn run(&mut self, stop_after_step: Option<u64>) -> Result<()> {
        let total = self.run.total_tokens();
        let interval = self.run.checkpoint_interval_tokens;
        let mut next_ckpt = self.tokens_seen / interval + 1;
        let mut metrics_out = match &self.dir {
            Some(d) => {
                let p = d.metrics_log();
                Some((
                    OpenOptions::new()
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };

        while self.phase_index < self.run.phases.len() {
            let phase = self.run.phases[self.phase_index].clone();
            self.model
                .set_rope_base(phase.rope_base_global, phase.rope_base_local)?;
            let mut sampler = MixtureSampler::new(
                &phase.mixture,
                self.corpora,
                phase.seq_len,
                self.run.seed,
                self.phase_index,
            )?;
            if let Some(state) = self.sampler_state.take() {
                sampler.restore(&state)?;
            }
            let mut writer = match &self.dir {
                Some(d) if sampler.step() == 0 => Some(ManifestWriter::create(
                    &d.manifest(self.phase_index),
                    &sampler.header(),
                )?),
                Some(d) => Some(ManifestWriter::resume(
                    &d.manifest(self.phase_index),
                    sampler.step(),
                )?),
                None => None,
            };
            if self.manifests.len() <= self.phase_index {
                let mut m = match &self.dir {
                    Some(d) if sampler.step() > 0 => {
                        BatchManifest::load(&d.manifest(self.phase_index))?
                    }
                    _ => BatchManifest::new(sampler.header()),
                };
                m.entries.retain(|e| e.step < sampler.step());
                self.manifests.push(m);
            }

            loop {
                let batch_size = phase_batch_size(
                    phase.token_budget,
                    sampler.tokens(),
                    phase.seq_len,
                    self.run.schedule.batch_size_at(self.tokens_seen),
                );
                if batch_size == 0 {
                    break;
                }
                if stop_after_step.is_some_and(|s| self.step >= s) {
                    self.sampler_state = Some(sampler.state());
                    return Ok(());
                }
                let lr = self.run.schedule.lr_at(self.tokens_seen.min(total));
                let batch = sampler.next_batch(batch_size)?;
                let loss = self.train_step(&batch.sequences, &phase.objective, lr)?;
                self.tokens_seen += batch.tokens();
                self.step += 1;

                let record = MetricRecord {
                    step: self.step - 1,
                    tokens: self.tokens_seen,
                    lr,
                    batch_size,
                    loss,
                    phase: self.phase_index,
                };
                if let Some((f, p)) = &mut metrics_out {
                    writeln!(f, "{}", serde_json::to_string(&record)?)
                        .map_err(|e| Error::io(&*p, e))?;
                }
                self.metrics.push(record);
                if let Some(w) = &mut writer {
                    w.append(&batch.entries)?;
                }
                self.manifests[self.phase_index]
                    .entries
                    .extend(batch.entries);

                while next_ckpt * interval <= self.tokens_seen && next_ckpt * interval <= total {
                    if let Some(d) = &self.dir {
                        if let Some(w) = &mut writer {
                            w.flush()?;
                        }
                        // A checkpoint that closes a phase points at the next one.
                        let closes = phase_batch_size(
                            phase.token_budget,
                            sampler.tokens(),
                            phase.seq_len,
                            1,
                        ) == 0;
                        let snap = if closes {
                            self.snapshot(self.phase_index + 1, None)
                        } else {
                            self.snapshot(self.phase_index, Some(sampler.state()))
                        };
                        let path = d.checkpoint(next_ckpt);
                        snap.save(&path)?;
                        log::info!(
                            "checkpoint {} at {} tokens",
                            path.display(),
                            self.tokens_seen
                        );
                        self.last_good = Some(path);
                    }
                    next_ckpt += 1;
                }
            }
            self.phase_index += 1;
        }
        if let Some(d) = &self.dir {
            // Whole-sequence phases can end a few tokens short of the total;
            // cadence points in that gap coincide with the final state.
            let done = self.checkpoint();
            while next_ckpt * interval <= total {
                let path = d.checkpoint(next_ckpt);
                done.save(&path)?;
                self.last_good = Some(path);
                next_ckpt += 1;
            }
            let path = d.final_checkpoint();
            done.save(&path)?;
            self.last_good = Some(path);
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        sequences: &[Vec<u32>],
        objective: &crate::objectives::ObjectiveSpec,
        lr: f64,
    ) -> Result<f64> {
        let targets = sequences
            .iter()
            .map(|s| build_targets(s, objective, &mut self.masking_rng))
            .collect::<Result<Vec<TargetBatch>>>()?;
        let inputs: Vec<&[u32]> = targets.iter().map(|t| t.input_ids.as_slice()).collect();
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape);
        let dropout = self.run.dropout.then_some(&mut self.dropout_rng);
        let result = self
            .model
            .forward_batch(&mut tape, &params, &inputs, self.run.mode, dropout)
            .and_then(|logits| objective_loss(&mut tape, logits, &targets));
        let ce = result.map_err(|e| self.with_last_good(e))?;
        let loss = tape.value(ce.loss).item() as f64;
        if !loss.is_finite() {
            return Err(self.with_last_good(Error::numerical(format!("loss is {loss}"))));
        }
        tape.backward(ce.loss)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .zip(self.model.parameters())
            .map(|(v, p)| {
                tape.grad(*v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect();
        drop(tape);
        adamw_step(
            &mut self.model,
            &mut self.adam,
            &grads,
            lr,
            &self.run.optimizer,
        )
        .map_err(|e| self.with_last_good(e))?;
        Ok(loss)
    }

    fn with_last_good(&self, e: Error) -> Error {
        match e {
            Error::Numerical { message, .. } => Error::Numerical {
                message: format!("step {}: {message}", self.step),
                last_good: self.last_good.clone(),
            },
            other => other,
        }
    }
}

/// Everything a finished in-memory run produced.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub manifests: Vec<BatchManifest>,
}

/// Trains `run` to completion without touching the filesystem.
pub fn train(run: TrainRunConfig, corpora: &CorpusSet) -> Result<TrainOutcome> {
    let mut t = Trainer::new(run, corpora)?;
    t.run(None)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics: t.metrics,
        manifests: t.manifests,
    })
}
