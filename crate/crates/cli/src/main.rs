//! `twinlm` command-line driver.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use twinlm::data::{plan_phase, Tokenizer};
use twinlm::eval::{run_task, EvalKind};
use twinlm::model::count_parameters;
use twinlm::recipe::{PhaseBudgets, PhaseKind, CROSS_OBJECTIVE_TOKENS};
use twinlm::trainer::{
    cross_objective_continue, Arch, Checkpoint, ContinueOptions, ContinueTarget, RunDir, Trainer,
};
use twinlm::Error;

use config::{load_recipe, run_dir, RunManifest, RUN_MANIFEST};

#[derive(Parser)]
#[command(
    name = "twinlm",
    version,
    about = "Train paired encoder/decoder transformers from one recipe"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Encoder,
    Decoder,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Encoder => Arch::Encoder,
            ArchArg::Decoder => Arch::Decoder,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    EncFromDec,
    DecFromEnc,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mc,
    Genfill,
    Winogender,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Mid,
    Decay,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three-phase recipe for one architecture.
    Train {
        #[arg(long, required_unless_present_any = ["from_manifest", "resume"])]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        /// Divide every recipe token count by this factor.
        #[arg(long)]
        scale: Option<f64>,
        /// Rerun exactly from a saved run manifest.
        #[arg(long, conflicts_with_all = ["config", "resume"])]
        from_manifest: Option<PathBuf>,
        /// Continue an interrupted run from one of its checkpoints.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop (leaving the run resumable) once this many steps are done.
        #[arg(long)]
        stop_after_step: Option<u64>,
    },
    /// Continue a finished run on the reverse objective.
    Continue {
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        /// Token budget; defaults to the recipe's continuation budget at the
        /// source run's scale.
        #[arg(long)]
        budget: Option<u64>,
        /// Keep causal attention for encoder-from-decoder.
        #[arg(long)]
        keep_causal: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bs_full: Option<usize>,
        /// Run manifest of the source run (for its data); defaults to the one
        /// beside the checkpoint's run directory.
        #[arg(long)]
        source_manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the learning-rate and batch-size schedule.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Plan a phase's sampling and report per-source shares.
    Mixture {
        #[arg(long)]
        config: PathBuf,
        /// Number of sequence slots to draw.
        #[arg(long)]
        plan: usize,
        #[arg(long, value_enum, default_value = "pretrain")]
        phase: PhaseArg,
        /// Write the planned manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the untrained weights of a recipe as a checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Usage(_) => 2,
                Error::Data(_)
                | Error::Integrity(_)
                | Error::Input(_)
                | Error::Io { .. }
                | Error::Json(_) => 3,
                Error::Numerical { .. } => 4,
                Error::Dimension(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Numerical {
                last_good: Some(p), ..
            }) = e.chain().find_map(|c| c.downcast_ref())
            {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            arch,
            scale,
            from_manifest,
            resume,
            run_dir,
            stop_after_step,
        } => train(
            config,
            arch,
            scale,
            from_manifest,
            resume,
            run_dir,
            stop_after_step,
        ),
        Command::Continue {
            from,
            target,
            budget,
            keep_causal,
            seed,
            bs_full,
            source_manifest,
            run_dir,
        } => continue_run(
            from,
            target,
            budget,
            keep_causal,
            seed,
            bs_full,
            source_manifest,
            run_dir,
        ),
        Command::Eval {
            ckpt,
            task,
            kind,
            out,
        } => eval(&ckpt, &task, kind, out),
        Command::Schedule {
            config,
            dump,
            scale,
            points,
        } => schedule(&config, dump, scale, points),
        Command::Mixture {
            config,
            plan,
            phase,
            out,
        } => mixture(&config, plan, phase, out),
        Command::Init {
            config,
            arch,
            scale,
            out,
        } => init(&config, arch, scale, &out),
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

/// Writes the manifest, announces the seed, and trains to completion (or
/// to `stop`).
fn launch(
    manifest: RunManifest,
    dir: PathBuf,
    stop: Option<u64>,
    resume: Option<Checkpoint>,
) -> Result<()> {
    let rd = RunDir::create(&dir)?;
    println!("root seed: {}", manifest.root_seed);
    println!("run dir: {}", dir.display());
    let corpora = manifest
        .data
        .load(&manifest.run)
        .context("loading corpora")?;
    let trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, manifest.run.clone(), &corpora)?,
        None => {
            manifest.save(&dir.join(RUN_MANIFEST))?;
            Trainer::new(manifest.run.clone(), &corpora)?
        }
    };
    let mut trainer = trainer.with_run_dir(rd.clone())?;
    trainer.run(stop)?;
    if trainer.is_complete() {
        println!("final checkpoint: {}", rd.final_checkpoint().display());
    } else {
        let path = rd
            .checkpoints()
            .join(format!("stop_{:06}.bin", trainer.step()));
        trainer.checkpoint().save(&path)?;
        println!(
            "stopped at step {}; resume from {}",
            trainer.step(),
            path.display()
        );
    }
    if let Some(last) = trainer.metrics().last() {
        println!("tokens {} loss {:.4}", last.tokens, last.loss);
    }
    Ok(())
}

fn train(
    config: Option<PathBuf>,
    arch: Option<ArchArg>,
    scale: Option<f64>,
    from_manifest: Option<PathBuf>,
    resume: Option<PathBuf>,
    dir: Option<PathBuf>,
    stop: Option<u64>,
) -> Result<()> {
    if let Some(path) = from_manifest {
        let manifest = RunManifest::load(&path)?;
        let dir = run_dir(dir, || PathBuf::from("runs/replay"));
        return launch(manifest, dir, stop, None);
    }
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(&path)?;
        let dir = run_dir(dir, || source_run_dir(&path));
        let manifest = RunManifest::load(&dir.join(RUN_MANIFEST))?;
        if manifest.run.digest() != ckpt.meta.run.digest() {
            return Err(
                Error::Config("checkpoint does not belong to this run directory".into()).into(),
            );
        }
        return launch(manifest, dir, stop, Some(ckpt));
    }
    let cfg_path = config.expect("clap enforces --config");
    let cfg = load_recipe(&cfg_path)?;
    let arch = cfg.arch(arch.map(Into::into))?;
    let run = cfg.run(arch, scale)?;
    let name = format!(
        "{}-{}",
        cfg.size.name(),
        if arch == Arch::Encoder {
            "encoder"
        } else {
            "decoder"
        }
    );
    let dir = run_dir(dir, || PathBuf::from("runs").join(name));
    let manifest = RunManifest {
        root_seed: run.seed,
        data: cfg.data_source(),
        run,
    };
    launch(manifest, dir, stop, None)
}

/// `<run>/checkpoints/x.bin` -> `<run>`.
fn source_run_dir(ckpt: &Path) -> PathBuf {
    ckpt.parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[allow(clippy::too_many_arguments)]
fn continue_run(
    from: PathBuf,
    target: TargetArg,
    budget: Option<u64>,
    keep_causal: bool,
    seed: Option<u64>,
    bs_full: Option<usize>,
    source_manifest: Option<PathBuf>,
    dir: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(&from)?;
    let manifest_path = source_manifest.unwrap_or_else(|| source_run_dir(&from).join(RUN_MANIFEST));
    let source = RunManifest::load(&manifest_path)
        .with_context(|| format!("source run manifest {}", manifest_path.display()))?;
    let budget = match budget {
        Some(b) => b,
        None => {
            // Same fraction of the source run as the recipe's continuation.
            let total = ckpt.meta.run.total_tokens() as u128;
            (CROSS_OBJECTIVE_TOKENS as u128 * total / PhaseBudgets::FULL.total() as u128) as u64
        }
    };
    let mut opts = ContinueOptions::new(budget);
    opts.keep_causal = keep_causal;
    opts.seed = seed;
    opts.bs_full = bs_full;
    let target = match target {
        TargetArg::EncFromDec => ContinueTarget::EncoderFromDecoder,
        TargetArg::DecFromEnc => ContinueTarget::DecoderFromEncoder,
    };
    let abs = std::fs::canonicalize(&from).map_err(|e| Error::io(&from, e))?;
    let run = cross_objective_continue(&ckpt, &abs, target, &opts)?;
    drop(ckpt);
    let label = match target {
        ContinueTarget::EncoderFromDecoder => "enc-from-dec",
        ContinueTarget::DecoderFromEncoder => "dec-from-enc",
    };
    let dir = run_dir(dir, || source_run_dir(&from).with_extension(label));
    let manifest = RunManifest {
        root_seed: run.seed,
        data: source.data,
        run,
    };
    launch(manifest, dir, None, None)
}

fn eval(ckpt: &Path, task: &Path, kind: KindArg, out: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let tok = Tokenizer::byte_level();
    if ckpt.model.config().vocab_size != tok.vocab_size() {
        bail!(Error::Config(format!(
            "checkpoint vocabulary {} does not match the byte tokenizer ({})",
            ckpt.model.config().vocab_size,
            tok.vocab_size()
        )));
    }
    let kind = match kind {
        KindArg::Mc => EvalKind::Mc,
        KindArg::Genfill => EvalKind::Genfill,
        KindArg::Winogender => EvalKind::Winogender,
    };
    let name = task
        .file_stem()
        .map_or("task".into(), |s| s.to_string_lossy().into_owned());
    let report = run_task(&ckpt.model, &tok, ckpt.meta.mode, kind, &name, task)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn schedule(config: &Path, dump: bool, scale: Option<f64>, points: usize) -> Result<()> {
    let cfg = load_recipe(config)?;
    let arch = cfg.arch(None).unwrap_or(Arch::Decoder);
    let run = cfg.run(arch, scale)?;
    let s = &run.schedule;
    let b = s.boundaries();
    println!(
        "peak lr {:e}; segment ends {:?}; total {} tokens",
        s.peak_lr(),
        b,
        s.total_tokens()
    );
    if dump {
        print!("{}", s.dump_table(points));
    }
    Ok(())
}

fn mixture(config: &Path, slots: usize, phase: PhaseArg, out: Option<PathBuf>) -> Result<()> {
    if slots == 0 {
        bail!(Error::Usage("--plan must be positive".into()));
    }
    let cfg = load_recipe(config)?;
    let run = cfg.run(cfg.arch(None).unwrap_or(Arch::Decoder), None)?;
    let kind = match phase {
        PhaseArg::Pretrain => PhaseKind::Pretrain,
        PhaseArg::Mid => PhaseKind::MidTrain,
        PhaseArg::Decay => PhaseKind::Decay,
    };
    let (index, p) = run
        .phases
        .iter()
        .enumerate()
        .find(|(_, p)| p.kind == kind)
        .expect("recipe has every phase");
    let corpora = cfg.data_source().load(&run)?;
    let budget = (slots * p.seq_len) as u64;
    let plan = plan_phase(
        &p.mixture,
        &corpora,
        budget,
        p.seq_len,
        run.seed,
        index,
        |_| 1,
    )?;
    println!("source\tweight\tobserved\tslots");
    for s in p.mixture.active() {
        let n = plan
            .entries
            .iter()
            .filter(|e| e.source_id == s.source_id)
            .count();
        println!(
            "{}\t{:.4}\t{:.4}\t{n}",
            s.source_id,
            s.weight,
            n as f64 / slots as f64
        );
    }
    println!("manifest sha256 {}", plan.sha256());
    if let Some(path) = out {
        plan.save(&path)?;
    }
    Ok(())
}

fn init(config: &Path, arch: Option<ArchArg>, scale: Option<f64>, out: &Path) -> Result<()> {
    let cfg = load_recipe(config)?;
    let run = cfg.run(cfg.arch(arch.map(Into::into))?, scale)?;
    let ckpt = Checkpoint::initial(&run)?;
    ckpt.save(out)?;
    println!("root seed: {}", run.seed);
    println!("wrote {}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let m = &ckpt.meta;
    let count = count_parameters(&m.model);
    let report = json!({
        "config_digest": hex::encode(m.model.digest()),
        "mode": m.mode,
        "objective": m.objective,
        "tokens_seen": m.tokens_seen,
        "step": m.step,
        "phase_index": m.phase_index,
        "completed": m.completed,
        "parameters": {
            "total": count.total,
            "embedding": count.embedding,
            "non_embedding": count.non_embedding,
            "tensors": ckpt.model.num_parameters(),
        },
        "parameter_digest": m.parameter_digest,
        "run_digest": m.run.digest(),
        "has_optimizer_state": ckpt.optimizer.is_some(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
