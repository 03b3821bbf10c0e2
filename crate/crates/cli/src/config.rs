//! Run configuration files and the resolved run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinlm::data::{synthetic_corpora, CorpusSet, Tokenizer};
use twinlm::model::SizePreset;
use twinlm::objectives::ObjectiveKind;
use twinlm::trainer::{recipe_run, Arch, RecipeOptions, TrainRunConfig};
use twinlm::Error;

pub const RUN_MANIFEST: &str = "run_manifest.json";
const DEFAULT_SYNTHETIC_TOKENS: usize = 1_000_000;

/// A recipe file, TOML or JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub size: SizePreset,
    /// Overridden by `--arch`.
    #[serde(default)]
    pub arch: Option<Arch>,
    /// Optional pretraining objective; must agree with the architecture.
    #[serde(default)]
    pub objective: Option<ObjectiveKind>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bs_full: Option<usize>,
    #[serde(default)]
    pub seq_lens: Option<[usize; 3]>,
    #[serde(default)]
    pub dropout: Option<bool>,
    #[serde(default)]
    pub checkpoint_interval_tokens: Option<u64>,
    #[serde(default)]
    pub data: DataConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `<source_id>.jsonl` for every source.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Size of the generated corpus when no directory is given.
    #[serde(default)]
    pub synthetic_tokens: Option<usize>,
}

/// Where a run's documents come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { tokens: usize, seed: u64 },
    Dir { path: PathBuf },
}

impl DataSource {
    pub fn load(&self, run: &TrainRunConfig) -> twinlm::Result<CorpusSet> {
        let mixtures = run.phases.iter().map(|p| &p.mixture);
        match self {
            DataSource::Synthetic { tokens, seed } => {
                synthetic_corpora(mixtures, *tokens, 2_000, *seed)
            }
            DataSource::Dir { path } => {
                let resolved: Vec<_> = run
                    .phases
                    .iter()
                    .map(|p| {
                        let mut m = p.mixture.clone();
                        m.resolve_paths(path);
                        m
                    })
                    .collect();
                CorpusSet::load(&resolved, &Tokenizer::byte_level())
            }
        }
    }
}

/// Everything needed to rerun a training job bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub root_seed: u64,
    pub data: DataSource,
    pub run: TrainRunConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.run.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn load_recipe(path: &Path) -> anyhow::Result<RecipeConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    let mut cfg: RecipeConfig =
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(dir) = &cfg.data.dir {
        if dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.dir = Some(base.join(dir));
        }
    }
    Ok(cfg)
}

impl RecipeConfig {
    /// The architecture from `--arch`, falling back to the file.
    pub fn arch(&self, flag: Option<Arch>) -> twinlm::Result<Arch> {
        let arch = flag.or(self.arch).ok_or_else(|| {
            Error::Usage("no architecture: pass --arch or set `arch` in the config".into())
        })?;
        if let Some(obj) = self.objective {
            let expected = match arch {
                Arch::Encoder => ObjectiveKind::Mlm,
                Arch::Decoder => ObjectiveKind::Clm,
            };
            if obj != expected {
                return Err(Error::Config(format!(
                    "{arch:?} trains with {expected:?}, but the config asks for {obj:?}"
                )));
            }
        }
        Ok(arch)
    }

    pub fn options(&self, scale: Option<f64>) -> RecipeOptions {
        let mut opts = RecipeOptions::new(self.size, scale.unwrap_or(self.scale));
        opts.seed = self.seed;
        if let Some(bs) = self.bs_full {
            opts.bs_full = bs;
        }
        if let Some(s) = self.seq_lens {
            opts.seq_lens = s;
        }
        if let Some(d) = self.dropout {
            opts.dropout = d;
        }
        opts.checkpoint_interval_tokens = self.checkpoint_interval_tokens;
        opts
    }

    pub fn run(&self, arch: Arch, scale: Option<f64>) -> twinlm::Result<TrainRunConfig> {
        recipe_run(arch, &self.options(scale))
    }

    pub fn data_source(&self) -> DataSource {
        let dir = std::env::var_os("TWINLM_DATA_DIR")
            .map(PathBuf::from)
            .or_else(|| self.data.dir.clone());
        match dir {
            Some(path) => DataSource::Dir { path },
            None => DataSource::Synthetic {
                tokens: self
                    .data
                    .synthetic_tokens
                    .unwrap_or(DEFAULT_SYNTHETIC_TOKENS),
                seed: self.seed,
            },
        }
    }
}

/// The run directory from the flag, else `TWINLM_RUN_DIR`, else `default`.
pub fn run_dir(flag: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    flag.or_else(|| std::env::var_os("TWINLM_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(default)
}
