//! TOML experiment configuration.
//!
//! ```toml
//! model = "lenet5-like"          # or "cifar10-quick-like"
//! dataset = "train.prnd"         # relative paths resolve against this file
//! test_dataset = "test.prnd"
//! seed = 0
//! out_dir = "out"
//! signals = ["all"]              # ids, published names, "all" or "published"
//! activation_tap = "post"        # or "pre"
//!
//! [split]
//! retrain = 0.8
//! eval = 0.2
//!
//! [train]
//! steps = 1500
//! batch_size = 32
//! learning_rate = 0.01
//! momentum = 0.9
//!
//! [harness]
//! max_retrain_steps_per_iteration = 50
//! stop_test_acc_drop = 0.05
//! ```
//!
//! Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::models::ModelName;
use crate::prune::HarnessConfig;
use crate::saliency::{enumerate_signals, published_signals, resolve_signal, ActivationTap, SignalSpec, ValidityRules};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: ModelName,
    dataset: PathBuf,
    test_dataset: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default = "default_signals")]
    signals: Vec<String>,
    #[serde(default)]
    activation_tap: Option<String>,
    #[serde(default)]
    split: SplitConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    harness: HarnessConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_signals() -> Vec<String> {
    vec!["published".into()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelName,
    pub dataset: PathBuf,
    pub test_dataset: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Explicit checkpoint path; see [`ExperimentConfig::checkpoint_path`].
    pub checkpoint: Option<PathBuf>,
    pub signals: Vec<SignalSpec>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    /// `harness.seed` always equals `seed`.
    pub harness: HarnessConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let out_dir = resolve(raw.out_dir);
        let checkpoint = raw.checkpoint.map(resolve);
        let mut harness = raw.harness;
        harness.seed = raw.seed;
        if let Some(tap) = raw.activation_tap {
            harness.tap = tap.parse::<ActivationTap>()?;
        }
        let cfg = ExperimentConfig {
            model: raw.model,
            dataset: resolve(raw.dataset),
            test_dataset: resolve(raw.test_dataset),
            seed: raw.seed,
            out_dir,
            checkpoint,
            signals: select_signals(&raw.signals)?,
            split: raw.split,
            train: raw.train,
            harness,
        };
        cfg.split.validate()?;
        cfg.train.validate()?;
        cfg.harness.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    /// Where `train` writes and `prune`/`sweep` read the trained network:
    /// the configured path, else `<out_dir>/model.prnw`.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.prnw"))
    }

    /// Applies a seed override to both the run seed and the harness seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.harness.seed = seed;
        self
    }
}

/// Expands `all` / `published` and resolves ids or published names, keeping
/// first occurrences only.
pub fn select_signals(names: &[String]) -> Result<Vec<SignalSpec>> {
    let mut out: Vec<SignalSpec> = Vec::new();
    let mut push = |s: SignalSpec| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for name in names {
        match name.as_str() {
            "all" => enumerate_signals(ValidityRules::default()).into_iter().for_each(&mut push),
            "published" => published_signals().into_iter().for_each(|(_, s)| push(s)),
            other => push(resolve_signal(other)?),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no signals selected".into()));
    }
    Ok(out)
}
