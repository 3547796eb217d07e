//! Run configuration: one TOML file fully specifies a run.
//!
//! Every command reads the same schema, applies command-line overrides on
//! top (flags beat file values, file values beat defaults), validates, and
//! hashes the canonical form of the result into a run id that is embedded in
//! every artifact the command writes. Re-running a command with an unchanged
//! effective config therefore reproduces byte-identical payloads.
//!
//! All randomness flows through the named seeds in this file; nothing in the
//! crate seeds from the clock.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::EvalPlan;
use crate::model::task::Dataset;
use crate::train::{Mode, TrainPlan};

/// Named seeds for every random stream a run touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    /// Sequence-task construction (class signatures, positions).
    pub task: u64,
    /// Derivation of the shifted downstream variant of the task.
    pub shift: u64,
    /// Backbone pretraining (init, shuffling).
    pub pretrain: u64,
    /// Adapter factor initialization.
    pub adapter_init: u64,
    /// Adaptation loop (batch shuffling, noise resampling).
    pub train: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection {
            task: 11,
            shift: 12,
            pretrain: 7,
            adapter_init: 101,
            train: 201,
        }
    }
}

/// Robustness-evaluation grid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Read-noise levels, one grid row per level.
    pub noise_levels: Vec<f64>,
    /// Noise seeds averaged per cell (ignored for the clean row).
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            noise_levels: vec![0.0, 5e-3, 1e-2, 2e-2],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Regularizer-weight sweep parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Regularizer weights to train and evaluate, one run per value.
    pub mus: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mus: vec![0.05, 0.10, 0.15],
        }
    }
}

/// One fully-specified run. The `[train]` table is the training plan
/// verbatim (including the `[train.noise]` read-noise model); `rank`, the
/// seed table, and the evaluation grid live alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Artifact directory. Required, but may come from the `--out` flag
    /// instead of the file.
    pub out_dir: Option<PathBuf>,
    /// Adapter rank on every adapted projection.
    pub rank: usize,
    pub seeds: SeedSection,
    pub train: TrainPlan,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: None,
            rank: 4,
            seeds: SeedSection::default(),
            train: TrainPlan::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Command-line overrides; `None` means "not given, keep the file value".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub noise_levels: Option<Vec<f64>>,
    pub mode: Option<Mode>,
    pub mu: Option<f64>,
    pub rank: Option<usize>,
}

impl RunConfig {
    /// Reads and parses a config file. Parse errors carry the file path as
    /// the key and the parser's message (which names the offending field).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: if key == "config" {
                    path.display().to_string()
                } else {
                    key
                },
                message,
            },
            other => other,
        })
    }

    /// Parses config text without touching the filesystem.
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config {
            key: "config".to_string(),
            message: e.to_string(),
        })
    }

    /// Applies command-line overrides (flags beat file values).
    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(out) = &ov.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(seeds) = &ov.seeds {
            self.eval.seeds = seeds.clone();
        }
        if let Some(levels) = &ov.noise_levels {
            self.eval.noise_levels = levels.clone();
        }
        if let Some(mode) = ov.mode {
            self.train.mode = mode;
        }
        if let Some(mu) = ov.mu {
            self.train.mu = mu;
        }
        if let Some(rank) = ov.rank {
            self.rank = rank;
        }
    }

    /// Validates every field, naming the offending key on failure. Call
    /// after [`RunConfig::apply_overrides`] so flag values are checked too.
    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, message: impl Into<String>) -> Error {
            Error::Config {
                key: key.to_string(),
                message: message.into(),
            }
        }

        if self.rank == 0 {
            return Err(bad("rank", "must be at least 1"));
        }
        if !(self.train.eta.is_finite() && self.train.eta > 0.0) {
            return Err(bad("train.eta", "must be a positive finite number"));
        }
        if !(self.train.mu.is_finite() && self.train.mu >= 0.0) {
            return Err(bad("train.mu", "must be a non-negative finite number"));
        }
        if self.train.resample_every == 0 {
            return Err(bad("train.resample_every", "must be at least 1"));
        }
        if self.train.epochs == 0 {
            return Err(bad("train.epochs", "must be at least 1"));
        }
        if self.train.batch == 0 {
            return Err(bad("train.batch", "must be at least 1"));
        }
        if let Some(steps) = self.train.max_steps {
            if steps == 0 {
                return Err(bad("train.max_steps", "must be at least 1 when set"));
            }
        }
        if let Some(clip) = self.train.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(bad(
                    "train.grad_clip",
                    "must be a positive finite number when set",
                ));
            }
        }
        self.train
            .noise
            .validate()
            .map_err(|e| bad("train.noise", e.to_string()))?;

        if self.eval.noise_levels.is_empty() {
            return Err(bad("eval.noise_levels", "must list at least one level"));
        }
        for (i, level) in self.eval.noise_levels.iter().enumerate() {
            if !(level.is_finite() && *level >= 0.0) {
                return Err(bad(
                    "eval.noise_levels",
                    format!("entry {i} ({level}) must be a non-negative finite number"),
                ));
            }
            if self.eval.noise_levels[..i].contains(level) {
                return Err(bad(
                    "eval.noise_levels",
                    format!("duplicate level {level}"),
                ));
            }
        }
        if self.eval.seeds.is_empty() {
            return Err(bad("eval.seeds", "must list at least one seed"));
        }
        for (i, seed) in self.eval.seeds.iter().enumerate() {
            if self.eval.seeds[..i].contains(seed) {
                return Err(bad("eval.seeds", format!("duplicate seed {seed}")));
            }
        }
        if self.sweep.mus.is_empty() {
            return Err(bad("sweep.mus", "must list at least one weight"));
        }
        for (i, mu) in self.sweep.mus.iter().enumerate() {
            if !(mu.is_finite() && *mu >= 0.0) {
                return Err(bad(
                    "sweep.mus",
                    format!("entry {i} ({mu}) must be a non-negative finite number"),
                ));
            }
            if self.sweep.mus[..i].contains(mu) {
                return Err(bad("sweep.mus", format!("duplicate weight {mu}")));
            }
        }
        Ok(())
    }

    /// The artifact directory; errors if neither the file nor `--out` set it.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().ok_or_else(|| Error::Config {
            key: "out_dir".to_string(),
            message: "required: set it in the config file or pass --out".to_string(),
        })
    }

    /// Canonical content hash of the effective config — the run id embedded
    /// in every artifact. Two configs hash equal iff every field matches.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&canonical)
    }

    /// The training plan exactly as configured.
    pub fn train_plan(&self) -> TrainPlan {
        self.train.clone()
    }

    /// The evaluation grid over the given datasets, with tile geometry taken
    /// from the training noise model.
    pub fn eval_plan<T: Clone>(&self, datasets: Vec<(String, Dataset<T>)>) -> EvalPlan<T> {
        EvalPlan {
            noise_levels: self.eval.noise_levels.clone(),
            seeds: self.eval.seeds.clone(),
            tile_rows: self.train.noise.tile_rows,
            tile_cols: self.train.noise.tile_cols,
            datasets,
        }
    }

    // Artifact paths, all under `out_dir`.

    /// Pretrained backbone checkpoint.
    pub fn backbone_path(&self) -> Result<PathBuf> {
        Ok(self.out_dir()?.join("backbone.ckpt"))
    }

    /// Adapter checkpoint for the configured mode.
    pub fn adapter_path(&self) -> Result<PathBuf> {
        Ok(self
            .out_dir()?
            .join(format!("adapter-{}.ckpt", mode_slug(self.train.mode))))
    }

    /// Training log (one JSON record per line) for the configured mode.
    pub fn log_path(&self) -> Result<PathBuf> {
        Ok(self
            .out_dir()?
            .join(format!("train-{}.jsonl", mode_slug(self.train.mode))))
    }

    /// Stem for evaluation-report files; `.json`, `.txt`, and `.csv` are
    /// appended by the eval command.
    pub fn report_stem(&self) -> Result<PathBuf> {
        Ok(self
            .out_dir()?
            .join(format!("report-{}", mode_slug(self.train.mode))))
    }

    /// Directory for regularizer-sweep artifacts.
    pub fn sweep_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir()?.join("sweep"))
    }
}

/// Lowercase mode name used in artifact filenames and flags.
pub fn mode_slug(mode: Mode) -> &'static str {
    match mode {
        Mode::Lora => "lora",
        Mode::Halora => "halora",
    }
}

/// Parses `--mode` flag values.
pub fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "lora" => Ok(Mode::Lora),
        "halora" => Ok(Mode::Halora),
        other => Err(Error::Config {
            key: "--mode".to_string(),
            message: format!("unknown mode '{other}' (expected lora or halora)"),
        }),
    }
}

/// Parses a comma-separated list of unsigned seeds, naming `flag` on error.
pub fn parse_u64_csv(s: &str, flag: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<u64>().map_err(|_| Error::Config {
                key: flag.to_string(),
                message: format!("'{part}' is not an unsigned integer"),
            })
        })
        .collect()
}

/// Parses a comma-separated list of noise levels, naming `flag` on error.
pub fn parse_f64_csv(s: &str, flag: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>().map_err(|_| Error::Config {
                key: flag.to_string(),
                message: format!("'{part}' is not a number"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        let mut config = RunConfig::parse("").unwrap();
        config.out_dir = Some(PathBuf::from("out"));
        config
    }

    #[test]
    fn empty_file_yields_documented_defaults() {
        let config = RunConfig::parse("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.rank, 4);
        assert_eq!(config.train.mu, 0.1);
        assert_eq!(config.train.resample_every, 400);
        assert_eq!(config.eval.noise_levels, vec![0.0, 5e-3, 1e-2, 2e-2]);
        assert_eq!(config.eval.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(config.sweep.mus, vec![0.05, 0.10, 0.15]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("banana = 1\n").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
        let err = RunConfig::parse("[train]\nbanana = 1\n").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
        let err = RunConfig::parse("[train.noise]\nbanana = 1\n").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
    }

    #[test]
    fn type_errors_point_at_the_offending_line() {
        let err = RunConfig::parse("[train]\neta = \"fast\"\n").unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
    }

    #[test]
    fn validation_names_the_key() {
        let mut config = minimal();
        config.train.eta = -1.0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("train.eta"), "{err}");

        let mut config = minimal();
        config.eval.noise_levels = vec![0.0, 0.01, 0.01];
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("eval.noise_levels"), "{err}");

        let mut config = minimal();
        config.eval.seeds = vec![1, 1];
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("eval.seeds"), "{err}");

        let mut config = minimal();
        config.sweep.mus = vec![];
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("sweep.mus"), "{err}");

        let mut config = minimal();
        config.rank = 0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }

    #[test]
    fn missing_out_dir_is_an_error_until_overridden() {
        let config = RunConfig::parse("rank = 4\n").unwrap();
        let err = config.out_dir().unwrap_err();
        assert!(err.to_string().contains("out_dir"), "{err}");

        let mut config = RunConfig::parse("rank = 4\n").unwrap();
        config.apply_overrides(&Overrides {
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        });
        assert_eq!(config.out_dir().unwrap(), Path::new("elsewhere"));
    }

    #[test]
    fn flags_beat_file_values_and_change_the_run_id() {
        let mut config = RunConfig::parse("out_dir = \"out\"\n[train]\nmu = 0.1\n").unwrap();
        let before = config.run_id();
        config.apply_overrides(&Overrides {
            mu: Some(0.05),
            mode: Some(Mode::Lora),
            rank: Some(2),
            seeds: Some(vec![9]),
            noise_levels: Some(vec![0.0]),
            ..Overrides::default()
        });
        assert_eq!(config.train.mu, 0.05);
        assert_eq!(config.train.mode, Mode::Lora);
        assert_eq!(config.rank, 2);
        assert_eq!(config.eval.seeds, vec![9]);
        assert_eq!(config.eval.noise_levels, vec![0.0]);
        config.validate().unwrap();
        assert_ne!(config.run_id(), before);
    }

    #[test]
    fn run_id_is_stable_across_reparses() {
        let text = "out_dir = \"out\"\nrank = 2\n[train]\nmu = 0.15\n";
        let a = RunConfig::parse(text).unwrap().run_id();
        let b = RunConfig::parse(text).unwrap().run_id();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn artifact_paths_follow_the_mode() {
        let mut config = minimal();
        config.train.mode = Mode::Lora;
        assert!(config
            .adapter_path()
            .unwrap()
            .ends_with("adapter-lora.ckpt"));
        config.train.mode = Mode::Halora;
        assert!(config.log_path().unwrap().ends_with("train-halora.jsonl"));
        assert!(config.report_stem().unwrap().ends_with("report-halora"));
        assert!(config.backbone_path().unwrap().ends_with("backbone.ckpt"));
    }

    #[test]
    fn csv_parsers_accept_lists_and_name_the_flag_on_garbage() {
        assert_eq!(parse_u64_csv("1,2, 3", "--seeds").unwrap(), vec![1, 2, 3]);
        assert_eq!(
            parse_f64_csv("0.0,5e-3", "--noise-levels").unwrap(),
            vec![0.0, 5e-3]
        );
        let err = parse_u64_csv("1,x", "--seeds").unwrap_err();
        assert!(err.to_string().contains("--seeds"), "{err}");
        let err = parse_f64_csv("0.0,,0.1", "--noise-levels").unwrap_err();
        assert!(err.to_string().contains("--noise-levels"), "{err}");
        let err = parse_mode("hybrid").unwrap_err();
        assert!(err.to_string().contains("--mode"), "{err}");
    }

    #[test]
    fn builders_propagate_config_values() {
        let mut config = minimal();
        config.train.noise.tile_rows = 32;
        config.train.noise.tile_cols = 16;
        config.eval.noise_levels = vec![0.0, 0.01];
        config.eval.seeds = vec![4, 5];
        let plan = config.eval_plan::<Vec<usize>>(Vec::new());
        assert_eq!(plan.tile_rows, 32);
        assert_eq!(plan.tile_cols, 16);
        assert_eq!(plan.noise_levels, vec![0.0, 0.01]);
        assert_eq!(plan.seeds, vec![4, 5]);
        assert_eq!(config.train_plan(), config.train);
    }
}
