//! Config-driven batch commands.
//!
//! Every command takes the same `--config` file and the same override flags,
//! resolves the effective configuration once (flags beat file values beat
//! defaults), and stamps the resulting run id into each artifact it writes.
//! Artifacts carry no timestamps except the eval-report header line, so
//! re-running a command with an unchanged effective config reproduces
//! byte-identical payloads.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 training divergence,
//! 3 verification-suite failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{mode_slug, parse_f64_csv, parse_mode, parse_u64_csv, Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate, mu_sweep, render_comparison, EvalReport, MuSweep};
use crate::model::task::{make_shifted_task, robustness_datasets, TaskConfig, ToyTask};
use crate::model::transformer::{
    clean_accuracy, pretrain_backbone, PretrainConfig, ToyTransformer, TransformerConfig,
    PRETRAIN_ACCURACY_GATE, ZERO_SHOT_GATE,
};
use crate::model::Adapted;
use crate::numerics::Rng;
use crate::train::train;
use crate::verify::{run_suite, Suite};

/// Success.
pub const EXIT_OK: i32 = 0;
/// Config, flag, checksum, or other validation failure.
pub const EXIT_VALIDATION: i32 = 1;
/// Training hit a non-finite loss; the last healthy checkpoint was kept.
pub const EXIT_DIVERGED: i32 = 2;
/// A verification suite reported failing properties.
pub const EXIT_VERIFY_FAILED: i32 = 3;

/// Seed for the `verify` command's property checks (fixed: the suites are
/// reproducibility oracles, not experiments).
pub const VERIFY_SEED: u64 = crate::verify::DEFAULT_SEED;

#[derive(Debug, Parser)]
#[command(
    name = "halora",
    version,
    about = "Noise-aware low-rank adaptation: pretrain, adapt, and score under read noise"
)]
pub struct Cli {
    /// Run configuration file (TOML); required by every command.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Artifact directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Evaluation noise seeds, comma-separated (overrides `eval.seeds`).
    #[arg(long, global = true, value_name = "CSV")]
    pub seeds: Option<String>,
    /// Evaluation noise levels, comma-separated (overrides `eval.noise_levels`).
    #[arg(long = "noise-levels", global = true, value_name = "CSV")]
    pub noise_levels: Option<String>,
    /// Training mode: lora or halora (overrides `train.mode`).
    #[arg(long, global = true, value_name = "MODE")]
    pub mode: Option<String>,
    /// Regularizer weight (overrides `train.mu`).
    #[arg(long, global = true, value_name = "FLOAT")]
    pub mu: Option<f64>,
    /// Adapter rank (overrides `rank`).
    #[arg(long, global = true, value_name = "INT")]
    pub rank: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the toy backbone; writes its checkpoint and a calibration
    /// summary with the usability gates.
    Pretrain,
    /// Train adapters on the downstream task; writes the adapter checkpoint
    /// and a step-by-step log.
    Train,
    /// Score saved adapters over the noise-level x seed grid; writes report
    /// files (.json/.txt/.csv).
    Eval,
    /// Train and evaluate one adapter per configured regularizer weight.
    SweepMu,
    /// Run a verification suite and print one line per checked property.
    Verify {
        /// Suite: grad, bound, noise, roundtrip, or all.
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Compare the saved lora and halora reports cell by cell.
    Compare,
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; genuine usage
            // errors are validation failures.
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

/// Dispatches one parsed invocation. `Ok` carries the exit code so the
/// verify command can report failing properties without conflating them
/// with operational errors.
pub fn execute(cli: &Cli) -> Result<i32> {
    let config = effective_config(cli)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&config).map(|()| EXIT_OK),
        Command::Train => cmd_train(&config).map(|()| EXIT_OK),
        Command::Eval => cmd_eval(&config).map(|()| EXIT_OK),
        Command::SweepMu => cmd_sweep_mu(&config).map(|()| EXIT_OK),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Compare => cmd_compare(&config).map(|()| EXIT_OK),
    }
}

/// Loads the config file and applies flag overrides, validating the result.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        key: "--config".to_string(),
        message: "required: pass --config PATH".to_string(),
    })?;
    let mut config = RunConfig::load(path)?;
    let overrides = Overrides {
        out: cli.out.clone(),
        seeds: cli
            .seeds
            .as_deref()
            .map(|s| parse_u64_csv(s, "--seeds"))
            .transpose()?,
        noise_levels: cli
            .noise_levels
            .as_deref()
            .map(|s| parse_f64_csv(s, "--noise-levels"))
            .transpose()?,
        mode: cli.mode.as_deref().map(parse_mode).transpose()?,
        mu: cli.mu,
        rank: cli.rank,
    };
    config.apply_overrides(&overrides);
    config.validate()?;
    Ok(config)
}

/// The base and shifted tasks exactly as the config's seeds define them.
fn tasks(config: &RunConfig) -> Result<(ToyTask, ToyTask)> {
    let base = ToyTask::base(TaskConfig::default(), config.seeds.task)?;
    let shifted = make_shifted_task(&base, config.seeds.shift)?;
    Ok((base, shifted))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::Io)
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(format!("serialization failed: {e}")))
}

fn unix_stamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GateReport {
    heldout_minimum: f64,
    heldout_pass: bool,
    zero_shot_range: [f64; 2],
    zero_shot_pass: bool,
}

#[derive(Serialize)]
struct PretrainReport {
    run_id: String,
    steps: usize,
    final_loss: f64,
    heldout_accuracy: f64,
    zero_shot_accuracy: f64,
    gates: GateReport,
}

fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let out = config.out_dir()?;
    fs::create_dir_all(out).map_err(Error::Io)?;
    let run_id = config.run_id();

    let (base, shifted) = tasks(config)?;
    let opts = PretrainConfig {
        seed: config.seeds.pretrain,
        ..PretrainConfig::default()
    };
    let (model, summary) = pretrain_backbone(TransformerConfig::default(), &opts, &base)?;
    let zero_shot = clean_accuracy(&model, &shifted.test)?;

    let mut ck = model.to_checkpoint();
    ck.meta.insert("run_id".to_string(), run_id.clone());
    let path = config.backbone_path()?;
    ck.save(&path)?;

    let report = PretrainReport {
        run_id,
        steps: summary.steps,
        final_loss: summary.final_loss,
        heldout_accuracy: summary.heldout_accuracy,
        zero_shot_accuracy: zero_shot,
        gates: GateReport {
            heldout_minimum: PRETRAIN_ACCURACY_GATE,
            heldout_pass: summary.heldout_accuracy >= PRETRAIN_ACCURACY_GATE,
            zero_shot_range: [ZERO_SHOT_GATE.0, ZERO_SHOT_GATE.1],
            zero_shot_pass: zero_shot >= ZERO_SHOT_GATE.0 && zero_shot <= ZERO_SHOT_GATE.1,
        },
    };
    write_text(
        &out.join("pretrain-summary.json"),
        &to_pretty_json(&report)?,
    )?;
    println!(
        "backbone -> {} ({} steps, heldout {:.4}, zero-shot {:.4})",
        path.display(),
        summary.steps,
        summary.heldout_accuracy,
        zero_shot
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_backbone(config: &RunConfig) -> Result<(Checkpoint, ToyTransformer)> {
    let path = config.backbone_path()?;
    if !path.exists() {
        return Err(Error::Config {
            key: "out_dir".to_string(),
            message: format!(
                "no backbone checkpoint at {}; run the pretrain command first",
                path.display()
            ),
        });
    }
    let ck = Checkpoint::load(&path)?;
    let model = ToyTransformer::from_checkpoint(&ck)?;
    Ok((ck, model))
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let out = config.out_dir()?;
    fs::create_dir_all(out).map_err(Error::Io)?;
    let run_id = config.run_id();
    let (backbone_ck, mut model) = load_backbone(config)?;
    let backbone_digest = backbone_ck.digest();

    let (_, shifted) = tasks(config)?;
    model.attach_adapters(config.rank, &mut Rng::new(config.seeds.adapter_init))?;
    let plan = config.train_plan();
    let log = train(&mut model, &plan, &shifted.train, &Rng::new(config.seeds.train))?;

    // Artifacts are written even for a diverged run: the model holds the
    // adapters from the last healthy step, and the log records where it broke.
    let mut ck = Checkpoint::new();
    ck.adapters = model.adapters().clone();
    ck.meta.insert("run_id".to_string(), run_id.clone());
    ck.meta
        .insert("backbone_digest".to_string(), backbone_digest);
    ck.meta
        .insert("mode".to_string(), mode_slug(plan.mode).to_string());
    ck.meta.insert("rank".to_string(), config.rank.to_string());
    ck.meta.insert("mu".to_string(), plan.mu.to_string());
    let adapter_path = config.adapter_path()?;
    ck.save(&adapter_path)?;

    let log_text = format!("{{\"run_id\":\"{run_id}\"}}\n{}", log.to_jsonl());
    write_text(&config.log_path()?, &log_text)?;

    println!(
        "adapters -> {} ({} steps, {} resamples, {} regularized steps)",
        adapter_path.display(),
        log.records.len(),
        log.resample_steps().len(),
        log.reg_steps().len()
    );
    if let Some(step) = log.diverged {
        return Err(Error::Diverged {
            step,
            loss: f64::NAN,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let (backbone_ck, mut model) = load_backbone(config)?;

    let adapter_path = config.adapter_path()?;
    if !adapter_path.exists() {
        return Err(Error::Config {
            key: "out_dir".to_string(),
            message: format!(
                "no adapter checkpoint at {}; run the train command first",
                adapter_path.display()
            ),
        });
    }
    let adapter_ck = Checkpoint::load(&adapter_path)?;

    // Adapters trained against a different backbone would silently score
    // garbage; refuse instead.
    let expected = adapter_ck
        .meta
        .get("backbone_digest")
        .cloned()
        .unwrap_or_default();
    let found = backbone_ck.digest();
    if expected != found {
        return Err(Error::ChecksumMismatch { expected, found });
    }
    if adapter_ck.adapters.is_empty() {
        return Err(Error::Format(format!(
            "{} holds no adapters",
            adapter_path.display()
        )));
    }
    *model.adapters_mut() = adapter_ck.adapters.clone();

    let (_, shifted) = tasks(config)?;
    let plan = config.eval_plan(robustness_datasets(&shifted)?);
    let mut report = evaluate(&model, &plan)?;
    report.run_id = config.run_id();

    let stem = config.report_stem()?;
    write_text(
        &stem.with_extension("json"),
        &report.to_document(&unix_stamp()),
    )?;
    write_text(&stem.with_extension("txt"), &report.render_table())?;
    write_text(&stem.with_extension("csv"), &report.render_csv())?;
    print!("{}", report.render_table());
    println!("report -> {}.{{json,txt,csv}}", stem.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-mu
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepDocument<'a> {
    run_id: String,
    sweep: &'a MuSweep,
}

fn cmd_sweep_mu(config: &RunConfig) -> Result<()> {
    let (_, backbone) = load_backbone(config)?;
    let (_, shifted) = tasks(config)?;
    let plan = config.eval_plan(robustness_datasets(&shifted)?);
    let sweep = mu_sweep(
        &backbone,
        config.rank,
        &config.train_plan(),
        &config.sweep.mus,
        &shifted.train,
        &plan,
        config.seeds.adapter_init,
        config.seeds.train,
    )?;

    let dir = config.sweep_dir()?;
    fs::create_dir_all(&dir).map_err(Error::Io)?;
    let doc = SweepDocument {
        run_id: config.run_id(),
        sweep: &sweep,
    };
    write_text(&dir.join("sweep.json"), &to_pretty_json(&doc)?)?;
    for (name, contents) in sweep.curve_files() {
        write_text(&dir.join(name), &contents)?;
    }
    print!("{}", sweep.render_table());
    println!("sweep -> {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(suite: &str) -> Result<i32> {
    let suite: Suite = suite.parse()?;
    let outcome = run_suite(suite, VERIFY_SEED)?;
    print!("{}", outcome.render());
    Ok(if outcome.all_passed() {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    })
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        key: path.display().to_string(),
        message: format!("cannot read report: {e} (run eval for both modes first)"),
    })?;
    let (report, _stamp) = EvalReport::from_document(&text)?;
    Ok(report)
}

fn cmd_compare(config: &RunConfig) -> Result<()> {
    let out = config.out_dir()?;
    let base = read_report(&out.join("report-lora.json"))?;
    let other = read_report(&out.join("report-halora.json"))?;
    let comparison = compare(&base, &other)?;
    let text = render_comparison(&comparison);
    write_text(&out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}
