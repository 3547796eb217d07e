//! End-to-end tests of the `halora` binary: command pipeline, artifact
//! determinism, flag/config precedence, refusal paths, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard, OnceLock};

use halora::checkpoint::Checkpoint;
use halora::eval::EvalReport;
use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_halora")
}

fn run_cli(config: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("spawn halora")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Report document with the dated header line removed, leaving only the
/// deterministic payload.
fn report_payload(text: &str) -> &str {
    text.split_once('\n').map(|(_, rest)| rest).unwrap_or(text)
}

// ---------------------------------------------------------------------------
// Shared fixture: one pretrained backbone plus the full command pipeline,
// run once. Tests that touch the shared artifact directory serialize on
// `lock()`; tests that only read the in-memory snapshots don't need it.
// ---------------------------------------------------------------------------

struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    out: PathBuf,
    lock: Mutex<()>,
    adapter_halora: Vec<u8>,
    log_halora: Vec<u8>,
    report_json: String,
    report_txt: Vec<u8>,
    report_csv: Vec<u8>,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let out = dir.path().join("run");
        let config = dir.path().join("run.toml");
        fs::write(
            &config,
            format!(
                "out_dir = {:?}\nrank = 2\n\n[train]\nmax_steps = 40\n\n[eval]\n\
                 noise_levels = [0.0, 0.01]\nseeds = [1, 2]\n\n[sweep]\nmus = [0.1]\n",
                out
            ),
        )
        .expect("write config");

        for args in [
            vec!["pretrain"],
            vec!["train", "--mode", "halora"],
            vec!["train", "--mode", "lora"],
            vec!["eval", "--mode", "halora"],
            vec!["eval", "--mode", "lora"],
            vec!["compare"],
            vec!["sweep-mu"],
        ] {
            let out = run_cli(&config, &args);
            assert_eq!(
                code(&out),
                0,
                "pipeline step {args:?} failed:\n{}",
                stderr_of(&out)
            );
        }

        let read = |name: &str| fs::read(out.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        Fixture {
            adapter_halora: read("adapter-halora.ckpt"),
            log_halora: read("train-halora.jsonl"),
            report_json: String::from_utf8(read("report-halora.json")).expect("utf8 report"),
            report_txt: read("report-halora.txt"),
            report_csv: read("report-halora.csv"),
            config,
            out,
            lock: Mutex::new(()),
            _dir: dir,
        }
    })
}

fn locked() -> (&'static Fixture, MutexGuard<'static, ()>) {
    let fx = fixture();
    let guard = fx.lock.lock().expect("fixture lock");
    (fx, guard)
}

// ---------------------------------------------------------------------------
// Pipeline artifacts
// ---------------------------------------------------------------------------

#[test]
fn pipeline_writes_every_artifact() {
    let (fx, _guard) = locked();
    for name in [
        "backbone.ckpt",
        "pretrain-summary.json",
        "adapter-halora.ckpt",
        "adapter-lora.ckpt",
        "train-halora.jsonl",
        "train-lora.jsonl",
        "report-halora.json",
        "report-halora.txt",
        "report-halora.csv",
        "report-lora.json",
        "compare.txt",
        "sweep/sweep.json",
    ] {
        assert!(fx.out.join(name).exists(), "missing artifact {name}");
    }
    let summary = fs::read_to_string(fx.out.join("pretrain-summary.json")).expect("summary");
    assert!(summary.contains("\"heldout_pass\": true"), "{summary}");
    assert!(summary.contains("\"zero_shot_pass\": true"), "{summary}");
    let sweep_csvs = fs::read_dir(fx.out.join("sweep"))
        .expect("sweep dir")
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert!(sweep_csvs >= 1, "sweep wrote no curve files");
}

#[test]
fn run_id_is_stamped_into_every_artifact() {
    let (fx, _guard) = locked();
    let backbone = Checkpoint::load(&fx.out.join("backbone.ckpt")).expect("backbone");
    let run_id = backbone.meta.get("run_id").cloned().expect("run_id meta");
    assert_eq!(run_id.len(), 64, "run id should be a sha-256 hex digest");

    let adapter = Checkpoint::load(&fx.out.join("adapter-halora.ckpt")).expect("adapter");
    assert_eq!(adapter.meta.get("run_id"), Some(&run_id));
    assert_eq!(adapter.meta.get("mode").map(String::as_str), Some("halora"));
    assert_eq!(adapter.meta.get("rank").map(String::as_str), Some("2"));

    let log_header = fx.log_halora.split(|&b| b == b'\n').next().expect("line");
    assert_eq!(
        String::from_utf8_lossy(log_header),
        format!("{{\"run_id\":\"{run_id}\"}}")
    );

    assert!(
        fx.report_json.contains(&run_id),
        "eval report does not embed the run id"
    );
    let summary = fs::read_to_string(fx.out.join("pretrain-summary.json")).expect("summary");
    assert!(summary.contains(&run_id));
    let sweep = fs::read_to_string(fx.out.join("sweep/sweep.json")).expect("sweep");
    assert!(sweep.contains(&run_id));
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

#[test]
fn train_rerun_reproduces_artifacts_byte_for_byte() {
    let (fx, _guard) = locked();
    let out = run_cli(&fx.config, &["train", "--mode", "halora"]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    assert_eq!(
        fs::read(fx.out.join("adapter-halora.ckpt")).expect("adapter"),
        fx.adapter_halora,
        "adapter checkpoint changed across identical runs"
    );
    assert_eq!(
        fs::read(fx.out.join("train-halora.jsonl")).expect("log"),
        fx.log_halora,
        "training log changed across identical runs"
    );
}

#[test]
fn eval_rerun_and_worker_cap_reproduce_the_payload() {
    let (fx, _guard) = locked();

    let rerun = run_cli(&fx.config, &["eval", "--mode", "halora"]);
    assert_eq!(code(&rerun), 0, "{}", stderr_of(&rerun));
    let json = fs::read_to_string(fx.out.join("report-halora.json")).expect("report");
    assert_eq!(
        report_payload(&json),
        report_payload(&fx.report_json),
        "report payload changed across identical runs"
    );
    assert_eq!(fs::read(fx.out.join("report-halora.txt")).expect("txt"), fx.report_txt);
    assert_eq!(fs::read(fx.out.join("report-halora.csv")).expect("csv"), fx.report_csv);

    // Capping evaluation at one worker must not change any payload byte.
    let capped = Command::new(bin())
        .arg("--config")
        .arg(&fx.config)
        .args(["eval", "--mode", "halora"])
        .env("HALORA_WORKERS", "1")
        .output()
        .expect("spawn halora");
    assert_eq!(code(&capped), 0, "{}", stderr_of(&capped));
    let json = fs::read_to_string(fx.out.join("report-halora.json")).expect("report");
    assert_eq!(
        report_payload(&json),
        report_payload(&fx.report_json),
        "worker cap changed the report payload"
    );
}

// ---------------------------------------------------------------------------
// Flag/config precedence
// ---------------------------------------------------------------------------

#[test]
fn flags_override_file_values() {
    let (fx, _guard) = locked();
    let alt = fx.out.parent().expect("parent").join("override-out");
    fs::create_dir_all(&alt).expect("alt dir");
    for name in ["backbone.ckpt", "adapter-halora.ckpt"] {
        fs::copy(fx.out.join(name), alt.join(name)).expect("copy artifact");
    }
    drop(_guard);

    let out = run_cli(
        &fx.config,
        &[
            "eval",
            "--mode",
            "halora",
            "--out",
            alt.to_str().expect("utf8 path"),
            "--noise-levels",
            "0.0,0.02",
            "--seeds",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let text = fs::read_to_string(alt.join("report-halora.json")).expect("report");
    let (report, _stamp) = EvalReport::from_document(&text).expect("parse report");
    assert_eq!(report.noise_levels, vec![0.0, 0.02], "--noise-levels ignored");
    assert_eq!(report.seeds, vec![3], "--seeds ignored");
}

// ---------------------------------------------------------------------------
// Refusals and failure exit codes
// ---------------------------------------------------------------------------

#[test]
fn missing_config_flag_is_a_validation_error() {
    let out = Command::new(bin()).arg("train").output().expect("spawn");
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("--config"), "{}", stderr_of(&out));
}

#[test]
fn nonexistent_config_file_is_a_validation_error() {
    let out = run_cli(Path::new("/definitely/not/here.toml"), &["train"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let dir = TempDir::new().expect("tempdir");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "out_dir = \"x\"\n\n[train]\nbanana = 1\n").expect("write");
    let out = run_cli(&cfg, &["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("banana"), "{}", stderr_of(&out));
}

#[test]
fn invalid_config_value_is_named_in_the_error() {
    let dir = TempDir::new().expect("tempdir");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "out_dir = \"x\"\n\n[train]\neta = 0.0\n").expect("write");
    let out = run_cli(&cfg, &["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("train.eta"), "{}", stderr_of(&out));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let (fx, _guard) = locked();
    for args in [
        vec!["train", "--mode", "turbo"],
        vec!["eval", "--seeds", "1,x"],
        vec!["eval", "--noise-levels", "abc"],
    ] {
        let out = run_cli(&fx.config, &args);
        assert_eq!(code(&out), 1, "{args:?} should fail validation");
    }
}

#[test]
fn train_without_backbone_points_at_pretrain() {
    let dir = TempDir::new().expect("tempdir");
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        format!("out_dir = {:?}\n", dir.path().join("empty")),
    )
    .expect("write");
    let out = run_cli(&cfg, &["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("pretrain"), "{}", stderr_of(&out));
}

#[test]
fn eval_refuses_adapters_from_a_different_backbone() {
    let (fx, _guard) = locked();
    let path = fx.out.join("adapter-lora.ckpt");
    let original = fs::read(&path).expect("adapter bytes");
    let mut ck = Checkpoint::load(&path).expect("load adapter");
    ck.meta.insert(
        "backbone_digest".to_string(),
        "0".repeat(64),
    );
    ck.save(&path).expect("save corrupted adapter");

    let out = run_cli(&fx.config, &["eval", "--mode", "lora"]);
    fs::write(&path, original).expect("restore adapter");

    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("checksum"), "{}", stderr_of(&out));
}

#[test]
fn divergence_exits_2_and_keeps_the_last_healthy_checkpoint() {
    let (fx, guard) = locked();
    let dir = TempDir::new().expect("tempdir");
    let out_dir = dir.path().join("run");
    fs::create_dir_all(&out_dir).expect("out dir");
    fs::copy(fx.out.join("backbone.ckpt"), out_dir.join("backbone.ckpt")).expect("copy backbone");
    drop(guard);

    // A step this size drives the factor product past f64 range on the
    // first update, so the next forward pass yields a non-finite loss.
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        format!("out_dir = {:?}\n\n[train]\neta = 1e200\nmax_steps = 40\n", out_dir),
    )
    .expect("write config");

    let out = run_cli(&cfg, &["train", "--mode", "halora"]);
    assert_eq!(code(&out), 2, "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("diverged"), "{}", stderr_of(&out));
    assert!(
        out_dir.join("adapter-halora.ckpt").exists(),
        "last-healthy adapter checkpoint missing after divergence"
    );
    let log = fs::read_to_string(out_dir.join("train-halora.jsonl")).expect("log");
    assert!(log.contains("diverged"), "log does not record the divergence");
}

// ---------------------------------------------------------------------------
// Verify command
// ---------------------------------------------------------------------------

#[test]
fn verify_prints_observed_values_and_tolerances() {
    let dir = TempDir::new().expect("tempdir");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "out_dir = \"unused\"\n").expect("write");

    let out = run_cli(&cfg, &["verify", "roundtrip"]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("[PASS]"), "{text}");
    assert!(text.contains("limit"), "no tolerance printed: {text}");

    let bad = run_cli(&cfg, &["verify", "bogus-suite"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn help_exits_zero() {
    let out = Command::new(bin()).arg("--help").output().expect("spawn");
    assert_eq!(code(&out), 0);
    assert!(stdout_of(&out).contains("pretrain"));
}
