//! Seeded robustness evaluation: accuracy grids over noise levels and noise
//! seeds, report persistence, model comparison, and the regularizer-weight
//! sweep.
//!
//! An evaluation runs every `(dataset, noise level, seed)` cell independently:
//! the cell builds one noisy read of the backbone from its seed and scores
//! accuracy with noise-free adapter math. Cells are pure functions of the
//! model and the cell coordinates, so the grid may be computed serially or in
//! parallel with bit-identical results; [`WORKERS_ENV`] caps the worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{accuracy, Adapted, Dataset};
use crate::noise::{noisy_view, NoiseSpec};
use crate::numerics::Rng;
use crate::train::{train, Mode, TrainPlan};

/// Environment variable capping evaluation worker parallelism (a positive
/// integer; `1` forces serial execution).
pub const WORKERS_ENV: &str = "HALORA_WORKERS";

/// Report document schema version.
pub const REPORT_VERSION: u32 = 1;

const DOC_PREFIX: &str = "halora-eval-report";

/// What to evaluate: the noise grid and the named test sets.
#[derive(Debug, Clone)]
pub struct EvalPlan<T> {
    /// Noise levels σ; `0.0` means a single clean evaluation.
    pub noise_levels: Vec<f64>,
    /// Noise seeds; every σ > 0 cell is scored once per seed, and the same
    /// seed produces the same backbone perturbation across models, so two
    /// reports over one backbone compare paired draws.
    pub seeds: Vec<u64>,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub datasets: Vec<(String, Dataset<T>)>,
}

impl<T> EvalPlan<T> {
    /// Standard grid: σ ∈ {0, 0.005, 0.01, 0.02}, seeds 1..=5, 64×64 tiles.
    pub fn new(datasets: Vec<(String, Dataset<T>)>) -> Self {
        EvalPlan {
            noise_levels: vec![0.0, 5e-3, 1e-2, 2e-2],
            seeds: vec![1, 2, 3, 4, 5],
            tile_rows: 64,
            tile_cols: 64,
            datasets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_levels.is_empty() {
            return Err(Error::InvalidArgument("no noise levels to evaluate".into()));
        }
        for &sigma in &self.noise_levels {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "noise level {sigma} must be finite and >= 0"
                )));
            }
        }
        for (i, &sigma) in self.noise_levels.iter().enumerate() {
            if self.noise_levels[..i].contains(&sigma) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate noise level {sigma}"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("no noise seeds".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::InvalidArgument(format!("duplicate noise seed {s}")));
            }
        }
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile dims {}x{} must be positive",
                self.tile_rows, self.tile_cols
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::InvalidArgument("no datasets to evaluate".into()));
        }
        for (i, (name, data)) in self.datasets.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidArgument("empty dataset name".into()));
            }
            if self.datasets[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate dataset name `{name}`"
                )));
            }
            if data.is_empty() {
                return Err(Error::InvalidArgument(format!("dataset `{name}` is empty")));
            }
        }
        Ok(())
    }
}

impl<T: Serialize> EvalPlan<T> {
    /// Content hash of the whole plan (grid knobs and dataset contents);
    /// two reports are comparable exactly when their plan hashes agree.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &sigma in &self.noise_levels {
            h.update(sigma.to_le_bytes());
        }
        h.update([0xff]);
        for &seed in &self.seeds {
            h.update(seed.to_le_bytes());
        }
        h.update([0xff]);
        h.update((self.tile_rows as u64).to_le_bytes());
        h.update((self.tile_cols as u64).to_le_bytes());
        for (name, data) in &self.datasets {
            h.update(name.as_bytes());
            h.update([0xff]);
            h.update(serde_json::to_vec(&data.items).expect("items serialize"));
            h.update(serde_json::to_vec(&data.labels).expect("labels serialize"));
        }
        sha256_hex(&h.finalize())
    }
}

/// One `(dataset, noise level)` cell: accuracies per seed with their mean and
/// sample standard deviation. A clean (σ = 0) cell holds the single
/// deterministic accuracy and no std; std is also absent with fewer than two
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl CellStats {
    fn from_accs(per_seed: Vec<f64>, with_std: bool) -> Self {
        let n = per_seed.len();
        let mean = per_seed.iter().sum::<f64>() / n as f64;
        let std = if with_std && n >= 2 {
            let var = per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Some(var.sqrt())
        } else {
            None
        };
        CellStats { per_seed, mean, std }
    }
}

/// Accuracy grid for one model under one [`EvalPlan`], plus per-level grand
/// averages and identifying metadata.
///
/// Persisted as a one-line header (`halora-eval-report v<N> generated <when>`)
/// followed by the pretty-printed JSON of this struct. The header carries the
/// only non-deterministic field, so the document body is byte-identical
/// across reruns of the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Dataset row order (the grid map is sorted by name).
    pub dataset_names: Vec<String>,
    /// `grid[dataset][level_index]` aligned with `noise_levels`.
    pub grid: BTreeMap<String, Vec<CellStats>>,
    /// Per-level mean of the per-dataset means (each dataset weighted
    /// equally, matching how benchmark-suite averages are usually quoted).
    pub grand: Vec<f64>,
    /// Hash of the evaluation plan, including dataset contents.
    pub config_hash: String,
    /// Hash of the adapter factors the model carried into evaluation.
    pub adapter_checksum: String,
    /// Run-config hash stamped by config-driven callers; empty when the
    /// report was produced through the library API directly.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub run_id: String,
}

impl EvalReport {
    pub fn level_index(&self, sigma: f64) -> Option<usize> {
        self.noise_levels.iter().position(|&s| s == sigma)
    }

    pub fn cell(&self, dataset: &str, sigma: f64) -> Option<&CellStats> {
        let li = self.level_index(sigma)?;
        self.grid.get(dataset).and_then(|row| row.get(li))
    }

    /// Grand average accuracy at one noise level.
    pub fn grand_at(&self, sigma: f64) -> Option<f64> {
        self.level_index(sigma).map(|li| self.grand[li])
    }

    /// Grand accuracy lost relative to the clean row: `grand(0) − grand(σ)`.
    /// `None` when the plan lacks a σ = 0 row.
    pub fn degradation(&self, sigma: f64) -> Option<f64> {
        Some(self.grand_at(0.0)? - self.grand_at(sigma)?)
    }

    /// Verifies the stored statistics against their own raw values: means and
    /// stds recomputable from `per_seed` within 1e-12, clean rows carry no
    /// std, grand averages match the grid, and shapes agree with the plan.
    pub fn self_check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Format(format!("inconsistent report: {msg}")));
        if self.schema_version != REPORT_VERSION {
            return fail(format!("schema version {}", self.schema_version));
        }
        if self.dataset_names.len() != self.grid.len()
            || self.dataset_names.iter().any(|n| !self.grid.contains_key(n))
        {
            return fail("dataset names disagree with grid keys".into());
        }
        if self.grand.len() != self.noise_levels.len() {
            return fail("grand average length disagrees with noise levels".into());
        }
        for (name, row) in &self.grid {
            if row.len() != self.noise_levels.len() {
                return fail(format!("row `{name}` length disagrees with noise levels"));
            }
            for (cell, &sigma) in row.iter().zip(&self.noise_levels) {
                let expect_n = if sigma == 0.0 { 1 } else { self.seeds.len() };
                if cell.per_seed.len() != expect_n {
                    return fail(format!("cell ({name}, {sigma}) holds {} accuracies", cell.per_seed.len()));
                }
                let recomputed = CellStats::from_accs(cell.per_seed.clone(), sigma > 0.0);
                if (recomputed.mean - cell.mean).abs() > 1e-12 {
                    return fail(format!("cell ({name}, {sigma}) mean"));
                }
                match (recomputed.std, cell.std) {
                    (None, None) => {}
                    (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
                    _ => return fail(format!("cell ({name}, {sigma}) std")),
                }
            }
        }
        for (li, &g) in self.grand.iter().enumerate() {
            let mean = self
                .dataset_names
                .iter()
                .map(|n| self.grid[n][li].mean)
                .sum::<f64>()
                / self.dataset_names.len() as f64;
            if (mean - g).abs() > 1e-12 {
                return fail(format!("grand average at level {li}"));
            }
        }
        Ok(())
    }

    /// Serializes to the persistent document form. `generated_at` lands in
    /// the header line; everything after the first newline is deterministic.
    pub fn to_document(&self, generated_at: &str) -> String {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        format!("{DOC_PREFIX} v{REPORT_VERSION} generated {generated_at}\n{body}\n")
    }

    /// Parses [`EvalReport::to_document`] output, self-checks the stats, and
    /// returns the report plus the header's generation stamp.
    pub fn from_document(text: &str) -> Result<(Self, String)> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Format("report document has no header line".into()))?;
        let rest = header.strip_prefix(DOC_PREFIX).ok_or_else(|| {
            Error::Format(format!("not an eval report (header `{header}`)"))
        })?;
        let rest = rest
            .strip_prefix(&format!(" v{REPORT_VERSION} generated "))
            .ok_or_else(|| {
                Error::Format(format!(
                    "unsupported report header `{header}` (expected version {REPORT_VERSION})"
                ))
            })?;
        let report: EvalReport =
            serde_json::from_str(body).map_err(|e| Error::Format(format!("report body: {e}")))?;
        report.self_check()?;
        Ok((report, rest.to_string()))
    }

    /// Aligned plain-text table: one row per (dataset, σ), then grand rows.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>8} {:>10} {:>9}   per-seed\n",
            "dataset", "sigma", "mean", "std"
        ));
        for name in &self.dataset_names {
            for (li, &sigma) in self.noise_levels.iter().enumerate() {
                let cell = &self.grid[name][li];
                let std = cell
                    .std
                    .map(|s| format!("{s:.4}"))
                    .unwrap_or_else(|| "-".into());
                let per_seed = cell
                    .per_seed
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push_str(&format!(
                    "{name:<14} {sigma:>8} {:>10.4} {std:>9}   {per_seed}\n",
                    cell.mean
                ));
            }
        }
        for (li, &sigma) in self.noise_levels.iter().enumerate() {
            out.push_str(&format!(
                "{:<14} {sigma:>8} {:>10.4} {:>9}\n",
                "(grand)", self.grand[li], "-"
            ));
        }
        out
    }

    /// Comma-separated form of the same table (one line per cell).
    pub fn render_csv(&self) -> String {
        let mut out = String::from("dataset,sigma,mean,std,per_seed\n");
        for name in &self.dataset_names {
            for (li, &sigma) in self.noise_levels.iter().enumerate() {
                let cell = &self.grid[name][li];
                let std = cell.std.map(|s| s.to_string()).unwrap_or_default();
                let per_seed = cell
                    .per_seed
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(";");
                out.push_str(&format!("{name},{sigma},{},{std},{per_seed}\n", cell.mean));
            }
        }
        for (li, &sigma) in self.noise_levels.iter().enumerate() {
            out.push_str(&format!("(grand),{sigma},{},,\n", self.grand[li]));
        }
        out
    }
}

/// Checksum of adapter factors (names, shapes, and exact entry bytes).
pub fn adapter_checksum(adapters: &BTreeMap<String, LoraAdapter>) -> String {
    let mut h = Sha256::new();
    for (name, adapter) in adapters {
        h.update(name.as_bytes());
        h.update([0xff]);
        for m in [&adapter.a, &adapter.b] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    sha256_hex(&h.finalize())
}

/// Parses a worker-cap setting (the value of [`WORKERS_ENV`]).
pub fn parse_worker_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// One evaluation job: a noise level plus either a seed slot or the single
/// clean evaluation.
#[derive(Debug, Clone, Copy)]
struct Job {
    level: usize,
    seed_slot: Option<usize>,
}

fn job_list<T>(plan: &EvalPlan<T>) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (level, &sigma) in plan.noise_levels.iter().enumerate() {
        if sigma == 0.0 {
            jobs.push(Job { level, seed_slot: None });
        } else {
            for slot in 0..plan.seeds.len() {
                jobs.push(Job { level, seed_slot: Some(slot) });
            }
        }
    }
    jobs
}

/// Per-dataset accuracies for one job.
fn run_job<M: Adapted>(model: &M, plan: &EvalPlan<M::Item>, job: Job) -> Result<Vec<f64>> {
    let sigma = plan.noise_levels[job.level];
    let view = match job.seed_slot {
        None => None,
        Some(slot) => {
            let seed = plan.seeds[slot];
            let spec = NoiseSpec::with_tiles(sigma, plan.tile_rows, plan.tile_cols, seed)?;
            Some(noisy_view(model.analog_weights(), &spec, &Rng::new(seed))?)
        }
    };
    let weights = view.as_ref().unwrap_or_else(|| model.analog_weights());
    plan.datasets
        .iter()
        .map(|(_, data)| accuracy(model, weights, data))
        .collect()
}

fn assemble<T: Serialize>(
    plan: &EvalPlan<T>,
    jobs: &[Job],
    results: Vec<Vec<f64>>,
    adapter_checksum: String,
) -> EvalReport {
    let names: Vec<String> = plan.datasets.iter().map(|(n, _)| n.clone()).collect();
    let mut grid: BTreeMap<String, Vec<CellStats>> = BTreeMap::new();
    for (di, name) in names.iter().enumerate() {
        let mut row = Vec::with_capacity(plan.noise_levels.len());
        for (level, &sigma) in plan.noise_levels.iter().enumerate() {
            let per_seed: Vec<f64> = jobs
                .iter()
                .zip(&results)
                .filter(|(job, _)| job.level == level)
                .map(|(_, accs)| accs[di])
                .collect();
            row.push(CellStats::from_accs(per_seed, sigma > 0.0));
        }
        grid.insert(name.clone(), row);
    }
    let grand = (0..plan.noise_levels.len())
        .map(|li| names.iter().map(|n| grid[n][li].mean).sum::<f64>() / names.len() as f64)
        .collect();
    EvalReport {
        schema_version: REPORT_VERSION,
        noise_levels: plan.noise_levels.clone(),
        seeds: plan.seeds.clone(),
        tile_rows: plan.tile_rows,
        tile_cols: plan.tile_cols,
        dataset_names: names,
        grid,
        grand,
        config_hash: plan.content_hash(),
        adapter_checksum,
        run_id: String::new(),
    }
}

/// Scores the model (with its attached adapters) over the whole plan grid,
/// running cells in parallel. Worker count is capped by [`WORKERS_ENV`];
/// results are bit-identical to [`evaluate_serial`] regardless of worker
/// count because every cell is an independent pure function.
pub fn evaluate<M>(model: &M, plan: &EvalPlan<M::Item>) -> Result<EvalReport>
where
    M: Adapted + Sync,
    M::Item: Serialize,
{
    plan.validate()?;
    let cap = parse_worker_cap(std::env::var(WORKERS_ENV).ok().as_deref())?;
    let jobs = job_list(plan);
    let run = || -> Result<Vec<Vec<f64>>> {
        jobs.par_iter().map(|&job| run_job(model, plan, job)).collect()
    };
    let results = match cap {
        None => run()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(run)?,
    };
    Ok(assemble(plan, &jobs, results, adapter_checksum(model.adapters())))
}

/// Sequential reference implementation of [`evaluate`].
pub fn evaluate_serial<M>(model: &M, plan: &EvalPlan<M::Item>) -> Result<EvalReport>
where
    M: Adapted,
    M::Item: Serialize,
{
    plan.validate()?;
    let jobs = job_list(plan);
    let results = jobs
        .iter()
        .map(|&job| run_job(model, plan, job))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(plan, &jobs, results, adapter_checksum(model.adapters())))
}

/// One `(dataset, σ)` slice of a two-report comparison. `diff` and `ratio`
/// read as challenger-versus-baseline: positive `mean_diff` and sub-1
/// `std_ratio` both favor the challenger.
#[derive(Debug, Clone, Serialize)]
pub struct CellComparison {
    pub dataset: String,
    pub sigma: f64,
    pub base_mean: f64,
    pub other_mean: f64,
    pub mean_diff: f64,
    pub base_std: Option<f64>,
    pub other_std: Option<f64>,
    /// `other_std / base_std`; absent for clean rows or a zero baseline std.
    pub std_ratio: Option<f64>,
}

/// Baseline-versus-challenger view of two reports produced under the same
/// plan (typically plain-LoRA versus noise-aware adapters on one backbone).
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub noise_levels: Vec<f64>,
    pub cells: Vec<CellComparison>,
    pub grand_base: Vec<f64>,
    pub grand_other: Vec<f64>,
    /// `grand_other − grand_base` per level.
    pub grand_diff: Vec<f64>,
    /// Grand degradation-from-clean per level; `None` without a σ=0 row.
    pub degradation_base: Vec<Option<f64>>,
    pub degradation_other: Vec<Option<f64>>,
}

/// Compares two reports cell by cell. The reports must come from the same
/// plan (same levels, seeds, tiles, and dataset contents); anything else is
/// rejected with the offending field named.
pub fn compare(base: &EvalReport, other: &EvalReport) -> Result<Comparison> {
    let mismatch = |what: &str| {
        Err(Error::InvalidArgument(format!(
            "reports are not comparable: {what} differ"
        )))
    };
    if base.noise_levels != other.noise_levels {
        return mismatch("noise levels");
    }
    if base.seeds != other.seeds {
        return mismatch("noise seeds");
    }
    if (base.tile_rows, base.tile_cols) != (other.tile_rows, other.tile_cols) {
        return mismatch("tile dims");
    }
    if base.dataset_names != other.dataset_names {
        return mismatch("dataset names");
    }
    if base.config_hash != other.config_hash {
        return mismatch("plan content hashes");
    }
    let mut cells = Vec::new();
    for name in &base.dataset_names {
        for (li, &sigma) in base.noise_levels.iter().enumerate() {
            let b = &base.grid[name][li];
            let o = &other.grid[name][li];
            let std_ratio = match (b.std, o.std) {
                (Some(bs), Some(os)) if bs > 0.0 => Some(os / bs),
                _ => None,
            };
            cells.push(CellComparison {
                dataset: name.clone(),
                sigma,
                base_mean: b.mean,
                other_mean: o.mean,
                mean_diff: o.mean - b.mean,
                base_std: b.std,
                other_std: o.std,
                std_ratio,
            });
        }
    }
    let grand_diff = base
        .grand
        .iter()
        .zip(&other.grand)
        .map(|(b, o)| o - b)
        .collect();
    let degradation = |r: &EvalReport| -> Vec<Option<f64>> {
        base.noise_levels
            .iter()
            .map(|&sigma| r.degradation(sigma))
            .collect()
    };
    Ok(Comparison {
        noise_levels: base.noise_levels.clone(),
        cells,
        grand_base: base.grand.clone(),
        grand_other: other.grand.clone(),
        grand_diff,
        degradation_base: degradation(base),
        degradation_other: degradation(other),
    })
}

/// Aligned plain-text rendering of a comparison, baseline on the left.
pub fn render_comparison(cmp: &Comparison) -> String {
    let opt = |v: Option<f64>| v.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>8} {:>16} {:>16} {:>9} {:>10}\n",
        "dataset", "sigma", "base mean±std", "other mean±std", "diff", "std ratio"
    ));
    for c in &cmp.cells {
        let b = match c.base_std {
            Some(s) => format!("{:.4}±{s:.4}", c.base_mean),
            None => format!("{:.4}", c.base_mean),
        };
        let o = match c.other_std {
            Some(s) => format!("{:.4}±{s:.4}", c.other_mean),
            None => format!("{:.4}", c.other_mean),
        };
        out.push_str(&format!(
            "{:<14} {:>8} {b:>16} {o:>16} {:>+9.4} {:>10}\n",
            c.dataset,
            c.sigma,
            c.mean_diff,
            opt(c.std_ratio)
        ));
    }
    out.push_str("\ngrand averages and degradation-from-clean:\n");
    out.push_str(&format!(
        "{:>8} {:>10} {:>10} {:>9} {:>10} {:>10}\n",
        "sigma", "base", "other", "diff", "base deg", "other deg"
    ));
    for (li, &sigma) in cmp.noise_levels.iter().enumerate() {
        out.push_str(&format!(
            "{sigma:>8} {:>10.4} {:>10.4} {:>+9.4} {:>10} {:>10}\n",
            cmp.grand_base[li],
            cmp.grand_other[li],
            cmp.grand_diff[li],
            opt(cmp.degradation_base[li]),
            opt(cmp.degradation_other[li]),
        ));
    }
    out
}

/// One regularizer weight's outcome inside a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct MuPoint {
    pub mu: f64,
    pub final_loss: Option<f64>,
    pub diverged: Option<usize>,
    pub report: EvalReport,
}

/// Accuracy-versus-μ curves: one trained run per μ under fixed seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MuSweep {
    pub points: Vec<MuPoint>,
    /// Per noise level: `(σ, max-minus-min grand accuracy across μ)` — how
    /// sensitive the outcome is to the regularizer weight.
    pub spread_per_level: Vec<(f64, f64)>,
}

impl MuSweep {
    /// `(μ, grand accuracy)` curve at one noise level.
    pub fn curve_at(&self, sigma: f64) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.report.grand_at(sigma).map(|g| (p.mu, g)))
            .collect()
    }

    /// Plain-text summary: one row per μ with grand accuracy per level.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.points.first() {
            out.push_str(&format!("{:>6}", "mu"));
            for &sigma in &first.report.noise_levels {
                out.push_str(&format!(" {:>10}", format!("σ={sigma}")));
            }
            out.push_str(&format!(" {:>12}\n", "final loss"));
            for p in &self.points {
                out.push_str(&format!("{:>6}", p.mu));
                for &g in &p.report.grand {
                    out.push_str(&format!(" {g:>10.4}"));
                }
                match p.final_loss {
                    Some(l) => out.push_str(&format!(" {l:>12.4}\n")),
                    None => out.push_str(&format!(" {:>12}\n", "-")),
                }
            }
            out.push_str("max-minus-min grand accuracy per level:");
            for &(sigma, spread) in &self.spread_per_level {
                out.push_str(&format!("  σ={sigma}: {spread:.4}"));
            }
            out.push('\n');
        }
        out
    }

    /// One CSV per noise level (`mu,grand_mean` rows), named for plotting.
    pub fn curve_files(&self) -> Vec<(String, String)> {
        let Some(first) = self.points.first() else {
            return Vec::new();
        };
        first
            .report
            .noise_levels
            .iter()
            .map(|&sigma| {
                let mut body = String::from("mu,grand_mean\n");
                for (mu, g) in self.curve_at(sigma) {
                    body.push_str(&format!("{mu},{g}\n"));
                }
                (format!("mu_curve_sigma_{sigma}.csv"), body)
            })
            .collect()
    }
}

/// Trains one noise-aware run per μ — same backbone, same fresh-adapter seed,
/// same data order — then evaluates each under the plan. μ = 0 is the
/// noise-exposed-but-unregularized ablation; a single μ degenerates to one
/// train-plus-evaluate.
#[allow(clippy::too_many_arguments)]
pub fn mu_sweep<M>(
    backbone: &M,
    rank: usize,
    base: &TrainPlan,
    mus: &[f64],
    data: &Dataset<M::Item>,
    plan: &EvalPlan<M::Item>,
    adapter_seed: u64,
    train_seed: u64,
) -> Result<MuSweep>
where
    M: Adapted + Clone + Sync,
    M::Item: Serialize,
{
    if mus.is_empty() {
        return Err(Error::InvalidArgument("mu sweep needs at least one value".into()));
    }
    for &mu in mus {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mu {mu} must be finite and >= 0"
            )));
        }
    }
    plan.validate()?;
    let mut points = Vec::with_capacity(mus.len());
    for &mu in mus {
        let mut model = backbone.clone();
        model.attach_adapters(rank, &mut Rng::new(adapter_seed))?;
        let run_plan = TrainPlan {
            mode: Mode::Halora,
            mu,
            ..base.clone()
        };
        let log = train(&mut model, &run_plan, data, &Rng::new(train_seed))?;
        let report = evaluate(&model, plan)?;
        points.push(MuPoint {
            mu,
            final_loss: log.final_task_loss(),
            diverged: log.diverged,
            report,
        });
    }
    let levels = points[0].report.noise_levels.clone();
    let spread_per_level = levels
        .iter()
        .map(|&sigma| {
            let means: Vec<f64> = points
                .iter()
                .filter_map(|p| p.report.grand_at(sigma))
                .collect();
            let max = means.iter().cloned().fold(f64::MIN, f64::max);
            let min = means.iter().cloned().fold(f64::MAX, f64::min);
            (sigma, max - min)
        })
        .collect();
    Ok(MuSweep { points, spread_per_level })
}
