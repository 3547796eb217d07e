//! Noise-aware adapter training.
//!
//! The loop trains only the adapter factors; the backbone stays frozen
//! throughout and is read through a *noisy view* that is resampled every
//! `resample_every` steps. On exactly those steps the alignment regularizer
//! `sum over adapters of ‖A·Aᵀ‖_F + ‖Bᵀ·B‖_F` contributes `mu` times its
//! gradient to the adapter update. The regularizer depends on the adapters
//! alone — never on the noise draw or the batch — which is the point: it
//! shrinks the subspaces through which backbone read noise can leak into the
//! adapter update, without needing to know the noise.
//!
//! Per step: forward the batch through the *current* noisy view; on a
//! resample step, draw the next view (used from the following step onward)
//! and fold in the regularizer gradient; update A and B with the optimizer.
//! Plain-LoRA mode is the same loop with a clean view, `mu` forced to 0, and
//! no resample events.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Adapted, Dataset};
use crate::noise::{noisy_view, NoiseSpec};
use crate::numerics::{Matrix, Rng, Tape};

/// Training mode: plain LoRA baseline or noise-aware training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Clean backbone, no regularizer, no resample events. A `mu` or a
    /// training `sigma` in the plan is honored as 0.
    Lora,
    /// Noisy backbone views, periodic resampling, regularizer folded in on
    /// resample steps.
    Halora,
}

/// Adapter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `p ← p − η·g`.
    Sgd,
    /// Adam with bias correction and decoupled weight decay (applied as
    /// `p ← p − η·wd·p` after the moment step; 0 disables it).
    Adam { weight_decay: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { weight_decay: 0.0 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Stateful optimizer over named parameters. Call [`Optimizer::begin_step`]
/// once per training step (it advances the bias-correction clock), then
/// [`Optimizer::update`] for each parameter.
pub struct Optimizer {
    kind: OptimizerKind,
    t: usize,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer update",
                left: param.shape(),
                right: grad.shape(),
            });
        }
        match self.kind {
            OptimizerKind::Sgd => {
                param.axpy(-lr, grad)?;
            }
            OptimizerKind::Adam { weight_decay } => {
                debug_assert!(self.t >= 1, "update before begin_step");
                let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                    m: Matrix::zeros(grad.rows(), grad.cols()),
                    v: Matrix::zeros(grad.rows(), grad.cols()),
                });
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let p = param.data_mut();
                let g = grad.data();
                let m = entry.m.data_mut();
                let v = entry.v.data_mut();
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    if weight_decay != 0.0 {
                        p[i] -= lr * weight_decay * p[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything one training run needs besides the model, data, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: Mode,
    /// Learning rate η.
    pub eta: f64,
    /// Regularizer weight μ.
    pub mu: f64,
    /// Noise-resample (and regularizer) period N, in steps.
    pub resample_every: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Read noise applied to backbone views during training.
    pub noise: NoiseSpec,
    pub optimizer: OptimizerKind,
    /// Hard cap on total steps (stops mid-epoch); `None` runs all epochs.
    pub max_steps: Option<usize>,
    /// Forward task batches through the clean backbone instead of the noisy
    /// view (the views still drive resample events). Off by default: the
    /// noise-aware reading keeps the sampled view installed for every
    /// forward.
    pub clean_forward: bool,
    /// Global-norm gradient clip across all adapter gradients; `None` (the
    /// default) leaves gradients untouched.
    pub grad_clip: Option<f64>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: Mode::Halora,
            eta: 1e-4,
            mu: 0.1,
            resample_every: 400,
            epochs: 3,
            batch: 16,
            noise: NoiseSpec {
                sigma: 0.01,
                tile_rows: 64,
                tile_cols: 64,
                seed: 0,
            },
            optimizer: OptimizerKind::default(),
            max_steps: None,
            clean_forward: false,
            grad_clip: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.eta
            )));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer weight must be >= 0, got {}",
                self.mu
            )));
        }
        if self.resample_every == 0 {
            return Err(Error::InvalidArgument(
                "resample period must be >= 1 step".into(),
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gradient clip must be > 0, got {c}"
                )));
            }
        }
        self.noise.validate()
    }

    /// (μ, σ) actually used: plain-LoRA mode forces both to zero.
    fn effective(&self) -> (f64, f64) {
        match self.mode {
            Mode::Lora => (0.0, 0.0),
            Mode::Halora => (self.mu, self.noise.sigma),
        }
    }
}

/// Value of the alignment regularizer, with the per-adapter breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegLoss {
    /// `Σ (‖A·Aᵀ‖_F + ‖Bᵀ·B‖_F)` over all adapters.
    pub value: f64,
    pub terms: Vec<RegTerm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegTerm {
    pub name: String,
    /// `‖A·Aᵀ‖_F`.
    pub a_term: f64,
    /// `‖Bᵀ·B‖_F`.
    pub b_term: f64,
}

/// Alignment regularizer over a set of adapters. A pure function of the
/// adapter factors: no data term, no noise term — recomputing it before and
/// after any noise injection gives the identical value.
pub fn reg_loss(adapters: &BTreeMap<String, LoraAdapter>) -> Result<RegLoss> {
    let mut terms = Vec::with_capacity(adapters.len());
    let mut value = 0.0;
    for (name, ad) in adapters {
        let a_term = ad.a.matmul(&ad.a.transpose())?.frobenius_norm();
        let b_term = ad.b.transpose().matmul(&ad.b)?.frobenius_norm();
        value += a_term + b_term;
        terms.push(RegTerm {
            name: name.clone(),
            a_term,
            b_term,
        });
    }
    Ok(RegLoss { value, terms })
}

/// Regularizer value plus its gradient w.r.t. each adapter's (A, B), in
/// adapter-map order. Computed by reverse mode on a throwaway graph.
pub fn reg_gradients(
    adapters: &BTreeMap<String, LoraAdapter>,
) -> Result<(f64, Vec<(Matrix, Matrix)>)> {
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(adapters.len());
    let mut total = None;
    for ad in adapters.values() {
        let a = tape.leaf(ad.a.clone());
        let b = tape.leaf(ad.b.clone());
        let at = tape.transpose(a);
        let aat = tape.matmul(a, at)?;
        let a_term = tape.frobenius_norm(aat);
        let bt = tape.transpose(b);
        let btb = tape.matmul(bt, b)?;
        let b_term = tape.frobenius_norm(btb);
        let term = tape.add(a_term, b_term)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
        leaves.push((a, b));
    }
    let total = match total {
        Some(t) => t,
        None => return Ok((0.0, Vec::new())),
    };
    let value = tape.scalar(total);
    let mut grads = tape.backward(total)?;
    let mut out = Vec::with_capacity(leaves.len());
    for (a, b) in leaves {
        let shape_a = tape.value(a).shape();
        let shape_b = tape.value(b).shape();
        out.push((
            grads
                .take(a)
                .unwrap_or_else(|| Matrix::zeros(shape_a.0, shape_a.1)),
            grads
                .take(b)
                .unwrap_or_else(|| Matrix::zeros(shape_b.0, shape_b.1)),
        ));
    }
    Ok((value, out))
}

/// Both sides of the alignment inequality for one adapter and one
/// gradient-gap matrix `dg` (the difference between noisy-view and clean
/// task gradients w.r.t. the composite weight):
///
/// * lhs = `‖A·Aᵀ·dg + dg·Bᵀ·B‖_F` — the exact norm of the gap as it
///   reaches the adapter updates;
/// * rhs = `‖dg‖_F · (‖A·Aᵀ‖_F + ‖Bᵀ·B‖_F)` — the noise-agnostic bound the
///   regularizer minimizes.
///
/// Guaranteed `lhs <= rhs` (triangle inequality plus submultiplicativity of
/// the Frobenius norm).
pub fn bound_check(adapter: &LoraAdapter, dg: &Matrix) -> Result<(f64, f64)> {
    let (d1, d2) = adapter.layer_shape();
    if dg.shape() != (d1, d2) {
        return Err(Error::ShapeMismatch {
            op: "bound_check",
            left: (d1, d2),
            right: dg.shape(),
        });
    }
    let aat = adapter.a.matmul(&adapter.a.transpose())?;
    let btb = adapter.b.transpose().matmul(&adapter.b)?;
    let lhs = aat.matmul(dg)?.add(&dg.matmul(&btb)?)?.frobenius_norm();
    let rhs = dg.frobenius_norm() * (aat.frobenius_norm() + btb.frobenius_norm());
    Ok((lhs, rhs))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    /// Regularizer value, present exactly on the steps where it was applied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reg_loss: Option<f64>,
    /// True on the steps where the noisy view was (re)sampled.
    pub resampled: bool,
}

/// Training log: one record per completed step, plus the step at which the
/// run was aborted if the loss went non-finite.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diverged: Option<usize>,
}

impl TrainLog {
    /// Steps at which the noisy view was sampled.
    pub fn resample_steps(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.resampled)
            .map(|r| r.step)
            .collect()
    }

    /// Steps at which the regularizer contributed to the update.
    pub fn reg_steps(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.reg_loss.is_some())
            .map(|r| r.step)
            .collect()
    }

    pub fn final_task_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.task_loss)
    }

    /// Line-delimited JSON: one record per line; a trailing
    /// `{"diverged":step}` line marks an aborted run.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records always serialize"));
            out.push('\n');
        }
        if let Some(step) = self.diverged {
            out.push_str(&format!("{{\"diverged\":{step}}}\n"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Marker {
            diverged: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            #[allow(dead_code)]
            run_id: String,
        }
        let mut log = TrainLog::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Ok(r) = serde_json::from_str::<StepRecord>(line) {
                log.records.push(r);
            } else if let Ok(m) = serde_json::from_str::<Marker>(line) {
                log.diverged = Some(m.diverged);
            } else if serde_json::from_str::<Header>(line).is_ok() {
                // Provenance stamp written by config-driven callers; the log
                // itself is the record stream.
            } else {
                return Err(Error::Format(format!("unparseable log line: {line}")));
            }
        }
        Ok(log)
    }
}

/// Trains the model's adapters in place and returns the step-by-step log.
///
/// The backbone is never modified; only adapter factors change. `rng`
/// drives two independent streams: batch shuffling and noise sampling.
/// A non-finite loss (or a non-finite adapter after an update) aborts the
/// run — the model keeps the adapters from the last completed healthy step
/// and the log's `diverged` field names the offending step.
pub fn train<M: Adapted>(
    model: &mut M,
    plan: &TrainPlan,
    data: &Dataset<M::Item>,
    rng: &Rng,
) -> Result<TrainLog> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if model.adapters().is_empty() {
        return Err(Error::InvalidArgument(
            "model has no adapters attached".into(),
        ));
    }

    let (mu, sigma) = plan.effective();
    let spec = NoiseSpec {
        sigma,
        ..plan.noise.clone()
    };
    let mut shuffle_rng = rng.named_stream("train-shuffle");
    let mut noise_rng = rng.named_stream("train-noise");

    // Sample the initial noisy view; step 0's forward runs through it.
    let event_rng = noise_rng.split();
    let mut view = noisy_view(model.analog_weights(), &spec, &event_rng)?;

    let names: Vec<String> = model.adapters().keys().cloned().collect();
    let mut optimizer = Optimizer::new(plan.optimizer);
    let mut log = TrainLog::default();
    let mut last_good = model.adapters().clone();
    let total_cap = plan.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    'epochs: for _epoch in 0..plan.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(plan.batch) {
            if step >= total_cap {
                break 'epochs;
            }
            let items: Vec<M::Item> = chunk.iter().map(|&i| data.items[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let forward_view = if plan.clean_forward {
                model.analog_weights()
            } else {
                &view
            };
            let (loss, adapter_vars) = model.batch_loss(&mut tape, forward_view, &items, &labels)?;
            let task_loss = tape.scalar(loss);
            if !task_loss.is_finite() {
                *model.adapters_mut() = last_good;
                log.diverged = Some(step);
                break 'epochs;
            }

            let mut grads = tape.backward(loss)?;
            let mut g: Vec<(Matrix, Matrix)> = adapter_vars
                .iter()
                .map(|av| {
                    let (ra, ca) = tape.value(av.a).shape();
                    let (rb, cb) = tape.value(av.b).shape();
                    (
                        grads.take(av.a).unwrap_or_else(|| Matrix::zeros(ra, ca)),
                        grads.take(av.b).unwrap_or_else(|| Matrix::zeros(rb, cb)),
                    )
                })
                .collect();

            // Resample + regularize on the period boundary. The fresh view
            // takes effect at the next step's forward; the regularizer
            // gradient joins this step's update.
            let mut reg_value = None;
            let mut resampled = false;
            if plan.mode == Mode::Halora && step % plan.resample_every == 0 {
                let event_rng = noise_rng.split();
                view = noisy_view(model.analog_weights(), &spec, &event_rng)?;
                resampled = true;
                let (value, reg_grads) = reg_gradients(model.adapters())?;
                reg_value = Some(value);
                // Skipped entirely at mu == 0 so the unregularized plan is
                // arithmetically identical to plain LoRA, not just close.
                if mu != 0.0 {
                    for ((ga, gb), (ra, rb)) in g.iter_mut().zip(&reg_grads) {
                        ga.axpy(mu, ra)?;
                        gb.axpy(mu, rb)?;
                    }
                }
            }

            if let Some(cap) = plan.grad_clip {
                let total: f64 = g
                    .iter()
                    .map(|(ga, gb)| {
                        ga.frobenius_norm().powi(2) + gb.frobenius_norm().powi(2)
                    })
                    .sum::<f64>()
                    .sqrt();
                if total > cap {
                    let s = cap / total;
                    for (ga, gb) in &mut g {
                        *ga = ga.scale(s);
                        *gb = gb.scale(s);
                    }
                }
            }

            optimizer.begin_step();
            for (i, name) in names.iter().enumerate() {
                let ad = model
                    .adapters_mut()
                    .get_mut(name)
                    .expect("adapter names are stable during training");
                optimizer.update(&format!("{name}.a"), &mut ad.a, &g[i].0, plan.eta)?;
                optimizer.update(&format!("{name}.b"), &mut ad.b, &g[i].1, plan.eta)?;
            }

            let healthy = model
                .adapters()
                .values()
                .all(|ad| ad.a.all_finite() && ad.b.all_finite());
            if !healthy {
                *model.adapters_mut() = last_good;
                log.diverged = Some(step);
                break 'epochs;
            }
            last_good = model.adapters().clone();

            log.records.push(StepRecord {
                step,
                task_loss,
                reg_loss: reg_value,
                resampled,
            });
            step += 1;
        }
    }
    Ok(log)
}
