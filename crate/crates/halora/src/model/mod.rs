//! Toy models and synthetic tasks.
//!
//! Two small architectures stand in for LLM finetuning: a 2-layer
//! encoder-style [`ToyTransformer`](transformer::ToyTransformer) (the main
//! experimental subject) and a 2-hidden-layer [`ToyMlp`](mlp::ToyMlp) (fast
//! enough for exhaustive finite-difference checks). Both follow the same
//! contract, captured by the [`Adapted`] trait:
//!
//! * a frozen backbone split into an **analog set** (projection matrices
//!   that live on simulated noisy memory) and a **digital set** (embeddings,
//!   norms, biases — always read exactly);
//! * LoRA adapters keyed by analog-matrix name, attached to the designated
//!   projections (a subset of the analog set);
//! * a batch forward that runs against an arbitrary *view* of the analog
//!   set, so the same code path serves clean training, noisy training, and
//!   noisy evaluation.

pub mod mlp;
pub mod task;
pub mod transformer;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::noise::WeightSet;
use crate::numerics::{Matrix, Rng, Tape, Var};

pub use mlp::ToyMlp;
pub use task::{Dataset, ToyTask};
pub use transformer::ToyTransformer;

/// Tape leaves for one adapter, in the order adapters iterate (sorted by
/// layer name). The training loop reads gradients for exactly these vars.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

/// A frozen-backbone model with LoRA adapters on its analog weight set.
pub trait Adapted {
    /// One classified example (token sequence, feature vector, ...).
    type Item: Clone + Send + Sync;

    /// Frozen matrices on simulated analog memory — the only weights read
    /// noise ever touches.
    fn analog_weights(&self) -> &WeightSet;

    /// Adapters keyed by analog-matrix name. Empty until
    /// [`Adapted::attach_adapters`] runs.
    fn adapters(&self) -> &BTreeMap<String, LoraAdapter>;

    fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter>;

    /// Fresh Kaiming/zero adapters of the given rank on the model's
    /// designated projection layers.
    fn attach_adapters(&mut self, rank: usize, rng: &mut Rng) -> Result<()>;

    /// Builds the batch forward graph under `view` — the analog weights as
    /// some read returned them (pass [`Adapted::analog_weights`] itself for
    /// an ideal read). Returns the `items.len() x classes` logit variable
    /// plus the adapter leaves in adapter-map order.
    fn batch_forward(
        &self,
        tape: &mut Tape,
        view: &WeightSet,
        items: &[Self::Item],
    ) -> Result<(Var, Vec<AdapterVars>)>;

    /// Batch mean cross-entropy under `view`; the scalar loss variable plus
    /// adapter leaves for the backward pass.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        view: &WeightSet,
        items: &[Self::Item],
        labels: &[usize],
    ) -> Result<(Var, Vec<AdapterVars>)> {
        let (logits, adapter_vars) = self.batch_forward(tape, view, items)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((loss, adapter_vars))
    }
}

/// Fraction of items whose argmax logit matches the label, under `view`.
/// Deterministic given weights and data; ties resolve to the lowest index.
pub fn accuracy<M: Adapted>(model: &M, view: &WeightSet, data: &Dataset<M::Item>) -> Result<f64> {
    if data.items.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy over an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    // Chunked so each tape binds the weight leaves once per 64 items.
    for (items, labels) in data.chunks(64) {
        let mut tape = Tape::new();
        let (logits, _) = model.batch_forward(&mut tape, view, items)?;
        let values = tape.value(logits);
        for (i, &label) in labels.iter().enumerate() {
            if argmax(values.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.items.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared helper for model constructors: bind every weight (digital and
/// analog-view) as a tape leaf, checking the view covers the analog set.
pub(crate) fn bind_weights(
    tape: &mut Tape,
    digital: &WeightSet,
    analog: &WeightSet,
    view: &WeightSet,
) -> Result<BTreeMap<String, Var>> {
    let mut vars = BTreeMap::new();
    for (name, m) in digital {
        vars.insert(name.clone(), tape.leaf(m.clone()));
    }
    for (name, frozen) in analog {
        let m = view.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("weight view is missing matrix `{name}`"))
        })?;
        if m.shape() != frozen.shape() {
            return Err(Error::ShapeMismatch {
                op: "weight view",
                left: frozen.shape(),
                right: m.shape(),
            });
        }
        vars.insert(name.clone(), tape.leaf(m.clone()));
    }
    Ok(vars)
}

/// Binds adapters as tape leaves in map order; returns both the per-name
/// lookup (for projections) and the ordered list (for gradient readout).
pub(crate) fn bind_adapters(
    tape: &mut Tape,
    adapters: &BTreeMap<String, LoraAdapter>,
) -> (BTreeMap<String, AdapterVars>, Vec<AdapterVars>) {
    let mut by_name = BTreeMap::new();
    let mut ordered = Vec::with_capacity(adapters.len());
    for (name, ad) in adapters {
        let vars = AdapterVars {
            a: tape.leaf(ad.a.clone()),
            b: tape.leaf(ad.b.clone()),
        };
        by_name.insert(name.clone(), vars);
        ordered.push(vars);
    }
    (by_name, ordered)
}

/// Projection `x · W[name]`, plus the adapter path `(x·A)·B` when an adapter
/// is attached to `name`.
pub(crate) fn project(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    adapters: &BTreeMap<String, AdapterVars>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = *vars
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown weight `{name}`")))?;
    let base = tape.matmul(x, w)?;
    match adapters.get(name) {
        Some(ad) => {
            let xa = tape.matmul(x, ad.a)?;
            let low_rank = tape.matmul(xa, ad.b)?;
            tape.add(base, low_rank)
        }
        None => Ok(base),
    }
}

/// Standard per-matrix initializers used by both model constructors.
pub(crate) fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    rng.uniform_matrix(rows, cols, -bound, bound)
}
