//! A 2-layer encoder-style transformer classifier, small enough to pretrain
//! from scratch in seconds yet structured like the real thing: token +
//! learned positional embeddings, pre-norm multi-head self-attention,
//! ReLU feed-forward blocks, residual connections, mean pooling, and a
//! linear head.
//!
//! The weight split mirrors the deployment story this crate simulates:
//!
//! * **analog set** (noisy reads): every frozen projection matrix —
//!   query/key/value/output per attention block, both feed-forward
//!   projections, and the classification head's weight. Of these, the
//!   query/key/value/up/down projections additionally carry adapters;
//! * **digital set** (always exact): embedding tables, layer-norm
//!   parameters, and bias rows. Attention score/value matmuls are
//!   activation math and likewise always exact, as are the adapters
//!   themselves.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::{init_adapter, LoraAdapter};
use crate::model::{
    accuracy, bind_adapters, bind_weights, project, xavier, Adapted, AdapterVars, Dataset, ToyTask,
};
use crate::noise::WeightSet;
use crate::numerics::{fnv1a_64, Matrix, Rng, Tape, Var};
use crate::train::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub seq_len: usize,
    /// Large-magnitude entries planted per analog projection at init.
    /// Real pretrained transformers have heavy-tailed weight matrices, and
    /// the read-noise law scales with each tile's max-abs entry — without
    /// outliers a toy backbone is unrealistically noise-immune.
    pub outlier_count: usize,
    /// Outlier magnitude as a multiple of the matrix's base init bound.
    pub outlier_scale: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab: 64,
            classes: 4,
            dim: 64,
            heads: 4,
            ff: 128,
            layers: 2,
            seq_len: 12,
            outlier_count: 4,
            outlier_scale: 18.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab == 0 || self.classes < 2 || self.layers == 0 || self.ff == 0 || self.seq_len == 0
        {
            return Err(Error::InvalidArgument(
                "vocab/classes/layers/ff/seq_len must all be positive (classes >= 2)".into(),
            ));
        }
        if !(self.outlier_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "outlier_scale must be >= 0, got {}",
                self.outlier_scale
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Names of the analog (noisy-read) matrices, in sorted order: every
    /// projection weight, including the attention output projection and the
    /// classification head's weight.
    pub fn analog_names(&self) -> Vec<String> {
        let mut names = vec!["head.w".to_string()];
        for l in 0..self.layers {
            for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.up", "ff.down"] {
                names.push(format!("layer{l}.{suffix}"));
            }
        }
        names.sort();
        names
    }

    /// The subset of analog matrices that carry adapters: the query, key,
    /// value, up, and down projections of every layer.
    pub fn adapted_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers {
            for suffix in ["attn.wq", "attn.wk", "attn.wv", "ff.up", "ff.down"] {
                names.push(format!("layer{l}.{suffix}"));
            }
        }
        names.sort();
        names
    }
}

/// Frozen backbone (digital + analog weight sets) plus adapters.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub config: TransformerConfig,
    digital: WeightSet,
    analog: WeightSet,
    adapters: BTreeMap<String, LoraAdapter>,
}

impl ToyTransformer {
    /// Randomly initialized, untrained model (no adapters).
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut digital = WeightSet::new();
        let mut analog = WeightSet::new();

        digital.insert(
            "embed.tok".into(),
            rng.gaussian_matrix(config.vocab, d, 0.5),
        );
        digital.insert(
            "embed.pos".into(),
            rng.gaussian_matrix(config.seq_len, d, 0.1),
        );
        for l in 0..config.layers {
            analog.insert(format!("layer{l}.attn.wq"), xavier(rng, d, d));
            analog.insert(format!("layer{l}.attn.wk"), xavier(rng, d, d));
            analog.insert(format!("layer{l}.attn.wv"), xavier(rng, d, d));
            analog.insert(format!("layer{l}.attn.wo"), xavier(rng, d, d));
            analog.insert(format!("layer{l}.ff.up"), xavier(rng, d, config.ff));
            analog.insert(format!("layer{l}.ff.down"), xavier(rng, config.ff, d));
            for ln in ["ln1", "ln2"] {
                digital.insert(format!("layer{l}.{ln}.gain"), ones(1, d));
                digital.insert(format!("layer{l}.{ln}.bias"), Matrix::zeros(1, d));
            }
        }
        digital.insert("final_ln.gain".into(), ones(1, d));
        digital.insert("final_ln.bias".into(), Matrix::zeros(1, d));
        analog.insert("head.w".into(), xavier(rng, d, config.classes));
        digital.insert("head.b".into(), Matrix::zeros(1, config.classes));

        // Heavy tails for the analog set, in name order for determinism.
        for m in analog.values_mut() {
            plant_outliers(m, config.outlier_count, config.outlier_scale, rng);
        }

        Ok(ToyTransformer {
            config,
            digital,
            analog,
            adapters: BTreeMap::new(),
        })
    }

    /// Digital weights (embeddings, norms, attention output, head).
    pub fn digital_weights(&self) -> &WeightSet {
        &self.digital
    }

    /// Forward for one sequence: returns the 1 x classes logit row.
    fn item_logits(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        adapters: &BTreeMap<String, AdapterVars>,
        tokens: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        if tokens.len() != cfg.seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens, model expects {}",
                tokens.len(),
                cfg.seq_len
            )));
        }
        let embedded = tape.embed_rows(vars["embed.tok"], tokens)?;
        let mut x = tape.add(embedded, vars["embed.pos"])?;

        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        for l in 0..cfg.layers {
            let ln1 = tape.layer_norm(
                x,
                vars[&format!("layer{l}.ln1.gain")],
                vars[&format!("layer{l}.ln1.bias")],
            )?;
            let q = project(tape, vars, adapters, ln1, &format!("layer{l}.attn.wq"))?;
            let k = project(tape, vars, adapters, ln1, &format!("layer{l}.attn.wk"))?;
            let v = project(tape, vars, adapters, ln1, &format!("layer{l}.attn.wv"))?;

            let mut contexts = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, scale);
                let attn = tape.row_softmax(scaled);
                contexts.push(tape.matmul(attn, vh)?);
            }
            let ctx = tape.concat_cols(&contexts)?;
            let attn_out = tape.matmul(ctx, vars[&format!("layer{l}.attn.wo")])?;
            x = tape.add(x, attn_out)?;

            let ln2 = tape.layer_norm(
                x,
                vars[&format!("layer{l}.ln2.gain")],
                vars[&format!("layer{l}.ln2.bias")],
            )?;
            let up = project(tape, vars, adapters, ln2, &format!("layer{l}.ff.up"))?;
            let hidden = tape.relu(up);
            let down = project(tape, vars, adapters, hidden, &format!("layer{l}.ff.down"))?;
            x = tape.add(x, down)?;
        }

        let normed = tape.layer_norm(x, vars["final_ln.gain"], vars["final_ln.bias"])?;
        let pooled = tape.mean_rows(normed);
        let logits = tape.matmul(pooled, vars["head.w"])?;
        tape.add(logits, vars["head.b"])
    }

    /// Pretraining forward: every weight is a trainable leaf, no adapters.
    /// Returns the scalar loss and the name -> leaf map for the update step.
    fn pretrain_batch_loss(
        &self,
        tape: &mut Tape,
        items: &[Vec<usize>],
        labels: &[usize],
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        let vars = bind_weights(tape, &self.digital, &self.analog, &self.analog)?;
        let no_adapters = BTreeMap::new();
        let mut rows = Vec::with_capacity(items.len());
        for item in items {
            rows.push(self.item_logits(tape, &vars, &no_adapters, item)?);
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((loss, vars))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("model".into(), "transformer".into());
        ck.meta.insert("vocab".into(), self.config.vocab.to_string());
        ck.meta
            .insert("classes".into(), self.config.classes.to_string());
        ck.meta.insert("dim".into(), self.config.dim.to_string());
        ck.meta.insert("heads".into(), self.config.heads.to_string());
        ck.meta.insert("ff".into(), self.config.ff.to_string());
        ck.meta
            .insert("layers".into(), self.config.layers.to_string());
        ck.meta
            .insert("seq_len".into(), self.config.seq_len.to_string());
        ck.meta
            .insert("outlier_count".into(), self.config.outlier_count.to_string());
        ck.meta
            .insert("outlier_scale".into(), self.config.outlier_scale.to_string());
        for (name, m) in self.digital.iter().chain(self.analog.iter()) {
            ck.matrices.insert(name.clone(), m.clone());
        }
        ck.adapters = self.adapters.clone();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.meta.get("model").map(String::as_str);
        if kind != Some("transformer") {
            return Err(Error::Format(format!(
                "checkpoint holds a `{}` model, expected `transformer`",
                kind.unwrap_or("?")
            )));
        }
        let get = |key: &str| -> Result<usize> {
            ck.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing `{key}`")))
        };
        let get_f64 = |key: &str| -> Result<f64> {
            ck.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing `{key}`")))
        };
        let config = TransformerConfig {
            vocab: get("vocab")?,
            classes: get("classes")?,
            dim: get("dim")?,
            heads: get("heads")?,
            ff: get("ff")?,
            layers: get("layers")?,
            seq_len: get("seq_len")?,
            outlier_count: get("outlier_count")?,
            outlier_scale: get_f64("outlier_scale")?,
        };
        config.validate()?;
        let analog_names = config.analog_names();
        let mut digital = WeightSet::new();
        let mut analog = WeightSet::new();
        for (name, m) in &ck.matrices {
            if analog_names.iter().any(|n| n == name) {
                analog.insert(name.clone(), m.clone());
            } else {
                digital.insert(name.clone(), m.clone());
            }
        }
        for name in &analog_names {
            if !analog.contains_key(name) {
                return Err(Error::Format(format!("checkpoint missing matrix `{name}`")));
            }
        }
        Ok(ToyTransformer {
            config,
            digital,
            analog,
            adapters: ck.adapters.clone(),
        })
    }
}

fn ones(rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = 1.0;
    }
    m
}

/// Overwrites `count` random entries with `±scale` times the matrix's base
/// init bound. Positions may collide; that only thins the tail.
fn plant_outliers(m: &mut Matrix, count: usize, scale: f64, rng: &mut Rng) {
    let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
    let cols = m.cols();
    for _ in 0..count {
        let i = rng.below(m.rows());
        let j = rng.below(cols);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        m.data_mut()[i * cols + j] = sign * scale * bound;
    }
}

impl Adapted for ToyTransformer {
    type Item = Vec<usize>;

    fn analog_weights(&self) -> &WeightSet {
        &self.analog
    }

    fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter> {
        &mut self.adapters
    }

    fn attach_adapters(&mut self, rank: usize, rng: &mut Rng) -> Result<()> {
        let mut adapters = BTreeMap::new();
        for name in self.config.adapted_names() {
            let w = &self.analog[&name];
            adapters.insert(name.clone(), init_adapter(w.rows(), w.cols(), rank, rng)?);
        }
        self.adapters = adapters;
        Ok(())
    }

    fn batch_forward(
        &self,
        tape: &mut Tape,
        view: &WeightSet,
        items: &[Vec<usize>],
    ) -> Result<(Var, Vec<AdapterVars>)> {
        let vars = bind_weights(tape, &self.digital, &self.analog, view)?;
        let (by_name, ordered) = bind_adapters(tape, &self.adapters);
        let mut rows = Vec::with_capacity(items.len());
        for item in items {
            rows.push(self.item_logits(tape, &vars, &by_name, item)?);
        }
        let logits = tape.concat_rows(&rows)?;
        Ok((logits, ordered))
    }
}

/// Pretraining hyperparameters (artifact plumbing; the adaptation phase, not
/// this, is the object of study).
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch: 32,
            lr: 2e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    /// Accuracy on the base task's held-out split.
    pub heldout_accuracy: f64,
}

/// A usable backbone must reach at least this held-out accuracy on its own
/// task; below it, downstream comparisons measure a broken pretrain, not
/// adaptation.
pub const PRETRAIN_ACCURACY_GATE: f64 = 0.9;

/// Zero-shot accuracy on the shifted task must land in this band: above it
/// there is nothing left for adapters to learn, below it the tasks share too
/// little for low-rank adaptation to be the right tool.
pub const ZERO_SHOT_GATE: (f64, f64) = (0.4, 0.7);

/// Trains every weight of a fresh model on the base task's train split with
/// Adam, then freezes. The returned model carries no adapters yet.
///
/// Divergence (non-finite loss) aborts with [`Error::Diverged`].
pub fn pretrain_backbone(
    config: TransformerConfig,
    opts: &PretrainConfig,
    task: &ToyTask,
) -> Result<(ToyTransformer, PretrainSummary)> {
    if task.role != "base" {
        return Err(Error::InvalidArgument(
            "pretraining runs on the base task".into(),
        ));
    }
    if task.train.is_empty() {
        return Err(Error::InvalidArgument("empty pretrain split".into()));
    }
    let mut init_rng = Rng::with_stream(opts.seed, fnv1a_64(b"pretrain-init"));
    let mut model = ToyTransformer::new(config, &mut init_rng)?;
    let mut shuffle_rng = Rng::with_stream(opts.seed, fnv1a_64(b"pretrain-shuffle"));
    let mut optimizer = Optimizer::new(OptimizerKind::default());

    let n = task.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    for _epoch in 0..opts.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(opts.batch) {
            let items: Vec<Vec<usize>> = batch.iter().map(|&i| task.train.items[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| task.train.labels[i]).collect();

            let mut tape = Tape::new();
            let (loss, vars) = model.pretrain_batch_loss(&mut tape, &items, &labels)?;
            last_loss = tape.scalar(loss);
            if !last_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: last_loss,
                });
            }
            let mut grads = tape.backward(loss)?;
            optimizer.begin_step();
            for (name, var) in &vars {
                if let Some(g) = grads.take(*var) {
                    let param = model
                        .digital
                        .get_mut(name)
                        .or_else(|| model.analog.get_mut(name))
                        .expect("leaf names come from the weight maps");
                    optimizer.update(name, param, &g, opts.lr)?;
                }
            }
            step += 1;
        }
    }

    let heldout_accuracy = accuracy(&model, &model.analog.clone(), &task.test)?;
    Ok((
        model,
        PretrainSummary {
            steps: step,
            final_loss: last_loss,
            heldout_accuracy,
        },
    ))
}

/// Convenience for tests and examples: accuracy of `model` on `data` under
/// an ideal (noise-free) read of the analog weights.
pub fn clean_accuracy(model: &ToyTransformer, data: &Dataset<Vec<usize>>) -> Result<f64> {
    accuracy(model, model.analog_weights(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::task::TaskConfig;

    fn tiny_task() -> ToyTask {
        ToyTask::base(
            TaskConfig {
                pretrain_n: 128,
                heldout_n: 64,
                finetune_n: 64,
                test_n: 32,
                ..TaskConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn construction_is_deterministic_and_shapes_check_out() {
        let cfg = TransformerConfig::default();
        let m1 = ToyTransformer::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let m2 = ToyTransformer::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        assert_eq!(m1.analog, m2.analog);
        assert_eq!(m1.digital, m2.digital);
        assert_eq!(m1.analog.len(), 13); // 2 layers x (q,k,v,o,up,down) + head
        assert_eq!(m1.analog["layer0.ff.up"].shape(), (64, 128));
        assert_eq!(m1.digital["embed.tok"].shape(), (64, 64));
    }

    #[test]
    fn untrained_model_sits_near_chance() {
        let task = tiny_task();
        let model = ToyTransformer::new(TransformerConfig::default(), &mut Rng::new(5)).unwrap();
        let acc = clean_accuracy(&model, &task.test).unwrap();
        // 4 classes: chance is 0.25; an untrained net should not beat it by
        // a wide margin.
        assert!(acc < 0.6, "untrained accuracy suspiciously high: {acc}");
    }

    #[test]
    fn fresh_adapters_leave_predictions_bit_for_bit_unchanged() {
        let task = tiny_task();
        let mut model = ToyTransformer::new(TransformerConfig::default(), &mut Rng::new(5)).unwrap();
        let before = clean_accuracy(&model, &task.test).unwrap();
        model.attach_adapters(4, &mut Rng::new(11)).unwrap();
        assert_eq!(model.adapters().len(), 10);
        let after = clean_accuracy(&model, &task.test).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn attention_rows_sum_to_one_through_the_full_forward() {
        // Indirect but complete: softmax values recorded on the tape must be
        // row-stochastic for every head of every layer.
        let task = tiny_task();
        let model = ToyTransformer::new(TransformerConfig::default(), &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let view = model.analog_weights().clone();
        let (_logits, _) = model
            .batch_forward(&mut tape, &view, &task.test.items[..2])
            .unwrap();
        // The forward records one row_softmax per head per item per layer;
        // sweep every node value that is seq_len x seq_len and stochastic.
        let mut softmax_nodes = 0;
        for v in tape.values() {
            if v.shape() == (12, 12) {
                let stochastic = (0..12).all(|i| {
                    let s: f64 = v.row(i).iter().sum();
                    (s - 1.0).abs() < 1e-12 && v.row(i).iter().all(|&p| p >= 0.0)
                });
                if stochastic {
                    softmax_nodes += 1;
                }
            }
        }
        // 2 items x 2 layers x 4 heads = 16 attention maps.
        assert!(softmax_nodes >= 16, "found {softmax_nodes} attention maps");
    }

    #[test]
    fn short_pretraining_run_reduces_loss_and_is_deterministic() {
        let task = tiny_task();
        let opts = PretrainConfig {
            epochs: 2,
            batch: 32,
            lr: 2e-3,
            seed: 3,
        };
        let (m1, s1) = pretrain_backbone(TransformerConfig::default(), &opts, &task).unwrap();
        assert!(s1.final_loss < (4.0_f64).ln(), "loss {}", s1.final_loss);
        assert!(s1.heldout_accuracy > 0.3, "acc {}", s1.heldout_accuracy);

        let (m2, s2) = pretrain_backbone(TransformerConfig::default(), &opts, &task).unwrap();
        assert_eq!(m1.analog, m2.analog);
        assert_eq!(m1.digital, m2.digital);
        assert_eq!(s1.heldout_accuracy, s2.heldout_accuracy);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model_and_digest() {
        let mut model = ToyTransformer::new(TransformerConfig::default(), &mut Rng::new(8)).unwrap();
        model.attach_adapters(4, &mut Rng::new(9)).unwrap();
        let ck = model.to_checkpoint();
        let back = ToyTransformer::from_checkpoint(&ck).unwrap();
        assert_eq!(back.analog, model.analog);
        assert_eq!(back.digital, model.digital);
        assert_eq!(back.adapters, model.adapters);
        assert_eq!(back.to_checkpoint().digest(), ck.digest());
    }

    #[test]
    fn rejects_wrong_length_sequences() {
        let model = ToyTransformer::new(TransformerConfig::default(), &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let view = model.analog_weights().clone();
        let err = model
            .batch_forward(&mut tape, &view, &[vec![0usize; 5]])
            .unwrap_err();
        assert!(err.to_string().contains("expects 12"), "{err}");
    }
}
