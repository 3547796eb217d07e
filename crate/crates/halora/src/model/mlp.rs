//! A small feature-vector classifier: two ReLU hidden layers whose weight
//! matrices sit on the analog set (and carry adapters), with digital biases
//! and a digital linear head.
//!
//! The transformer is the experimental subject; this model exists because it
//! is cheap. Full-batch forwards are two matmuls, so exhaustive
//! finite-difference checks of the whole adaptation stack — noisy view,
//! adapter path, regularizer — run in milliseconds here.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::{init_adapter, LoraAdapter};
use crate::model::{bind_adapters, bind_weights, project, xavier, Adapted, AdapterVars, Dataset};
use crate::noise::WeightSet;
use crate::numerics::{Matrix, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input: 16,
            hidden: 64,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyMlp {
    pub config: MlpConfig,
    digital: WeightSet,
    analog: WeightSet,
    adapters: BTreeMap<String, LoraAdapter>,
}

impl ToyMlp {
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        if config.input == 0 || config.hidden == 0 || config.classes < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs positive input/hidden sizes and at least 2 classes".into(),
            ));
        }
        let mut digital = WeightSet::new();
        let mut analog = WeightSet::new();
        analog.insert("fc1.w".into(), xavier(rng, config.input, config.hidden));
        analog.insert("fc2.w".into(), xavier(rng, config.hidden, config.hidden));
        digital.insert("fc1.b".into(), Matrix::zeros(1, config.hidden));
        digital.insert("fc2.b".into(), Matrix::zeros(1, config.hidden));
        digital.insert("head.w".into(), xavier(rng, config.hidden, config.classes));
        digital.insert("head.b".into(), Matrix::zeros(1, config.classes));
        Ok(ToyMlp {
            config,
            digital,
            analog,
            adapters: BTreeMap::new(),
        })
    }

    /// Gaussian-blob dataset: one isotropic cluster per class, centers drawn
    /// once from the seed's `centers` stream, samples from its `points`
    /// stream. Smaller `spread` means easier classification.
    pub fn blobs(config: &MlpConfig, n: usize, spread: f64, seed: u64) -> Result<Dataset<Vec<f64>>> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty blob dataset".into()));
        }
        let root = Rng::new(seed);
        let mut center_rng = root.named_stream("blob-centers");
        let centers: Vec<Vec<f64>> = (0..config.classes)
            .map(|_| (0..config.input).map(|_| center_rng.gaussian()).collect())
            .collect();
        let mut point_rng = root.named_stream("blob-points");
        let mut items = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % config.classes;
            let item: Vec<f64> = centers[class]
                .iter()
                .map(|&c| c + spread * point_rng.gaussian())
                .collect();
            items.push(item);
            labels.push(class);
        }
        Dataset::new(items, labels)
    }
}

impl Adapted for ToyMlp {
    type Item = Vec<f64>;

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
        for (name, w) in &self.analog {
            adapters.insert(name.clone(), init_adapter(w.rows(), w.cols(), rank, rng)?);
        }
        self.adapters = adapters;
        Ok(())
    }

    fn batch_forward(
        &self,
        tape: &mut Tape,
        view: &WeightSet,
        items: &[Vec<f64>],
    ) -> Result<(Var, Vec<AdapterVars>)> {
        for item in items {
            if item.len() != self.config.input {
                return Err(Error::InvalidArgument(format!(
                    "feature vector of {} values, model expects {}",
                    item.len(),
                    self.config.input
                )));
            }
        }
        let vars = bind_weights(tape, &self.digital, &self.analog, view)?;
        let (by_name, ordered) = bind_adapters(tape, &self.adapters);

        let rows: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
        let x = tape.leaf(Matrix::from_rows(&rows)?);
        let h1 = project(tape, &vars, &by_name, x, "fc1.w")?;
        let h1 = tape.add_row(h1, vars["fc1.b"])?;
        let h1 = tape.relu(h1);
        let h2 = project(tape, &vars, &by_name, h1, "fc2.w")?;
        let h2 = tape.add_row(h2, vars["fc2.b"])?;
        let h2 = tape.relu(h2);
        let logits = tape.matmul(h2, vars["head.w"])?;
        let logits = tape.add_row(logits, vars["head.b"])?;
        Ok((logits, ordered))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::accuracy;

    #[test]
    fn blob_generation_is_deterministic_and_balanced() {
        let cfg = MlpConfig::default();
        let a = ToyMlp::blobs(&cfg, 40, 0.2, 9).unwrap();
        let b = ToyMlp::blobs(&cfg, 40, 0.2, 9).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.labels, b.labels);
        for class in 0..cfg.classes {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 10);
        }
        let c = ToyMlp::blobs(&cfg, 40, 0.2, 10).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn fresh_adapters_do_not_change_the_forward() {
        let cfg = MlpConfig::default();
        let data = ToyMlp::blobs(&cfg, 64, 0.3, 2).unwrap();
        let mut model = ToyMlp::new(cfg, &mut Rng::new(4)).unwrap();
        let before = accuracy(&model, &model.analog_weights().clone(), &data).unwrap();
        model.attach_adapters(4, &mut Rng::new(5)).unwrap();
        let after = accuracy(&model, &model.analog_weights().clone(), &data).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn adapter_gradients_match_finite_differences_through_a_noisy_view() {
        use crate::noise::{noisy_view, NoiseSpec};
        use crate::numerics::gradcheck;

        let cfg = MlpConfig {
            input: 8,
            hidden: 16,
            classes: 3,
        };
        let data = ToyMlp::blobs(&cfg, 6, 0.3, 2).unwrap();
        let mut model = ToyMlp::new(cfg, &mut Rng::new(4)).unwrap();
        model.attach_adapters(2, &mut Rng::new(5)).unwrap();
        // Perturb B away from zero so its gradient path is generic.
        for ad in model.adapters_mut().values_mut() {
            let bump = Rng::new(6).gaussian_matrix(ad.b.rows(), ad.b.cols(), 0.05);
            ad.b = ad.b.add(&bump).unwrap();
        }
        let spec = NoiseSpec::new(0.05, 0).unwrap();
        let view = noisy_view(model.analog_weights(), &spec, &Rng::new(7)).unwrap();

        // Inputs under test: the four adapter factors, in adapter-map order.
        let mut inputs = Vec::new();
        for ad in model.adapters().values() {
            inputs.push(ad.a.clone());
            inputs.push(ad.b.clone());
        }
        let result = gradcheck::check(&inputs, gradcheck::DEFAULT_STEP, |tape, leaves| {
            // The probed adapter factors are the tape leaves themselves;
            // rebuild the forward graph around them each call.
            let vars = bind_weights(tape, &model.digital, &model.analog, &view)?;
            let mut by_name = BTreeMap::new();
            for (i, name) in model.adapters().keys().enumerate() {
                by_name.insert(
                    name.clone(),
                    AdapterVars {
                        a: leaves[2 * i],
                        b: leaves[2 * i + 1],
                    },
                );
            }
            let rows: Vec<&[f64]> = data.items[..6].iter().map(|v| v.as_slice()).collect();
            let x = tape.leaf(Matrix::from_rows(&rows)?);
            let h1 = project(tape, &vars, &by_name, x, "fc1.w")?;
            let h1 = tape.add_row(h1, vars["fc1.b"])?;
            let h1 = tape.relu(h1);
            let h2 = project(tape, &vars, &by_name, h1, "fc2.w")?;
            let h2 = tape.add_row(h2, vars["fc2.b"])?;
            let h2 = tape.relu(h2);
            let logits = tape.matmul(h2, vars["head.w"])?;
            let logits = tape.add_row(logits, vars["head.b"])?;
            tape.softmax_cross_entropy(logits, &data.labels[..6])
        })
        .unwrap();
        assert!(
            result.max_rel_err < 5e-6,
            "max relative error {}",
            result.max_rel_err
        );
    }

    #[test]
    fn rejects_wrong_width_features() {
        let cfg = MlpConfig::default();
        let model = ToyMlp::new(cfg, &mut Rng::new(4)).unwrap();
        let mut tape = Tape::new();
        let err = model
            .batch_forward(&mut tape, &model.analog_weights().clone(), &[vec![0.0; 3]])
            .unwrap_err();
        assert!(err.to_string().contains("expects 16"), "{err}");
    }
}
