//! Synthetic sequence-classification tasks.
//!
//! Stand-ins for "pretrain corpus" and "downstream task" that are learnable
//! in seconds yet leave a real adaptation gap:
//!
//! * the vocabulary's low range is split into per-class **signal token
//!   sets** (4 tokens per class by default); the rest of the vocabulary is
//!   neutral background;
//! * each sequence carries a fixed number of signal tokens from its class's
//!   set at random positions — the label is recoverable only through the
//!   signal tokens;
//! * the **downstream task** rotates the partition: class `c`'s new set is
//!   the second half of its old set plus the first half of class `c+1`'s.
//!   Every signal token changes nothing or moves to the neighboring class,
//!   the new sets stay disjoint, and a backbone trained on the old partition
//!   sees exactly half of each sequence's evidence point at the old class
//!   and half at its neighbor — so zero-shot accuracy sits near 50% while a
//!   finetuned model can recover essentially all of it.
//!
//! Everything regenerates bit-identically from `(config, seed)`; datasets
//! are cheap enough to never cache.

use crate::error::{Error, Result};
use crate::numerics::{fnv1a_64, Rng};

/// Labeled examples; `T` is `Vec<usize>` (token ids) for sequence tasks and
/// `Vec<f64>` (features) for the MLP task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub items: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T> Dataset<T> {
    pub fn new(items: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} items vs {} labels",
                items.len(),
                labels.len()
            )));
        }
        Ok(Dataset { items, labels })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Iterate `(items, labels)` slices of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (&[T], &[usize])> {
        self.items
            .chunks(size)
            .zip(self.labels.chunks(size))
    }
}

/// Generation parameters for the sequence tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Signal tokens owned by each class (must be even, so the shifted
    /// partition can split sets in half).
    pub signals_per_class: usize,
    /// Signal tokens planted per sequence (odd keeps zero-shot evidence
    /// tie-free under the half-rotated partition).
    pub signal_count: usize,
    /// Probability that a background slot carries a signal token of some
    /// *other* class — contested evidence that shrinks decision margins.
    pub distractor_prob: f64,
    /// Pretrain-split size (base task).
    pub pretrain_n: usize,
    /// Held-out base-distribution size (backbone calibration gate).
    pub heldout_n: usize,
    /// Finetune-split size (shifted task).
    pub finetune_n: usize,
    /// Test-split size (shifted task).
    pub test_n: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 4,
            vocab: 64,
            seq_len: 12,
            signals_per_class: 4,
            signal_count: 5,
            distractor_prob: 0.0,
            pretrain_n: 4096,
            heldout_n: 512,
            finetune_n: 12800,
            test_n: 512,
        }
    }
}

impl TaskConfig {
    /// First background token id; signal ids are `0 .. signal_region()`.
    pub fn signal_region(&self) -> usize {
        self.classes * self.signals_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.signals_per_class == 0 || self.signals_per_class % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "signals_per_class must be even and positive, got {}",
                self.signals_per_class
            )));
        }
        if self.signal_region() >= self.vocab {
            return Err(Error::InvalidArgument(format!(
                "vocab {} leaves no background tokens beyond {} signal tokens",
                self.vocab,
                self.signal_region()
            )));
        }
        if self.signal_count == 0 || self.signal_count > self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "signal_count {} must be in 1..={}",
                self.signal_count, self.seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::InvalidArgument(format!(
                "distractor_prob must be in [0,1], got {}",
                self.distractor_prob
            )));
        }
        Ok(())
    }
}

/// One sequence-classification task: a label function (per-class signal
/// token sets) plus train/test splits drawn from it.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: TaskConfig,
    /// Generation seed; splits and label function regenerate bit-identically
    /// from `(config, seed, role)`.
    pub seed: u64,
    /// `"base"` for the pretrain task, `"shifted"` for the downstream task.
    pub role: String,
    /// `signal_sets[c]` are the token ids that vote for class `c`.
    pub signal_sets: Vec<Vec<usize>>,
    pub train: Dataset<Vec<usize>>,
    pub test: Dataset<Vec<usize>>,
}

impl ToyTask {
    /// The base (pretrain) task: class `c` owns the contiguous token block
    /// `[c*s, (c+1)*s)`. Train/test splits are disjoint by construction.
    pub fn base(config: TaskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = config.signals_per_class;
        let signal_sets: Vec<Vec<usize>> = (0..config.classes)
            .map(|c| (c * s..(c + 1) * s).collect())
            .collect();
        let (train, test) = sample_splits(
            &config,
            &signal_sets,
            config.pretrain_n,
            config.heldout_n,
            config.signal_count,
            config.distractor_prob,
            seed,
            "base",
        )?;
        Ok(ToyTask {
            config,
            seed,
            role: "base".into(),
            signal_sets,
            train,
            test,
        })
    }

    /// Extra evaluation split from this task's label function with its own
    /// difficulty knobs — e.g. fewer signal tokens or added distractors.
    /// Deterministic in `(self.config, self.seed, name, seed)`.
    pub fn variant_dataset(
        &self,
        name: &str,
        signal_count: usize,
        distractor_prob: f64,
        n: usize,
        seed: u64,
    ) -> Result<Dataset<Vec<usize>>> {
        if signal_count == 0 || signal_count > self.config.seq_len {
            return Err(Error::InvalidArgument(format!(
                "signal_count {signal_count} must be in 1..={}",
                self.config.seq_len
            )));
        }
        let mut rng = Rng::with_stream(
            self.seed ^ seed.rotate_left(17),
            fnv1a_64(format!("variant:{}:{name}", self.role).as_bytes()),
        );
        sample_dataset(
            &self.config,
            &self.signal_sets,
            n,
            signal_count,
            distractor_prob,
            &mut rng,
            &mut Vec::new(),
        )
    }
}

/// The downstream task: rotate the base partition by half a set. Class `c`'s
/// new signal set is the second half of base set `c` plus the first half of
/// base set `c+1` (circularly). The new sets are disjoint and cover the same
/// tokens; splits are freshly sampled under `shift_seed`.
pub fn make_shifted_task(base: &ToyTask, shift_seed: u64) -> Result<ToyTask> {
    if base.role != "base" {
        return Err(Error::InvalidArgument(
            "make_shifted_task expects the base task".into(),
        ));
    }
    let config = base.config.clone();
    let c = config.classes;
    let half = config.signals_per_class / 2;
    let signal_sets: Vec<Vec<usize>> = (0..c)
        .map(|cls| {
            let mut set: Vec<usize> = base.signal_sets[cls][half..].to_vec();
            set.extend_from_slice(&base.signal_sets[(cls + 1) % c][..half]);
            set
        })
        .collect();
    let (train, test) = sample_splits(
        &config,
        &signal_sets,
        config.finetune_n,
        config.test_n,
        config.signal_count,
        config.distractor_prob,
        shift_seed,
        "shifted",
    )?;
    Ok(ToyTask {
        config,
        seed: shift_seed,
        role: "shifted".into(),
        signal_sets,
        train,
        test,
    })
}

/// The dataset family the robustness harness scores: the shifted task's
/// held-out split plus two harder variants with fewer signal tokens and a
/// third of positions replaced by distractors. The variants probe whether
/// an adapter generalizes past the exact training distribution; their names
/// seed their generation, so renaming one changes its contents.
pub fn robustness_datasets(shifted: &ToyTask) -> Result<Vec<(String, Dataset<Vec<usize>>)>> {
    Ok(vec![
        ("main".to_string(), shifted.test.clone()),
        (
            "s4d35".to_string(),
            shifted.variant_dataset("s4d35", 4, 0.35, 512, 1)?,
        ),
        (
            "s3d35".to_string(),
            shifted.variant_dataset("s3d35", 3, 0.35, 512, 1)?,
        ),
    ])
}

/// Train + test splits that share no sequence (test draws that collide with
/// train are rejected and redrawn).
#[allow(clippy::too_many_arguments)]
fn sample_splits(
    config: &TaskConfig,
    signal_sets: &[Vec<usize>],
    train_n: usize,
    test_n: usize,
    signal_count: usize,
    distractor_prob: f64,
    seed: u64,
    role: &str,
) -> Result<(Dataset<Vec<usize>>, Dataset<Vec<usize>>)> {
    let mut train_rng = Rng::with_stream(seed, fnv1a_64(format!("{role}-train").as_bytes()));
    let train = sample_dataset(
        config,
        signal_sets,
        train_n,
        signal_count,
        distractor_prob,
        &mut train_rng,
        &mut Vec::new(),
    )?;
    let mut test_rng = Rng::with_stream(seed, fnv1a_64(format!("{role}-test").as_bytes()));
    let mut taken: Vec<Vec<usize>> = train.items.clone();
    let test = sample_dataset(
        config,
        signal_sets,
        test_n,
        signal_count,
        distractor_prob,
        &mut test_rng,
        &mut taken,
    )?;
    Ok((train, test))
}

/// Draws `n` class-balanced sequences. Any draw equal to a sequence in
/// `taken` is rejected and redrawn (bounded retries); accepted items are
/// appended to `taken`.
fn sample_dataset(
    config: &TaskConfig,
    signal_sets: &[Vec<usize>],
    n: usize,
    signal_count: usize,
    distractor_prob: f64,
    rng: &mut Rng,
    taken: &mut Vec<Vec<usize>>,
) -> Result<Dataset<Vec<usize>>> {
    let mut items = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % config.classes;
        let mut sequence = None;
        for _attempt in 0..100 {
            let candidate = sample_sequence(
                config,
                signal_sets,
                class,
                signal_count,
                distractor_prob,
                rng,
            );
            if !taken.contains(&candidate) {
                sequence = Some(candidate);
                break;
            }
        }
        let sequence = sequence.ok_or_else(|| {
            Error::InvalidArgument(
                "could not draw a fresh sequence in 100 tries; task space too small".into(),
            )
        })?;
        taken.push(sequence.clone());
        items.push(sequence);
        labels.push(class);
    }
    Dataset::new(items, labels)
}

fn sample_sequence(
    config: &TaskConfig,
    signal_sets: &[Vec<usize>],
    class: usize,
    signal_count: usize,
    distractor_prob: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    // Choose the signal positions: partial Fisher-Yates over 0..seq_len.
    let mut positions: Vec<usize> = (0..config.seq_len).collect();
    for slot in 0..signal_count {
        let pick = slot + rng.below(config.seq_len - slot);
        positions.swap(slot, pick);
    }
    let mut is_signal = vec![false; config.seq_len];
    for &p in &positions[..signal_count] {
        is_signal[p] = true;
    }

    let background = config.vocab - config.signal_region();
    let set = &signal_sets[class];
    (0..config.seq_len)
        .map(|pos| {
            if is_signal[pos] {
                set[rng.below(set.len())]
            } else if distractor_prob > 0.0 && rng.uniform() < distractor_prob {
                // Contested evidence: a signal token of some other class.
                let other = (class + 1 + rng.below(config.classes - 1)) % config.classes;
                signal_sets[other][rng.below(signal_sets[other].len())]
            } else {
                config.signal_region() + rng.below(background)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TaskConfig {
        TaskConfig {
            pretrain_n: 64,
            heldout_n: 32,
            finetune_n: 64,
            test_n: 32,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn base_signal_sets_partition_the_signal_region() {
        let task = ToyTask::base(small_config(), 1).unwrap();
        let mut seen = vec![false; task.config.signal_region()];
        for set in &task.signal_sets {
            assert_eq!(set.len(), 4);
            for &tok in set {
                assert!(!seen[tok], "token {tok} in two sets");
                seen[tok] = true;
            }
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn shifted_sets_are_disjoint_and_half_rotated() {
        let base = ToyTask::base(small_config(), 1).unwrap();
        let shifted = make_shifted_task(&base, 7).unwrap();
        let mut seen = vec![false; base.config.signal_region()];
        for (c, set) in shifted.signal_sets.iter().enumerate() {
            // Second half of old set c, first half of old set c+1.
            assert_eq!(set, &vec![4 * c + 2, 4 * c + 3, (4 * (c + 1)) % 16, (4 * (c + 1) + 1) % 16]);
            for &tok in set {
                assert!(!seen[tok], "token {tok} in two shifted sets");
                seen[tok] = true;
            }
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn sequences_have_expected_shape_and_signal_count() {
        let task = ToyTask::base(small_config(), 3).unwrap();
        for (item, &label) in task.train.items.iter().zip(&task.train.labels) {
            assert_eq!(item.len(), task.config.seq_len);
            let signals = item
                .iter()
                .filter(|&&t| task.signal_sets[label].contains(&t))
                .count();
            // Exactly signal_count planted; background never collides with
            // the label's own set when distractor_prob is 0.
            assert_eq!(signals, task.config.signal_count);
        }
    }

    #[test]
    fn labels_are_class_balanced() {
        let task = ToyTask::base(small_config(), 4).unwrap();
        let mut counts = vec![0usize; task.config.classes];
        for &l in &task.train.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 64 / 4));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = ToyTask::base(small_config(), 11).unwrap();
        let b = ToyTask::base(small_config(), 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let sa = make_shifted_task(&a, 5).unwrap();
        let sb = make_shifted_task(&b, 5).unwrap();
        assert_eq!(sa.train, sb.train);
        assert_eq!(sa.test, sb.test);
    }

    #[test]
    fn different_seeds_give_different_data() {
        let a = ToyTask::base(small_config(), 1).unwrap();
        let b = ToyTask::base(small_config(), 2).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn splits_share_no_sequence() {
        let task = ToyTask::base(small_config(), 9).unwrap();
        for item in &task.test.items {
            assert!(!task.train.items.contains(item));
        }
    }

    #[test]
    fn variant_dataset_is_deterministic_and_respects_knobs() {
        let base = ToyTask::base(small_config(), 2).unwrap();
        let shifted = make_shifted_task(&base, 3).unwrap();
        let v1 = shifted.variant_dataset("stress", 3, 0.1, 40, 5).unwrap();
        let v2 = shifted.variant_dataset("stress", 3, 0.1, 40, 5).unwrap();
        assert_eq!(v1, v2);
        let other = shifted.variant_dataset("dense", 7, 0.0, 40, 5).unwrap();
        assert_ne!(v1, other);
        for (item, &label) in other.items.iter().zip(&other.labels) {
            let signals = item
                .iter()
                .filter(|&&t| shifted.signal_sets[label].contains(&t))
                .count();
            assert_eq!(signals, 7);
        }
    }

    #[test]
    fn config_validation_catches_degenerate_setups() {
        let mut c = small_config();
        c.signal_count = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.signal_count = 13;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.signals_per_class = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.vocab = 16;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.distractor_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shifting_a_shifted_task_is_rejected() {
        let base = ToyTask::base(small_config(), 1).unwrap();
        let shifted = make_shifted_task(&base, 2).unwrap();
        assert!(make_shifted_task(&shifted, 3).is_err());
    }
}
