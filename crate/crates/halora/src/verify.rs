//! Runtime verification suites.
//!
//! Every analytic result the trainer leans on — tape gradients, the factored
//! gradient identity, the first-order update expansion, the alignment bound,
//! the block noise statistics, tile reassembly — is re-checked here against
//! an independent oracle (central finite differences, direct dense algebra,
//! Monte Carlo estimation, or bit comparison). The checks live in the
//! library rather than the test tree so the `verify` command can run them in
//! any build, and so integration tests can invoke them with their own
//! parameters.
//!
//! All checks are deterministic: randomness comes only from the caller's
//! seed, never from the clock.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lora::{lora_grads, update_product_remainder, LoraAdapter};
use crate::model::mlp::{MlpConfig, ToyMlp};
use crate::model::Adapted;
use crate::noise::{concatenate, inject_noise, split, NoiseSpec};
use crate::numerics::gradcheck::DEFAULT_STEP;
use crate::numerics::{Matrix, Rng, Tape, Var};
use crate::train::bound_check;

/// Seed used when the caller does not pick one.
pub const DEFAULT_SEED: u64 = 17;
/// Relative-error ceiling for finite-difference gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Shape instances per operation in the gradient suite.
pub const GRAD_SHAPES_PER_OP: usize = 5;
/// Entry-gap ceiling for the factored gradient identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
/// Gap ceiling between the update remainder and its closed form.
pub const REMAINDER_TOLERANCE: f64 = 1e-12;
/// Relative ceiling for the remainder's quadratic step scaling.
pub const REMAINDER_SCALING_TOLERANCE: f64 = 1e-10;
/// Random instances for the identity and remainder checks.
pub const IDENTITY_INSTANCES: usize = 20;
/// Random factor/gradient triples for the alignment bound.
pub const BOUND_TRIPLES: usize = 1000;
/// Monte Carlo draws for the noise statistics check.
pub const NOISE_DRAWS: usize = 10_000;
/// Allowed relative deviation of the measured per-tile noise std.
pub const NOISE_STD_BAND: f64 = 0.03;
/// Allowed per-tile noise mean, in standard errors.
pub const NOISE_MEAN_SIGMAS: f64 = 3.0;

/// One verification suite; `all` chains every other suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Finite-difference checks of every tape operation plus the full model
    /// loss, the factored gradient identity, and the update remainder.
    Gradients,
    /// The alignment inequality over random factor/gradient triples.
    Bound,
    /// Monte Carlo statistics of the block read-noise model.
    Noise,
    /// Bit-exact tile split/reassembly across awkward shapes.
    Roundtrip,
    /// Everything above.
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" | "gradients" => Ok(Suite::Gradients),
            "bound" => Ok(Suite::Bound),
            "noise" => Ok(Suite::Noise),
            "roundtrip" => Ok(Suite::Roundtrip),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown verify suite '{other}' (expected grad, bound, noise, roundtrip, or all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::Gradients => "grad",
            Suite::Bound => "bound",
            Suite::Noise => "noise",
            Suite::Roundtrip => "roundtrip",
            Suite::All => "all",
        };
        f.write_str(name)
    }
}

/// Outcome of one verified property.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    /// What was checked, phrased as the property itself.
    pub name: String,
    /// The measured quantity, human-readable.
    pub observed: String,
    /// The acceptance threshold the measurement was held to.
    pub tolerance: String,
    /// Whether the measurement met the threshold.
    pub passed: bool,
}

impl PropertyResult {
    fn new(name: impl Into<String>, observed: String, tolerance: String, passed: bool) -> Self {
        PropertyResult {
            name: name.into(),
            observed,
            tolerance,
            passed,
        }
    }

    /// One report line: `[PASS] name: observed (tolerance)`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "[{tag}] {}: {} (limit {})",
            self.name, self.observed, self.tolerance
        )
    }
}

/// All property results from one `verify` run.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub results: Vec<PropertyResult>,
}

impl VerifyOutcome {
    /// True when every property met its threshold.
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Number of failed properties.
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }

    /// One line per property plus a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&r.line());
            out.push('\n');
        }
        let failed = self.failures();
        if failed == 0 {
            out.push_str(&format!("all {} properties passed\n", self.results.len()));
        } else {
            out.push_str(&format!(
                "{failed} of {} properties FAILED\n",
                self.results.len()
            ));
        }
        out
    }
}

/// Runs one suite with the given seed.
pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyOutcome> {
    let mut results = Vec::new();
    match suite {
        Suite::Gradients => push_gradient_suite(&mut results, seed)?,
        Suite::Bound => results.push(check_alignment_bound(seed, BOUND_TRIPLES)?),
        Suite::Noise => results.extend(check_noise_statistics(seed, NOISE_DRAWS)?),
        Suite::Roundtrip => results.extend(check_tiling_roundtrip(seed)?),
        Suite::All => {
            push_gradient_suite(&mut results, seed)?;
            results.push(check_alignment_bound(seed, BOUND_TRIPLES)?);
            results.extend(check_noise_statistics(seed, NOISE_DRAWS)?);
            results.extend(check_tiling_roundtrip(seed)?);
        }
    }
    Ok(VerifyOutcome { results })
}

fn push_gradient_suite(results: &mut Vec<PropertyResult>, seed: u64) -> Result<()> {
    results.extend(check_op_gradients(
        seed,
        GRAD_SHAPES_PER_OP,
        DEFAULT_STEP,
        GRAD_TOLERANCE,
    )?);
    results.push(check_model_gradient(seed, DEFAULT_STEP, GRAD_TOLERANCE)?);
    results.push(check_factor_gradient_identity(
        seed,
        IDENTITY_INSTANCES,
        IDENTITY_TOLERANCE,
    )?);
    results.extend(check_update_remainder(
        seed,
        IDENTITY_INSTANCES,
        REMAINDER_TOLERANCE,
        REMAINDER_SCALING_TOLERANCE,
    )?);
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// `max|a - b| / max(scale(a), scale(b), 1e-8)` over entries.
fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
    let gap = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    gap / a.max_abs().max(b.max_abs()).max(1e-8)
}

/// Largest absolute entry difference.
fn entry_gap(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Pushes every entry at least `margin` away from zero, preserving sign.
/// Keeps finite differences well clear of the rectifier kink.
fn away_from_zero(m: &mut Matrix, margin: f64) {
    for v in m.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> (usize, usize) {
    let span = hi - lo + 1;
    (
        lo + rng.below(span),
        lo + rng.below(span),
    )
}

/// Checks every differentiable tape operation against central finite
/// differences over `shapes_per_op` random shapes. Non-scalar outputs are
/// contracted through a fixed random matrix and the Frobenius norm so the
/// scalar depends on every output entry with generic weights.
pub fn check_op_gradients(
    seed: u64,
    shapes_per_op: usize,
    h: f64,
    tolerance: f64,
) -> Result<Vec<PropertyResult>> {
    use crate::numerics::gradcheck::check_inputs;

    // Contract `out` (rows x cols) to a scalar through aux leaf `r`.
    let contract = |t: &mut Tape, out: Var, r: Var| -> Result<Var> {
        let mixed = t.matmul(out, r)?;
        Ok(t.frobenius_norm(mixed))
    };

    struct OpCase {
        name: &'static str,
        // Runs one random instance, returning its worst relative error.
        run: Box<dyn Fn(&mut Rng, f64) -> Result<f64>>,
    }

    let cases: Vec<OpCase> = vec![
        OpCase {
            name: "matmul",
            run: Box::new(move |rng, h| {
                let (m, k) = dims(rng, 2, 6);
                let (n, _) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, k, -1.0, 1.0);
                let b = rng.uniform_matrix(k, n, -1.0, 1.0);
                let r = check_inputs(&[a, b], &[0, 1], h, |t, v| {
                    let c = t.matmul(v[0], v[1])?;
                    Ok(t.frobenius_norm(c))
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "transpose",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(m, 3, -1.0, 1.0);
                let r = check_inputs(&[a, mix], &[0], h, |t, v| {
                    let c = t.transpose(v[0]);
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "add",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let b = rng.uniform_matrix(m, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, b, mix], &[0, 1], h, |t, v| {
                    let c = t.add(v[0], v[1])?;
                    contract(t, c, v[2])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "sub",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let b = rng.uniform_matrix(m, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, b, mix], &[0, 1], h, |t, v| {
                    let c = t.sub(v[0], v[1])?;
                    contract(t, c, v[2])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "scale",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let c = -0.8 + 2.1 * rng.uniform();
                let r = check_inputs(&[a, mix], &[0], h, move |t, v| {
                    let s = t.scale(v[0], c);
                    contract(t, s, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "add_row",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let row = rng.uniform_matrix(1, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, row, mix], &[0, 1], h, |t, v| {
                    let c = t.add_row(v[0], v[1])?;
                    contract(t, c, v[2])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "relu",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let mut a = rng.uniform_matrix(m, n, -1.0, 1.0);
                // A finite-difference step must not cross the kink.
                away_from_zero(&mut a, 0.1);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, mix], &[0], h, |t, v| {
                    let c = t.relu(v[0]);
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "row_softmax",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -2.0, 2.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, mix], &[0], h, |t, v| {
                    let c = t.row_softmax(v[0]);
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "layer_norm",
            run: Box::new(move |rng, h| {
                let m = 2 + rng.below(5);
                let n = 3 + rng.below(4);
                let x = rng.uniform_matrix(m, n, -1.0, 1.0);
                let gain = rng.uniform_matrix(1, n, 0.5, 1.5);
                let bias = rng.uniform_matrix(1, n, -0.5, 0.5);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[x, gain, bias, mix], &[0, 1, 2], h, |t, v| {
                    let c = t.layer_norm(v[0], v[1], v[2])?;
                    contract(t, c, v[3])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "embed_rows",
            run: Box::new(move |rng, h| {
                let vocab = 5 + rng.below(5);
                let d = 2 + rng.below(4);
                let table = rng.uniform_matrix(vocab, d, -1.0, 1.0);
                let len = 4 + rng.below(3);
                let mut ids: Vec<usize> =
                    (0..len).map(|_| rng.below(vocab)).collect();
                // Force a repeat so adjoint accumulation over rows is exercised.
                ids[len - 1] = ids[0];
                let mix = rng.uniform_matrix(d, 3, -1.0, 1.0);
                let r = check_inputs(&[table, mix], &[0], h, move |t, v| {
                    let c = t.embed_rows(v[0], &ids)?;
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "mean_rows",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, mix], &[0], h, |t, v| {
                    let c = t.mean_rows(v[0]);
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "concat_rows",
            run: Box::new(move |rng, h| {
                let n = 2 + rng.below(4);
                let (m1, m2, m3) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
                let a = rng.uniform_matrix(m1, n, -1.0, 1.0);
                let b = rng.uniform_matrix(m2, n, -1.0, 1.0);
                let c = rng.uniform_matrix(m3, n, -1.0, 1.0);
                let mix = rng.uniform_matrix(n, 3, -1.0, 1.0);
                let r = check_inputs(&[a, b, c, mix], &[0, 1, 2], h, |t, v| {
                    let cat = t.concat_rows(&[v[0], v[1], v[2]])?;
                    contract(t, cat, v[3])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "concat_cols",
            run: Box::new(move |rng, h| {
                let m = 2 + rng.below(4);
                let n1 = 2 + rng.below(3);
                let n2 = 2 + rng.below(3);
                let a = rng.uniform_matrix(m, n1, -1.0, 1.0);
                let b = rng.uniform_matrix(m, n2, -1.0, 1.0);
                let mix = rng.uniform_matrix(n1 + n2, 3, -1.0, 1.0);
                let r = check_inputs(&[a, b, mix], &[0, 1], h, |t, v| {
                    let cat = t.concat_cols(&[v[0], v[1]])?;
                    contract(t, cat, v[2])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "slice_cols",
            run: Box::new(move |rng, h| {
                let m = 2 + rng.below(4);
                let n = 4 + rng.below(3);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let width = n - 2;
                let mix = rng.uniform_matrix(width, 3, -1.0, 1.0);
                let r = check_inputs(&[a, mix], &[0], h, move |t, v| {
                    let c = t.slice_cols(v[0], 1, width)?;
                    contract(t, c, v[1])
                })?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "frobenius_norm",
            run: Box::new(move |rng, h| {
                let (m, n) = dims(rng, 2, 6);
                let a = rng.uniform_matrix(m, n, -1.0, 1.0);
                let r = check_inputs(&[a], &[0], h, |t, v| Ok(t.frobenius_norm(v[0])))?;
                Ok(r.max_rel_err)
            }),
        },
        OpCase {
            name: "softmax_cross_entropy",
            run: Box::new(move |rng, h| {
                let m = 2 + rng.below(5);
                let classes = 2 + rng.below(4);
                let logits = rng.uniform_matrix(m, classes, -2.0, 2.0);
                let labels: Vec<usize> = (0..m)
                    .map(|_| rng.below(classes))
                    .collect();
                let r = check_inputs(&[logits], &[0], h, move |t, v| {
                    t.softmax_cross_entropy(v[0], &labels)
                })?;
                Ok(r.max_rel_err)
            }),
        },
    ];

    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let mut rng = Rng::new(seed).named_stream(case.name);
        let mut worst = 0.0_f64;
        for _ in 0..shapes_per_op {
            worst = worst.max((case.run)(&mut rng, h)?);
        }
        results.push(PropertyResult::new(
            format!("gradient of {}", case.name),
            format!("max rel err {worst:.3e} over {shapes_per_op} random shapes"),
            format!("{tolerance:.0e}"),
            worst <= tolerance,
        ));
    }
    Ok(results)
}

/// Finite-difference check of the full model loss gradient with respect to
/// every adapter factor, through a noisy backbone view — the exact gradient
/// path the trainer uses.
pub fn check_model_gradient(seed: u64, h: f64, tolerance: f64) -> Result<PropertyResult> {
    let config = MlpConfig {
        input: 6,
        hidden: 10,
        classes: 3,
    };
    let mut model = ToyMlp::new(config.clone(), &mut Rng::new(seed ^ 0x51))?;
    model.attach_adapters(2, &mut Rng::new(seed ^ 0x52))?;
    // Fresh adapters hold a zero second factor, which would zero out half the
    // gradient terms; randomize both factors so every term is exercised.
    {
        let mut rng = Rng::new(seed ^ 0x53);
        for adapter in model.adapters_mut().values_mut() {
            let (ar, ac) = adapter.a.shape();
            let (br, bc) = adapter.b.shape();
            adapter.a = rng.gaussian_matrix(ar, ac, 0.4);
            adapter.b = rng.gaussian_matrix(br, bc, 0.4);
        }
    }
    let spec = NoiseSpec::with_tiles(0.02, 8, 8, 0)?;
    let view = crate::noise::noisy_view(model.analog_weights(), &spec, &Rng::new(seed ^ 0x54))?;

    let data = ToyMlp::blobs(&config, 12, 0.6, seed ^ 0x55)?;
    let items = data.items.clone();
    let labels = data.labels.clone();

    // Analytic gradients for every adapter factor, in adapter-map order.
    let mut tape = Tape::new();
    let (loss, adapter_vars) = model.batch_loss(&mut tape, &view, &items, &labels)?;
    let grads = tape.backward(loss)?;
    let names: Vec<String> = model.adapters().keys().cloned().collect();
    let mut analytic: Vec<(Matrix, Matrix)> = Vec::with_capacity(names.len());
    for (name, vars) in names.iter().zip(&adapter_vars) {
        let shape = |m: &Matrix| (m.rows(), m.cols());
        let (ar, ac) = shape(&model.adapters()[name].a);
        let (br, bc) = shape(&model.adapters()[name].b);
        let ga = grads
            .get(vars.a)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(ar, ac));
        let gb = grads
            .get(vars.b)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(br, bc));
        analytic.push((ga, gb));
    }

    let eval = |model: &ToyMlp| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = model.batch_loss(&mut tape, &view, &items, &labels)?;
        Ok(tape.scalar(loss))
    };

    let mut worst = 0.0_f64;
    for (slot, name) in names.iter().enumerate() {
        for factor in 0..2 {
            let (rows, cols) = {
                let adapter = &model.adapters()[name];
                let m = if factor == 0 { &adapter.a } else { &adapter.b };
                (m.rows(), m.cols())
            };
            let mut numeric = Matrix::zeros(rows, cols);
            for e in 0..rows * cols {
                let mut probe = |delta: f64| -> Result<f64> {
                    {
                        let adapter = model.adapters_mut().get_mut(name).expect("adapter");
                        let m = if factor == 0 {
                            &mut adapter.a
                        } else {
                            &mut adapter.b
                        };
                        m.data_mut()[e] += delta;
                    }
                    eval(&model)
                };
                let f_plus = probe(h)?;
                let f_minus = probe(-2.0 * h)?;
                probe(h)?; // restore
                numeric.data_mut()[e] = (f_plus - f_minus) / (2.0 * h);
            }
            let reference = if factor == 0 {
                &analytic[slot].0
            } else {
                &analytic[slot].1
            };
            worst = worst.max(relative_gap(reference, &numeric));
        }
    }

    Ok(PropertyResult::new(
        "gradient of model loss wrt adapter factors under a noisy view",
        format!("max rel err {worst:.3e}"),
        format!("{tolerance:.0e}"),
        worst <= tolerance,
    ))
}

/// Checks that backpropagation through the factored forward produces exactly
/// the merged-weight gradient contracted with the opposite factor: the
/// adapter updates the trainer applies are the true low-rank projections of
/// the dense gradient.
pub fn check_factor_gradient_identity(
    seed: u64,
    instances: usize,
    tolerance: f64,
) -> Result<PropertyResult> {
    let mut rng = Rng::new(seed).named_stream("factor-identity");
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let d1 = 3 + rng.below(6);
        let d2 = 3 + rng.below(6);
        let r = 1 + rng.below(d1.min(d2));
        let m = 2 + rng.below(4);

        let w0 = rng.gaussian_matrix(d1, d2, 0.8);
        let a = rng.gaussian_matrix(d1, r, 0.6);
        let b = rng.gaussian_matrix(r, d2, 0.6);
        let x = rng.gaussian_matrix(m, d1, 0.8);
        let t = rng.gaussian_matrix(m, d2, 0.8);

        // Dense path: loss through the merged weight, gradient wrt it.
        let merged = w0.add(&a.matmul(&b)?)?;
        let dl_dw = {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(merged);
            let tv = tape.leaf(t.clone());
            let y = tape.matmul(xv, wv)?;
            let d = tape.sub(y, tv)?;
            let loss = tape.frobenius_norm(d);
            let grads = tape.backward(loss)?;
            grads.get(wv).cloned().expect("merged weight gradient")
        };

        // Factored path: same loss built from the split forward.
        let (auto_da, auto_db) = {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w0v = tape.leaf(w0.clone());
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let tv = tape.leaf(t.clone());
            let base = tape.matmul(xv, w0v)?;
            let xa = tape.matmul(xv, av)?;
            let low = tape.matmul(xa, bv)?;
            let y = tape.add(base, low)?;
            let d = tape.sub(y, tv)?;
            let loss = tape.frobenius_norm(d);
            let grads = tape.backward(loss)?;
            (
                grads.get(av).cloned().expect("a gradient"),
                grads.get(bv).cloned().expect("b gradient"),
            )
        };

        let adapter = LoraAdapter::from_parts(a, b)?;
        let (closed_da, closed_db) = lora_grads(&dl_dw, &adapter)?;
        worst = worst
            .max(entry_gap(&auto_da, &closed_da))
            .max(entry_gap(&auto_db, &closed_db));
    }

    Ok(PropertyResult::new(
        "factored backward equals dense gradient contracted with factors",
        format!("max entry gap {worst:.3e} over {instances} instances"),
        format!("{tolerance:.0e}"),
        worst <= tolerance,
    ))
}

/// Checks the closed form of the post-step product error and its quadratic
/// scaling in the step size.
pub fn check_update_remainder(
    seed: u64,
    instances: usize,
    formula_tolerance: f64,
    scaling_tolerance: f64,
) -> Result<Vec<PropertyResult>> {
    let mut rng = Rng::new(seed).named_stream("update-remainder");
    let mut worst_formula = 0.0_f64;
    let mut worst_scaling = 0.0_f64;
    for _ in 0..instances {
        let d1 = 3 + rng.below(6);
        let d2 = 3 + rng.below(6);
        let r = 1 + rng.below(d1.min(d2));
        let a = rng.gaussian_matrix(d1, r, 0.6);
        let b = rng.gaussian_matrix(r, d2, 0.6);
        let dl_dw = rng.gaussian_matrix(d1, d2, 0.6);
        let eta = 0.05 + 0.15 * rng.uniform();

        let adapter = LoraAdapter::from_parts(a.clone(), b.clone())?;
        let measured = update_product_remainder(&adapter, &dl_dw, eta)?;

        // Direct evaluation of the quadratic term.
        let da = dl_dw.matmul(&b.transpose())?;
        let db = a.transpose().matmul(&dl_dw)?;
        let direct = eta * eta * da.matmul(&db)?.frobenius_norm();
        worst_formula = worst_formula.max((measured - direct).abs());

        // Halving the step must quarter the remainder.
        let halved = update_product_remainder(&adapter, &dl_dw, eta / 2.0)?;
        if measured > 0.0 {
            worst_scaling = worst_scaling.max((4.0 * halved - measured).abs() / measured);
        }
    }

    Ok(vec![
        PropertyResult::new(
            "post-step product error matches its closed form",
            format!("max gap {worst_formula:.3e} over {instances} instances"),
            format!("{formula_tolerance:.0e}"),
            worst_formula <= formula_tolerance,
        ),
        PropertyResult::new(
            "post-step product error scales with the squared step",
            format!("max |4*r(eta/2) - r(eta)| / r(eta) = {worst_scaling:.3e}"),
            format!("{scaling_tolerance:.0e}"),
            worst_scaling <= scaling_tolerance,
        ),
    ])
}

// ---------------------------------------------------------------------------
// Alignment bound
// ---------------------------------------------------------------------------

/// Samples random factor pairs and gradient perturbations and confirms the
/// triangle/submultiplicativity chain the regularizer relies on: the norm of
/// the propagated perturbation never exceeds the perturbation norm times the
/// sum of the factor alignment norms. Every 97th triple is degenerate (zero
/// factors or zero perturbation) to pin the equality edge cases.
///
/// The inequality is exact in real arithmetic but both sides are computed
/// through different operation orders, so cases that achieve equality (for
/// example 1x1 factors, where both sides are `|g|(a^2 + b^2)`) wobble by an
/// ulp; a violation therefore only counts beyond a relative slack far above
/// roundoff and far below any genuine breach.
pub fn check_alignment_bound(seed: u64, triples: usize) -> Result<PropertyResult> {
    const FP_SLACK: f64 = 1e-12;
    let mut rng = Rng::new(seed).named_stream("alignment-bound");
    let mut violations = 0usize;
    let mut worst_ratio = 0.0_f64;
    for i in 0..triples {
        let d1 = 1 + rng.below(11);
        let d2 = 1 + rng.below(11);
        let r = 1 + rng.below(d1.min(d2));
        let mut a = rng.gaussian_matrix(d1, r, 0.8);
        let mut b = rng.gaussian_matrix(r, d2, 0.8);
        let mut dg = rng.gaussian_matrix(d1, d2, 0.8);
        match i % 97 {
            0 if i > 0 => a = Matrix::zeros(d1, r),
            31 => b = Matrix::zeros(r, d2),
            62 => dg = Matrix::zeros(d1, d2),
            _ => {}
        }
        let adapter = LoraAdapter::from_parts(a, b)?;
        let (lhs, rhs) = bound_check(&adapter, &dg)?;
        if lhs > rhs * (1.0 + FP_SLACK) {
            violations += 1;
        }
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
    }

    Ok(PropertyResult::new(
        "propagated perturbation norm never exceeds the alignment bound",
        format!("{violations} violations in {triples} triples (worst lhs/rhs {worst_ratio:.4})"),
        format!("0 violations beyond {FP_SLACK:.0e} relative slack"),
        violations == 0,
    ))
}

// ---------------------------------------------------------------------------
// Noise statistics
// ---------------------------------------------------------------------------

/// Monte Carlo check of the block read-noise model on a 128x128 weight with
/// 64x64 tiles at sigma 0.02: accumulated over `draws` independent reads,
/// each tile's relative perturbation (residual over the tile's max
/// magnitude) must have standard deviation within the configured band of
/// sigma and mean within a few standard errors of zero. Also confirms a
/// zero-sigma read returns the weight bit-exactly.
pub fn check_noise_statistics(seed: u64, draws: usize) -> Result<Vec<PropertyResult>> {
    const SIDE: usize = 128;
    const TILE: usize = 64;
    const SIGMA: f64 = 0.02;
    let tiles_per_side = SIDE / TILE;
    let tile_count = tiles_per_side * tiles_per_side;

    let mut init = Rng::new(seed).named_stream("noise-stats-weight");
    let w0 = init.uniform_matrix(SIDE, SIDE, -1.0, 1.0);
    let spec = NoiseSpec::with_tiles(SIGMA, TILE, TILE, seed)?;

    // Per-tile max magnitudes of the clean weight.
    let mut tile_max = vec![0.0_f64; tile_count];
    for i in 0..SIDE {
        for j in 0..SIDE {
            let t = (i / TILE) * tiles_per_side + j / TILE;
            tile_max[t] = tile_max[t].max(w0.get(i, j).abs());
        }
    }

    let mut sums = vec![0.0_f64; tile_count];
    let mut sumsq = vec![0.0_f64; tile_count];
    let mut rng = Rng::new(seed).named_stream("noise-stats-draws");
    for _ in 0..draws {
        let noisy = inject_noise(&w0, &spec, &mut rng)?;
        let nd = noisy.data();
        let wd = w0.data();
        for i in 0..SIDE {
            let row = i * SIDE;
            let ti = (i / TILE) * tiles_per_side;
            for j in 0..SIDE {
                let t = ti + j / TILE;
                let rel = (nd[row + j] - wd[row + j]) / tile_max[t];
                sums[t] += rel;
                sumsq[t] += rel * rel;
            }
        }
    }

    let n = (draws * TILE * TILE) as f64;
    let mut worst_std_dev = 0.0_f64;
    let mut worst_mean_ses = 0.0_f64;
    for t in 0..tile_count {
        let mean = sums[t] / n;
        let var = (sumsq[t] - n * mean * mean) / (n - 1.0);
        let std = var.sqrt();
        worst_std_dev = worst_std_dev.max((std - SIGMA).abs() / SIGMA);
        let se = std / n.sqrt();
        worst_mean_ses = worst_mean_ses.max(mean.abs() / se);
    }

    // Zero sigma must reproduce the weight without touching a bit.
    let zero_spec = NoiseSpec::with_tiles(0.0, TILE, TILE, seed)?;
    let mut zero_rng = Rng::new(seed).named_stream("noise-stats-zero");
    let copied = inject_noise(&w0, &zero_spec, &mut zero_rng)?;
    let bit_exact = copied
        .data()
        .iter()
        .zip(w0.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    Ok(vec![
        PropertyResult::new(
            "per-tile relative noise std matches sigma",
            format!(
                "max |std - sigma| / sigma = {worst_std_dev:.4} over {tile_count} tiles, {draws} draws"
            ),
            format!("{NOISE_STD_BAND}"),
            worst_std_dev <= NOISE_STD_BAND,
        ),
        PropertyResult::new(
            "per-tile relative noise mean is centered",
            format!("max |mean| = {worst_mean_ses:.2} standard errors"),
            format!("{NOISE_MEAN_SIGMAS} standard errors"),
            worst_mean_ses <= NOISE_MEAN_SIGMAS,
        ),
        PropertyResult::new(
            "zero-sigma read returns the weight bit-exactly",
            if bit_exact {
                "all entries identical".to_string()
            } else {
                "entries differ".to_string()
            },
            "bit-exact".to_string(),
            bit_exact,
        ),
    ])
}

// ---------------------------------------------------------------------------
// Tiling roundtrip
// ---------------------------------------------------------------------------

/// Splits matrices of awkward shapes into 64x64 tiles (ragged at the edges)
/// and reassembles them, requiring bit-exact recovery.
pub fn check_tiling_roundtrip(seed: u64) -> Result<Vec<PropertyResult>> {
    let shapes: [(usize, usize); 6] = [(1, 1), (7, 7), (64, 64), (65, 64), (100, 70), (128, 130)];
    let mut rng = Rng::new(seed).named_stream("tiling-roundtrip");
    let mut results = Vec::with_capacity(shapes.len());
    for (rows, cols) in shapes {
        let w = rng.uniform_matrix(rows, cols, -2.0, 2.0);
        let spec = NoiseSpec::with_tiles(0.01, 64, 64, seed)?;
        let (grid, tiles) = split(&w, &spec)?;
        let back = concatenate(&grid, &tiles)?;
        let exact = back.shape() == w.shape()
            && back
                .data()
                .iter()
                .zip(w.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        results.push(PropertyResult::new(
            format!("tile split and reassembly of {rows}x{cols}"),
            if exact {
                format!("{} tiles, bit-exact", tiles.len())
            } else {
                "mismatch after reassembly".to_string()
            },
            "bit-exact".to_string(),
            exact,
        ));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_gradients_all_within_tolerance() {
        let results = check_op_gradients(DEFAULT_SEED, 2, DEFAULT_STEP, GRAD_TOLERANCE).unwrap();
        assert_eq!(results.len(), 16, "one result per tape operation");
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn model_gradient_within_tolerance() {
        let r = check_model_gradient(DEFAULT_SEED, DEFAULT_STEP, GRAD_TOLERANCE).unwrap();
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn factor_identity_and_remainder_hold() {
        let id = check_factor_gradient_identity(DEFAULT_SEED, 5, IDENTITY_TOLERANCE).unwrap();
        assert!(id.passed, "{}", id.line());
        let rem = check_update_remainder(
            DEFAULT_SEED,
            5,
            REMAINDER_TOLERANCE,
            REMAINDER_SCALING_TOLERANCE,
        )
        .unwrap();
        assert_eq!(rem.len(), 2);
        for r in &rem {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn alignment_bound_never_violated() {
        let r = check_alignment_bound(DEFAULT_SEED, 200).unwrap();
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let results = check_noise_statistics(DEFAULT_SEED, 2000).unwrap();
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn tiling_roundtrip_is_bit_exact_for_awkward_shapes() {
        let results = check_tiling_roundtrip(DEFAULT_SEED).unwrap();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn suite_names_parse_and_unknown_names_are_rejected() {
        assert_eq!("grad".parse::<Suite>().unwrap(), Suite::Gradients);
        assert_eq!("bound".parse::<Suite>().unwrap(), Suite::Bound);
        assert_eq!("noise".parse::<Suite>().unwrap(), Suite::Noise);
        assert_eq!("roundtrip".parse::<Suite>().unwrap(), Suite::Roundtrip);
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        let err = "everything".parse::<Suite>().unwrap_err();
        assert!(err.to_string().contains("everything"));
    }

    #[test]
    fn outcome_render_lists_every_property_once() {
        let outcome = run_suite(Suite::Roundtrip, DEFAULT_SEED).unwrap();
        assert!(outcome.all_passed());
        let rendered = outcome.render();
        assert_eq!(
            rendered.matches("[PASS]").count(),
            outcome.results.len(),
            "{rendered}"
        );
        assert!(rendered.contains("all 6 properties passed"));
    }
}
