//! Low-rank adapters: `W = W0 + A·B` with only `A` and `B` trainable.
//!
//! `A` is `d1 x r`, `B` is `r x d2`, and the delta is applied in factored
//! form — the forward pass computes `x·W0 + (x·A)·B` with two skinny
//! products and never materializes `A·B`. `A` starts Kaiming-uniform, `B`
//! starts at zero, so a freshly adapted model is exactly the base model.
//!
//! Also here: the closed-form adapter gradients given the dense-layer
//! gradient, and the exact second-order remainder of one SGD step on the
//! factored parameterization (the term dropped by the first-order analysis
//! that motivates the alignment regularizer in [`crate::train`]).

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Tape, Var};

/// Trainable low-rank pair. Rank is implicit: `a.cols() == b.rows()`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `d1 x r`, Kaiming-uniform at init.
    pub a: Matrix,
    /// `r x d2`, zero at init.
    pub b: Matrix,
}

impl LoraAdapter {
    /// Wraps existing factors, checking only internal consistency
    /// (`a.cols == b.rows`). Unlike [`init_adapter`] this accepts ranks
    /// with no parameter savings; analyses use such adapters freely.
    pub fn from_parts(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "adapter factors",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(LoraAdapter { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Host layer shape `(d1, d2)`.
    pub fn layer_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    /// Materializes `ΔW = A·B` (export/analysis only; never in forward).
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factors consistent")
    }
}

/// A frozen weight with its adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    /// Frozen base weight, `d1 x d2`. Never updated by training.
    pub w0: Matrix,
    pub adapter: LoraAdapter,
}

impl AdaptedLayer {
    pub fn new(w0: Matrix, adapter: LoraAdapter) -> Result<Self> {
        if adapter.layer_shape() != w0.shape() {
            return Err(Error::ShapeMismatch {
                op: "adapter vs layer",
                left: w0.shape(),
                right: adapter.layer_shape(),
            });
        }
        Ok(AdaptedLayer { w0, adapter })
    }

    /// Factored forward against an explicit backbone weight (the frozen
    /// `w0` itself or a noisy read of it): `x·w + (x·A)·B`.
    pub fn forward(&self, x: &Matrix, backbone_weight: &Matrix) -> Result<Matrix> {
        forward(x, backbone_weight, &self.adapter)
    }

    /// `w0 + A·B`, for export and update-product analyses.
    pub fn merge(&self) -> Matrix {
        self.w0.add(&self.adapter.delta()).expect("shapes checked at construction")
    }
}

/// Kaiming-uniform bound for fan-in `d1` (gain sqrt(2)): `sqrt(6 / d1)`.
pub fn kaiming_bound(d1: usize) -> f64 {
    (6.0 / d1 as f64).sqrt()
}

/// Fresh adapter for a `d1 x d2` layer: `A ~ U(-sqrt(6/d1), sqrt(6/d1))`
/// elementwise, `B = 0`, so `ΔW = 0` and the adapted model equals the base
/// model at step 0.
///
/// The rank must satisfy `1 <= r <= min(d1, d2)` and actually save
/// parameters: `(d1 + d2) * r < d1 * d2`.
pub fn init_adapter(d1: usize, d2: usize, rank: usize, rng: &mut Rng) -> Result<LoraAdapter> {
    if rank == 0 || rank > d1.min(d2) || (d1 + d2) * rank >= d1 * d2 {
        return Err(Error::InvalidRank { d1, d2, rank });
    }
    let bound = kaiming_bound(d1);
    let a = rng.uniform_matrix(d1, rank, -bound, bound);
    let b = Matrix::zeros(rank, d2);
    Ok(LoraAdapter { a, b })
}

/// Factored adapted forward: `x·backbone_weight + (x·A)·B`.
///
/// `backbone_weight` is whichever view of the frozen weight is installed —
/// the ideal `w0` or a noisy read. The adapter path is always computed
/// noise-free (it models digital SRAM computation).
pub fn forward(x: &Matrix, backbone_weight: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    let base = x.matmul(backbone_weight)?;
    let xa = x.matmul(&adapter.a)?;
    let low_rank = xa.matmul(&adapter.b)?;
    base.add(&low_rank)
}

/// Tape version of [`forward`] for training graphs: `x·w + (x·a)·b` where
/// `w` is a (constant) backbone view and `a`, `b` are trainable leaves.
pub fn forward_on_tape(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul(x, a)?;
    let low_rank = tape.matmul(xa, b)?;
    tape.add(base, low_rank)
}

/// Closed-form adapter gradients from the dense-layer gradient:
/// `dL/dA = dL/dW · Bᵀ` and `dL/dB = Aᵀ · dL/dW`.
pub fn lora_grads(dl_dw: &Matrix, adapter: &LoraAdapter) -> Result<(Matrix, Matrix)> {
    if dl_dw.shape() != adapter.layer_shape() {
        return Err(Error::ShapeMismatch {
            op: "lora_grads",
            left: dl_dw.shape(),
            right: adapter.layer_shape(),
        });
    }
    let da = dl_dw.matmul(&adapter.b.transpose())?;
    let db = adapter.a.transpose().matmul(dl_dw)?;
    Ok((da, db))
}

/// Exact gap between one SGD step on the factored parameters and its
/// first-order expansion:
///
/// ```text
/// ‖(A - η·dA)(B - η·dB)  -  [A·B - η·A·Aᵀ·dW - η·dW·Bᵀ·B]‖_F
/// ```
///
/// with `dA`, `dB` from [`lora_grads`]. Expanding the product shows this is
/// exactly `η² · ‖dW·Bᵀ·Aᵀ·dW‖_F` — the term the first-order analysis
/// discards, which vanishes as `η → 0` like `η²`.
pub fn update_product_remainder(
    adapter: &LoraAdapter,
    dl_dw: &Matrix,
    eta: f64,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step size must be > 0, got {eta}"
        )));
    }
    let (da, db) = lora_grads(dl_dw, adapter)?;

    let stepped_a = adapter.a.sub(&da.scale(eta))?;
    let stepped_b = adapter.b.sub(&db.scale(eta))?;
    let product = stepped_a.matmul(&stepped_b)?;

    let aat_dw = adapter.a.matmul(&adapter.a.transpose())?.matmul(dl_dw)?;
    let dw_btb = dl_dw.matmul(&adapter.b.transpose())?.matmul(&adapter.b)?;
    let mut first_order = adapter.delta();
    first_order.axpy(-eta, &aat_dw)?;
    first_order.axpy(-eta, &dw_btb)?;

    Ok(product.sub(&first_order)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    #[test]
    fn init_has_zero_delta_and_bounded_a() {
        let mut rng = Rng::new(1);
        let adapter = init_adapter(64, 64, 4, &mut rng).unwrap();
        assert!(adapter.delta().data().iter().all(|&v| v == 0.0));
        let bound = (6.0_f64 / 64.0).sqrt();
        assert!((bound - 0.30619).abs() < 1e-5);
        assert!(adapter.a.data().iter().all(|&v| v > -bound && v < bound));
        // Draws should actually spread over the interval.
        assert!(adapter.a.max_abs() > 0.5 * bound);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a1 = init_adapter(32, 16, 2, &mut Rng::new(9)).unwrap();
        let a2 = init_adapter(32, 16, 2, &mut Rng::new(9)).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn init_rejects_bad_ranks() {
        let mut rng = Rng::new(1);
        assert!(init_adapter(8, 8, 0, &mut rng).is_err());
        assert!(init_adapter(8, 8, 9, &mut rng).is_err());
        // 4x4 with r=2: (4+4)*2 = 16 == 4*4, no parameter savings.
        assert!(init_adapter(4, 4, 2, &mut rng).is_err());
        assert!(init_adapter(64, 64, 4, &mut rng).is_ok());
    }

    #[test]
    fn forward_with_zero_b_is_the_base_layer() {
        let mut rng = Rng::new(2);
        let w0 = rng.uniform_matrix(6, 5, -1.0, 1.0);
        let adapter = init_adapter(6, 5, 2, &mut rng).unwrap();
        let x = rng.uniform_matrix(3, 6, -1.0, 1.0);
        let y = forward(&x, &w0, &adapter).unwrap();
        assert_eq!(y, x.matmul(&w0).unwrap());
    }

    #[test]
    fn factored_forward_matches_dense_composition() {
        let mut rng = Rng::new(3);
        let w0 = rng.uniform_matrix(6, 5, -1.0, 1.0);
        let mut adapter = init_adapter(6, 5, 2, &mut rng).unwrap();
        adapter.b = rng.uniform_matrix(2, 5, -0.5, 0.5);
        let x = rng.uniform_matrix(4, 6, -1.0, 1.0);

        let factored = forward(&x, &w0, &adapter).unwrap();
        let dense = x.matmul(&w0.add(&adapter.delta()).unwrap()).unwrap();
        let gap = factored.sub(&dense).unwrap().max_abs();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn adapter_grads_match_autodiff_through_dense_layer() {
        // Closed-form identity: run a scalar loss through the dense merged
        // weight to get dL/dW, then check dL/dA = dW·Bᵀ and dL/dB = Aᵀ·dW
        // against the tape's gradients through the factored forward.
        let mut rng = Rng::new(4);
        let w0 = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let mut adapter = init_adapter(6, 4, 2, &mut rng).unwrap();
        adapter.b = rng.uniform_matrix(2, 4, -0.5, 0.5);
        let x = rng.uniform_matrix(3, 6, -1.0, 1.0);

        // Factored graph: gradients w.r.t. A and B.
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w0.clone());
        let av = t.leaf(adapter.a.clone());
        let bv = t.leaf(adapter.b.clone());
        let y = forward_on_tape(&mut t, xv, wv, av, bv).unwrap();
        let loss = t.frobenius_norm(y);
        let grads = t.backward(loss).unwrap();
        let da_tape = grads.get(av).unwrap().clone();
        let db_tape = grads.get(bv).unwrap().clone();

        // Dense graph: gradient w.r.t. the merged W.
        let merged = w0.add(&adapter.delta()).unwrap();
        let mut t2 = Tape::new();
        let xv2 = t2.leaf(x);
        let wv2 = t2.leaf(merged);
        let y2 = t2.matmul(xv2, wv2).unwrap();
        let loss2 = t2.frobenius_norm(y2);
        let grads2 = t2.backward(loss2).unwrap();
        let dw = grads2.get(wv2).unwrap().clone();

        let (da, db) = lora_grads(&dw, &adapter).unwrap();
        assert!(da.sub(&da_tape).unwrap().max_abs() < 1e-12);
        assert!(db.sub(&db_tape).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn adapter_grads_zero_cases() {
        let mut rng = Rng::new(5);
        let adapter = init_adapter(6, 4, 2, &mut rng).unwrap();
        let zero = Matrix::zeros(6, 4);
        let (da, db) = lora_grads(&zero, &adapter).unwrap();
        assert!(da.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));

        // B = 0 forces dA = dW·Bᵀ = 0 regardless of dW.
        let dw = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let (da, _) = lora_grads(&dw, &adapter).unwrap();
        assert!(da.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factored_forward_gradient_passes_finite_differences() {
        let mut rng = Rng::new(6);
        let x = rng.uniform_matrix(3, 5, -1.0, 1.0);
        let w = rng.uniform_matrix(5, 4, -1.0, 1.0);
        let a = rng.uniform_matrix(5, 2, -0.5, 0.5);
        let b = rng.uniform_matrix(2, 4, -0.5, 0.5);
        let r = gradcheck::check(&[x, w, a, b], gradcheck::DEFAULT_STEP, |t, v| {
            let y = forward_on_tape(t, v[0], v[1], v[2], v[3])?;
            Ok(t.frobenius_norm(y))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn merge_equals_w0_plus_delta_and_stays_low_rank() {
        let mut rng = Rng::new(7);
        let w0 = rng.uniform_matrix(10, 8, -1.0, 1.0);
        let mut adapter = init_adapter(10, 8, 3, &mut rng).unwrap();
        adapter.b = rng.uniform_matrix(3, 8, -0.5, 0.5);
        let layer = AdaptedLayer::new(w0.clone(), adapter.clone()).unwrap();

        let merged = layer.merge();
        let delta = merged.sub(&w0).unwrap();

        // Numerical rank of merged - w0 must be at most the adapter rank.
        let nd = nalgebra::DMatrix::from_row_slice(10, 8, delta.data());
        let svd = nd.svd(false, false);
        let above: usize = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert!(above <= 3, "numerical rank {above} exceeds adapter rank");

        // B = 0 case: merge is exactly w0.
        let fresh = AdaptedLayer::new(w0.clone(), init_adapter(10, 8, 3, &mut rng).unwrap()).unwrap();
        assert_eq!(fresh.merge(), w0);
    }

    #[test]
    fn update_remainder_matches_closed_form_and_eta_squared_scaling() {
        let mut rng = Rng::new(8);
        let mut adapter = init_adapter(7, 6, 2, &mut rng).unwrap();
        adapter.b = rng.uniform_matrix(2, 6, -0.5, 0.5);
        let dw = rng.uniform_matrix(7, 6, -1.0, 1.0);

        let eta = 0.01;
        let remainder = update_product_remainder(&adapter, &dw, eta).unwrap();
        let closed = eta
            * eta
            * dw
                .matmul(&adapter.b.transpose())
                .unwrap()
                .matmul(&adapter.a.transpose())
                .unwrap()
                .matmul(&dw)
                .unwrap()
                .frobenius_norm();
        assert!(
            (remainder - closed).abs() < 1e-12,
            "remainder {remainder} vs closed form {closed}"
        );

        let half = update_product_remainder(&adapter, &dw, eta / 2.0).unwrap();
        assert!(
            (half / remainder - 0.25).abs() < 1e-10,
            "eta^2 scaling violated: ratio {}",
            half / remainder
        );
    }

    #[test]
    fn update_remainder_trivial_cases() {
        let mut rng = Rng::new(9);
        let adapter = init_adapter(7, 6, 2, &mut rng).unwrap();
        let zero = Matrix::zeros(7, 6);
        assert_eq!(update_product_remainder(&adapter, &zero, 0.1).unwrap(), 0.0);
        assert!(update_product_remainder(&adapter, &zero, 0.0).is_err());
    }

    #[test]
    fn adapted_layer_rejects_shape_mismatch() {
        let mut rng = Rng::new(10);
        let adapter = init_adapter(6, 5, 2, &mut rng).unwrap();
        assert!(AdaptedLayer::new(Matrix::zeros(6, 6), adapter).is_err());
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(3, 4);
        assert!(LoraAdapter::from_parts(a, b).is_err());
    }
}
