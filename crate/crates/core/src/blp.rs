//! Contraction-mapping baseline on a logit-smoothed demand map.
//!
//! The smoothed simulator replaces the hard argmax with a softmax at
//! temperature lambda, which makes the demand map invertible even when the
//! underlying model is not. The price is smoothing bias: the baseline exists
//! for the accuracy comparisons in the benchmark harness, where it is
//! expected to lose to the matching algorithms and to fail outright on
//! non-invertible markets.

use crate::error::{Error, Result};
use crate::market::{DeltaVector, MarketShares};
use crate::model::ShockMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SmoothingParams<F> {
    /// Softmax temperature in utility units.
    pub lambda: F,
    /// Sup-norm tolerance on the fixed-point update.
    pub tol: F,
    pub max_iters: usize,
}

impl<F: Scalar> SmoothingParams<F> {
    pub fn new(lambda: F, tol: F, max_iters: usize) -> Result<Self> {
        if lambda <= F::zero() || tol <= F::zero() {
            return Err(Error::Config("lambda and tol must be positive".into()));
        }
        if max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(SmoothingParams { lambda, tol, max_iters })
    }
}

impl<F: Scalar> Default for SmoothingParams<F> {
    fn default() -> Self {
        SmoothingParams {
            lambda: F::one(),
            tol: F::from_f64_lossy(1e-12),
            max_iters: 5000,
        }
    }
}

/// Logit-smoothed simulated shares:
/// `s_j = (1/N) sum_i softmax_j((delta_j + e_ij)/lambda)`,
/// computed with per-consumer max subtraction so large utilities do not
/// overflow. Strictly positive and summing to one for any lambda > 0.
pub fn smoothed_demand<F: Scalar>(
    shocks: &ShockMatrix<F>,
    delta: &[F],
    lambda: F,
) -> Result<MarketShares<F>> {
    let n = shocks.consumers();
    let brands = shocks.brands();
    if delta.len() != brands {
        return Err(Error::Precondition("delta length does not match the shock matrix".into()));
    }
    if lambda <= F::zero() {
        return Err(Error::Precondition("lambda must be positive".into()));
    }
    let mut totals = vec![F::zero(); brands];
    let mut weights = vec![F::zero(); brands];
    for i in 0..n {
        let row = shocks.row(i);
        let mut top = F::neg_infinity();
        for j in 0..brands {
            let v = (delta[j] + row[j]) / lambda;
            weights[j] = v;
            if v > top {
                top = v;
            }
        }
        let mut denom = F::zero();
        for w in weights.iter_mut() {
            *w = (*w - top).exp();
            denom = denom + *w;
        }
        for j in 0..brands {
            totals[j] = totals[j] + weights[j] / denom;
        }
    }
    let nf = F::from_usize(n).unwrap();
    MarketShares::normalized(totals.iter().map(|t| *t / nf).collect())
}

/// Fixed-point demand inversion on the smoothed map:
/// `delta <- delta + lambda (log s - log sigma_lambda(delta))` from
/// `delta = 0`, stopping when the sup-norm update falls below `tol`.
/// The result is renormalized to `delta_0 = 0` only on success.
pub fn blp_contraction<F: Scalar>(
    shocks: &ShockMatrix<F>,
    target: &MarketShares<F>,
    params: &SmoothingParams<F>,
) -> Result<DeltaVector<F>> {
    target.require_strictly_positive()?;
    let brands = shocks.brands();
    if target.len() != brands {
        return Err(Error::Precondition("target shares do not match the shock matrix".into()));
    }
    let log_s: Vec<F> = target.as_slice().iter().map(|s| s.ln()).collect();
    let mut delta = vec![F::zero(); brands];
    for _ in 0..params.max_iters {
        let sigma = smoothed_demand(shocks, &delta, params.lambda)?;
        let mut worst = F::zero();
        for j in 0..brands {
            let update = params.lambda * (log_s[j] - sigma.as_slice()[j].ln());
            delta[j] = delta[j] + update;
            let mag = update.abs();
            if mag > worst {
                worst = mag;
            }
        }
        if worst <= params.tol {
            return DeltaVector::new_renormalized(delta);
        }
    }
    Err(Error::NonConvergence {
        context: format!("smoothed contraction did not converge in {} iterations", params.max_iters),
        last: delta.iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}
