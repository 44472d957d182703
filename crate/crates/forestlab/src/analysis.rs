//! Model-quality metrics: MSE, percent-difference comparisons, effective
//! degrees of freedom, leaf-budget matching, and the bias-variance-noise
//! decomposition of squared error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::RngStream;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared difference.
pub fn mse<T: Scalar>(predictions: &[T], targets: &[T]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("mse needs at least one point"));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let d = p.to_real() - t.to_real();
            d * d
        })
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// `(err_bagging - err_other) / err_bagging * 100`; positive means the
/// other model is better.
pub fn percent_decrease(err_bagging: f64, err_other: f64) -> Result<f64> {
    if !(err_bagging > 0.0) {
        return Err(Error::invalid(format!(
            "bagging error must be positive, got {err_bagging}"
        )));
    }
    if err_other < 0.0 {
        return Err(Error::invalid(format!(
            "error must be non-negative, got {err_other}"
        )));
    }
    Ok((err_bagging - err_other) / err_bagging * 100.0)
}

/// Variance of the average of B equicorrelated variables:
/// `gamma * sigma2 + (1 - gamma) / B * sigma2`.
pub fn eq1_ensemble_variance(gamma: f64, sigma2: f64, b: usize) -> f64 {
    gamma * sigma2 + (1.0 - gamma) / b as f64 * sigma2
}

/// Monte-Carlo effective degrees of freedom estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofEstimate {
    pub dof: f64,
    pub replications: usize,
    /// Jackknife standard error over replications.
    pub standard_error: f64,
}

/// Effective degrees of freedom of a fitting procedure on a fixed design:
/// `(1/sigma2) * sum_i Cov_r(yhat_i, y_i)` over `replications` fresh noise
/// draws `y = truth + N(0, sigma2)`.
///
/// `fit_predict(y, stream)` must fit on the fixed design with response `y`
/// and return in-sample predictions; the stream seeds any internal
/// randomness of the procedure.
pub fn effective_dof<F>(
    truth: &[f64],
    sigma2: f64,
    replications: usize,
    stream: &RngStream,
    fit_predict: F,
) -> Result<DofEstimate>
where
    F: Fn(&[f64], &RngStream) -> Result<Vec<f64>> + Sync,
{
    if truth.is_empty() {
        return Err(Error::invalid("effective_dof needs a non-empty design"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    if replications < 2 {
        return Err(Error::invalid("effective_dof needs at least 2 replications"));
    }
    let n = truth.len();
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let rep = stream.child(r as u64);
            let mut rng = rep.child(0).rng();
            let normal = rand_distr::Normal::new(0.0, sigma2.sqrt())
                .map_err(|e| Error::runtime(format!("bad sigma2: {e}")))?;
            let y: Vec<f64> = truth
                .iter()
                .map(|&f| f + rand_distr::Distribution::sample(&normal, &mut rng))
                .collect();
            let yhat = fit_predict(&y, &rep.child(1))?;
            if yhat.len() != n {
                return Err(Error::runtime(format!(
                    "fit procedure returned {} predictions for {n} rows",
                    yhat.len()
                )));
            }
            Ok((y, yhat))
        })
        .collect::<Result<_>>()?;

    let r_f = replications as f64;
    // Per-point sums over replications for covariance and its jackknife.
    let mut sy = vec![0.0f64; n];
    let mut sp = vec![0.0f64; n];
    let mut spy = vec![0.0f64; n];
    for (y, yhat) in &draws {
        for i in 0..n {
            sy[i] += y[i];
            sp[i] += yhat[i];
            spy[i] += y[i] * yhat[i];
        }
    }
    let mut dof = 0.0f64;
    for i in 0..n {
        dof += (spy[i] - sp[i] * sy[i] / r_f) / (r_f - 1.0);
    }
    dof /= sigma2;

    // Jackknife over replications.
    let mut loo = Vec::with_capacity(replications);
    for (y, yhat) in &draws {
        let mut acc = 0.0f64;
        for i in 0..n {
            let spy_i = spy[i] - y[i] * yhat[i];
            let sp_i = sp[i] - yhat[i];
            let sy_i = sy[i] - y[i];
            acc += (spy_i - sp_i * sy_i / (r_f - 1.0)) / (r_f - 2.0);
        }
        loo.push(acc / sigma2);
    }
    let loo_mean = loo.iter().sum::<f64>() / r_f;
    let se = ((r_f - 1.0) / r_f * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>()).sqrt();

    Ok(DofEstimate {
        dof,
        replications,
        standard_error: se,
    })
}

/// Outcome of matching a leaf budget to a target DoF.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DofMatch {
    pub chosen_maxnodes: usize,
    pub target_dof: f64,
    /// (maxnodes, estimate) for every grid value evaluated, ascending.
    pub estimates: Vec<(usize, DofEstimate)>,
    /// Whether the evaluated estimates were non-decreasing in maxnodes.
    pub monotone: bool,
}

/// Default leaf-budget grid for DoF matching: single split up to the
/// standard cap of 200.
pub const DEFAULT_MAXNODES_GRID: [usize; 10] = [2, 5, 10, 20, 35, 50, 75, 100, 140, 200];

/// Walk the ascending maxnodes grid, estimating the DoF at each value
/// (early-exiting once estimates exceed the target), and return the grid
/// value minimizing `|dof - target|`, ties toward the smaller budget.
///
/// Range checks allow three combined standard errors of slack at either
/// end: both the target and the grid estimates are Monte-Carlo quantities,
/// so a target statistically indistinguishable from a boundary estimate
/// matches the boundary rather than erroring.
pub fn match_trim_dof<F>(target: &DofEstimate, maxnodes_grid: &[usize], mut estimate: F) -> Result<DofMatch>
where
    F: FnMut(usize) -> Result<DofEstimate>,
{
    if maxnodes_grid.is_empty() {
        return Err(Error::invalid("maxnodes grid is empty"));
    }
    if maxnodes_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("maxnodes grid must be strictly ascending"));
    }
    let target_dof = target.dof;
    let slack = |se: f64| 3.0 * (se * se + target.standard_error * target.standard_error).sqrt();
    let mut estimates: Vec<(usize, DofEstimate)> = Vec::new();
    for &m in maxnodes_grid {
        let est = estimate(m)?;
        let exceeded = est.dof >= target_dof;
        estimates.push((m, est));
        if exceeded {
            break;
        }
    }
    let first = &estimates[0].1;
    if target_dof < first.dof - slack(first.standard_error) && estimates.len() == 1 {
        return Err(Error::runtime(format!(
            "target DoF {target_dof:.3} lies below the DoF {:.3} at the smallest maxnodes {}",
            first.dof, estimates[0].0
        )));
    }
    let last = estimates.last().unwrap();
    if last.1.dof + slack(last.1.standard_error) < target_dof {
        return Err(Error::runtime(format!(
            "target DoF {target_dof:.3} lies above the DoF {:.3} at the largest maxnodes {}",
            last.1.dof, last.0
        )));
    }
    let mut chosen = estimates[0].0;
    let mut best_gap = f64::INFINITY;
    for (m, est) in &estimates {
        let gap = (est.dof - target_dof).abs();
        if gap < best_gap {
            best_gap = gap;
            chosen = *m;
        }
    }
    let monotone = estimates.windows(2).all(|w| w[0].1.dof <= w[1].1.dof);
    Ok(DofMatch {
        chosen_maxnodes: chosen,
        target_dof,
        estimates,
        monotone,
    })
}

/// Squared-error decomposition into squared bias, variance over training
/// draws, and irreducible noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub bias2: f64,
    pub variance: f64,
    pub noise: f64,
    pub total_mse: f64,
}

/// Decompose per-point predictions from `T` independently trained models on
/// a shared noiseless test set: per point, bias^2 is the squared gap between
/// truth and the trial-mean prediction, variance is the unbiased sample
/// variance over trials; both are averaged over points and noise = sigma2.
pub fn bias_variance_decompose(
    trial_predictions: &[Vec<f64>],
    truth: &[f64],
    sigma2: f64,
) -> Result<Decomposition> {
    let t = trial_predictions.len();
    if t < 2 {
        return Err(Error::invalid(
            "bias-variance decomposition needs at least 2 trials",
        ));
    }
    let n = truth.len();
    if n == 0 {
        return Err(Error::invalid("empty test set"));
    }
    for (k, preds) in trial_predictions.iter().enumerate() {
        if preds.len() != n {
            return Err(Error::invalid(format!(
                "trial {k} has {} predictions for {n} test points",
                preds.len()
            )));
        }
    }
    let mut bias2 = 0.0f64;
    let mut variance = 0.0f64;
    for i in 0..n {
        let mean = trial_predictions.iter().map(|p| p[i]).sum::<f64>() / t as f64;
        bias2 += (truth[i] - mean).powi(2);
        variance += trial_predictions
            .iter()
            .map(|p| (p[i] - mean).powi(2))
            .sum::<f64>()
            / (t - 1) as f64;
    }
    bias2 /= n as f64;
    variance /= n as f64;
    Ok(Decomposition {
        bias2,
        variance,
        noise: sigma2,
        total_mse: bias2 + variance + sigma2,
    })
}
