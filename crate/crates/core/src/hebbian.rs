//! Hebbian outer-product baseline and its independent-Gaussian heuristic.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightModel;
use crate::problem::{Mode, ProblemInstance};
use crate::rng;
use crate::special::{norm_cdf, norm_isf};

/// `sum_mu u_mu e_mu^T`, scaled by `1/d` when `normalized`.
pub fn hebbian_matrix(inputs: ArrayView2<f64>, outputs: ArrayView2<f64>, normalized: bool) -> Array2<f64> {
    let w = outputs.t().dot(&inputs);
    if normalized {
        w / inputs.ncols() as f64
    } else {
        w
    }
}

/// Normalized Hebbian weights `(1/d) sum_mu u_mu e_mu^T`.
pub fn hebbian_weights(inst: &ProblemInstance) -> Result<WeightModel<f64>> {
    hebbian_weights_with(inst, true)
}

/// Hebbian weights with or without the `1/d` factor; accuracy ignores it.
pub fn hebbian_weights_with(inst: &ProblemInstance, normalized: bool) -> Result<WeightModel<f64>> {
    let u = shared_outputs(inst)?;
    Ok(WeightModel::FullRank {
        w: hebbian_matrix(inst.inputs.view(), u.view(), normalized),
    })
}

fn shared_outputs(inst: &ProblemInstance) -> Result<&Array2<f64>> {
    match (inst.mode, &inst.outputs_shared) {
        (Mode::Op, Some(u)) => Ok(u),
        _ => Err(Error::invalid("the Hebbian construction requires a shared-output (OP) instance")),
    }
}

/// Moments of `s_{mu rho} = (1/d) u_mu^T W e_rho` for the normalized Hebbian `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HebbScoreStats {
    pub d: usize,
    pub p: usize,
    pub diag_mean: f64,
    pub diag_var: f64,
    /// `None` when there are no off-diagonal pairs (`p = 1`).
    pub offdiag_mean: Option<f64>,
    pub offdiag_var: Option<f64>,
}

pub fn hebbian_score_stats(inst: &ProblemInstance) -> Result<HebbScoreStats> {
    let u = shared_outputs(inst)?;
    Ok(score_stats(inst.inputs.view(), u.view()))
}

/// Score moments for explicit embeddings (rows are vectors, any `p >= 1`).
pub fn score_stats(inputs: ArrayView2<f64>, outputs: ArrayView2<f64>) -> HebbScoreStats {
    let (p, d) = inputs.dim();
    let w = hebbian_matrix(inputs, outputs, true);
    let s = outputs.dot(&w).dot(&inputs.t()) / d as f64;
    let diag: Vec<f64> = (0..p).map(|i| s[[i, i]]).collect();
    let off: Vec<f64> = s
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &x)| x)
        .collect();
    let (diag_mean, diag_var) = moments(&diag);
    let (offdiag_mean, offdiag_var) = if off.is_empty() {
        (None, None)
    } else {
        let (m, v) = moments(&off);
        (Some(m), Some(v))
    };
    HebbScoreStats {
        d,
        p,
        diag_mean,
        diag_var,
        offdiag_mean,
        offdiag_var,
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Large-deviation rate function with a quadratic branch below the knee
/// `sqrt(2 alpha)` and the competitor-dominated branch above it.
pub fn rate_function(alpha: f64, x: f64) -> f64 {
    let knee = (2.0 * alpha).sqrt();
    if x <= knee {
        (x - 1.0) * (x - 1.0) / (2.0 * alpha)
    } else {
        (2.0 * x * x - 2.0 * x + 1.0) / (2.0 * alpha) - 1.0
    }
}

/// `(argmin, min)` of the rate function in closed form.
///
/// Each branch is a convex parabola, so the minimum is at `min(1, knee)` on the
/// lower branch or `max(1/2, knee)` on the upper branch.
pub fn rate_infimum(alpha: f64) -> (f64, f64) {
    let knee = (2.0 * alpha).sqrt();
    let a = 1f64.min(knee);
    let b = 0.5f64.max(knee);
    let (ja, jb) = (rate_function(alpha, a), rate_function(alpha, b));
    if ja <= jb {
        (a, ja)
    } else {
        (b, jb)
    }
}

/// Single-row failure probability under the independent-Gaussian score model:
/// the target score is `N(1, s^2)`, the `p - 1` competitors `N(0, s^2)` with
/// `s^2 = alpha / ln p`.
///
/// The competitor maximum is sampled exactly through its CDF,
/// `M = Phi^{-1}(U^{1/(p-1)})`, and the target is integrated analytically.
pub fn hebb_row_failure(alpha: f64, p: usize, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    if p < 2 || n_mc == 0 {
        return Err(Error::invalid("need p >= 2 and n_mc >= 1"));
    }
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    if alpha == 0.0 {
        return Ok((0.0, 0.0));
    }
    let sigma = (alpha / (p as f64).ln()).sqrt();
    let key = rng::derive(seed, rng::ROLE_MC);
    const SHARD: usize = 4096;
    let shards: Vec<(f64, f64)> = (0..n_mc.div_ceil(SHARD))
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(key, k as u64);
            let n = SHARD.min(n_mc - k * SHARD);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..n {
                let u: f64 = r.random();
                let u = u.max(f64::MIN_POSITIVE);
                // Upper tail of the maximum: 1 - U^{1/(p-1)}.
                let tail = -(u.ln() / (p - 1) as f64).exp_m1();
                let m = norm_isf(tail);
                let f = norm_cdf((sigma * m - 1.0) / sigma);
                s += f;
                s2 += f * f;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = shards
        .iter()
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let n = n_mc as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Probability that all `p` rows succeed: `(1 - P[row fails])^p`.
pub fn hebb_heuristic_success(alpha: f64, p: usize, n_mc: usize, seed: u64) -> Result<f64> {
    let (fail, _) = hebb_row_failure(alpha, p, n_mc, seed)?;
    Ok((p as f64 * (-fail).ln_1p()).exp())
}

/// Expected fraction of satisfied rows under the heuristic.
pub fn hebb_heuristic_accuracy(alpha: f64, p: usize, n_mc: usize, seed: u64) -> Result<f64> {
    Ok(1.0 - hebb_row_failure(alpha, p, n_mc, seed)?.0)
}
