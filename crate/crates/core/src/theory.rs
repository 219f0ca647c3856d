//! Analytic predictions: the capacity integral, the single-constraint kernel
//! `f_p`, the replica-symmetric free entropy and its minimizer, bounds on the
//! energetic function and the capacity extrapolation as `q -> 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::special::{golden_section, integrate, inv_mills, log_norm_cdf, neville, GaussHermite, LN_SQRT_2PI};
use crate::spectral::capacity_lower_edge;

/// Smallest allowed `1 - t` (and `1 - q`).
pub const T_FLOOR: f64 = 1e-4;

/// Points where the energetic extrapolation is sampled.
pub const EXTRAPOLATION_QS: [f64; 4] = [0.9, 0.95, 0.99, 0.995];

/// Terms with `xi - a` above this contribute below 1e-19 to `ln f` each.
const SKIP_ARG: f64 = 9.0;

/// Gauss-Hermite sizes; the first only serves as an error probe.
const GH_SCHEDULE: [usize; 5] = [32, 64, 128, 256, 512];
/// Accept rule `2n` once rule `n` agrees with it to this level: the error
/// decays geometrically in the node count, so doubling roughly squares it.
const GH_TOL: f64 = 1e-6;

/// Capacity of rank-`kappa d` maps: half the second moment of the
/// quarter-circle law above its `(1 - kappa)` quantile.
///
/// Integrated in `theta` with `sigma = 2 sin theta`, where the integrand
/// `(8 / pi) sin^2 cos^2` is smooth.
pub fn alpha_c(kappa: f64) -> Result<f64> {
    let lower = capacity_lower_edge(kappa)?;
    let theta0 = (0.5 * lower).clamp(0.0, 1.0).asin();
    let f = |th: f64| {
        let (s, c) = th.sin_cos();
        8.0 / std::f64::consts::PI * s * s * c * c
    };
    Ok(integrate(f, theta0, std::f64::consts::FRAC_PI_2, 1e-12))
}

/// `beta_t = sqrt(t / (1 - t))`.
pub fn beta(t: f64) -> f64 {
    (t / (1.0 - t)).sqrt()
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0 - T_FLOOR).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "t = {t} outside [0, 1 - {T_FLOOR}]"
        )))
    }
}

/// `ln f_p(t; eta)` with `f = E_xi prod_{rho >= 2} Phi(xi + beta_t (eta_1 - eta_rho))`.
pub fn log_f_p(t: f64, eta: &[f64]) -> Result<f64> {
    check_t(t)?;
    if eta.len() < 2 {
        return Err(Error::invalid("kernel needs p >= 2"));
    }
    let b = beta(t);
    let mut a: Vec<f64> = eta[1..].iter().map(|&e| b * (e - eta[0])).collect();
    a.sort_by(|x, y| y.partial_cmp(x).expect("finite eta"));
    Ok(log_f_sorted(&a))
}

/// Kernel for shifts `a` sorted in descending order:
/// `ln E_xi prod_a Phi(xi - a)` with `xi ~ N(0, 1)`.
///
/// The integrand `exp(g)` with `g(xi) = -xi^2/2 + sum ln Phi(xi - a)` is
/// log-concave; Gauss-Hermite nodes are centred on its mode and scaled by the
/// Laplace width `1 / sqrt(-g'')`, then accumulated in the log domain.
pub fn log_f_sorted(a: &[f64]) -> f64 {
    let g = |xi: f64| -> f64 {
        let mut s = -0.5 * xi * xi;
        for &ai in a {
            let x = xi - ai;
            if x > SKIP_ARG {
                break;
            }
            s += log_norm_cdf(x);
        }
        s
    };
    let derivs = |xi: f64| -> (f64, f64) {
        let mut d1 = -xi;
        let mut d2 = -1.0;
        for &ai in a {
            let x = xi - ai;
            if x > SKIP_ARG {
                break;
            }
            let r = inv_mills(x);
            d1 += r;
            d2 -= r * (x + r);
        }
        (d1, d2)
    };

    // g' > 0 for xi <= 0; expand upward until g' < 0.
    let mut lo = 0.0f64;
    let mut hi = a.first().copied().unwrap_or(0.0).max(0.0) + 1.0;
    while derivs(hi).0 > 0.0 {
        lo = hi;
        hi = 2.0 * hi + 1.0;
    }
    let mut xi = 0.5 * (lo + hi);
    let mut d2 = -1.0;
    for _ in 0..200 {
        let (g1, g2) = derivs(xi);
        d2 = g2;
        if g1 > 0.0 {
            lo = xi;
        } else {
            hi = xi;
        }
        let mut next = xi - g1 / g2;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - xi).abs() <= 1e-13 * (1.0 + xi.abs());
        xi = next;
        if done || hi - lo <= 1e-14 * (1.0 + xi.abs()) {
            d2 = derivs(xi).1;
            break;
        }
    }
    let scale = 1.0 / (-d2).sqrt();
    let offset = (std::f64::consts::SQRT_2 * scale).ln() - LN_SQRT_2PI;

    let rule = |n: usize| -> f64 {
        let gh = GaussHermite::get(n);
        let terms: Vec<f64> = gh
            .nodes
            .iter()
            .zip(&gh.log_scaled_weights)
            .map(|(&x, &lw)| lw + g(xi + std::f64::consts::SQRT_2 * scale * x))
            .collect();
        log_sum_exp(&terms) + offset
    };
    let mut prev = rule(GH_SCHEDULE[0]);
    for &n in &GH_SCHEDULE[1..] {
        let cur = rule(n);
        if (cur - prev).abs() <= GH_TOL {
            return cur.min(0.0);
        }
        prev = cur;
    }
    prev.min(0.0)
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Common random numbers for the energetic term: for each Monte-Carlo sample,
/// the differences `eta_rho - eta_1` sorted in descending order.
pub struct EtaSamples {
    pub p: usize,
    diffs: Vec<Vec<f64>>,
}

impl EtaSamples {
    pub fn new(p: usize, n_mc: usize, seed: u64) -> Result<Self> {
        if p < 2 || n_mc == 0 {
            return Err(Error::invalid("need p >= 2 and n_mc >= 1"));
        }
        let key = rng::derive(seed, rng::ROLE_MC);
        let diffs = (0..n_mc)
            .into_par_iter()
            .map(|i| {
                let mut eta = vec![0.0; p];
                rng::fill_normal(key, i as u64, &mut eta);
                let mut d: Vec<f64> = eta[1..].iter().map(|e| e - eta[0]).collect();
                d.sort_by(|x, y| y.partial_cmp(x).expect("finite"));
                d
            })
            .collect();
        Ok(EtaSamples { p, diffs })
    }

    pub fn len(&self) -> usize {
        self.diffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diffs.is_empty()
    }

    /// `(mean, stderr)` of `ln f_p(t; eta) / ln p` over the samples.
    pub fn energetic(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        let b = beta(t);
        let lp = (self.p as f64).ln();
        let vals: Vec<f64> = self
            .diffs
            .par_iter()
            .map(|d| {
                let a: Vec<f64> = d.iter().map(|x| b * x).collect();
                log_f_sorted(&a) / lp
            })
            .collect();
        Ok(mean_stderr(&vals))
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of `G(t) = E_eta[ln f_p(t; eta)] / ln p`.
pub fn energetic_g(t: f64, p: usize, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    check_t(t)?;
    EtaSamples::new(p, n_mc, seed)?.energetic(t)
}

/// Asymptotic bounds `(lower, upper)` on `G(t)`:
/// `-(1 + beta)^2 <= G <= -(k / (k + 1)) beta^2`.
pub fn g_bounds(t: f64, k: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&t) || k < 1.0 {
        return Err(Error::invalid(format!("need t in [0, 1) and k >= 1, got t={t}, k={k}")));
    }
    let b2 = t / (1.0 - t);
    let b = b2.sqrt();
    Ok((-(1.0 + b) * (1.0 + b), -(k / (k + 1.0)) * b2))
}

/// Entropic part `ln(1 - q) / 2 + q / (2 (1 - q))`.
pub fn entropic_term(q: f64) -> f64 {
    0.5 * (-q).ln_1p() + q / (2.0 * (1.0 - q))
}

/// Free entropy `phi(q) = entropic(q) + alpha G(q)` (up to an alpha-independent
/// constant); returns `(phi, stderr)`.
pub fn free_entropy(alpha: f64, q: f64, p: usize, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    let (g, se) = energetic_g(q, p, n_mc, seed)?;
    Ok((entropic_term(q) + alpha * g, alpha * se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEntropyEval {
    pub alpha: f64,
    pub p_surrogate: usize,
    pub q_star: f64,
    pub phi_value: f64,
    pub energetic_term: f64,
    pub mc_samples: usize,
    pub mc_stderr: f64,
    pub q_floor: f64,
    /// Minimizer pinned at `1 - q_floor`: at or above the finite-p capacity.
    pub at_boundary: bool,
}

/// Minimize `phi` over `q in [0, 1 - q_floor]`.
pub fn minimize_q(alpha: f64, p: usize, n_mc: usize, seed: u64) -> Result<FreeEntropyEval> {
    let samples = EtaSamples::new(p, n_mc, seed)?;
    minimize_q_with(alpha, &samples)
}

/// Golden-section search in `s = -ln(1 - q)` over `[0, ln(1 / q_floor)]`,
/// sharing the same eta draws for every `q`.
pub fn minimize_q_with(alpha: f64, samples: &EtaSamples) -> Result<FreeEntropyEval> {
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    let q_of = |s: f64| -(-s).exp_m1();
    let s_max = (1.0 / T_FLOOR).ln();
    let eval = |q: f64| -> Result<(f64, f64, f64)> {
        let (g, se) = samples.energetic(q.min(1.0 - T_FLOOR))?;
        Ok((entropic_term(q) + alpha * g, g, se))
    };
    let finish = |q: f64, at_boundary: bool| -> Result<FreeEntropyEval> {
        let (phi, g, se) = eval(q)?;
        Ok(FreeEntropyEval {
            alpha,
            p_surrogate: samples.p,
            q_star: q,
            phi_value: phi,
            energetic_term: g,
            mc_samples: samples.len(),
            mc_stderr: alpha * se,
            q_floor: T_FLOOR,
            at_boundary,
        })
    };
    if alpha == 0.0 {
        return finish(0.0, false);
    }
    let mut failure = None;
    let (s_best, phi_best) = golden_section(
        |s| match eval(q_of(s)) {
            Ok(v) => v.0,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        0.0,
        s_max,
        1e-5,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let phi_top = eval(1.0 - T_FLOOR)?.0;
    let phi_zero = eval(0.0)?.0;
    if phi_top <= phi_best && phi_top <= phi_zero {
        return finish(1.0 - T_FLOOR, true);
    }
    if phi_zero < phi_best {
        return finish(0.0, false);
    }
    let q = q_of(s_best);
    let at_boundary = s_max - s_best < 1e-3;
    finish(if at_boundary { 1.0 - T_FLOOR } else { q }, at_boundary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub alpha_c_hat: f64,
    /// Extrapolated `lim_{q -> 1} -2 (1 - q) G(q)`.
    pub limit: f64,
    pub qs: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: f64,
    /// The sampled sequence is monotone in `q`.
    pub monotone: bool,
}

/// Extrapolate `-2 (1 - q) G(q)` to `q = 1` with an injected `G`.
pub fn extrapolate_capacity<F>(g: F) -> Result<CapacityEstimate>
where
    F: Fn(f64) -> Result<(f64, f64)>,
{
    let qs = EXTRAPOLATION_QS.to_vec();
    let hs: Vec<f64> = qs.iter().map(|q| 1.0 - q).collect();
    let mut values = Vec::with_capacity(qs.len());
    let mut ses = Vec::with_capacity(qs.len());
    for (&q, &h) in qs.iter().zip(&hs) {
        let (gv, se) = g(q)?;
        values.push(-2.0 * h * gv);
        ses.push(2.0 * h * se);
    }
    let limit = neville(&hs, &values, 0.0);
    // The extrapolant is linear in the values; propagate the MC errors.
    let stderr = (0..hs.len())
        .map(|i| {
            let mut e = vec![0.0; hs.len()];
            e[i] = 1.0;
            let c = neville(&hs, &e, 0.0);
            c * c * ses[i] * ses[i]
        })
        .sum::<f64>()
        .sqrt();
    let inc = values.windows(2).all(|w| w[1] >= w[0]);
    let dec = values.windows(2).all(|w| w[1] <= w[0]);
    if !(limit > 0.0) {
        return Err(Error::numeric(0, format!("non-positive extrapolated limit {limit}")));
    }
    Ok(CapacityEstimate {
        alpha_c_hat: 1.0 / limit,
        limit,
        qs,
        values,
        stderr: stderr / (limit * limit),
        monotone: inc || dec,
    })
}

/// Finite-`p` capacity from the Monte-Carlo energetic term.
pub fn capacity_extrapolation(p: usize, n_mc: usize, seed: u64) -> Result<CapacityEstimate> {
    if p < 100 {
        return Err(Error::invalid("capacity extrapolation needs p >= 100"));
    }
    let samples = EtaSamples::new(p, n_mc, seed)?;
    let est = extrapolate_capacity(|q| samples.energetic(q))?;
    if !est.monotone {
        log::warn!("non-monotone extrapolation sequence at p = {p}: {:?}", est.values);
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::norm_cdf;

    /// Antiderivative of sigma^2 sqrt(4 - sigma^2).
    fn antiderivative(x: f64) -> f64 {
        (x / 8.0) * (2.0 * x * x - 4.0) * (4.0 - x * x).max(0.0).sqrt() + 2.0 * (0.5 * x).asin()
    }

    fn alpha_c_closed(kappa: f64) -> f64 {
        let x = capacity_lower_edge(kappa).unwrap();
        (antiderivative(2.0) - antiderivative(x)) / (2.0 * std::f64::consts::PI)
    }

    #[test]
    fn capacity_integral_matches_antiderivative() {
        for &k in &[0.05, 0.25, 0.5, 0.75, 1.0] {
            assert!((alpha_c(k).unwrap() - alpha_c_closed(k)).abs() < 1e-10, "kappa {k}");
        }
        assert!((alpha_c(1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((alpha_c(1e-9).unwrap() - 2e-9).abs() < 1e-11);
        assert!(alpha_c(0.0).is_err());
        let mut prev = 0.0;
        for i in 1..=20 {
            let a = alpha_c(i as f64 / 20.0).unwrap();
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn kernel_at_t_zero_is_one_over_p() {
        for &p in &[2usize, 10, 100, 1000] {
            let eta: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
            let lf = log_f_p(0.0, &eta).unwrap();
            assert!((lf + (p as f64).ln()).abs() < 1e-8, "p {p}: {lf}");
        }
    }

    #[test]
    fn kernel_two_point_closed_form() {
        for &(t, e1, e2) in &[(0.3, 0.4, -0.2), (0.9, -1.0, 0.5), (0.99, 0.1, 0.2), (0.5, 2.0, -3.0)] {
            let b = beta(t);
            let exact = norm_cdf(b * (e1 - e2) / std::f64::consts::SQRT_2).ln();
            let lf = log_f_p(t, &[e1, e2]).unwrap();
            assert!((lf - exact).abs() < 1e-8, "t {t}: {lf} vs {exact}");
        }
    }

    #[test]
    fn kernel_matches_brute_force_quadrature() {
        // Oracle: dense trapezoid over xi in [-12, 12] in the linear domain.
        let eta = [0.3, -0.4, 1.1, 0.05, -1.7, 0.8];
        for &t in &[0.2, 0.6, 0.9] {
            let b = beta(t);
            let n = 200_000;
            let h = 24.0 / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let xi = -12.0 + h * i as f64;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let prod: f64 = eta[1..].iter().map(|&e| norm_cdf(xi + b * (eta[0] - e))).product();
                s += w * h * crate::special::norm_pdf(xi) * prod;
            }
            let lf = log_f_p(t, &eta).unwrap();
            assert!((lf - s.ln()).abs() < 1e-9, "t {t}");
        }
    }

    #[test]
    fn kernel_monotone_and_bounded() {
        let mut eta = vec![0.0, 0.5, -0.3, 1.2, 0.7];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..8 {
            eta[0] = -2.0 + 0.6 * k as f64;
            let lf = log_f_p(0.7, &eta).unwrap();
            assert!(lf > prev && lf <= 0.0);
            prev = lf;
        }
        assert!(log_f_p(1.0, &eta).is_err());
        assert!(log_f_p(0.5, &[1.0]).is_err());
    }

    #[test]
    fn kernel_extreme_tail_is_finite() {
        let mut eta = vec![-4.0];
        eta.extend((0..2000).map(|i| (i as f64 * 0.731).sin() * 3.5));
        let lf = log_f_p(1.0 - T_FLOOR, &eta).unwrap();
        assert!(lf.is_finite() && lf < -1000.0);
    }

    #[test]
    fn energetic_at_zero_is_minus_one() {
        let (g, se) = energetic_g(0.0, 500, 4, 3).unwrap();
        assert!((g + 1.0).abs() < 1e-9);
        assert!(se < 1e-9);
    }

    #[test]
    fn bounds_identities() {
        assert_eq!(g_bounds(0.0, 1.0).unwrap(), (-1.0, 0.0));
        for &t in &[0.1, 0.5, 0.9, 0.999] {
            for &k in &[1.0, 2.0, 10.0] {
                let (lo, up) = g_bounds(t, k).unwrap();
                assert!(lo <= up);
            }
        }
        let (lo, up) = g_bounds(1.0 - 1e-12, 3.0).unwrap();
        assert!((lo / up - 4.0 / 3.0).abs() < 1e-5);
        assert!(g_bounds(1.0, 1.0).is_err());
        assert!(g_bounds(0.5, 0.5).is_err());
    }

    #[test]
    fn entropic_term_minimized_at_zero() {
        assert_eq!(entropic_term(0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..20 {
            let v = entropic_term(i as f64 / 20.0);
            assert!(v > prev);
            prev = v;
        }
        let e = minimize_q(0.0, 200, 2, 1).unwrap();
        assert_eq!(e.q_star, 0.0);
        assert!(!e.at_boundary);
    }

    #[test]
    fn exact_energetic_law_extrapolates_to_one_half() {
        let est = extrapolate_capacity(|q| Ok((-1.0 / (1.0 - q), 0.0))).unwrap();
        assert!((est.alpha_c_hat - 0.5).abs() < 1e-12);
        assert!(est.monotone);
        // Polynomial corrections in (1 - q) up to cubic order are removed.
        let est = extrapolate_capacity(|q| {
            let h = 1.0 - q;
            Ok((-(1.0 + 0.3 * h - 2.0 * h * h + h * h * h) / h, 0.0))
        })
        .unwrap();
        assert!((est.alpha_c_hat - 0.5).abs() < 1e-10);
    }

    #[test]
    fn small_p_pipeline_runs() {
        let e = minimize_q(0.3, 200, 8, 5).unwrap();
        assert!(e.q_star > 0.0 && e.q_star < 1.0);
        assert!(e.phi_value.is_finite());
        let (phi_floor, _) = free_entropy(0.3, 1.0 - T_FLOOR, 200, 8, 5).unwrap();
        assert!(phi_floor > e.phi_value);
    }
}
