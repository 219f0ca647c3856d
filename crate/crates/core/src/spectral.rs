//! Singular-value spectra and the reference densities they are compared with.
//!
//! Densities are over singular values `sigma`. The quarter-circle law
//! `(1/pi) sqrt(4 - sigma^2)` on `[0, 2]` is the square-Gaussian reference; the
//! spectrum at capacity keeps its top `kappa` fraction plus an atom `1 - kappa`
//! at zero; the spectrum at initialization comes from the product of two
//! independent Wishart matrices through a cubic Stieltjes equation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightModel;
use crate::special::bisect;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Scale so the largest singular value is 2.
    TopEqualsTwo,
    /// Scale so the mean of `sigma^2` over all `d` values is 1.
    UnitMeanSquare,
}

/// Singular values in descending order (length `d`, zeros included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub normalization: Normalization,
    pub zero_fraction: f64,
}

/// Values at or below this fraction of the largest are treated as zero.
pub const ZERO_TOL: f64 = 1e-10;

impl Spectrum {
    /// Build from raw singular values; sorts, counts zeros and normalizes.
    pub fn from_values(mut values: Vec<f64>, normalization: Normalization) -> Self {
        values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
        let top = values.first().copied().unwrap_or(0.0);
        let zeros = values.iter().filter(|&&v| v <= ZERO_TOL * top).count();
        let n = values.len().max(1) as f64;
        let scale = match normalization {
            Normalization::Raw => 1.0,
            Normalization::TopEqualsTwo if top > 0.0 => 2.0 / top,
            Normalization::UnitMeanSquare if top > 0.0 => {
                1.0 / (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
            }
            _ => 1.0,
        };
        for v in values.iter_mut() {
            *v *= scale;
        }
        Spectrum {
            values,
            normalization,
            zero_fraction: zeros as f64 / n,
        }
    }

    pub fn nonzero(&self) -> Vec<f64> {
        let top = self.values.first().copied().unwrap_or(0.0);
        self.values
            .iter()
            .copied()
            .filter(|&v| v > ZERO_TOL * top)
            .collect()
    }

    pub fn rescaled(&self, c: f64) -> Spectrum {
        Spectrum {
            values: self.values.iter().map(|v| v * c).collect(),
            normalization: Normalization::Raw,
            zero_fraction: self.zero_fraction,
        }
    }
}

fn to_dmatrix(a: &ndarray::Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Singular values of the effective weight matrix.
///
/// For the factored model `Q R^T = (Q1 R1)(Q2 R2)^T` with thin QR factors, so
/// only the `m x m` core `R1 R2^T` is decomposed.
pub fn svd_spectrum<T: crate::real::Real>(model: &WeightModel<T>, normalization: Normalization) -> Result<Spectrum> {
    let model = model.cast::<f64>();
    let d = model.d();
    if d == 0 {
        return Err(Error::invalid("empty model"));
    }
    let mut values: Vec<f64> = match &model {
        WeightModel::FullRank { w } => singular_values(to_dmatrix(w))?,
        WeightModel::Factored { q, r } => {
            let r1 = to_dmatrix(q).qr().r();
            let r2 = to_dmatrix(r).qr().r();
            singular_values(r1 * r2.transpose())?
        }
    };
    values.resize(d, 0.0);
    Ok(Spectrum::from_values(values, normalization))
}

fn singular_values(m: DMatrix<f64>) -> Result<Vec<f64>> {
    let svd = m
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numeric(0, "SVD did not converge"))?;
    Ok(svd.singular_values.iter().copied().collect())
}

pub fn quarter_circle(sigma: f64) -> f64 {
    if !(0.0..=2.0).contains(&sigma) {
        return 0.0;
    }
    (4.0 - sigma * sigma).max(0.0).sqrt() / std::f64::consts::PI
}

/// `F(sigma) = (1/pi) [sigma sqrt(4 - sigma^2) / 2 + 2 asin(sigma / 2)]`.
pub fn quarter_circle_cdf(sigma: f64) -> f64 {
    let s = sigma.clamp(0.0, 2.0);
    let v = (0.5 * s * (4.0 - s * s).max(0.0).sqrt() + 2.0 * (0.5 * s).asin()) / std::f64::consts::PI;
    v.clamp(0.0, 1.0)
}

/// Inverse of [`quarter_circle_cdf`] by safeguarded Newton.
pub fn quarter_circle_quantile(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("quantile level {u} outside [0, 1]")));
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    if u == 1.0 {
        return Ok(2.0);
    }
    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    let mut x = 2.0 * u;
    for _ in 0..200 {
        let f = quarter_circle_cdf(x) - u;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / quarter_circle(x).max(1e-300);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() < 1e-15 || hi - lo < 1e-15 {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Lower edge `X(1 - kappa)` of the spectrum at capacity.
pub fn capacity_lower_edge(kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    quarter_circle_quantile(1.0 - kappa)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("kappa must lie in (0, 1], got {kappa}")))
    }
}

/// A density tabulated on a grid, plus an atom at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub point_mass_at_zero: f64,
}

impl DensityCurve {
    /// Trapezoid integral of the tabulated density.
    pub fn continuous_mass(&self) -> f64 {
        self.cumulative().last().copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.continuous_mass() + self.point_mass_at_zero
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len());
        let mut acc = 0.0;
        for i in 0..self.grid.len() {
            if i > 0 {
                acc += 0.5 * (self.density[i] + self.density[i - 1]) * (self.grid[i] - self.grid[i - 1]);
            }
            out.push(acc);
        }
        out
    }

    /// CDF of the continuous part conditioned on being nonzero, by
    /// linear interpolation of the cumulative trapezoid sums.
    pub fn conditional_cdf(&self) -> impl Fn(f64) -> f64 + '_ {
        let cum = self.cumulative();
        let total = cum.last().copied().unwrap_or(0.0);
        move |x: f64| {
            let g = &self.grid;
            if g.is_empty() || total <= 0.0 || x <= g[0] {
                return 0.0;
            }
            if x >= g[g.len() - 1] {
                return 1.0;
            }
            let i = g.partition_point(|&v| v <= x);
            let t = (x - g[i - 1]) / (g[i] - g[i - 1]);
            (cum[i - 1] + t * (cum[i] - cum[i - 1])) / total
        }
    }

    /// Same curve for the variable `c * sigma`.
    pub fn rescaled(&self, c: f64) -> DensityCurve {
        DensityCurve {
            grid: self.grid.iter().map(|x| x * c).collect(),
            density: self.density.iter().map(|y| y / c).collect(),
            point_mass_at_zero: self.point_mass_at_zero,
        }
    }
}

/// `n` points on `[a, b]` clustered cubically toward both ends, where the
/// densities have square-root (or stronger) edge behaviour.
pub fn clustered_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    let tau = 2.0 * std::f64::consts::PI;
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            a + (b - a) * (t - (tau * t).sin() / tau)
        })
        .collect()
}

/// Points per theory curve; trapezoid mass error stays below 1e-6.
pub const CURVE_POINTS: usize = 1024;

/// Grid on the capacity support `[X(1 - kappa), 2]`, uniform in
/// `theta = asin(sigma / 2)` so the square-root edge at 2 is resolved.
pub fn rho_c_grid(kappa: f64, n: usize) -> Result<Vec<f64>> {
    let lo = (0.5 * capacity_lower_edge(kappa)?).asin();
    let hi = std::f64::consts::FRAC_PI_2;
    let n = n.max(2);
    Ok((0..n)
        .map(|i| 2.0 * (lo + (hi - lo) * i as f64 / (n - 1) as f64).sin())
        .collect())
}

/// Spectrum at capacity: atom `1 - kappa` at zero and the quarter-circle
/// density restricted to `[X(1 - kappa), 2]`, which carries mass `kappa`.
pub fn rho_c_curve(kappa: f64, grid: &[f64]) -> Result<DensityCurve> {
    let lower = capacity_lower_edge(kappa)?;
    let density = grid
        .iter()
        .map(|&s| {
            if s >= lower && s <= 2.0 {
                quarter_circle(s)
            } else {
                0.0
            }
        })
        .collect();
    Ok(DensityCurve {
        grid: grid.to_vec(),
        density,
        point_mass_at_zero: 1.0 - kappa,
    })
}

/// Conditional CDF of the nonzero part of the capacity spectrum.
pub fn rho_c_conditional_cdf(kappa: f64) -> Result<impl Fn(f64) -> f64> {
    let lower = capacity_lower_edge(kappa)?;
    let f0 = quarter_circle_cdf(lower);
    Ok(move |s: f64| {
        if s <= lower {
            0.0
        } else {
            ((quarter_circle_cdf(s) - f0) / (1.0 - f0)).clamp(0.0, 1.0)
        }
    })
}

/// Coefficients `(a, b, c, d)` of the cubic for the Stieltjes transform of
/// the squared-singular-value law at initialization.
fn init_cubic(kappa: f64, x: f64) -> [f64; 4] {
    let k1 = 1.0 - kappa;
    [kappa * kappa * x * x, 2.0 * kappa * k1 * x, k1 * k1 - x, 1.0]
}

fn discriminant([a, b, c, d]: [f64; 4]) -> f64 {
    18.0 * a * b * c * d - 4.0 * b.powi(3) * d + b * b * c * c - 4.0 * a * c.powi(3) - 27.0 * a * a * d * d
}

/// Imaginary part of the complex root pair when the cubic has one real root.
fn complex_root_imag(coef: [f64; 4]) -> Option<f64> {
    let [a, b, c, d] = coef;
    if discriminant(coef) >= 0.0 {
        return None;
    }
    // Real root from Cardano on the depressed cubic, then Newton polish.
    let (bn, cn, dn) = (b / a, c / a, d / a);
    let p = cn - bn * bn / 3.0;
    let q = 2.0 * bn.powi(3) / 27.0 - bn * cn / 3.0 + dn;
    let disc = (0.5 * q).powi(2) + (p / 3.0).powi(3);
    let sq = disc.max(0.0).sqrt();
    let t = (-0.5 * q + sq).cbrt() + (-0.5 * q - sq).cbrt();
    let mut r = t - bn / 3.0;
    for _ in 0..3 {
        let f = ((a * r + b) * r + c) * r + d;
        let fp = (3.0 * a * r + 2.0 * b) * r + c;
        if fp == 0.0 {
            break;
        }
        r -= f / fp;
    }
    // Deflate: a G^2 + (b + a r) G + (c + (b + a r) r).
    let qb = b + a * r;
    let qc = c + qb * r;
    let inner = 4.0 * a * qc - qb * qb;
    if inner <= 0.0 {
        return None;
    }
    Some(inner.sqrt() / (2.0 * a))
}

/// Density of the squared singular values `x` (mass 1 over the `m` nonzero
/// values) at initialization.
pub fn init_squared_density(kappa: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    complex_root_imag(init_cubic(kappa, x)).map_or(0.0, |im| im / std::f64::consts::PI)
}

/// Support `[lo, hi]` of the squared-singular-value law at initialization.
pub fn init_squared_support(kappa: f64) -> Result<(f64, f64)> {
    check_kappa(kappa)?;
    let inside = |x: f64| discriminant(init_cubic(kappa, x)) < 0.0;
    // Locate a point inside the support near the mean (x = 1).
    let probe = (1..2000)
        .map(|i| i as f64 * 0.01)
        .find(|&x| inside(x))
        .ok_or_else(|| Error::numeric(0, "no support found for the initialization law"))?;
    let sign = |x: f64| if inside(x) { -1.0 } else { 1.0 };
    let mut hi_out = probe;
    while inside(hi_out) {
        hi_out *= 2.0;
    }
    let hi = bisect(sign, probe, hi_out, 1e-14 * hi_out);
    let lo = if kappa == 1.0 {
        0.0
    } else {
        let mut lo_out = probe;
        while inside(lo_out) && lo_out > 1e-12 {
            lo_out *= 0.5;
        }
        if inside(lo_out) {
            0.0
        } else {
            bisect(sign, lo_out, probe, 1e-15)
        }
    };
    Ok((lo, hi))
}

/// Singular-value support at initialization under the unit-mean-square
/// convention (`sigma = sqrt(x / kappa)`).
pub fn init_support(kappa: f64) -> Result<(f64, f64)> {
    let (lo, hi) = init_squared_support(kappa)?;
    Ok(((lo / kappa).sqrt(), (hi / kappa).sqrt()))
}

/// Default grid over the initialization support.
pub fn init_grid(kappa: f64, n: usize) -> Result<Vec<f64>> {
    let (lo, hi) = init_support(kappa)?;
    Ok(clustered_grid(lo, hi, n))
}

/// Singular-value density at initialization for `W = Q R^T` with i.i.d.
/// Gaussian factors, normalized so that the mean of `sigma^2` over all `d`
/// singular values is 1.
///
/// The `m = kappa d` nonzero squared singular values are `x / kappa` with `x`
/// following the cubic's law; the remaining `1 - kappa` fraction is an atom at
/// zero. Grid points outside the support get density 0.
pub fn init_density(kappa: f64, grid: &[f64]) -> Result<DensityCurve> {
    check_kappa(kappa)?;
    let density = grid
        .iter()
        .map(|&s| {
            if s <= 0.0 {
                return 0.0;
            }
            let x = kappa * s * s;
            kappa * init_squared_density(kappa, x) * 2.0 * kappa * s
        })
        .collect();
    Ok(DensityCurve {
        grid: grid.to_vec(),
        density,
        point_mass_at_zero: 1.0 - kappa,
    })
}

/// Kolmogorov-Smirnov distance between sorted-ascending samples and a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Sup distance between the empirical CDF of the nonzero singular values and
/// the conditional CDF of the curve's continuous part.
pub fn ks_distance(spectrum: &Spectrum, curve: &DensityCurve) -> Result<f64> {
    if spectrum.values.is_empty() {
        return Err(Error::invalid("empty spectrum"));
    }
    let nz = spectrum.nonzero();
    let has_continuous = curve.continuous_mass() > 0.0;
    match (nz.is_empty(), has_continuous) {
        (true, false) => Ok(0.0),
        (true, true) | (false, false) => Ok(1.0),
        (false, true) => Ok(ks_statistic(&nz, curve.conditional_cdf())),
    }
}

/// Freedman-Diaconis histogram: bin width `2 IQR n^{-1/3}`.
/// Returns `(edges, counts)` with `edges.len() == counts.len() + 1`.
pub fn fd_histogram(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    if values.is_empty() {
        return (vec![0.0, 1.0], vec![0]);
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = xs.len();
    let q = |f: f64| {
        let pos = f * (n - 1) as f64;
        let i = pos.floor() as usize;
        let j = (i + 1).min(n - 1);
        xs[i] + (pos - i as f64) * (xs[j] - xs[i])
    };
    let (lo, hi) = (xs[0], xs[n - 1]);
    let width = 2.0 * (q(0.75) - q(0.25)) / (n as f64).cbrt();
    let bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 10_000)
    } else {
        1
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &x in &xs {
        let k = (((x - lo) / span) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    (edges, counts)
}
