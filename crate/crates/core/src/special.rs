//! Normal-distribution functions, quadrature rules and small 1-D solvers.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::erf::{erfc, erfc_inv};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Mills ratio `Q(z) / phi(z)` for `z > 0` by backward continued fraction.
fn mills_ratio(z: f64) -> f64 {
    let mut t = z;
    for k in (1..=60).rev() {
        t = z + k as f64 / t;
    }
    1.0 / t
}

/// `ln Phi(x)`, accurate in both tails.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -8.0 {
        (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio(-x).ln()
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x > -8.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        1.0 / mills_ratio(-x)
    }
}

/// Upper-tail quantile: `z` with `P[N(0,1) > z] = tail`.
pub fn norm_isf(tail: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * tail)
}

/// Standard normal quantile.
pub fn norm_quantile(u: f64) -> f64 {
    -norm_isf(u)
}

/// Gauss-Hermite rule for the weight `exp(-x^2)`.
///
/// `scaled_weights[i] = w_i exp(x_i^2)`, which stays representable for all
/// nodes where the raw weights underflow.
#[derive(Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub scaled_weights: Vec<f64>,
    pub log_scaled_weights: Vec<f64>,
}

/// Normalized Hermite functions `psi_{n-1}(x), psi_n(x)`.
fn hermite_functions(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25) * (-0.5 * x * x).exp();
    for k in 0..n {
        let next = (2.0 / (k + 1) as f64).sqrt() * x * cur - (k as f64 / (k + 1) as f64).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

impl GaussHermite {
    fn build(n: usize) -> Self {
        assert!(n >= 1);
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jac[(k, k - 1)] = b;
            jac[(k - 1, k)] = b;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let two_n = (2 * n) as f64;
        let mut scaled_weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            // The exp(-x^2/2) factor underflows beyond |x| ~ 38; nodes stay below
            // sqrt(2n + 1) so n <= 512 is safe.
            for _ in 0..3 {
                let (pm1, pn) = hermite_functions(n, *x);
                let dp = two_n.sqrt() * pm1 - *x * pn;
                if dp != 0.0 {
                    *x -= pn / dp;
                }
            }
            let (pm1, _) = hermite_functions(n, *x);
            scaled_weights.push(1.0 / (n as f64 * pm1 * pm1));
        }
        let log_scaled_weights = scaled_weights.iter().map(|w| w.ln()).collect();
        GaussHermite {
            nodes,
            scaled_weights,
            log_scaled_weights,
        }
    }

    /// Cached rule with `n` nodes.
    pub fn get(n: usize) -> &'static GaussHermite {
        static CACHE: OnceLock<Mutex<HashMap<usize, &'static GaussHermite>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        *guard
            .entry(n)
            .or_insert_with(|| Box::leak(Box::new(GaussHermite::build(n))))
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, whole: (f64, f64), depth: u32) -> f64 {
        let (val, err) = whole;
        if err <= tol || depth == 0 {
            return val;
        }
        let m = 0.5 * (a + b);
        let left = gk15(f, a, m);
        let right = gk15(f, m, b);
        rec(f, a, m, 0.5 * tol, left, depth - 1) + rec(f, m, b, 0.5 * tol, right, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let whole = gk15(&f, a, b);
    rec(&f, a, b, tol, whole, 40)
}

/// Neville interpolation of `(xs, ys)` evaluated at `x0`.
pub fn neville(xs: &[f64], ys: &[f64], x0: f64) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mut p = ys.to_vec();
    let n = xs.len();
    for k in 1..n {
        for i in 0..n - k {
            p[i] = ((x0 - xs[i + k]) * p[i] + (xs[i] - x0) * p[i + 1]) / (xs[i] - xs[i + k]);
        }
    }
    p[0]
}

/// Golden-section minimization on `[a, b]`; returns `(x, f(x))`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Bisection for a sign change of `f` on `[a, b]`.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= tol {
            return m;
        }
        let fm = f(m);
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}
