//! Random association instances.
//!
//! The original problem (OP) scores every input against one shared output set;
//! the decoupled problem (DP) gives each input its own independent candidates.
//! Targets follow the identity assignment: input `mu` must select output `mu`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "DP")]
    Dp,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Op => "OP",
            Mode::Dp => "DP",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "OP" | "op" => Ok(Mode::Op),
            "DP" | "dp" => Ok(Mode::Dp),
            other => Err(format!("unknown mode '{other}' (expected OP or DP)")),
        }
    }
}

/// Serializable description; embeddings are always regenerated from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub d: usize,
    pub p: usize,
    pub mode: Mode,
    pub master_seed: u64,
}

/// Inputs `e_mu` (rows of a `p x d` matrix) and outputs, shared or per-input.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub d: usize,
    pub p: usize,
    pub mode: Mode,
    pub master_seed: u64,
    pub inputs: Array2<f64>,
    pub outputs_shared: Option<Array2<f64>>,
    pub per_mu_seed: Option<Vec<u64>>,
}

/// Draw an instance with i.i.d. standard normal embeddings.
pub fn sample_instance(d: usize, p: usize, mode: Mode, master_seed: u64) -> Result<ProblemInstance> {
    if d == 0 {
        return Err(Error::invalid("d must be at least 1"));
    }
    if p < 2 {
        return Err(Error::invalid("p must be at least 2"));
    }
    let inputs = gaussian_rows(rng::derive(master_seed, rng::ROLE_INPUT), p, d);
    let (outputs_shared, per_mu_seed) = match mode {
        Mode::Op => (
            Some(gaussian_rows(rng::derive(master_seed, rng::ROLE_OUTPUT), p, d)),
            None,
        ),
        Mode::Dp => {
            let base = rng::derive(master_seed, rng::ROLE_DP_BASE);
            (None, Some((0..p as u64).map(|mu| rng::mix(base, mu)).collect()))
        }
    };
    Ok(ProblemInstance {
        d,
        p,
        mode,
        master_seed,
        inputs,
        outputs_shared,
        per_mu_seed,
    })
}

fn gaussian_rows(key: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        rng::fill_normal(key, i as u64, row.as_slice_mut().expect("standard layout"));
    }
    out
}

impl ProblemInstance {
    pub fn descriptor(&self) -> InstanceDescriptor {
        InstanceDescriptor {
            d: self.d,
            p: self.p,
            mode: self.mode,
            master_seed: self.master_seed,
        }
    }

    pub fn from_descriptor(desc: &InstanceDescriptor) -> Result<Self> {
        sample_instance(desc.d, desc.p, desc.mode, desc.master_seed)
    }

    pub fn alpha(&self) -> f64 {
        alpha_of(self.p, self.d)
    }

    pub fn input(&self, mu: usize) -> Result<ArrayView1<'_, f64>> {
        self.check(mu, "mu")?;
        Ok(self.inputs.row(mu))
    }

    /// Output `rho` as seen by input `mu`.
    pub fn output_vector(&self, mu: usize, rho: usize) -> Result<Array1<f64>> {
        self.check(mu, "mu")?;
        self.check(rho, "rho")?;
        match (&self.outputs_shared, &self.per_mu_seed) {
            (Some(u), _) => Ok(u.row(rho).to_owned()),
            (None, Some(seeds)) => {
                let mut v = Array1::zeros(self.d);
                rng::fill_normal(seeds[mu], rho as u64, v.as_slice_mut().expect("contiguous"));
                Ok(v)
            }
            _ => unreachable!("instance has no outputs"),
        }
    }

    /// All candidate outputs for input `mu` as a `p x d` matrix.
    pub fn output_block(&self, mu: usize) -> Result<Array2<f64>> {
        self.check(mu, "mu")?;
        match (&self.outputs_shared, &self.per_mu_seed) {
            (Some(u), _) => Ok(u.clone()),
            (None, Some(seeds)) => Ok(gaussian_rows(seeds[mu], self.p, self.d)),
            _ => unreachable!("instance has no outputs"),
        }
    }

    /// Bytes held by the instance itself (inputs, shared outputs, seeds).
    pub fn resident_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        self.inputs.len() * f
            + self.outputs_shared.as_ref().map_or(0, |u| u.len() * f)
            + self.per_mu_seed.as_ref().map_or(0, |s| s.len() * 8)
    }

    fn check(&self, index: usize, what: &'static str) -> Result<()> {
        if index >= self.p {
            return Err(Error::OutOfRange {
                what,
                index,
                limit: self.p,
            });
        }
        Ok(())
    }
}

/// Load parameter `p ln p / d^2`.
pub fn alpha_of(p: usize, d: usize) -> f64 {
    let p = p as f64;
    p * p.ln() / (d as f64 * d as f64)
}

/// Association count whose load is closest to `alpha` at dimension `d`.
pub fn p_from_alpha(alpha: f64, d: usize) -> usize {
    let target = alpha * (d as f64) * (d as f64);
    let f = |p: f64| p * p.ln() - target;
    if !(target > 2.0 * 2f64.ln()) {
        return 2;
    }
    let (mut lo, mut hi) = (2.0f64, 4.0f64);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    let base = lo.floor().max(2.0) as usize;
    (base.saturating_sub(1).max(2)..=base + 2)
        .min_by(|&a, &b| {
            f(a as f64)
                .abs()
                .partial_cmp(&f(b as f64).abs())
                .expect("finite")
        })
        .expect("non-empty range")
}

/// A resolved `(alpha, d, p)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub alpha: f64,
    pub d: usize,
    pub p: usize,
}

impl LoadPoint {
    pub fn new(alpha: f64, d: usize) -> Self {
        LoadPoint {
            alpha,
            d,
            p: p_from_alpha(alpha, d),
        }
    }

    /// Whether `p` is within one unit of rounding of the requested load.
    pub fn within_slack(&self) -> bool {
        let p = self.p as f64;
        let dd = (self.d * self.d) as f64;
        (p * p.ln() - self.alpha * dd).abs() <= (p + 1.0).ln() + (p + 1.0) / p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let inst = sample_instance(4, 2, Mode::Op, 7).unwrap();
        assert_eq!(inst.inputs.dim(), (2, 4));
        assert_eq!(inst.outputs_shared.as_ref().unwrap().dim(), (2, 4));
        assert!(inst.per_mu_seed.is_none());
        let inst = sample_instance(4, 2, Mode::Dp, 7).unwrap();
        assert_eq!(inst.per_mu_seed.as_ref().unwrap().len(), 2);
        assert!(inst.outputs_shared.is_none());
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(sample_instance(0, 3, Mode::Op, 1).is_err());
        assert!(sample_instance(3, 1, Mode::Op, 1).is_err());
        assert!(sample_instance(3, 1, Mode::Dp, 1).is_err());
    }

    #[test]
    fn op_outputs_are_shared() {
        let inst = sample_instance(5, 6, Mode::Op, 11).unwrap();
        assert_eq!(
            inst.output_vector(0, 3).unwrap(),
            inst.output_vector(1, 3).unwrap()
        );
    }

    #[test]
    fn dp_outputs_are_per_input_and_regenerable() {
        let inst = sample_instance(5, 12, Mode::Dp, 11).unwrap();
        assert_ne!(
            inst.output_vector(0, 3).unwrap(),
            inst.output_vector(1, 3).unwrap()
        );
        let a = inst.output_vector(5, 9).unwrap();
        let b = inst.output_vector(5, 9).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
        let block = inst.output_block(5).unwrap();
        assert_eq!(block.row(9), a);
        let d0 = sample_instance(4, 2, Mode::Dp, 7).unwrap();
        assert_ne!(d0.output_vector(0, 0).unwrap(), d0.output_vector(1, 0).unwrap());
    }

    #[test]
    fn out_of_range_index() {
        let inst = sample_instance(3, 4, Mode::Dp, 1).unwrap();
        assert!(matches!(
            inst.output_vector(4, 0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(inst.output_vector(0, 4).is_err());
        assert!(inst.input(4).is_err());
    }

    #[test]
    fn descriptor_roundtrip() {
        let inst = sample_instance(6, 5, Mode::Dp, 99).unwrap();
        let json = serde_json::to_string(&inst.descriptor()).unwrap();
        assert_eq!(json, r#"{"d":6,"p":5,"mode":"DP","master_seed":99}"#);
        let desc: InstanceDescriptor = serde_json::from_str(&json).unwrap();
        let again = ProblemInstance::from_descriptor(&desc).unwrap();
        assert_eq!(again.inputs, inst.inputs);
        assert_eq!(again.output_block(3).unwrap(), inst.output_block(3).unwrap());
    }

    #[test]
    fn dp_memory_is_linear_in_p() {
        let inst = sample_instance(10, 400, Mode::Dp, 3).unwrap();
        assert_eq!(inst.resident_bytes(), 400 * 10 * 8 + 400 * 8);
    }

    #[test]
    fn gaussian_moments() {
        let inst = sample_instance(1000, 1000, Mode::Op, 2024).unwrap();
        let n = inst.inputs.len() as f64;
        let mean = inst.inputs.sum() / n;
        let var = inst.inputs.mapv(|x| (x - mean) * (x - mean)).sum() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        // 3 sigma of the sample mean at n = 1e6 is 3e-3.
        assert!(mean.abs() < 3.0 / n.sqrt());
    }

    #[test]
    fn alpha_of_small() {
        assert!((alpha_of(2, 10) - 2.0 * 2f64.ln() / 100.0).abs() < 1e-15);
    }

    #[test]
    fn p_from_alpha_matches_direct_search() {
        // Independent oracle: exhaustive scan over integers.
        for &(a, d) in &[(0.5, 100usize), (0.2, 150), (1.2, 150), (0.7, 37)] {
            let target = a * (d * d) as f64;
            let best = (2..100_000usize)
                .min_by(|&x, &y| {
                    let fx = (x as f64 * (x as f64).ln() - target).abs();
                    let fy = (y as f64 * (y as f64).ln() - target).abs();
                    fx.partial_cmp(&fy).unwrap()
                })
                .unwrap();
            assert_eq!(p_from_alpha(a, d), best, "alpha {a} d {d}");
        }
        assert_eq!(p_from_alpha(0.5, 100), 755);
        assert_eq!(p_from_alpha(1e-6, 10), 2);
    }

    #[test]
    fn p_from_alpha_roundtrip_within_slack() {
        for i in 2..=12 {
            let a = i as f64 / 10.0;
            let lp = LoadPoint::new(a, 150);
            assert!(lp.within_slack(), "{lp:?}");
        }
    }
}
