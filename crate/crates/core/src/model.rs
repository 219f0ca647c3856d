//! Full-rank and factored weight matrices.

use std::io::{Read, Write};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// `W` (d x d) or the factorization `W = Q R^T` with `Q, R` of shape d x m.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightModel<T = f64> {
    FullRank { w: Array2<T> },
    Factored { q: Array2<T>, r: Array2<T> },
}

/// Hidden width `round(kappa d)`, at least 1.
pub fn hidden_width(kappa: f64, d: usize) -> usize {
    ((kappa * d as f64).round() as usize).max(1)
}

impl<T: Real> WeightModel<T> {
    pub fn zeros_full(d: usize) -> Self {
        WeightModel::FullRank {
            w: Array2::zeros((d, d)),
        }
    }

    pub fn zeros_factored(d: usize, m: usize) -> Self {
        WeightModel::Factored {
            q: Array2::zeros((d, m)),
            r: Array2::zeros((d, m)),
        }
    }

    /// Gaussian initialization with standard deviation `1/d`.
    ///
    /// `kappa = 1` with `factored = false` gives the full-rank model; otherwise
    /// the factored model with `m = round(kappa d)`.
    pub fn init(d: usize, kappa: f64, factored: bool, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::invalid(format!("kappa must lie in (0, 1], got {kappa}")));
        }
        let key = rng::derive(seed, rng::ROLE_INIT);
        let std = 1.0 / d as f64;
        let draw = |rows: usize, cols: usize, offset: usize| {
            let mut buf = vec![0.0f64; cols];
            let mut a = Array2::<T>::zeros((rows, cols));
            for (i, mut row) in a.rows_mut().into_iter().enumerate() {
                rng::fill_normal(key, (offset + i) as u64, &mut buf);
                for (dst, &src) in row.iter_mut().zip(&buf) {
                    *dst = T::of(std * src);
                }
            }
            a
        };
        if factored {
            let m = hidden_width(kappa, d);
            Ok(WeightModel::Factored {
                q: draw(d, m, 0),
                r: draw(d, m, d),
            })
        } else {
            if kappa != 1.0 {
                return Err(Error::invalid("full-rank model requires kappa = 1"));
            }
            Ok(WeightModel::FullRank { w: draw(d, d, 0) })
        }
    }

    pub fn d(&self) -> usize {
        match self {
            WeightModel::FullRank { w } => w.nrows(),
            WeightModel::Factored { q, .. } => q.nrows(),
        }
    }

    /// Rank bound: `d` for full rank, `m` for factored.
    pub fn m(&self) -> usize {
        match self {
            WeightModel::FullRank { w } => w.nrows(),
            WeightModel::Factored { q, .. } => q.ncols(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, WeightModel::Factored { .. })
    }

    /// Effective `W`.
    pub fn effective(&self) -> Array2<T> {
        match self {
            WeightModel::FullRank { w } => w.clone(),
            WeightModel::Factored { q, r } => q.dot(&r.t()),
        }
    }

    pub fn cast<U: Real>(&self) -> WeightModel<U> {
        let c = |a: &Array2<T>| a.mapv(|x| U::of(x.f64()));
        match self {
            WeightModel::FullRank { w } => WeightModel::FullRank { w: c(w) },
            WeightModel::Factored { q, r } => WeightModel::Factored { q: c(q), r: c(r) },
        }
    }

    /// Multiply the effective map by `c` (split as `sqrt c` per factor).
    pub fn scaled(&self, c: T) -> Self {
        match self {
            WeightModel::FullRank { w } => WeightModel::FullRank { w: w * c },
            WeightModel::Factored { q, r } => {
                let s = c.sqrt();
                WeightModel::Factored { q: q * s, r: r * s }
            }
        }
    }

    /// A zero model of identical shape.
    pub fn zeros_like(&self) -> Self {
        match self {
            WeightModel::FullRank { w } => WeightModel::FullRank {
                w: Array2::zeros(w.raw_dim()),
            },
            WeightModel::Factored { q, r } => WeightModel::Factored {
                q: Array2::zeros(q.raw_dim()),
                r: Array2::zeros(r.raw_dim()),
            },
        }
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        match self {
            WeightModel::FullRank { w } => vec![w],
            WeightModel::Factored { q, r } => vec![q, r],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        match self {
            WeightModel::FullRank { w } => vec![w],
            WeightModel::Factored { q, r } => vec![q, r],
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// `self += c * other`, shapes must agree.
    pub fn axpy(&mut self, c: T, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            Zip::from(a).and(b).for_each(|x, &y| *x = *x + c * y);
        }
    }

    /// Write the binary export: a 16-byte little-endian header
    /// `{d: u32, m: u32, variant: u32, reserved: u32}` followed by the
    /// parameters as row-major little-endian f64 (`W`, or `Q` then `R`).
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let variant: u32 = if self.is_factored() { 1 } else { 0 };
        for v in [self.d() as u32, self.m() as u32, variant, 0u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for a in self.params() {
            for x in a.iter() {
                out.write_all(&x.f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (d, m, variant) = (word(0), word(1), word(2));
        let mut read = |rows: usize, cols: usize| -> Result<Array2<T>> {
            let mut buf = vec![0u8; rows * cols * 8];
            input.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
        };
        match variant {
            0 if d == m => Ok(WeightModel::FullRank { w: read(d, d)? }),
            1 => {
                let q = read(d, m)?;
                let r = read(d, m)?;
                Ok(WeightModel::Factored { q, r })
            }
            _ => Err(Error::invalid(format!(
                "bad weight header: d={d} m={m} variant={variant}"
            ))),
        }
    }
}
