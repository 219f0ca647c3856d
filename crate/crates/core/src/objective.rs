//! Scores, cross-entropy loss, analytic gradients and argmax accuracy.
//!
//! Rows are processed in fixed-size chunks of inputs; chunk results are
//! combined in chunk order so values do not depend on the thread schedule.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::WeightModel;
use crate::problem::{Mode, ProblemInstance};
use crate::real::Real;

/// Default memory budget for materialized decoupled output blocks.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

/// Target bytes of the per-chunk score buffer.
const CHUNK_BYTES: usize = 8 << 20;

enum Outputs<T> {
    Shared(Array2<T>),
    Blocks(Vec<Array2<T>>),
    Lazy,
}

/// Instance data converted to the working precision.
pub struct Workspace<'a, T> {
    inst: &'a ProblemInstance,
    e: Array2<T>,
    outputs: Outputs<T>,
    chunk: usize,
}

/// Loss, accuracy and optionally the gradient at one parameter point.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub loss: f64,
    pub accuracy: f64,
    pub n_correct: usize,
    pub grad: Option<WeightModel<T>>,
}

struct ChunkOut<T> {
    loss: f64,
    correct: usize,
    grads: Vec<Array2<T>>,
}

fn cast<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::of)
}

impl<'a, T: Real> Workspace<'a, T> {
    /// Decoupled output blocks are materialized when `p * p * d` values fit
    /// in `cache_bytes`; otherwise they are regenerated on every pass.
    pub fn new(inst: &'a ProblemInstance, cache_bytes: usize) -> Result<Self> {
        let outputs = match inst.mode {
            Mode::Op => Outputs::Shared(cast(inst.outputs_shared.as_ref().expect("OP outputs"))),
            Mode::Dp => {
                let need = inst.p * inst.p * inst.d * std::mem::size_of::<T>();
                if need <= cache_bytes {
                    let blocks = (0..inst.p)
                        .into_par_iter()
                        .map(|mu| inst.output_block(mu).map(|b| cast(&b)))
                        .collect::<Result<Vec<_>>>()?;
                    Outputs::Blocks(blocks)
                } else {
                    log::debug!("DP outputs ({need} bytes) exceed cache budget; regenerating lazily");
                    Outputs::Lazy
                }
            }
        };
        let row_bytes = inst.p * std::mem::size_of::<T>();
        let chunk = (CHUNK_BYTES / row_bytes.max(1)).clamp(1, 256);
        Ok(Workspace {
            inst,
            e: cast(&inst.inputs),
            outputs,
            chunk,
        })
    }

    pub fn instance(&self) -> &ProblemInstance {
        self.inst
    }

    pub fn is_cached(&self) -> bool {
        !matches!(self.outputs, Outputs::Lazy)
    }

    fn check(&self, model: &WeightModel<T>) -> Result<()> {
        if model.d() != self.inst.d {
            return Err(Error::DimensionMismatch(format!(
                "model d = {} but instance d = {}",
                model.d(),
                self.inst.d
            )));
        }
        Ok(())
    }

    /// Rows `h_mu = W e_mu` and, for the factored model, `a_mu = R^T e_mu`.
    fn hidden(&self, model: &WeightModel<T>) -> (Array2<T>, Option<Array2<T>>) {
        match model {
            WeightModel::FullRank { w } => (self.e.dot(&w.t()), None),
            WeightModel::Factored { q, r } => {
                let a = self.e.dot(r);
                (a.dot(&q.t()), Some(a))
            }
        }
    }

    /// Score matrix rows for inputs `lo..hi` (row `i` holds `s_{lo+i, rho}`).
    fn score_rows(&self, h: &Array2<T>, lo: usize, hi: usize) -> Array2<T> {
        let hc = h.slice(s![lo..hi, ..]);
        match &self.outputs {
            Outputs::Shared(u) => hc.dot(&u.t()),
            Outputs::Blocks(blocks) => {
                let mut out = Array2::zeros((hi - lo, self.inst.p));
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    row.assign(&blocks[lo + i].dot(&hc.row(i)));
                }
                out
            }
            Outputs::Lazy => {
                let mut out = Array2::zeros((hi - lo, self.inst.p));
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let block: Array2<T> = cast(&self.inst.output_block(lo + i).expect("in range"));
                    row.assign(&block.dot(&hc.row(i)));
                }
                out
            }
        }
    }

    /// `v_mu = sum_rho c_{mu rho} u_rho^(mu)` for the chunk.
    fn back_rows(&self, c: &Array2<T>, lo: usize) -> Array2<T> {
        match &self.outputs {
            Outputs::Shared(u) => c.dot(u),
            Outputs::Blocks(blocks) => {
                let mut v = Array2::zeros((c.nrows(), self.inst.d));
                for (i, mut row) in v.rows_mut().into_iter().enumerate() {
                    row.assign(&blocks[lo + i].t().dot(&c.row(i)));
                }
                v
            }
            Outputs::Lazy => {
                let mut v = Array2::zeros((c.nrows(), self.inst.d));
                for (i, mut row) in v.rows_mut().into_iter().enumerate() {
                    let block: Array2<T> = cast(&self.inst.output_block(lo + i).expect("in range"));
                    row.assign(&block.t().dot(&c.row(i)));
                }
                v
            }
        }
    }

    /// Full score matrix in f64, `S[mu, rho] = u_rho^(mu)T W e_mu`.
    pub fn score_matrix(&self, model: &WeightModel<T>) -> Result<Array2<f64>> {
        self.check(model)?;
        let (h, _) = self.hidden(model);
        let p = self.inst.p;
        let parts: Vec<Array2<T>> = chunk_bounds(p, self.chunk)
            .into_par_iter()
            .map(|(lo, hi)| self.score_rows(&h, lo, hi))
            .collect();
        let mut out = Array2::zeros((p, p));
        let mut row = 0;
        for part in parts {
            let n = part.nrows();
            out.slice_mut(s![row..row + n, ..]).assign(&part.mapv(|x| x.f64()));
            row += n;
        }
        Ok(out)
    }

    /// Loss, accuracy and (if requested) the gradient.
    pub fn evaluate(&self, model: &WeightModel<T>, want_grad: bool) -> Result<Evaluation<T>> {
        self.check(model)?;
        let p = self.inst.p;
        let (h, a) = self.hidden(model);
        let outs: Vec<ChunkOut<T>> = chunk_bounds(p, self.chunk)
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut c = self.score_rows(&h, lo, hi);
                let mut loss = 0.0;
                let mut correct = 0;
                for (i, row) in c.rows_mut().into_iter().enumerate() {
                    let (l, ok) = softmax_row(row, lo + i);
                    loss += l;
                    correct += ok as usize;
                }
                let grads = if want_grad {
                    let v = self.back_rows(&c, lo);
                    let ec = self.e.slice(s![lo..hi, ..]);
                    match (model, &a) {
                        (WeightModel::FullRank { .. }, _) => vec![v.t().dot(&ec)],
                        (WeightModel::Factored { q, .. }, Some(a)) => {
                            let ac = a.slice(s![lo..hi, ..]);
                            vec![v.t().dot(&ac), ec.t().dot(&v.dot(q))]
                        }
                        _ => unreachable!(),
                    }
                } else {
                    Vec::new()
                };
                ChunkOut {
                    loss,
                    correct,
                    grads,
                }
            })
            .collect();

        let mut loss = 0.0;
        let mut correct = 0;
        let mut acc: Option<Vec<Array2<T>>> = None;
        for out in outs {
            loss += out.loss;
            correct += out.correct;
            if want_grad {
                match acc.as_mut() {
                    None => acc = Some(out.grads),
                    Some(g) => {
                        for (x, y) in g.iter_mut().zip(&out.grads) {
                            x.zip_mut_with(y, |a, &b| *a = *a + b);
                        }
                    }
                }
            }
        }
        let loss = loss / p as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(0, format!("non-finite loss {loss}")));
        }
        let inv_p = T::of(1.0 / p as f64);
        let grad = acc.map(|mut g| {
            for x in g.iter_mut() {
                x.mapv_inplace(|v| v * inv_p);
            }
            let mut it = g.into_iter();
            match model {
                WeightModel::FullRank { .. } => WeightModel::FullRank {
                    w: it.next().unwrap(),
                },
                WeightModel::Factored { .. } => WeightModel::Factored {
                    q: it.next().unwrap(),
                    r: it.next().unwrap(),
                },
            }
        });
        if let Some(g) = &grad {
            if !g.all_finite() {
                return Err(Error::numeric(0, "non-finite gradient"));
            }
        }
        Ok(Evaluation {
            loss,
            accuracy: correct as f64 / p as f64,
            n_correct: correct,
            grad,
        })
    }
}

fn chunk_bounds(p: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..p)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(p)))
        .collect()
}

/// Replace a score row by `softmax - onehot(target)`; returns the row's
/// cross-entropy and whether the target is the strict argmax.
fn softmax_row<T: Real>(mut row: ArrayViewMut1<T>, target: usize) -> (f64, bool) {
    let st = row[target];
    let mut max = T::neg_infinity();
    let mut ok = true;
    for (rho, &x) in row.iter().enumerate() {
        if x > max {
            max = x;
        }
        if rho != target && !(st > x) {
            ok = false;
        }
    }
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    let lse = max + z.ln();
    let inv = T::one() / z;
    row.mapv_inplace(|x| x * inv);
    row[target] = row[target] - T::one();
    ((lse - st).f64(), ok)
}

/// Scores `(s_{mu rho})_rho` for one input.
pub fn scores<T: Real>(model: &WeightModel<T>, inst: &ProblemInstance, mu: usize) -> Result<Array1<f64>> {
    if model.d() != inst.d {
        return Err(Error::DimensionMismatch(format!(
            "model d = {} but instance d = {}",
            model.d(),
            inst.d
        )));
    }
    let e = inst.input(mu)?.mapv(T::of);
    let h = apply(model, e.view());
    let u: Array2<T> = cast(&inst.output_block(mu)?);
    Ok(u.dot(&h).mapv(|x| x.f64()))
}

/// `W x` without forming `W` for the factored model.
pub fn apply<T: Real>(model: &WeightModel<T>, x: ArrayView1<T>) -> Array1<T> {
    match model {
        WeightModel::FullRank { w } => w.dot(&x),
        WeightModel::Factored { q, r } => q.dot(&r.t().dot(&x)),
    }
}

pub fn cross_entropy_loss<T: Real>(model: &WeightModel<T>, inst: &ProblemInstance) -> Result<f64> {
    Ok(Workspace::<T>::new(inst, DEFAULT_CACHE_BYTES)?
        .evaluate(model, false)?
        .loss)
}

pub fn loss_gradient<T: Real>(model: &WeightModel<T>, inst: &ProblemInstance) -> Result<WeightModel<T>> {
    Ok(Workspace::<T>::new(inst, DEFAULT_CACHE_BYTES)?
        .evaluate(model, true)?
        .grad
        .expect("gradient requested"))
}

/// Fraction of inputs whose target strictly beats every competitor.
pub fn accuracy<T: Real>(model: &WeightModel<T>, inst: &ProblemInstance) -> Result<f64> {
    Ok(Workspace::<T>::new(inst, DEFAULT_CACHE_BYTES)?
        .evaluate(model, false)?
        .accuracy)
}

/// Per-input maximum competitor score from a score matrix.
pub fn max_nontarget(s: &Array2<f64>) -> Array1<f64> {
    s.axis_iter(Axis(0))
        .enumerate()
        .map(|(mu, row)| {
            row.iter()
                .enumerate()
                .filter(|&(rho, _)| rho != mu)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::sample_instance;
    use ndarray::array;

    fn unit_instance() -> ProblemInstance {
        let mut inst = sample_instance(2, 2, Mode::Op, 0).unwrap();
        inst.inputs = array![[1.0, 0.0], [0.0, 1.0]];
        inst.outputs_shared = Some(array![[1.0, 0.0], [0.0, 1.0]]);
        inst
    }

    /// Direct per-term evaluation used as an oracle.
    fn naive_loss_acc(w: &Array2<f64>, inst: &ProblemInstance) -> (f64, f64) {
        let p = inst.p;
        let mut loss = 0.0;
        let mut correct = 0;
        for mu in 0..p {
            let e = inst.inputs.row(mu);
            let mut s = vec![0.0; p];
            for (rho, sr) in s.iter_mut().enumerate() {
                let u = inst.output_vector(mu, rho).unwrap();
                for i in 0..inst.d {
                    for j in 0..inst.d {
                        *sr += u[i] * w[[i, j]] * e[j];
                    }
                }
            }
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            loss -= (s[mu].exp() / z).ln();
            if (0..p).all(|r| r == mu || s[mu] > s[r]) {
                correct += 1;
            }
        }
        (loss / p as f64, correct as f64 / p as f64)
    }

    #[test]
    fn zero_map_scores_and_loss() {
        let inst = sample_instance(5, 7, Mode::Op, 3).unwrap();
        let w = WeightModel::<f64>::zeros_full(5);
        assert!(scores(&w, &inst, 2).unwrap().iter().all(|&x| x == 0.0));
        let loss = cross_entropy_loss(&w, &inst).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        assert_eq!(accuracy(&w, &inst).unwrap(), 0.0);
    }

    #[test]
    fn identity_on_unit_vectors() {
        let inst = unit_instance();
        let w = WeightModel::FullRank {
            w: Array2::<f64>::eye(2),
        };
        assert_eq!(scores(&w, &inst, 0).unwrap().to_vec(), vec![1.0, 0.0]);
        assert_eq!(accuracy(&w, &inst).unwrap(), 1.0);
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((cross_entropy_loss(&w, &inst).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_and_accuracy_match_naive() {
        for (mode, seed) in [(Mode::Op, 1), (Mode::Dp, 2), (Mode::Op, 3)] {
            let inst = sample_instance(5, 4, mode, seed).unwrap();
            let m = WeightModel::<f64>::init(5, 1.0, false, seed + 10).unwrap().scaled(5.0);
            let (l, a) = naive_loss_acc(&m.effective(), &inst);
            assert!((cross_entropy_loss(&m, &inst).unwrap() - l).abs() < 1e-12);
            assert_eq!(accuracy(&m, &inst).unwrap(), a);
        }
        for seed in 0..5 {
            let inst = sample_instance(6, 5, Mode::Op, 100 + seed).unwrap();
            let m = WeightModel::<f64>::init(6, 1.0, false, seed).unwrap().scaled(40.0);
            let (_, a) = naive_loss_acc(&m.effective(), &inst);
            assert_eq!(accuracy(&m, &inst).unwrap(), a);
        }
    }

    #[test]
    fn factored_matches_lifted() {
        for mode in [Mode::Op, Mode::Dp] {
            let inst = sample_instance(7, 9, mode, 4).unwrap();
            let f = WeightModel::<f64>::init(7, 0.5, true, 8).unwrap().scaled(30.0);
            let full = WeightModel::FullRank { w: f.effective() };
            for mu in 0..inst.p {
                let a = scores(&f, &inst, mu).unwrap();
                let b = scores(&full, &inst, mu).unwrap();
                assert!((&a - &b).mapv(f64::abs).sum() < 1e-12);
            }
            let ws = Workspace::new(&inst, DEFAULT_CACHE_BYTES).unwrap();
            let ef = ws.evaluate(&f, true).unwrap();
            let ew = ws.evaluate(&full, true).unwrap();
            assert!((ef.loss - ew.loss).abs() < 1e-12);
            assert_eq!(ef.accuracy, ew.accuracy);
            let (WeightModel::Factored { q, r }, Some(WeightModel::Factored { q: gq, r: gr })) = (&f, &ef.grad) else {
                panic!()
            };
            let Some(WeightModel::FullRank { w: gw }) = &ew.grad else {
                panic!()
            };
            // Chain rule through the explicit product.
            assert!((gq - &gw.dot(r)).mapv(f64::abs).sum() < 1e-10);
            assert!((gr - &gw.t().dot(q)).mapv(f64::abs).sum() < 1e-10);
        }
    }

    #[test]
    fn symmetric_outputs_cancel_at_zero() {
        // Outputs closed under negation and W = 0: the softmax-weighted mean
        // output vanishes, so the gradient is -(1/p) sum u_mu e_mu^T.
        let mut inst = sample_instance(3, 4, Mode::Op, 0).unwrap();
        let u = array![[1.0, 2.0, 0.5], [-1.0, -2.0, -0.5], [0.3, -1.0, 2.0], [-0.3, 1.0, -2.0]];
        inst.outputs_shared = Some(u.clone());
        let g = loss_gradient(&WeightModel::<f64>::zeros_full(3), &inst).unwrap();
        let expected = -u.t().dot(&inst.inputs) / 4.0;
        assert!((&g.effective() - &expected).mapv(f64::abs).sum() < 1e-14);
    }

    #[test]
    fn cached_and_lazy_dp_agree() {
        let inst = sample_instance(6, 11, Mode::Dp, 5).unwrap();
        let m = WeightModel::<f64>::init(6, 0.5, true, 1).unwrap().scaled(20.0);
        let a = Workspace::new(&inst, DEFAULT_CACHE_BYTES).unwrap();
        let b = Workspace::new(&inst, 0).unwrap();
        assert!(a.is_cached() && !b.is_cached());
        let ea = a.evaluate(&m, true).unwrap();
        let eb = b.evaluate(&m, true).unwrap();
        assert_eq!(ea.loss, eb.loss);
        assert_eq!(ea.grad, eb.grad);
    }

    #[test]
    fn chunking_is_exact() {
        let inst = sample_instance(4, 600, Mode::Op, 2).unwrap();
        let m = WeightModel::<f64>::init(4, 1.0, false, 2).unwrap().scaled(10.0);
        let mut ws = Workspace::new(&inst, DEFAULT_CACHE_BYTES).unwrap();
        let s = ws.score_matrix(&m).unwrap();
        ws.chunk = 7;
        let s7 = ws.score_matrix(&m).unwrap();
        assert!((&s - &s7).mapv(f64::abs).sum() < 1e-10);
        let e1 = ws.evaluate(&m, false).unwrap();
        ws.chunk = 600;
        let e2 = ws.evaluate(&m, false).unwrap();
        assert!((e1.loss - e2.loss).abs() < 1e-12);
        assert_eq!(e1.n_correct, e2.n_correct);
    }

    #[test]
    fn loss_stable_for_large_scores() {
        let inst = sample_instance(4, 5, Mode::Op, 6).unwrap();
        let m = WeightModel::<f64>::init(4, 1.0, false, 1).unwrap();
        let big = m.scaled(1e4 / scores(&m, &inst, 0).unwrap().mapv(f64::abs).sum());
        assert!(scores(&big, &inst, 0).unwrap().iter().any(|x| x.abs() > 1e3));
        assert!(cross_entropy_loss(&big, &inst).unwrap().is_finite());
    }

    #[test]
    fn dimension_mismatch() {
        let inst = sample_instance(4, 5, Mode::Op, 6).unwrap();
        let m = WeightModel::<f64>::zeros_full(3);
        assert!(matches!(accuracy(&m, &inst), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn f32_agrees_with_f64() {
        let inst = sample_instance(8, 20, Mode::Op, 6).unwrap();
        let m = WeightModel::<f64>::init(8, 1.0, false, 1).unwrap().scaled(10.0);
        let a = cross_entropy_loss(&m, &inst).unwrap();
        let b = cross_entropy_loss(&m.cast::<f32>(), &inst).unwrap();
        assert!((a - b).abs() < 1e-5);
    }

    /// Max over entries of |analytic - central difference| / max(|a|, |fd|, 1e-8).
    fn fd_rel_error(model: &WeightModel<f64>, inst: &ProblemInstance) -> f64 {
        let grad = loss_gradient(model, inst).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut probe = model.clone();
        let n = probe.params().len();
        for k in 0..n {
            let shape = probe.params()[k].dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let x0 = probe.params()[k][[i, j]];
                    probe.params_mut()[k][[i, j]] = x0 + h;
                    let lp = cross_entropy_loss(&probe, inst).unwrap();
                    probe.params_mut()[k][[i, j]] = x0 - h;
                    let lm = cross_entropy_loss(&probe, inst).unwrap();
                    probe.params_mut()[k][[i, j]] = x0;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad.params()[k][[i, j]];
                    worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for trial in 0..10u64 {
            let d = 3 + (trial as usize % 6);
            let p = 2 + (trial as usize % 5);
            let mode = if trial % 2 == 0 { Mode::Op } else { Mode::Dp };
            let inst = sample_instance(d, p, mode, 100 + trial).unwrap();
            let full = WeightModel::<f64>::init(d, 1.0, false, trial).unwrap().scaled(3.0);
            assert!(fd_rel_error(&full, &inst) <= 1e-4, "full trial {trial}");
            let fac = WeightModel::<f64>::init(d, 0.5, true, trial).unwrap().scaled(3.0);
            assert!(fd_rel_error(&fac, &inst) <= 1e-4, "factored trial {trial}");
        }
    }
}
