//! Wasserstein-1 distances: exact discrete optimal transport for equal-weight
//! clouds, a batched estimator for large clouds, exact 1D mixture W1 via CDF
//! quadrature, and the TV/KL/Pinsker diagnostic chain.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::quad::adaptive_quad;
use crate::util::{mean_stderr, rng_from};

/// Default cap on the exact assignment solver.
pub const DEFAULT_SOLVER_CAP: usize = 4096;

/// Equal-weight point cloud in `dim` dimensions.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<DVector<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("empirical measure needs at least one point".into()));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "empirical measure point",
                    expected: dim,
                    got: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("empirical measure point".into()));
            }
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// Random subsample without replacement, deterministic per rng state.
    fn subsample(&self, count: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        Self {
            dim: self.dim,
            points: idx.into_iter().map(|i| self.points[i].clone()).collect(),
        }
    }
}

/// Optimal coupling between two equal-size clouds with its LP certificate.
#[derive(Debug, Clone, Serialize)]
pub struct TransportPlan {
    /// `assignment[i]` is the index in `b` matched to point `i` of `a`.
    pub assignment: Vec<usize>,
    /// Mean matched distance Σ π_ij ‖x_i − y_j‖ with π_ij ∈ {0, 1/N}.
    pub cost: f64,
    /// Row duals of the assignment LP (per-point, unscaled).
    pub dual_u: Vec<f64>,
    /// Column duals of the assignment LP.
    pub dual_v: Vec<f64>,
}

impl TransportPlan {
    /// Dual objective (Σu + Σv)/N; equals `cost` at optimality.
    pub fn dual_objective(&self) -> f64 {
        let s: f64 = self.dual_u.iter().sum::<f64>() + self.dual_v.iter().sum::<f64>();
        s / self.assignment.len() as f64
    }

    /// |primal − dual| certificate gap.
    pub fn duality_gap(&self) -> f64 {
        (self.cost - self.dual_objective()).abs()
    }
}

/// Exact W1 between equal-size clouds with Euclidean ground metric,
/// capped at [`DEFAULT_SOLVER_CAP`] points.
pub fn w1_empirical(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<(f64, TransportPlan)> {
    w1_empirical_capped(a, b, DEFAULT_SOLVER_CAP)
}

pub fn w1_empirical_capped(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cap: usize,
) -> Result<(f64, TransportPlan)> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            what: "empirical measures",
            expected: a.dim,
            got: b.dim,
        });
    }
    if a.len() != b.len() {
        return Err(Error::UnequalCounts {
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len();
    if n > cap {
        return Err(Error::SolverCap { n, cap });
    }
    let mut cost = vec![0.0f64; n * n];
    for (i, p) in a.points.iter().enumerate() {
        for (j, q) in b.points.iter().enumerate() {
            cost[i * n + j] = (p - q).norm();
        }
    }
    let (assignment, dual_u, dual_v) = solve_assignment(n, &cost);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    let mean = total / n as f64;
    let plan = TransportPlan {
        assignment,
        cost: mean,
        dual_u,
        dual_v,
    };
    Ok((mean, plan))
}

/// Exact 1D empirical W1 via the monotone (sorted) coupling.
pub fn w1_1d_sorted(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim != 1 || b.dim != 1 {
        return Err(Error::DimensionMismatch {
            what: "1D sorted coupling",
            expected: 1,
            got: a.dim.max(b.dim),
        });
    }
    if a.len() != b.len() {
        return Err(Error::UnequalCounts {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut xs: Vec<f64> = a.points.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = b.points.iter().map(|p| p[0]).collect();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / xs.len() as f64)
}

/// Exact W1 with a fast path for 1D clouds (sorted coupling).
pub fn w1_exact(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim == 1 && b.dim == 1 {
        w1_1d_sorted(a, b)
    } else {
        Ok(w1_empirical(a, b)?.0)
    }
}

/// Batched W1 estimator for clouds above the exact-solver cap.
///
/// Mean over `reps` of exact W1 on random subsamples of size `batch`.
/// Upward-biased for the true W1 between the underlying distributions; the
/// bias shrinks as `batch` grows.
pub fn w1_empirical_large(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if batch == 0 || reps == 0 {
        return Err(Error::InvalidInput("batch and reps must be positive".into()));
    }
    if batch > a.len().min(b.len()) {
        return Err(Error::InvalidInput(format!(
            "batch {batch} exceeds cloud sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    if batch > DEFAULT_SOLVER_CAP {
        return Err(Error::SolverCap {
            n: batch,
            cap: DEFAULT_SOLVER_CAP,
        });
    }
    let mut vals = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = rng_from(seed, 0x77_31 + rep as u64);
        let sa = a.subsample(batch, &mut rng);
        let sb = b.subsample(batch, &mut rng);
        vals.push(w1_exact(&sa, &sb)?);
    }
    Ok(mean_stderr(&vals))
}

/// Exact W1 between 1D mixtures: ∫ |F₁ − F₂| over the union 8-std window,
/// adaptive quadrature to absolute tolerance 1e-8.
pub fn w1_1d_gmm(g1: &GaussianMixture, g2: &GaussianMixture) -> Result<f64> {
    if g1.dim() != 1 || g2.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "w1_1d_gmm input",
            expected: 1,
            got: g1.dim().max(g2.dim()),
        });
    }
    let (lo1, hi1) = g1.support_window_1d(8.0);
    let (lo2, hi2) = g2.support_window_1d(8.0);
    let (lo, hi) = (lo1.min(lo2), hi1.max(hi2));
    let f = |x: f64| (g1.cdf_1d(x).unwrap() - g2.cdf_1d(x).unwrap()).abs();
    Ok(adaptive_quad(&f, lo, hi, 1e-8))
}

/// Total variation ½∫|p₁ − p₂| between 1D mixtures, tolerance 1e-8.
pub fn tv_distance_1d(g1: &GaussianMixture, g2: &GaussianMixture) -> Result<f64> {
    if g1.dim() != 1 || g2.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "tv_distance_1d input",
            expected: 1,
            got: g1.dim().max(g2.dim()),
        });
    }
    let (lo1, hi1) = g1.support_window_1d(8.0);
    let (lo2, hi2) = g2.support_window_1d(8.0);
    let (lo, hi) = (lo1.min(lo2), hi1.max(hi2));
    let one = nalgebra::DVector::from_element(1, 0.0);
    let f = |x: f64| {
        let mut v = one.clone();
        v[0] = x;
        (g1.density(&v).unwrap() - g2.density(&v).unwrap()).abs()
    };
    Ok(0.5 * adaptive_quad(&f, lo, hi, 1e-8))
}

/// Monte-Carlo forward KL: mean and standard error of log p − log q under
/// samples from p. Errors out on a non-finite log density, naming the sample.
pub fn kl_mc<Fs, Fp, Fq>(
    sample_p: Fs,
    log_p: Fp,
    log_q: Fq,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    Fs: Fn(&mut ChaCha12Rng) -> DVector<f64>,
    Fp: Fn(&DVector<f64>) -> f64,
    Fq: Fn(&DVector<f64>) -> f64,
{
    if n < 100 {
        return Err(Error::InvalidInput("kl_mc needs n >= 100".into()));
    }
    let mut rng = rng_from(seed, 0x6b6c);
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let x = sample_p(&mut rng);
        let lp = log_p(&x);
        let lq = log_q(&x);
        if !lp.is_finite() || !lq.is_finite() {
            return Err(Error::NonFinite(format!(
                "kl_mc sample {i} at {:?}: log p = {lp}, log q = {lq}",
                x.as_slice()
            )));
        }
        vals.push(lp - lq);
    }
    Ok(mean_stderr(&vals))
}

/// diameter · √(kl/2): W1 upper bound via W1 ≤ diam·TV and Pinsker, valid for
/// measures supported in a set of the given diameter. Flow pushforwards have
/// full support, so for them this is a heuristic diagnostic, not a bound.
pub fn pinsker_chain_bound(kl: f64, diameter: f64) -> Result<f64> {
    if kl < 0.0 {
        return Err(Error::InvalidInput(format!("kl must be nonnegative, got {kl}")));
    }
    if !(diameter > 0.0) {
        return Err(Error::InvalidInput(format!("diameter must be positive, got {diameter}")));
    }
    Ok(diameter * (kl / 2.0).sqrt())
}
