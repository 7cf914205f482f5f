//! MAP and MMSE point estimators for the symmetric two-mode 1D problem,
//! including the discontinuity-vs-smoothness comparison between them.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::util::{linspace, logsumexp};

/// Two-mode 1D problem ½N(−1, prior_std²) + ½N(1, prior_std²), Y = X + Ξ.
///
/// `prior_std` is the mode width (the appendix-style ε, renamed to avoid
/// collision with the training-loss ε); `noise_std` is the σ of the noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TwoModeConfig {
    pub prior_std: f64,
    pub noise_std: f64,
}

impl TwoModeConfig {
    pub fn new(prior_std: f64, noise_std: f64) -> Result<Self> {
        if !(prior_std > 0.0 && noise_std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prior_std and noise_std must be positive, got {prior_std}, {noise_std}"
            )));
        }
        Ok(Self {
            prior_std,
            noise_std,
        })
    }
}

/// Numerically stable log cosh(u); u = x/ε² can reach hundreds.
fn log_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// MAP objective (1/2σ²)(y−x)² + (1/2ε²)(x²+1) − log cosh(x/ε²).
fn map_objective(c: &TwoModeConfig, y: f64, x: f64) -> f64 {
    let s2 = c.noise_std * c.noise_std;
    let e2 = c.prior_std * c.prior_std;
    (y - x) * (y - x) / (2.0 * s2) + (x * x + 1.0) / (2.0 * e2) - log_cosh(x / e2)
}

fn map_objective_deriv(c: &TwoModeConfig, y: f64, x: f64) -> f64 {
    let s2 = c.noise_std * c.noise_std;
    let e2 = c.prior_std * c.prior_std;
    (x - y) / s2 + x / e2 - (x / e2).tanh() / e2
}

/// Global minimizer of the MAP objective.
///
/// Coarse 2001-point grid over the mode span ± 4 stds, then 60 bisection
/// iterations on the derivative from the best 3 grid points. The objective is
/// smooth but bimodal; the grid guards against the wrong basin. For y = 0 the
/// minimizer is non-unique and the nonnegative one is returned by convention.
pub fn map_estimate(c: &TwoModeConfig, y: f64) -> f64 {
    let span = 1.0 + y.abs() + 4.0 * c.prior_std.max(c.noise_std);
    let grid = linspace(-span, span, 2001);
    let h = grid[1] - grid[0];
    let mut scored: Vec<(f64, f64)> = grid
        .iter()
        .map(|&x| (map_objective(c, y, x), x))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut best_x = scored[0].1;
    let mut best_val = scored[0].0;
    for &(_, x0) in scored.iter().take(3) {
        let (mut lo, mut hi) = (x0 - h, x0 + h);
        let (dlo, dhi) = (
            map_objective_deriv(c, y, lo),
            map_objective_deriv(c, y, hi),
        );
        let refined = if dlo <= 0.0 && dhi >= 0.0 {
            // bracketed stationary point; bisect the derivative
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if map_objective_deriv(c, y, mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        } else {
            x0
        };
        let val = map_objective(c, y, refined);
        if val < best_val - 1e-14
            || ((val - best_val).abs() <= 1e-14 && refined > best_x)
        {
            best_val = val;
            best_x = refined;
        }
    }
    // y = 0 tie convention: nonnegative minimizer
    if y == 0.0 {
        best_x = best_x.abs();
    }
    best_x
}

/// Closed-form MMSE estimator, evaluated in log-space.
///
/// Posterior component means m̃₁, m̃₂ and log-weights; the common prefactors
/// cancel in the normalized weighted mean.
pub fn mmse_closed_form(c: &TwoModeConfig, y: f64) -> f64 {
    let s2 = c.noise_std * c.noise_std;
    let e2 = c.prior_std * c.prior_std;
    let denom = e2 + s2;
    let m1 = (e2 * y + s2) / denom;
    let m2 = (e2 * y - s2) / denom;
    let lw1 = ((e2 * y + s2) * (e2 * y + s2) / (s2 * denom) - 1.0) / (2.0 * e2);
    let lw2 = ((e2 * y - s2) * (e2 * y - s2) / (s2 * denom) - 1.0) / (2.0 * e2);
    let lse = logsumexp(&[lw1, lw2]);
    (lw1 - lse).exp() * m1 + (lw2 - lse).exp() * m2
}

/// Posterior mean Σ_k w̃_k m̃_k of an already-normalized mixture.
pub fn mmse_posterior_mean(post: &GaussianMixture) -> DVector<f64> {
    post.mean()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub y: f64,
    pub map: f64,
    pub mmse: f64,
}

/// One row per grid point; serializes to CSV with header `y,map,mmse`.
pub fn estimator_sweep(c: &TwoModeConfig, y_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if y_grid.is_empty() {
        return Err(Error::InvalidInput("estimator_sweep needs a nonempty grid".into()));
    }
    Ok(y_grid
        .iter()
        .map(|&y| SweepRow {
            y,
            map: map_estimate(c, y),
            mmse: mmse_closed_form(c, y),
        })
        .collect())
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("y,map,mmse\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.y, r.map, r.mmse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::LinearGaussianProblem;
    use crate::util::rng_from;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Dense-grid minimization oracle, independent of the production path.
    fn map_grid_oracle(c: &TwoModeConfig, y: f64, lo: f64, hi: f64, n: usize) -> f64 {
        let grid = linspace(lo, hi, n);
        let mut best = (f64::INFINITY, 0.0);
        for &x in &grid {
            let v = map_objective(c, y, x);
            if v < best.0 {
                best = (v, x);
            }
        }
        best.1
    }

    #[test]
    fn map_odd_symmetry() {
        let c = TwoModeConfig::new(0.05, 0.1).unwrap();
        let mut rng = rng_from(1, 0);
        for _ in 0..50 {
            let y = 4.0 * rng.gen::<f64>() - 2.0;
            assert_abs_diff_eq!(map_estimate(&c, -y), -map_estimate(&c, y), epsilon = 1e-9);
        }
    }

    #[test]
    fn map_discontinuity_at_zero() {
        // prior_std² = 0.0025, noise_std² = 0.01. The dominant posterior
        // component mode sits at (σ² + ε²y)/(σ² + ε²) ≈ 0.8002, so the jump
        // across y = ±1e-3 is 1.6004.
        let c = TwoModeConfig::new(0.05, 0.1).unwrap();
        let plus = map_estimate(&c, 0.001);
        let minus = map_estimate(&c, -0.001);
        let closed = (0.01 + 0.0025 * 0.001) / (0.01 + 0.0025);
        assert!((plus - closed).abs() < 1e-6, "map(+0.001) = {plus}");
        assert!((plus - minus).abs() > 1.6);
        // against the dense-grid oracle
        let oracle = map_grid_oracle(&c, 0.001, -2.0, 2.0, 100_000);
        assert!((plus - oracle).abs() < 1e-3);
    }

    #[test]
    fn map_small_noise_limit() {
        let c = TwoModeConfig::new(0.05, 1e-3).unwrap();
        let est = map_estimate(&c, 0.8);
        let oracle = map_grid_oracle(&c, 0.8, -2.0, 2.0, 100_000);
        assert!((est - oracle).abs() < 1e-3, "est {est}, oracle {oracle}");
    }

    #[test]
    fn mmse_zero_at_zero_and_odd() {
        let c = TwoModeConfig::new(0.05, 0.3f64.sqrt()).unwrap();
        assert_abs_diff_eq!(mmse_closed_form(&c, 0.0), 0.0, epsilon = 1e-12);
        let mut rng = rng_from(2, 0);
        for _ in 0..50 {
            let y = 6.0 * rng.gen::<f64>() - 3.0;
            assert_abs_diff_eq!(
                mmse_closed_form(&c, -y),
                -mmse_closed_form(&c, y),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn mmse_closed_form_matches_posterior_mean() {
        let c = TwoModeConfig::new(0.05, 0.1).unwrap();
        let p = LinearGaussianProblem::two_mode(c.prior_std, c.noise_std).unwrap();
        let grid = linspace(-3.0, 3.0, 201);
        let mut max_err: f64 = 0.0;
        for &y in &grid {
            let post = p.posterior(&DVector::from_element(1, y)).unwrap();
            let from_mixture = mmse_posterior_mean(&post)[0];
            let closed = mmse_closed_form(&c, y);
            max_err = max_err.max((from_mixture - closed).abs());
        }
        assert!(max_err <= 1e-9, "max err {max_err:.3e}");
    }

    #[test]
    fn mmse_monotone_for_large_noise() {
        let c = TwoModeConfig::new(0.05, 0.3f64.sqrt()).unwrap();
        let grid = linspace(-3.0, 3.0, 601);
        let mut prev = f64::NEG_INFINITY;
        for &y in &grid {
            let v = mmse_closed_form(&c, y);
            assert!(v > prev, "not increasing at y = {y}");
            prev = v;
        }
    }

    #[test]
    fn mmse_continuous_across_zero() {
        let c = TwoModeConfig::new(0.05, 0.3f64.sqrt()).unwrap();
        let jump = (mmse_closed_form(&c, 1e-6) - mmse_closed_form(&c, -1e-6)).abs();
        assert!(jump < 1e-4, "jump {jump}");
    }

    #[test]
    fn mmse_matches_monte_carlo_mean() {
        let c = TwoModeConfig::new(0.3, 0.4).unwrap();
        let p = LinearGaussianProblem::two_mode(c.prior_std, c.noise_std).unwrap();
        let y = 0.5;
        let post = p.posterior(&DVector::from_element(1, y)).unwrap();
        let s = post.sample(1_000_000, 77);
        let mc: f64 = s.points().iter().map(|p| p[0]).sum::<f64>() / s.len() as f64;
        // 4σ/√n with σ ≤ 1.5 for this posterior
        assert!((mc - mmse_closed_form(&c, y)).abs() < 4.0 * 1.5 / 1000.0);
    }

    #[test]
    fn sweep_shapes() {
        let c = TwoModeConfig::new(0.05, 0.1).unwrap();
        let rows = estimator_sweep(&c, &[-0.05, -0.01, 0.01, 0.05]).unwrap();
        assert_eq!(rows.len(), 4);
        let mmse_jump = (rows[2].mmse - rows[1].mmse).abs();
        let map_jump = (rows[2].map - rows[1].map).abs();
        assert!(mmse_jump < map_jump);
        // single-point grid
        let one = estimator_sweep(&c, &[0.3]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(estimator_sweep(&c, &[]).is_err());
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with("y,map,mmse\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn sweep_noise_levels_reproduce_shape() {
        // the MAP jump at y = ±1e-3 equals 2(σ² + O(ε²y))/(σ² + ε²); a
        // smaller noise level shrinks it (0.01 → 1.60, 0.1 → 1.95, 0.3 → 1.98)
        for (noise_var, min_jump) in [(0.01f64, 1.6), (0.1, 1.8), (0.3, 1.8)] {
            let c = TwoModeConfig::new(0.05, noise_var.sqrt()).unwrap();
            let map_jump = (map_estimate(&c, 1e-3) - map_estimate(&c, -1e-3)).abs();
            let closed = 2.0 * noise_var / (noise_var + 0.0025);
            assert!(map_jump > min_jump, "σ²={noise_var}: map jump {map_jump}");
            assert!((map_jump - closed).abs() < 1e-2);
            if noise_var == 0.3 {
                let mmse_jump = (mmse_closed_form(&c, 1e-3) - mmse_closed_form(&c, -1e-3)).abs();
                assert!(mmse_jump < 0.1, "mmse jump {mmse_jump}");
            }
        }
    }
}
