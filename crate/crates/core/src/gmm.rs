//! Gaussian mixture algebra: densities, gradients, sampling, the evidence
//! pushforward under a linear forward operator, and the analytic posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::EmpiricalMeasure;
use crate::util::{logsumexp, rng_from};

/// Condition numbers above this are rejected when factorizing covariances.
pub const COND_LIMIT: f64 = 1e12;

const LOG_2PI: f64 = 1.8378770664093453; // ln(2π)

/// One mixture component with cached factorizations of its covariance.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Σ⁻¹
    prec: DMatrix<f64>,
    /// F with F Fᵀ = Σ, used for sampling.
    factor: DMatrix<f64>,
    /// −½ (d·ln 2π + ln|Σ|)
    log_norm: f64,
    /// ln|Σ|
    log_det: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "component covariance",
                expected: d,
                got: cov.nrows(),
            });
        }
        if weight < 0.0 || !weight.is_finite() {
            return Err(Error::InvalidMixture(format!("weight {weight} not in [0,∞)")));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in 0..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidMixture("covariance is not symmetric".into()));
                }
            }
        }
        // symmetrize before factorizing so tiny asymmetries do not leak in
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let lmin = eig.eigenvalues.min();
        let lmax = eig.eigenvalues.max();
        if lmin <= 0.0 {
            return Err(Error::InvalidMixture(format!(
                "covariance has non-positive eigenvalue {lmin:.3e}"
            )));
        }
        let cond = lmax / lmin;
        if cond > COND_LIMIT {
            return Err(Error::IllConditioned {
                cond,
                limit: COND_LIMIT,
            });
        }
        let u = &eig.eigenvectors;
        let inv_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let prec = u * inv_l * u.transpose();
        let factor = u * sqrt_l;
        let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let log_norm = -0.5 * (d as f64 * LOG_2PI + log_det);
        Ok(Self {
            weight,
            mean,
            cov: sym,
            prec,
            factor,
            log_norm,
            log_det,
        })
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.prec
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det
    }

    /// log N(x; mean, cov)
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        self.log_norm - 0.5 * (&self.prec * &d).dot(&d)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = crate::util::standard_normal_vec(rng, self.mean.len());
        &self.mean + &self.factor * z
    }
}

/// Weighted list of Gaussian components in `dim` dimensions.
///
/// Weights are normalized at construction; covariances must be symmetric
/// positive definite with condition number below [`COND_LIMIT`].
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(dim: usize, comps: Vec<(f64, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMixture("dim must be positive".into()));
        }
        if comps.is_empty() {
            return Err(Error::InvalidMixture("mixture needs at least one component".into()));
        }
        let total: f64 = comps.iter().map(|(w, _, _)| *w).sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        let mut components = Vec::with_capacity(comps.len());
        for (w, m, c) in comps {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "component mean",
                    expected: dim,
                    got: m.len(),
                });
            }
            components.push(Component::new(w / total, m, c)?);
        }
        Ok(Self { dim, components })
    }

    /// Construct from normalized log-weights (log-sum-exp applied here), for
    /// posteriors whose raw weights underflow.
    pub fn from_log_weights(
        dim: usize,
        comps: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
    ) -> Result<Self> {
        let logs: Vec<f64> = comps.iter().map(|(lw, _, _)| *lw).collect();
        let lse = logsumexp(&logs);
        if !lse.is_finite() {
            return Err(Error::InvalidMixture(
                "all log-weights are -inf; cannot normalize".into(),
            ));
        }
        let normed = comps
            .into_iter()
            .map(|(lw, m, c)| ((lw - lse).exp(), m, c))
            .collect();
        Self::new(dim, normed)
    }

    /// Single Gaussian convenience constructor.
    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(dim, vec![(1.0, mean, cov)])
    }

    /// 1D mixture from (weight, mean, variance) triples.
    pub fn scalar(comps: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            1,
            comps
                .iter()
                .map(|&(w, m, v)| {
                    (
                        w,
                        DVector::from_element(1, m),
                        DMatrix::from_element(1, 1, v),
                    )
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "evaluation point",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Σ_k w_k N(x; m_k, Σ_k)
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// log-sum-exp stabilized log density.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        Ok(logsumexp(&logs))
    }

    /// ∇_x density = Σ_k w_k N_k(x) · (−Σ_k⁻¹ (x − m_k))
    pub fn grad_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let mut g = DVector::zeros(self.dim);
        for c in &self.components {
            let dens = c.weight * c.log_density(x).exp();
            let d = x - &c.mean;
            g -= c.precision() * d * dens;
        }
        Ok(g)
    }

    /// `count` i.i.d. ancestral draws, deterministic per seed.
    pub fn sample(&self, count: usize, seed: u64) -> EmpiricalMeasure {
        let mut rng = rng_from(seed, 0x6d6d);
        let cum: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        let points = (0..count)
            .map(|_| {
                let u: f64 = rng.gen();
                let k = cum.partition_point(|&c| c < u).min(self.components.len() - 1);
                self.components[k].sample(&mut rng)
            })
            .collect();
        EmpiricalMeasure::new(self.dim, points).expect("mixture samples are finite")
    }

    /// Mixture mean Σ_k w_k m_k.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for c in &self.components {
            m += &c.mean * c.weight;
        }
        m
    }

    /// 1D mixture CDF via the error function.
    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch {
                what: "cdf_1d input mixture",
                expected: 1,
                got: self.dim,
            });
        }
        let mut acc = 0.0;
        for c in &self.components {
            let s = c.cov[(0, 0)].sqrt();
            let z = (x - c.mean[0]) / (s * std::f64::consts::SQRT_2);
            acc += c.weight * 0.5 * (1.0 + statrs::function::erf::erf(z));
        }
        Ok(acc)
    }

    /// Support window [min m−kσ, max m+kσ] for 1D quadrature.
    pub fn support_window_1d(&self, stds: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            let s = c.cov[(0, 0)].sqrt();
            lo = lo.min(c.mean[0] - stds * s);
            hi = hi.max(c.mean[0] + stds * s);
        }
        (lo, hi)
    }
}

/// Linear-Gaussian inverse problem Y = A X + Ξ, Ξ ~ N(0, σ²Iₙ), X ~ prior.
#[derive(Debug, Clone)]
pub struct LinearGaussianProblem {
    pub forward: DMatrix<f64>,
    pub noise_std: f64,
    pub prior: GaussianMixture,
}

impl LinearGaussianProblem {
    pub fn new(forward: DMatrix<f64>, noise_std: f64, prior: GaussianMixture) -> Result<Self> {
        if forward.ncols() != prior.dim() {
            return Err(Error::DimensionMismatch {
                what: "forward operator columns vs prior dim",
                expected: prior.dim(),
                got: forward.ncols(),
            });
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidInput(format!("noise_std must be > 0, got {noise_std}")));
        }
        Ok(Self {
            forward,
            noise_std,
            prior,
        })
    }

    /// Observation dimension n.
    pub fn obs_dim(&self) -> usize {
        self.forward.nrows()
    }

    /// Data dimension m.
    pub fn data_dim(&self) -> usize {
        self.prior.dim()
    }

    /// Law of Y = AX + Ξ: components (w_k, A m_k, A Σ_k Aᵀ + σ² Iₙ).
    pub fn evidence(&self) -> GaussianMixture {
        let n = self.obs_dim();
        let s2 = self.noise_std * self.noise_std;
        let comps = self
            .prior
            .components()
            .iter()
            .map(|c| {
                let mean = &self.forward * &c.mean;
                let cov = &self.forward * &c.cov * self.forward.transpose()
                    + DMatrix::identity(n, n) * s2;
                (c.weight, mean, cov)
            })
            .collect();
        GaussianMixture::new(n, comps).expect("evidence covariances inherit PD from prior")
    }

    /// Analytic Gaussian-mixture posterior P_{X|Y=y}.
    ///
    /// Per-component:
    ///   Σ̃_k = (AᵀA/σ² + Σ_k⁻¹)⁻¹
    ///   m̃_k = Σ̃_k (Aᵀy/σ² + Σ_k⁻¹ m_k)
    ///   log w̃_k = log w_k + ½(ln|Σ̃_k| − ln|Σ_k|) + ½(m̃ᵀΣ̃⁻¹m̃ − mᵀΣ⁻¹m)
    ///
    /// The log-determinant ratio is required for correct component masses when
    /// covariances differ across components; weights are normalized in
    /// log-space.
    pub fn posterior(&self, y: &DVector<f64>) -> Result<GaussianMixture> {
        if y.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                what: "observation",
                expected: self.obs_dim(),
                got: y.len(),
            });
        }
        let m = self.data_dim();
        let s2 = self.noise_std * self.noise_std;
        let ata = self.forward.transpose() * &self.forward / s2;
        let aty = self.forward.transpose() * y / s2;
        let mut comps = Vec::with_capacity(self.prior.components().len());
        for c in self.prior.components() {
            let post_prec = &ata + c.precision();
            let eig = post_prec.clone().symmetric_eigen();
            let lmin = eig.eigenvalues.min();
            let lmax = eig.eigenvalues.max();
            if lmin <= 0.0 || lmax / lmin > COND_LIMIT {
                return Err(Error::IllConditioned {
                    cond: lmax / lmin.abs().max(f64::MIN_POSITIVE),
                    limit: COND_LIMIT,
                });
            }
            let u = &eig.eigenvectors;
            let post_cov =
                u * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * u.transpose();
            let post_cov = (&post_cov + post_cov.transpose()) * 0.5;
            let rhs = &aty + c.precision() * &c.mean;
            let post_mean = &post_cov * rhs;
            let log_det_post: f64 = eig.eigenvalues.iter().map(|l| -l.ln()).sum();
            let quad_post = (&post_prec * &post_mean).dot(&post_mean);
            let quad_prior = (c.precision() * &c.mean).dot(&c.mean);
            let log_w = c.weight.ln()
                + 0.5 * (log_det_post - c.log_det_cov())
                + 0.5 * (quad_post - quad_prior);
            comps.push((log_w, post_mean, post_cov));
            let _ = m;
        }
        GaussianMixture::from_log_weights(m, comps)
    }

    /// −log p_{Y|X=x}(y) = (n/2) ln(2πσ²) + ‖y − Ax‖²/(2σ²)
    pub fn negative_log_likelihood(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        if x.len() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                what: "data point",
                expected: self.data_dim(),
                got: x.len(),
            });
        }
        if y.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                what: "observation",
                expected: self.obs_dim(),
                got: y.len(),
            });
        }
        let n = self.obs_dim() as f64;
        let s2 = self.noise_std * self.noise_std;
        let r = y - &self.forward * x;
        Ok(0.5 * n * (LOG_2PI + s2.ln()) + r.norm_squared() / (2.0 * s2))
    }

    /// The symmetric two-mode 1D problem ½N(−1,ε²)+½N(1,ε²), Y = X + Ξ.
    pub fn two_mode(prior_std: f64, noise_std: f64) -> Result<Self> {
        let v = prior_std * prior_std;
        let prior = GaussianMixture::scalar(&[(0.5, -1.0, v), (0.5, 1.0, v)])?;
        Self::new(DMatrix::identity(1, 1), noise_std, prior)
    }

    /// Six equal-weight isotropic modes on a circle of radius 2, identity
    /// forward operator. Stand-in geometry for the 2D six-mode experiment.
    pub fn six_mode_2d(mode_var: f64, noise_std: f64) -> Result<Self> {
        let comps = (0..6)
            .map(|j| {
                let th = 2.0 * std::f64::consts::PI * j as f64 / 6.0;
                (
                    1.0,
                    DVector::from_vec(vec![2.0 * th.cos(), 2.0 * th.sin()]),
                    DMatrix::identity(2, 2) * mode_var,
                )
            })
            .collect();
        let prior = GaussianMixture::new(2, comps)?;
        Self::new(DMatrix::identity(2, 2), noise_std, prior)
    }
}

// ---------------------------------------------------------------------------
// JSON schema (documented in docs/schemas/)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GmmJson {
    dim: usize,
    components: Vec<ComponentJson>,
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    weight: f64,
    mean: Vec<f64>,
    /// row-major nested array
    cov: Vec<Vec<f64>>,
}

impl Serialize for GaussianMixture {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let j = GmmJson {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| ComponentJson {
                    weight: c.weight,
                    mean: c.mean.iter().cloned().collect(),
                    cov: (0..self.dim)
                        .map(|i| (0..self.dim).map(|k| c.cov[(i, k)]).collect())
                        .collect(),
                })
                .collect(),
        };
        j.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for GaussianMixture {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let j = GmmJson::deserialize(de)?;
        let comps = j
            .components
            .into_iter()
            .map(|c| {
                let mean = DVector::from_vec(c.mean);
                let rows = c.cov.len();
                let flat: Vec<f64> = c.cov.into_iter().flatten().collect();
                let cov = DMatrix::from_row_slice(rows, if rows > 0 { flat.len() / rows } else { 0 }, &flat);
                (c.weight, mean, cov)
            })
            .collect();
        GaussianMixture::new(j.dim, comps).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct ProblemJson {
    forward: Vec<Vec<f64>>,
    noise_std: f64,
    prior: GaussianMixture,
}

impl Serialize for LinearGaussianProblem {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let j = ProblemJson {
            forward: (0..self.forward.nrows())
                .map(|i| (0..self.forward.ncols()).map(|k| self.forward[(i, k)]).collect())
                .collect(),
            noise_std: self.noise_std,
            prior: self.prior.clone(),
        };
        j.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LinearGaussianProblem {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let j = ProblemJson::deserialize(de)?;
        let rows = j.forward.len();
        let cols = j.forward.first().map(|r| r.len()).unwrap_or(0);
        let flat: Vec<f64> = j.forward.into_iter().flatten().collect();
        let forward = DMatrix::from_row_slice(rows, cols, &flat);
        LinearGaussianProblem::new(forward, j.noise_std, j.prior).map_err(serde::de::Error::custom)
    }
}
