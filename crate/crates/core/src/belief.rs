//! Gaussian belief over the target position.
//!
//! The query that maximises the expected information gain among hyperplanes
//! through the mean is the one orthogonal to the direction of largest
//! variance. After an answer, the belief is projected back onto the Gaussian
//! family by moment matching (assumed density filtering), which for a probit
//! likelihood is a closed-form rank-one update:
//!
//! ```text
//! q = wᵀΣw,  s = √(q + σ²),  z = (wᵀμ + b)/s,  r = φ(z)/Φ(z)
//! α = r/s,   β = -r(z + r)/s²
//! τ = -β/(1 + βq),   ν = (α - β(wᵀμ + b))/(1 + βq)
//! Σ' = Σ - τ/(1 + τq) · (Σw)(Σw)ᵀ
//! μ' = μ + (ν - τ(wᵀμ + b))/(1 + τq) · Σw
//! ```
//!
//! The last two lines are the Sherman–Morrison form of
//! `Σ' = (Σ⁻¹ + τwwᵀ)⁻¹`, `μ' = Σ'[Σ⁻¹μ + (ν - bτ)w]`, so each update is O(d²).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::catalog::ObjectSet;
use crate::geometry::Hyperplane;
use crate::numeric::{inv_mills, DENSE_EIGEN_MAX_DIM, EIGEN_FLOOR, GEOM_TOL, POWER_MAX_ITERS, POWER_TOL};
use crate::{Error, Result};

/// `N(μ, Σ)` over the target position.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

/// Scalars of one assumed-density-filtering step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdfIntermediates {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub nu: f64,
}

/// Which side of the queried hyperplane the answer favoured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// The object on the positive side of the hyperplane won.
    Positive,
    /// The object on the negative side won; the update negates `(w, b)`.
    Negative,
}

impl Outcome {
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Positive => 1.0,
            Outcome::Negative => -1.0,
        }
    }
}

impl GaussianBelief {
    /// Validates symmetry (1e-9) and positive definiteness (eigen-floor).
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidArgument("belief dimension must be at least 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma.nrows() });
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief"));
        }
        for r in 0..d {
            for c in 0..r {
                if (sigma[(r, c)] - sigma[(c, r)]).abs() > GEOM_TOL {
                    return Err(Error::InvalidCovariance("covariance is not symmetric".into()));
                }
            }
        }
        let min_eig = sigma.clone().symmetric_eigenvalues().min();
        if min_eig < EIGEN_FLOOR {
            return Err(Error::InvalidCovariance(format!("smallest eigenvalue {min_eig:e} below floor")));
        }
        Ok(GaussianBelief { mu, sigma })
    }

    pub fn isotropic(mu: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mu.len();
        Self::new(mu, DMatrix::identity(d, d) * variance)
    }

    /// Empirical mean and covariance of the objects, plus `jitter · I`.
    pub fn from_objects(objects: &ObjectSet, jitter: f64) -> Result<Self> {
        let (mean, cov) = crate::stats::mean_and_covariance(objects.data(), objects.dim());
        let d = objects.dim();
        Self::new(mean, cov + DMatrix::identity(d, d) * jitter)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    /// Draws `μ + Lε` with `LLᵀ = Σ`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance lost positive definiteness".into()))?;
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        Ok(&self.mu + chol.l() * eps)
    }
}

/// Sign convention shared by both eigen routes: the first entry with
/// magnitude above 1e-6 is positive.
fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-6) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

fn check_square_finite(sigma: &DMatrix<f64>) -> Result<()> {
    if sigma.nrows() != sigma.ncols() || sigma.nrows() == 0 {
        return Err(Error::InvalidCovariance("covariance must be square and non-empty".into()));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    Ok(())
}

/// Unit direction of largest variance.
///
/// Dense eigendecomposition up to [`DENSE_EIGEN_MAX_DIM`], power iteration
/// above. When the largest eigenvalue is repeated, the result is the
/// normalised projection of the first standard basis vector `e_k` that has a
/// non-negligible component in the dominant eigenspace, so `Σ = I` yields `e₁`.
pub fn top_direction(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    top_direction_warm(sigma, None)
}

/// As [`top_direction`]; `warm` seeds the power iteration (ignored by the
/// dense route).
pub fn top_direction_warm(sigma: &DMatrix<f64>, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    check_square_finite(sigma)?;
    if sigma.nrows() <= DENSE_EIGEN_MAX_DIM {
        dense_top_direction(sigma)
    } else {
        power_top_direction(sigma, warm)
    }
}

fn dense_top_direction(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = sigma.nrows();
    let eig = SymmetricEigen::new(sigma.clone());
    let lambda_max = eig.eigenvalues.max();
    let tol = 1e-10 * lambda_max.abs().max(f64::MIN_POSITIVE);
    let dominant: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k] >= lambda_max - tol).collect();
    if dominant.len() == 1 {
        return Ok(canonical_sign(eig.eigenvectors.column(dominant[0]).into_owned()));
    }
    let basis = eig.eigenvectors.select_columns(&dominant);
    for k in 0..d {
        // projection of e_k onto the dominant eigenspace
        let coeffs = basis.row(k).transpose();
        let proj = &basis * coeffs;
        let norm = proj.norm();
        if norm > 1e-6 {
            return Ok(canonical_sign(proj / norm));
        }
    }
    Err(Error::Numerical("dominant eigenspace is empty".into()))
}

fn power_top_direction(sigma: &DMatrix<f64>, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let d = sigma.nrows();
    let mut v = match warm {
        Some(w) if w.len() == d && w.norm() > 0.0 => w.normalize(),
        _ => {
            let mut e = DVector::zeros(d);
            e[0] = 1.0;
            e
        }
    };
    for _ in 0..POWER_MAX_ITERS {
        let mut next = sigma * &v;
        let norm = next.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical("power iteration collapsed".into()));
        }
        next /= norm;
        if next.dot(&v) < 0.0 {
            next.neg_mut();
        }
        let delta = (&next - &v).norm();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    Ok(canonical_sign(v))
}

/// Information-maximising hyperplane through the belief mean.
pub fn optimal_hyperplane(belief: &GaussianBelief) -> Result<Hyperplane> {
    optimal_hyperplane_warm(belief, None)
}

pub fn optimal_hyperplane_warm(belief: &GaussianBelief, warm: Option<&DVector<f64>>) -> Result<Hyperplane> {
    let w = top_direction_warm(&belief.sigma, warm)?;
    let b = -w.dot(&belief.mu);
    Hyperplane::new(w.as_slice().to_vec(), b)
}

/// Moment-matched posterior after observing `outcome` for hyperplane `h`.
pub fn adf_update(belief: &GaussianBelief, h: &Hyperplane, outcome: Outcome, sigma_eps: f64) -> Result<GaussianBelief> {
    adf_update_detailed(belief, h, outcome, sigma_eps).map(|(b, _)| b)
}

pub fn adf_update_detailed(
    belief: &GaussianBelief,
    h: &Hyperplane,
    outcome: Outcome,
    sigma_eps: f64,
) -> Result<(GaussianBelief, AdfIntermediates)> {
    let d = belief.dim();
    if h.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: h.dim() });
    }
    if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid noise level {sigma_eps}")));
    }
    let sign = outcome.sign();
    let w = DVector::from_iterator(d, h.normal().iter().map(|x| sign * x));
    let b = sign * h.offset();

    let sw = &belief.sigma * &w;
    let q = w.dot(&sw);
    let s2 = q + sigma_eps * sigma_eps;
    if !(s2 > 0.0) {
        return Err(Error::Numerical("zero predictive variance along the query normal".into()));
    }
    let s = s2.sqrt();
    let margin = w.dot(&belief.mu) + b;
    let z = margin / s;
    let r = inv_mills(z);
    let alpha = r / s;
    let beta = -r * (z + r) / s2;
    let denom = 1.0 + beta * q;
    if !(denom > 0.0) || !beta.is_finite() {
        return Err(Error::Numerical(format!("degenerate update: 1 + βq = {denom}")));
    }
    let tau = -beta / denom;
    let nu = (alpha - beta * margin) / denom;

    let shrink = tau / (1.0 + tau * q);
    let mut sigma = &belief.sigma - (&sw * sw.transpose()) * shrink;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let mu = &belief.mu + &sw * ((nu - tau * margin) / (1.0 + tau * q));

    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("update produced non-finite values".into()));
    }
    let along = q / (1.0 + tau * q);
    if !(along >= EIGEN_FLOOR) || sigma.diagonal().iter().any(|&v| !(v >= EIGEN_FLOOR)) {
        sigma = floor_eigenvalues(sigma)?;
    }
    Ok((GaussianBelief { mu, sigma }, AdfIntermediates { alpha, beta, tau, nu }))
}

fn floor_eigenvalues(sigma: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut eig = SymmetricEigen::new(sigma);
    let clamped = eig.eigenvalues.iter().filter(|&&l| l < EIGEN_FLOOR).count();
    if eig.eigenvalues.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("covariance repair failed".into()));
    }
    log::warn!("covariance update lost definiteness; flooring {clamped} eigenvalue(s) at {EIGEN_FLOOR:e}");
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(EIGEN_FLOOR));
    let repaired = eig.recompose();
    Ok((&repaired + repaired.transpose()) * 0.5)
}

/// Log-density of the belief, factorised once for scoring many points.
#[derive(Debug, Clone)]
pub struct DensityScorer {
    mu: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl DensityScorer {
    pub fn new(belief: &GaussianBelief) -> Result<Self> {
        let chol = belief
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = belief.dim() as f64;
        let log_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(DensityScorer { mu: belief.mu.clone(), chol_l: l, log_norm })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mu.len() {
            return Err(Error::DimensionMismatch { expected: self.mu.len(), got: x.len() });
        }
        let diff = DVector::from_column_slice(x) - &self.mu;
        let y = self
            .chol_l
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        Ok(self.log_norm - 0.5 * y.norm_squared())
    }
}

/// `log N(x; μ, Σ)`.
pub fn density_score(belief: &GaussianBelief, x: &[f64]) -> Result<f64> {
    DensityScorer::new(belief)?.score(x)
}
