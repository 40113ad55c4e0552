//! Uncertainty models: Gaussian and Gaussian mixture.
//!
//! The Gaussian rate function is the closed-form half squared Mahalanobis
//! distance. For mixtures the rate function is the convex conjugate of the
//! cumulant generating function `S(η)`; the instanton solver works with `S`
//! and its derivatives directly, with the dual pair `(λ, η)` tied by
//! `λ = ∇S(η)`. All exponentials go through max-shift log-sum-exp so large
//! `‖η‖` sweeps do not overflow.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("covariance is not symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite (Cholesky failed)")]
    NotPositiveDefinite,
    #[error("mixture weights must be positive and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("mixture has no components")]
    Empty,
    #[error("mixture components have mismatched dimensions")]
    DimensionMismatch,
    #[error("dual pair violates λ = ∇S(η): residual {0:.3e}")]
    DualMismatch(f64),
}

/// Multivariate normal with cached inverse, symmetric square root, and
/// Cholesky factor (the sampling transform).
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    sqrt_inv: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, DistributionError> {
        let m = mean.len();
        assert_eq!(cov.nrows(), m, "covariance rows");
        assert_eq!(cov.ncols(), m, "covariance cols");
        let scale = cov.amax().max(1.0);
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(DistributionError::NotSymmetric(asym));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(DistributionError::NotPositiveDefinite)?;
        let chol_l: DMatrix<f64> = chol.l();
        let cov_inv = chol.inverse();
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(DistributionError::NotPositiveDefinite);
        }
        let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let sqrt_inv_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
        let sqrt = &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose();
        let sqrt_inv = &eig.eigenvectors * sqrt_inv_vals * eig.eigenvectors.transpose();
        Ok(Self {
            mean,
            cov,
            cov_inv,
            sqrt,
            sqrt_inv,
            chol_l,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn covariance_inv(&self) -> &DMatrix<f64> {
        &self.cov_inv
    }

    /// Symmetric square root Σ^{1/2} (so Σ^{1/2}·Σ^{1/2} = Σ).
    pub fn covariance_sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn covariance_sqrt_inv(&self) -> &DMatrix<f64> {
        &self.sqrt_inv
    }

    /// Same mean, covariance scaled by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0, "scale must be positive");
        Self::new(self.mean.clone(), &self.cov * c).expect("scaled SPD covariance stays SPD")
    }

    /// Rate function `I(λ) = ½ (λ−μ)ᵀ Σ⁻¹ (λ−μ)`.
    pub fn rate(&self, lam: &DVector<f64>) -> f64 {
        let d = lam - &self.mean;
        0.5 * (&self.cov_inv * &d).dot(&d)
    }

    /// `∇I(λ) = Σ⁻¹ (λ − μ)`.
    pub fn rate_gradient(&self, lam: &DVector<f64>) -> DVector<f64> {
        &self.cov_inv * (lam - &self.mean)
    }

    pub fn log_density(&self, lam: &DVector<f64>) -> f64 {
        self.log_norm - self.rate(lam)
    }

    /// One draw via the Cholesky transform of standard normals.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol_l * z
    }

    /// Seeded, reproducible sample batch.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_with(&mut rng)).collect()
    }
}

/// One mixture component: weight and Gaussian.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub gaussian: GaussianModel,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, GaussianModel)>) -> Result<Self, DistributionError> {
        if components.is_empty() {
            return Err(DistributionError::Empty);
        }
        let m = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != m) {
            return Err(DistributionError::DimensionMismatch);
        }
        let sum: f64 = components.iter().map(|(p, _)| p).sum();
        if components.iter().any(|(p, _)| *p <= 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(DistributionError::BadWeights(sum));
        }
        Ok(Self {
            components: components
                .into_iter()
                .map(|(weight, gaussian)| MixtureComponent { weight, gaussian })
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].gaussian.dim()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|comp| MixtureComponent {
                    weight: comp.weight,
                    gaussian: comp.gaussian.scaled(c),
                })
                .collect(),
        }
    }

    /// Mixture mean `Σ π_i μ_i`.
    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for comp in &self.components {
            mean += comp.gaussian.mean() * comp.weight;
        }
        mean
    }

    /// Full mixture covariance `Σ π_i (Σ_i + μ_i μ_iᵀ) − μ̄ μ̄ᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for comp in &self.components {
            let d = comp.gaussian.mean() - &mean;
            cov += comp.gaussian.covariance() * comp.weight;
            cov += d.clone() * d.transpose() * comp.weight;
        }
        cov
    }

    /// Exponents `h_i(η) = ηᵀμ_i + ½ ηᵀΣ_iη` and the shared max shift.
    fn exponents(&self, eta: &DVector<f64>) -> (Vec<f64>, f64) {
        let hs: Vec<f64> = self
            .components
            .iter()
            .map(|c| eta.dot(c.gaussian.mean()) + 0.5 * (c.gaussian.covariance() * eta).dot(eta))
            .collect();
        let max = hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hs, max)
    }

    /// Normalized weights `ρ̄_i(η) = π_i e^{h_i} / Σ π_j e^{h_j}`.
    pub fn softmax_weights(&self, eta: &DVector<f64>) -> Vec<f64> {
        let (hs, max) = self.exponents(eta);
        let ws: Vec<f64> = self
            .components
            .iter()
            .zip(&hs)
            .map(|(c, h)| c.weight * (h - max).exp())
            .collect();
        let z: f64 = ws.iter().sum();
        ws.into_iter().map(|w| w / z).collect()
    }

    /// Cumulant generating function `S(η) = log Σ π_i exp(h_i(η))`.
    pub fn cgf(&self, eta: &DVector<f64>) -> f64 {
        let (hs, max) = self.exponents(eta);
        let z: f64 = self
            .components
            .iter()
            .zip(&hs)
            .map(|(c, h)| c.weight * (h - max).exp())
            .sum();
        max + z.ln()
    }

    /// `∇S(η) = Σ ρ̄_i (μ_i + Σ_iη)`, the dual-to-primal map.
    pub fn cgf_gradient(&self, eta: &DVector<f64>) -> DVector<f64> {
        let rho = self.softmax_weights(eta);
        let mut grad = DVector::zeros(self.dim());
        for (comp, r) in self.components.iter().zip(rho) {
            grad += (comp.gaussian.mean() + comp.gaussian.covariance() * eta) * r;
        }
        grad
    }

    /// `∇²S(η) = Σ ρ̄_i (Σ_i + g_i g_iᵀ) − ∇S ∇Sᵀ` with `g_i = μ_i + Σ_iη`.
    pub fn cgf_hessian(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let rho = self.softmax_weights(eta);
        let mut grad = DVector::zeros(self.dim());
        let mut second = DMatrix::zeros(self.dim(), self.dim());
        for (comp, r) in self.components.iter().zip(rho) {
            let g = comp.gaussian.mean() + comp.gaussian.covariance() * eta;
            second += (comp.gaussian.covariance() + &g * g.transpose()) * r;
            grad += g * r;
        }
        second - &grad * grad.transpose()
    }

    /// Legendre–Fenchel rate value `I(λ*) = η*ᵀλ* − S(η*)` at a dual pair.
    ///
    /// Errors with [`DistributionError::DualMismatch`] if `λ* = ∇S(η*)` is
    /// violated beyond 1e-8 (relative to `1 + ‖λ*‖`).
    pub fn rate(&self, lam: &DVector<f64>, eta: &DVector<f64>) -> Result<f64, DistributionError> {
        let resid = (self.cgf_gradient(eta) - lam).amax();
        if resid > 1e-8 * (1.0 + lam.amax()) {
            return Err(DistributionError::DualMismatch(resid));
        }
        Ok(eta.dot(lam) - self.cgf(eta))
    }

    /// Inverts `∇S(η) = λ` by Newton with the CGF Hessian; used by the rate
    /// oracle in tests and to evaluate `I` away from a solved dual pair.
    pub fn solve_dual(&self, lam: &DVector<f64>) -> Option<DVector<f64>> {
        let mut eta = DVector::zeros(self.dim());
        for _ in 0..200 {
            let r = self.cgf_gradient(&eta) - lam;
            if r.amax() < 1e-12 * (1.0 + lam.amax()) {
                return Some(eta);
            }
            let h = self.cgf_hessian(&eta);
            let step = h.lu().solve(&(-r))?;
            eta += step;
        }
        None
    }

    /// Mixture log-density via log-sum-exp over component log-densities.
    pub fn log_density(&self, lam: &DVector<f64>) -> f64 {
        let ls: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.gaussian.log_density(lam))
            .collect();
        let max = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + ls.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// One draw: pick a component by weight, then the Cholesky transform.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for comp in &self.components {
            acc += comp.weight;
            if u < acc {
                return comp.gaussian.sample_with(rng);
            }
        }
        self.components
            .last()
            .expect("nonempty mixture")
            .gaussian
            .sample_with(rng)
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_with(&mut rng)).collect()
    }
}

/// Gaussian or mixture, as selected by experiment files.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum UncertaintyModel {
    Gaussian(GaussianModel),
    Mixture(GaussianMixture),
}

impl UncertaintyModel {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            Self::Mixture(m) => m.dim(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            Self::Gaussian(g) => g.mean().clone(),
            Self::Mixture(m) => m.mean(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Self::Gaussian(g) => g.covariance().clone(),
            Self::Mixture(m) => m.covariance(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            Self::Gaussian(g) => Self::Gaussian(g.scaled(c)),
            Self::Mixture(m) => Self::Mixture(m.scaled(c)),
        }
    }

    pub fn log_density(&self, lam: &DVector<f64>) -> f64 {
        match self {
            Self::Gaussian(g) => g.log_density(lam),
            Self::Mixture(m) => m.log_density(lam),
        }
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Gaussian(g) => g.sample_with(rng),
            Self::Mixture(m) => m.sample_with(rng),
        }
    }

    pub fn to_spec(&self) -> UncertaintySpec {
        match self {
            Self::Gaussian(g) => UncertaintySpec::Gaussian {
                gaussian: GaussianSpec {
                    mu: g.mean().iter().cloned().collect(),
                    sigma: matrix_rows(g.covariance()),
                },
            },
            Self::Mixture(m) => UncertaintySpec::Mixture {
                mixture: m
                    .components()
                    .iter()
                    .map(|c| ComponentSpec {
                        pi: c.weight,
                        mu: c.gaussian.mean().iter().cloned().collect(),
                        sigma: matrix_rows(c.gaussian.covariance()),
                    })
                    .collect(),
            },
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// JSON schema: `{"gaussian": {"mu": [...], "sigma": [[...]]}}` or
/// `{"mixture": [{"pi": ..., "mu": [...], "sigma": [[...]]}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum UncertaintySpec {
    Gaussian { gaussian: GaussianSpec },
    Mixture { mixture: Vec<ComponentSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub pi: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl UncertaintySpec {
    pub fn build(&self) -> Result<UncertaintyModel, DistributionError> {
        match self {
            Self::Gaussian { gaussian } => Ok(UncertaintyModel::Gaussian(GaussianModel::new(
                DVector::from_vec(gaussian.mu.clone()),
                rows_matrix(&gaussian.sigma),
            )?)),
            Self::Mixture { mixture } => {
                let comps = mixture
                    .iter()
                    .map(|c| {
                        GaussianModel::new(DVector::from_vec(c.mu.clone()), rows_matrix(&c.sigma))
                            .map(|g| (c.pi, g))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(UncertaintyModel::Mixture(GaussianMixture::new(comps)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gauss2() -> GaussianModel {
        GaussianModel::new(
            DVector::from_vec(vec![0.5, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
        )
        .unwrap()
    }

    fn mix2() -> GaussianMixture {
        let g1 = GaussianModel::new(
            DVector::from_vec(vec![0.45, 0.25]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let g2 = GaussianModel::new(
            DVector::from_vec(vec![0.82, 0.52]),
            DMatrix::from_row_slice(2, 2, &[0.35, 0.08, 0.08, 0.55]),
        )
        .unwrap();
        GaussianMixture::new(vec![(0.75, g1), (0.25, g2)]).unwrap()
    }

    #[test]
    fn rate_zero_at_mean() {
        let g = gauss2();
        assert_eq!(g.rate(g.mean()), 0.0);
    }

    #[test]
    fn rate_at_paper_instanton_under_identity() {
        let g =
            GaussianModel::new(DVector::from_vec(vec![0.5, 0.3]), DMatrix::identity(2, 2)).unwrap();
        let lam = DVector::from_vec(vec![0.703, 0.877]);
        // ½(0.203² + 0.577²), plain arithmetic on the quoted instanton.
        assert_relative_eq!(g.rate(&lam), 0.187069, epsilon = 1e-6);
    }

    #[test]
    fn rate_scales_inversely_with_covariance() {
        let g = gauss2();
        let c = 0.37;
        let lam = DVector::from_vec(vec![1.1, -0.4]);
        assert_relative_eq!(
            g.scaled(c).rate(&lam),
            g.rate(&lam) / c,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gradient_closed_forms() {
        let g = gauss2();
        assert_eq!(g.rate_gradient(g.mean()).amax(), 0.0);
        let iso =
            GaussianModel::new(DVector::from_vec(vec![0.5, 0.3]), DMatrix::identity(2, 2)).unwrap();
        let lam = DVector::from_vec(vec![0.9, -0.1]);
        assert!((iso.rate_gradient(&lam) - (&lam - iso.mean())).amax() < 1e-14);
    }

    #[test]
    fn sqrt_squares_back_to_covariance() {
        let g = mix2().components()[1].gaussian.clone();
        let s = g.covariance_sqrt();
        assert!((s * s - g.covariance()).amax() < 1e-10);
    }

    #[test]
    fn cgf_zero_at_origin() {
        let m = mix2();
        assert!(m.cgf(&DVector::zeros(2)).abs() < 1e-14);
    }

    #[test]
    fn single_component_cgf_is_gaussian_cgf() {
        let g = gauss2();
        let m = GaussianMixture::new(vec![(1.0, g.clone())]).unwrap();
        let eta = DVector::from_vec(vec![0.7, -1.3]);
        let expect = eta.dot(g.mean()) + 0.5 * (g.covariance() * &eta).dot(&eta);
        assert_relative_eq!(m.cgf(&eta), expect, max_relative = 1e-14);
    }

    #[test]
    fn cgf_gradient_at_origin_is_mixture_mean() {
        let m = mix2();
        assert!((m.cgf_gradient(&DVector::zeros(2)) - m.mean()).amax() < 1e-14);
    }

    #[test]
    fn single_component_gradient_is_affine() {
        let g = gauss2();
        let m = GaussianMixture::new(vec![(1.0, g.clone())]).unwrap();
        let eta = DVector::from_vec(vec![0.2, 0.9]);
        let expect = g.mean() + g.covariance() * &eta;
        assert!((m.cgf_gradient(&eta) - expect).amax() < 1e-13);
    }

    #[test]
    fn mixture_rate_zero_at_mean() {
        let m = mix2();
        let r = m.rate(&m.mean(), &DVector::zeros(2)).unwrap();
        assert!(r.abs() < 1e-14);
    }

    #[test]
    fn single_component_rate_reduces_to_gaussian() {
        let g = gauss2();
        let m = GaussianMixture::new(vec![(1.0, g.clone())]).unwrap();
        let lam = DVector::from_vec(vec![1.0, 0.8]);
        let eta = m.solve_dual(&lam).unwrap();
        assert_relative_eq!(m.rate(&lam, &eta).unwrap(), g.rate(&lam), epsilon = 1e-10);
    }

    #[test]
    fn rate_rejects_inconsistent_dual_pair() {
        let m = mix2();
        let lam = DVector::from_vec(vec![1.0, 0.8]);
        let eta = DVector::from_vec(vec![5.0, 5.0]);
        assert!(matches!(
            m.rate(&lam, &eta),
            Err(DistributionError::DualMismatch(_))
        ));
    }

    #[test]
    fn gaussian_log_density_at_mean() {
        let g = gauss2();
        let expect = -0.5 * ((2.0 * std::f64::consts::PI).powi(2) * 0.6_f64).ln();
        assert_relative_eq!(g.log_density(g.mean()), expect, max_relative = 1e-12);
    }

    #[test]
    fn weight_validation() {
        let g = gauss2();
        assert!(matches!(
            GaussianMixture::new(vec![(0.4, g.clone()), (0.4, g.clone())]),
            Err(DistributionError::BadWeights(_))
        ));
    }

    #[test]
    fn spd_validation_at_construction() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianModel::new(DVector::zeros(2), bad),
            Err(DistributionError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn cgf_machinery_stable_for_large_eta() {
        // Rare-event sweeps drive ‖η‖ large; the max-shift evaluation must
        // stay finite and collapse onto the dominant component.
        let m = mix2();
        let eta = DVector::from_vec(vec![300.0, 450.0]);
        let s = m.cgf(&eta);
        assert!(s.is_finite());
        let grad = m.cgf_gradient(&eta);
        assert!(grad.iter().all(|v| v.is_finite()));
        let hess = m.cgf_hessian(&eta);
        assert!(hess.iter().all(|v| v.is_finite()));
        let rho = m.softmax_weights(&eta);
        assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // dominant component's affine map controls the gradient
        let idx = rho
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let comp = &m.components()[idx].gaussian;
        let dominant = comp.mean() + comp.covariance() * &eta;
        assert!((grad - &dominant).amax() / (1.0 + dominant.amax()) < 1e-6);
    }

    #[test]
    fn uncertainty_json_round_trip() {
        let m = UncertaintyModel::Mixture(mix2());
        let spec = m.to_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let parsed: UncertaintySpec = serde_json::from_str(&json).unwrap();
        let rebuilt = parsed.build().unwrap();
        assert!((rebuilt.mean() - m.mean()).amax() < 1e-15);
        assert!((rebuilt.covariance() - m.covariance()).amax() < 1e-15);
    }
}
