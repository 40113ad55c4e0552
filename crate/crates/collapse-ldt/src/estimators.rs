//! Probability estimators: first- and second-order large-deviation
//! approximations (Gaussian and mixture), direct Monte Carlo, and importance
//! sampling, sharing a collapse classifier.
//!
//! The first-order value is the Gaussian tail of the reliability distance,
//! `Φ(−√(2I*))`. The second-order value multiplies in the curvature
//! prefactor `Π_i [1 − √(2I*) ν_i]^{−1/2}` built from the whitened shape
//! matrix (the ‖AᵀN‖ normalization already lives inside the ν_i). Mixture
//! estimates decompose componentwise; the second-order component terms are
//! evaluated at per-component tangency points on the quadratic boundary
//! model.
//!
//! Monte Carlo and importance sampling draw in fixed-size chunks, one
//! counter-based RNG stream per chunk, and merge partial sums in chunk
//! order, so results are bit-identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::distributions::{GaussianMixture, GaussianModel, UncertaintyModel};
use crate::geometry::{curvature_correction_inputs, CurvatureInputs, GeometryError};
use crate::model::{solve_power_flow, NewtonOptions, PowerFlowModel};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(
        "curvature bracket {bracket:.6e} is nonpositive; second-order model invalid at this scale"
    )]
    CurvatureBreakdown { bracket: f64 },
    #[error("tangency Newton did not converge (residual {residual:.3e})")]
    TangencyNoConvergence { residual: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimateMethod {
    Ldt1,
    Ldt2,
    GmmLdt1,
    GmmLdt2,
    Mc,
    Is,
}

impl std::fmt::Display for EstimateMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Ldt1 => "LDT1",
            Self::Ldt2 => "LDT2",
            Self::GmmLdt1 => "GMM_LDT1",
            Self::GmmLdt2 => "GMM_LDT2",
            Self::Mc => "MC",
            Self::Is => "IS",
        };
        f.write_str(s)
    }
}

/// Per-component term of a mixture estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentTerm {
    pub weight: f64,
    /// Component probability before weighting.
    pub probability: f64,
    /// Reliability distance used in the tail evaluation (signed).
    pub beta: f64,
    pub fallback_first_order: bool,
    pub nonpositive_multiplier: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EstimateDiagnostics {
    /// Curvature brackets `1 − β ν_i` (second-order methods).
    pub brackets: Vec<f64>,
    pub curvature_eigenvalues: Vec<f64>,
    pub components: Vec<ComponentTerm>,
    /// Effective sample size (importance sampling).
    pub ess: Option<f64>,
    pub fallback_first_order: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbabilityEstimate {
    pub value: f64,
    pub method: EstimateMethod,
    pub std_error: Option<f64>,
    pub samples: Option<u64>,
    pub seed: Option<u64>,
    pub diagnostics: EstimateDiagnostics,
}

impl ProbabilityEstimate {
    /// CSV row `method,c,value,std_error,samples,seed,diagnostics-json`.
    pub fn csv_row(&self, c: f64) -> String {
        let diag = serde_json::to_string(&self.diagnostics).expect("diagnostics serialize");
        format!(
            "{},{:e},{:e},{},{},{},{:?}",
            self.method,
            c,
            self.value,
            self.std_error.map(|v| format!("{v:e}")).unwrap_or_default(),
            self.samples.map(|v| v.to_string()).unwrap_or_default(),
            self.seed.map(|v| v.to_string()).unwrap_or_default(),
            diag,
        )
    }

    fn closed_form(value: f64, method: EstimateMethod) -> Self {
        Self {
            value,
            method,
            std_error: None,
            samples: None,
            seed: None,
            diagnostics: EstimateDiagnostics::default(),
        }
    }
}

/// Deep-tail Gaussian tail `Φ(−β)` via the complementary error function,
/// never by CDF subtraction.
pub fn normal_tail(beta: f64) -> f64 {
    0.5 * libm::erfc(beta / std::f64::consts::SQRT_2)
}

/// First-order approximation `Φ(−√(2I*))`.
pub fn ldt_first_order(i_star: f64) -> ProbabilityEstimate {
    assert!(i_star >= 0.0, "rate value must be nonnegative");
    ProbabilityEstimate::closed_form(normal_tail((2.0 * i_star).sqrt()), EstimateMethod::Ldt1)
}

fn second_order_value(beta: f64, ci: &CurvatureInputs) -> Result<(f64, Vec<f64>), EstimatorError> {
    let mut prefactor = 1.0;
    let mut brackets = Vec::with_capacity(ci.nus.len());
    for nu in &ci.nus {
        let bracket = 1.0 - beta * nu;
        if bracket <= 0.0 {
            return Err(EstimatorError::CurvatureBreakdown { bracket });
        }
        brackets.push(bracket);
        prefactor *= bracket.powf(-0.5);
    }
    Ok((normal_tail(beta) * prefactor, brackets))
}

/// Second-order approximation: first-order value times the curvature
/// prefactor. Exactly equals the first-order value when `II = 0`.
pub fn ldt_second_order(
    i_star: f64,
    ci: &CurvatureInputs,
) -> Result<ProbabilityEstimate, EstimatorError> {
    assert!(i_star >= 0.0, "rate value must be nonnegative");
    let beta = (2.0 * i_star).sqrt();
    let (value, brackets) = second_order_value(beta, ci)?;
    let mut est = ProbabilityEstimate::closed_form(value, EstimateMethod::Ldt2);
    est.diagnostics.brackets = brackets;
    est.diagnostics.curvature_eigenvalues = ci.nus.clone();
    Ok(est)
}

/// Mixture first-order approximation: componentwise hyperplane tails
/// `Σ π_i Φ(−Nᵀ(λ*−μ_i)/‖Σ_i^{1/2}N‖)`.
pub fn gmm_ldt_first_order(
    gmm: &GaussianMixture,
    lam_star: &DVector<f64>,
    normal: &DVector<f64>,
) -> ProbabilityEstimate {
    let mut value = 0.0;
    let mut components = Vec::new();
    for comp in gmm.components() {
        let num = normal.dot(&(lam_star - comp.gaussian.mean()));
        let den = (comp.gaussian.covariance() * normal).dot(normal).sqrt();
        let beta = num / den;
        let p = normal_tail(beta);
        value += comp.weight * p;
        components.push(ComponentTerm {
            weight: comp.weight,
            probability: p,
            beta,
            fallback_first_order: false,
            nonpositive_multiplier: false,
        });
    }
    let mut est = ProbabilityEstimate::closed_form(value, EstimateMethod::GmmLdt1);
    est.diagnostics.components = components;
    est
}

/// Tangency point of a mixture component on the quadratic boundary model.
#[derive(Debug, Clone)]
pub struct TangencyPoint {
    /// Mahalanobis-closest point on `∂D_G` to the component mean.
    pub point: DVector<f64>,
    /// Local outward normal `N + II(λ̃ − λ*)` (not unit length).
    pub normal: DVector<f64>,
    /// Lagrange multiplier; negative means the component mean lies inside
    /// the collapse region model.
    pub multiplier: f64,
    /// Component rate at the tangency point, `½‖λ̃ − μ_i‖²_{Σ_i⁻¹}`.
    pub rate: f64,
}

/// Solves `min ½‖λ−μ_i‖²_{Σ_i⁻¹}` subject to
/// `Nᵀ(λ−λ*) + ½(λ−λ*)ᵀII(λ−λ*) = 0` by Newton on the KKT conditions,
/// initialized at the Euclidean projection of `μ_i` onto the tangent
/// hyperplane.
pub fn gmm_tangency_point(
    component: &GaussianModel,
    lam_star: &DVector<f64>,
    normal: &DVector<f64>,
    second_form: &DMatrix<f64>,
) -> Result<TangencyPoint, EstimatorError> {
    let m = component.dim();
    let mu = component.mean();
    let sig_inv = component.covariance_inv();
    let mut point = mu + normal * normal.dot(&(lam_star - mu));
    let mut gamma = {
        let d = &point - lam_star;
        let local_n = normal + second_form * &d;
        let grad = sig_inv * (&point - mu);
        let denom = local_n.norm_squared();
        if denom > 0.0 && grad.norm() > 1e-14 {
            grad.dot(&local_n) / denom
        } else {
            1.0
        }
    };
    let boundary = |p: &DVector<f64>| {
        let d = p - lam_star;
        normal.dot(&d) + 0.5 * (second_form * &d).dot(&d)
    };
    let tol = 1e-11;
    let mut last_residual = f64::INFINITY;
    for _ in 0..100 {
        let d = &point - lam_star;
        let local_n = normal + second_form * &d;
        let r_stat = sig_inv * (&point - mu) - &local_n * gamma;
        let r_bnd = boundary(&point);
        last_residual = r_stat.amax().max(r_bnd.abs());
        if last_residual < tol {
            let rate = component.rate(&point);
            return Ok(TangencyPoint {
                normal: local_n,
                multiplier: gamma,
                rate,
                point,
            });
        }
        let mut jac = DMatrix::zeros(m + 1, m + 1);
        jac.view_mut((0, 0), (m, m))
            .copy_from(&(sig_inv - second_form * gamma));
        jac.view_mut((0, m), (m, 1)).copy_from(&(-&local_n));
        jac.view_mut((m, 0), (1, m)).copy_from(&local_n.transpose());
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&(-&r_stat));
        rhs[m] = -r_bnd;
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or(EstimatorError::TangencyNoConvergence {
                residual: last_residual,
            })?;
        point += step.rows(0, m);
        gamma += step[m];
    }
    Err(EstimatorError::TangencyNoConvergence {
        residual: last_residual,
    })
}

/// Mixture second-order approximation: `Σ π_i P_{2,i}` with each component
/// evaluated by the Gaussian second-order formula at its tangency quadruple
/// `(μ_i, Σ_i, λ̃_i, N_i)` and rate `½‖λ̃_i−μ_i‖²`. A component whose
/// curvature bracket breaks down falls back to its first-order term,
/// flagged in the diagnostics.
pub fn gmm_ldt_second_order(
    gmm: &GaussianMixture,
    lam_star: &DVector<f64>,
    normal: &DVector<f64>,
    second_form: &DMatrix<f64>,
) -> Result<ProbabilityEstimate, EstimatorError> {
    let mut value = 0.0;
    let mut components = Vec::new();
    let mut all_brackets = Vec::new();
    let mut any_fallback = false;
    for comp in gmm.components() {
        let tang = gmm_tangency_point(&comp.gaussian, lam_star, normal, second_form)?;
        let ci =
            curvature_correction_inputs(&comp.gaussian, &tang.point, &tang.normal, second_form)?;
        // Signed reliability distance: negative when the component mean sits
        // inside the quadratic collapse model (alignment flips to −e₁).
        let beta = ci.alignment.signum() * (2.0 * tang.rate).sqrt();
        let (p, brackets, fell_back) = match second_order_value(beta, &ci) {
            Ok((p, brackets)) => (p, brackets, false),
            Err(EstimatorError::CurvatureBreakdown { .. }) => {
                let num = normal.dot(&(lam_star - comp.gaussian.mean()));
                let den = (comp.gaussian.covariance() * normal).dot(normal).sqrt();
                (normal_tail(num / den), Vec::new(), true)
            }
            Err(other) => return Err(other),
        };
        any_fallback |= fell_back;
        value += comp.weight * p;
        all_brackets.extend_from_slice(&brackets);
        components.push(ComponentTerm {
            weight: comp.weight,
            probability: p,
            beta,
            fallback_first_order: fell_back,
            nonpositive_multiplier: tang.multiplier <= 0.0,
        });
    }
    let mut est = ProbabilityEstimate::closed_form(value, EstimateMethod::GmmLdt2);
    est.diagnostics.components = components;
    est.diagnostics.brackets = all_brackets;
    est.diagnostics.fallback_first_order = any_fallback;
    Ok(est)
}

/// Collapse classification of a parameter sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Feasible,
    Collapsed,
}

/// Deterministic collapse classifier shared by the MC and IS estimators.
pub enum CollapseClassifier<'a> {
    /// Sign test on the analytic 2-bus boundary residual λ₁² + 4λ₂ − 4.
    AnalyticTwoBus,
    /// Newton power-flow solve from a fixed warm start; non-convergence or a
    /// singular Jacobian classifies as collapsed.
    PowerFlow {
        model: &'a dyn PowerFlowModel,
        warm_start: DVector<f64>,
        options: NewtonOptions,
    },
    /// Never collapses; for tests.
    AlwaysFeasible,
}

impl CollapseClassifier<'_> {
    pub fn classify(&self, lam: &DVector<f64>) -> Classification {
        match self {
            Self::AnalyticTwoBus => {
                if crate::cases::two_bus_boundary_residual(lam) > 0.0 {
                    Classification::Collapsed
                } else {
                    Classification::Feasible
                }
            }
            Self::PowerFlow {
                model,
                warm_start,
                options,
            } => match solve_power_flow(*model, lam, warm_start, options) {
                Ok(_) => Classification::Feasible,
                Err(_) => Classification::Collapsed,
            },
            Self::AlwaysFeasible => Classification::Feasible,
        }
    }
}

/// Fixed chunk size for the deterministic sample partitioning.
const CHUNK: usize = 8192;

fn chunk_rng(seed: u64, chunk_idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is reserved for the convenience samplers.
    rng.set_stream(chunk_idx + 1);
    rng
}

fn chunk_bounds(n_samples: usize) -> Vec<(u64, usize)> {
    let mut chunks = Vec::new();
    let mut start = 0usize;
    let mut idx = 0u64;
    while start < n_samples {
        let len = CHUNK.min(n_samples - start);
        chunks.push((idx, len));
        start += len;
        idx += 1;
    }
    chunks
}

fn run_chunked<T, F>(chunks: Vec<(u64, usize)>, jobs: usize, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, usize) -> T + Sync,
{
    if jobs <= 1 || chunks.len() <= 1 {
        return chunks.into_iter().map(|(i, len)| work(i, len)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        chunks
            .into_par_iter()
            .map(|(i, len)| work(i, len))
            .collect()
    })
}

/// Direct Monte Carlo: fraction of collapsed samples with the binomial
/// standard error. Deterministic for a fixed seed, independent of `jobs`.
pub fn monte_carlo(
    dist: &UncertaintyModel,
    classifier: &CollapseClassifier<'_>,
    n_samples: usize,
    seed: u64,
    jobs: usize,
) -> ProbabilityEstimate {
    assert!(n_samples >= 1, "need at least one sample");
    let hits: u64 = run_chunked(chunk_bounds(n_samples), jobs, |idx, len| {
        let mut rng = chunk_rng(seed, idx);
        let mut h = 0u64;
        for _ in 0..len {
            let lam = dist.sample_with(&mut rng);
            if classifier.classify(&lam) == Classification::Collapsed {
                h += 1;
            }
        }
        h
    })
    .into_iter()
    .sum();
    let n = n_samples as f64;
    let p = hits as f64 / n;
    ProbabilityEstimate {
        value: p,
        method: EstimateMethod::Mc,
        std_error: Some((p * (1.0 - p) / n).sqrt()),
        samples: Some(n_samples as u64),
        seed: Some(seed),
        diagnostics: EstimateDiagnostics::default(),
    }
}

#[derive(Default)]
struct IsPartial {
    sum_z: f64,
    sum_z2: f64,
    sum_w: f64,
    sum_w2: f64,
}

/// Plain (non-self-normalized) importance sampling with weights
/// `p(λ)/q(λ)`; reports the weighted-indicator standard error and the
/// effective sample size. Weights degenerate below `ESS < 0.01 n` raise a
/// warning in the diagnostics, not an error.
pub fn importance_sampling(
    dist: &UncertaintyModel,
    proposal: &UncertaintyModel,
    classifier: &CollapseClassifier<'_>,
    n_samples: usize,
    seed: u64,
    jobs: usize,
) -> ProbabilityEstimate {
    assert!(n_samples >= 1, "need at least one sample");
    let partials = run_chunked(chunk_bounds(n_samples), jobs, |idx, len| {
        let mut rng = chunk_rng(seed, idx);
        let mut acc = IsPartial::default();
        for _ in 0..len {
            let lam = proposal.sample_with(&mut rng);
            let w = (dist.log_density(&lam) - proposal.log_density(&lam)).exp();
            acc.sum_w += w;
            acc.sum_w2 += w * w;
            if classifier.classify(&lam) == Classification::Collapsed {
                acc.sum_z += w;
                acc.sum_z2 += w * w;
            }
        }
        acc
    });
    let mut total = IsPartial::default();
    for p in partials {
        total.sum_z += p.sum_z;
        total.sum_z2 += p.sum_z2;
        total.sum_w += p.sum_w;
        total.sum_w2 += p.sum_w2;
    }
    let n = n_samples as f64;
    let mean = total.sum_z / n;
    let var = ((total.sum_z2 - n * mean * mean) / (n - 1.0)).max(0.0);
    let ess = if total.sum_w2 > 0.0 {
        total.sum_w * total.sum_w / total.sum_w2
    } else {
        0.0
    };
    let mut diagnostics = EstimateDiagnostics {
        ess: Some(ess),
        ..Default::default()
    };
    if ess < 0.01 * n {
        diagnostics.warnings.push(format!(
            "degenerate weights: ESS {ess:.1} < 1% of {n_samples}"
        ));
    }
    ProbabilityEstimate {
        value: mean,
        method: EstimateMethod::Is,
        std_error: Some((var / n).sqrt()),
        samples: Some(n_samples as u64),
        seed: Some(seed),
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_two_bus;
    use approx::assert_relative_eq;

    /// Φ(−β) references computed with 40-digit arbitrary-precision erfc.
    #[allow(clippy::excessive_precision)]
    const TAIL_REFERENCE: &[(f64, f64)] = &[
        (0.0, 0.5),
        (0.5, 0.30853753872598689636),
        (1.0, 0.15865525393145705141),
        (2.0, 0.022750131948179207200),
        (3.5, 0.00023262907903552503635),
        (5.0, 2.8665157187919391167e-7),
        (8.0, 6.2209605742717841235e-16),
        (10.0, 7.6198530241605260660e-24),
        (15.0, 3.6709661993127508858e-51),
        (20.0, 2.7536241186062336951e-89),
        (26.5, 4.8461626603033202928e-155),
        (37.0, 5.7255712225245768227e-300),
    ];

    #[test]
    fn tail_accurate_into_deep_tail() {
        for &(beta, expect) in TAIL_REFERENCE {
            let got = normal_tail(beta);
            let rel = ((got - expect) / expect).abs();
            assert!(rel <= 1e-12, "beta = {beta}: rel error {rel:.2e}");
        }
    }

    #[test]
    fn first_order_at_zero_rate_is_half() {
        assert_eq!(ldt_first_order(0.0).value, 0.5);
    }

    #[test]
    fn second_order_equals_first_order_for_flat_boundary() {
        let g = GaussianModel::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let center = DVector::from_vec(vec![1.7, 0.0]);
        let n = DVector::from_vec(vec![1.0, 0.0]);
        let ci = curvature_correction_inputs(&g, &center, &n, &DMatrix::zeros(2, 2)).unwrap();
        let i_star = 0.5 * center.norm_squared();
        let p1 = ldt_first_order(i_star);
        let p2 = ldt_second_order(i_star, &ci).unwrap();
        assert_eq!(p1.value, p2.value);
    }

    #[test]
    fn curvature_breakdown_reported() {
        let g = GaussianModel::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let center = DVector::from_vec(vec![3.0, 0.0]);
        let n = DVector::from_vec(vec![1.0, 0.0]);
        // Large positive tangential curvature: 1 − β ν < 0.
        let mut form = DMatrix::zeros(2, 2);
        form[(1, 1)] = 1.0;
        let ci = curvature_correction_inputs(&g, &center, &n, &form).unwrap();
        let i_star = 0.5 * 9.0;
        assert!(matches!(
            ldt_second_order(i_star, &ci),
            Err(EstimatorError::CurvatureBreakdown { .. })
        ));
    }

    #[test]
    fn tangency_closed_form_for_flat_boundary() {
        // II = 0: λ̃ = μ + ΣN (Nᵀ(λ*−μ))/(NᵀΣN), local normal N.
        let comp = GaussianModel::new(
            DVector::from_vec(vec![0.45, 0.25]),
            DMatrix::from_row_slice(2, 2, &[0.35, 0.08, 0.08, 0.55]),
        )
        .unwrap();
        let lam_star = DVector::from_vec(vec![0.7, 0.9]);
        let mut n = DVector::from_vec(vec![0.3, 1.0]);
        n /= n.norm();
        let form = DMatrix::zeros(2, 2);
        let tang = gmm_tangency_point(&comp, &lam_star, &n, &form).unwrap();
        let sn = comp.covariance() * &n;
        let expect = comp.mean() + &sn * (n.dot(&(&lam_star - comp.mean())) / n.dot(&sn));
        assert!((tang.point.clone() - expect).amax() < 1e-9);
        assert!((tang.normal.clone() - &n).amax() < 1e-12);
        assert!(tang.multiplier > 0.0);
    }

    #[test]
    fn tangency_fixed_point_when_mean_on_boundary() {
        let comp =
            GaussianModel::new(DVector::from_vec(vec![0.7, 0.9]), DMatrix::identity(2, 2)).unwrap();
        let lam_star = DVector::from_vec(vec![0.7, 0.9]);
        let mut n = DVector::from_vec(vec![0.33, 0.94]);
        n /= n.norm();
        let mut form = DMatrix::identity(2, 2);
        form *= 0.4;
        let tang = gmm_tangency_point(&comp, &lam_star, &n, &form).unwrap();
        assert!((tang.point.clone() - &lam_star).amax() < 1e-9);
        assert!((tang.normal.clone() - &n).amax() < 1e-9);
        assert!(tang.rate.abs() < 1e-18);
    }

    #[test]
    fn tangency_satisfies_kkt_and_minimality_on_grid() {
        // Generic 2-bus-like data: brute-force the quadratic curve.
        let comp = GaussianModel::new(
            DVector::from_vec(vec![0.82, 0.52]),
            DMatrix::from_row_slice(2, 2, &[0.35, 0.08, 0.08, 0.55]),
        )
        .unwrap();
        let lam_star = DVector::from_vec(vec![0.70255, 0.87661]);
        let mut n = DVector::from_vec(vec![2.0 * 0.70255, 4.0]);
        n /= n.norm();
        let form = DMatrix::from_row_slice(2, 2, &[0.206195, -0.35274, -0.35274, 0.603439]);
        let tang = gmm_tangency_point(&comp, &lam_star, &n, &form).unwrap();
        // KKT residuals
        let d = &tang.point - &lam_star;
        let boundary = n.dot(&d) + 0.5 * (&form * &d).dot(&d);
        assert!(boundary.abs() < 1e-9);
        let stat =
            comp.covariance_inv() * (&tang.point - comp.mean()) - &tang.normal * tang.multiplier;
        assert!(stat.amax() < 1e-9);
        // Brute force over the curve parametrized by the tangential offset.
        let t_hat = DVector::from_vec(vec![-n[1], n[0]]);
        let mut best = f64::INFINITY;
        let mut u = -2.0;
        while u <= 2.0 {
            // solve the quadratic in ψ for d = u t̂ + ψ n
            let base = &t_hat * u;
            let a = 0.5 * (&form * &n).dot(&n);
            let b = 1.0 + (&form * &base).dot(&n);
            let c0 = n.dot(&base) + 0.5 * (&form * &base).dot(&base);
            let disc = b * b - 4.0 * a * c0;
            if disc >= 0.0 {
                for psi in [
                    (-b - disc.sqrt()) / (2.0 * a),
                    (-b + disc.sqrt()) / (2.0 * a),
                ] {
                    let lam = &lam_star + &base + &n * psi;
                    best = best.min(comp.rate(&lam));
                }
            }
            u += 1e-3;
        }
        assert!(
            tang.rate <= best + 1e-6,
            "newton {} vs grid {}",
            tang.rate,
            best
        );
    }

    #[test]
    fn component_curvature_breakdown_falls_back_flagged() {
        // Strong tangential curvature and a distant component mean break the
        // bracket; the component must fall back to its first-order term.
        let far = GaussianModel::new(DVector::from_vec(vec![-6.0, 0.0]), DMatrix::identity(2, 2))
            .unwrap();
        let near =
            GaussianModel::new(DVector::from_vec(vec![0.5, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let mix = GaussianMixture::new(vec![(0.5, far), (0.5, near)]).unwrap();
        let lam_star = DVector::from_vec(vec![1.5, 0.0]);
        let n = DVector::from_vec(vec![1.0, 0.0]);
        let mut form = DMatrix::zeros(2, 2);
        form[(1, 1)] = 0.9;
        let est = gmm_ldt_second_order(&mix, &lam_star, &n, &form).unwrap();
        assert!(est.diagnostics.fallback_first_order);
        assert!(est.diagnostics.components[0].fallback_first_order);
        assert!(!est.diagnostics.components[1].fallback_first_order);
        assert!(est.value.is_finite() && est.value > 0.0);
    }

    #[test]
    fn component_mean_inside_region_flags_nonpositive_multiplier() {
        let inside =
            GaussianModel::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let mix = GaussianMixture::new(vec![(1.0, inside)]).unwrap();
        // D_G = {λ₁ ≥ 0} with the boundary through the origin: the mean
        // (1, 0) sits inside the collapse model, so the tangency multiplier
        // is negative and the component contributes more than one half.
        let lam_star = DVector::zeros(2);
        let n = DVector::from_vec(vec![1.0, 0.0]);
        let form = DMatrix::zeros(2, 2);
        let est = gmm_ldt_second_order(&mix, &lam_star, &n, &form).unwrap();
        assert!(est.diagnostics.components[0].nonpositive_multiplier);
        // contribution near 1/2 or more, still evaluated
        assert!(est.value >= 0.5, "value {}", est.value);
    }

    #[test]
    fn always_feasible_classifier_gives_zero() {
        let g = GaussianModel::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let dist = UncertaintyModel::Gaussian(g);
        let est = monte_carlo(&dist, &CollapseClassifier::AlwaysFeasible, 1000, 7, 1);
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, Some(0.0));
    }

    #[test]
    fn classifier_trivial_points() {
        let c = CollapseClassifier::AnalyticTwoBus;
        assert_eq!(
            c.classify(&DVector::from_vec(vec![0.0, 0.0])),
            Classification::Feasible
        );
        assert_eq!(
            c.classify(&DVector::from_vec(vec![0.0, 1.0001])),
            Classification::Collapsed
        );
    }

    #[test]
    fn classifier_modes_agree_away_from_boundary() {
        let model = build_two_bus();
        let nominal = DVector::from_vec(vec![0.5, 0.3]);
        let warm = solve_power_flow(
            &model,
            &nominal,
            &model.initial_state(),
            &NewtonOptions::default(),
        )
        .unwrap()
        .state;
        let pf = CollapseClassifier::PowerFlow {
            model: &model,
            warm_start: warm,
            options: NewtonOptions::default(),
        };
        let analytic = CollapseClassifier::AnalyticTwoBus;
        let g = GaussianModel::new(
            DVector::from_vec(vec![0.5, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let lam = g.sample_with(&mut rng);
            let a = analytic.classify(&lam);
            let b = pf.classify(&lam);
            if a != b {
                disagreements += 1;
                let r = crate::cases::two_bus_boundary_residual(&lam);
                assert!(
                    r.abs() <= 1e-6,
                    "modes disagree away from boundary: λ = {lam:?}, residual {r}"
                );
            }
        }
        // Disagreement is only tolerated inside a vanishing boundary band.
        assert!(disagreements <= 2, "{disagreements} disagreements");
    }

    #[test]
    fn mc_deterministic_and_jobs_invariant() {
        let g = GaussianModel::new(
            DVector::from_vec(vec![0.5, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let dist = UncertaintyModel::Gaussian(g);
        let a = monte_carlo(&dist, &CollapseClassifier::AnalyticTwoBus, 50_000, 99, 1);
        let b = monte_carlo(&dist, &CollapseClassifier::AnalyticTwoBus, 50_000, 99, 4);
        let c = monte_carlo(&dist, &CollapseClassifier::AnalyticTwoBus, 50_000, 99, 1);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.value.to_bits(), c.value.to_bits());
    }

    #[test]
    fn estimate_csv_row_has_fixed_shape() {
        let est = ldt_first_order(0.5);
        let row = est.csv_row(0.631);
        assert!(row.starts_with("LDT1,6.31e-1,"));
        assert!(row.split(',').count() >= 6);
    }

    #[test]
    fn is_with_proposal_equal_to_target_matches_mc_exactly() {
        let g = GaussianModel::new(
            DVector::from_vec(vec![0.5, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let dist = UncertaintyModel::Gaussian(g);
        let mc = monte_carlo(&dist, &CollapseClassifier::AnalyticTwoBus, 40_000, 5, 1);
        let is = importance_sampling(
            &dist,
            &dist,
            &CollapseClassifier::AnalyticTwoBus,
            40_000,
            5,
            1,
        );
        assert_eq!(mc.value.to_bits(), is.value.to_bits());
        assert_relative_eq!(is.diagnostics.ess.unwrap(), 40_000.0, max_relative = 1e-12);
    }
}
