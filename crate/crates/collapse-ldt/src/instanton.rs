//! Newton solvers for the instanton KKT systems.
//!
//! Gaussian case, unknowns `z = (x, λ, w, k)`:
//!
//! ```text
//! f(x, λ)                      = 0      (n)
//! (wᵀ f_x)ᵀ                    = 0      (n)
//! k ∇I(λ) − (wᵀ f_λ)ᵀ          = 0      (m)
//! (wᵀ f_λ)(wᵀ f_λ)ᵀ − 1        = 0      (1)
//! ```
//!
//! Mixture case, unknowns `z = (x, λ, w, k, η)`: the gradient row is replaced
//! by `k (wᵀf_λ)ᵀ = η` together with the dual-to-primal relation
//! `∇S(η) = λ`, so no closed-form rate gradient is needed.
//!
//! Newton runs on the full residual map `G(z) = 0` with an analytic Jacobian
//! (the contraction `wᵀf_xx` costs one `fxx_action` per state basis vector)
//! and a residual-norm line search. The normalization row makes the boundary
//! normal `N = (wᵀf_λ)ᵀ` unit length; the sign convention is that `N` points
//! into the infeasible region, equivalently `k > 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistributionError, GaussianMixture, GaussianModel, UncertaintyModel};
use crate::model::{solve_power_flow, NewtonOptions, PowerFlowModel};

#[derive(Debug, Error)]
pub enum InstantonError {
    #[error("KKT Newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular KKT Jacobian at iteration {iteration}")]
    SingularKktJacobian { iteration: usize },
    #[error("converged to a boundary point on the wrong side (k* = {k:.3e}); retry with -w0")]
    WrongSideSolution { k: f64 },
    #[error("power flow does not solve at the nominal mean")]
    NominalInfeasible,
    #[error("ray from the mean never loses solvability within t <= {0}")]
    NoBoundaryFound(f64),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// Converged KKT solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstantonSolution {
    /// Critical state x*.
    pub x: Vec<f64>,
    /// Instanton λ*.
    pub lambda: Vec<f64>,
    /// Left null vector w* of f_x, scaled so ‖wᵀf_λ‖ = 1.
    pub w: Vec<f64>,
    /// Scaling k* tying ∇I to the normal; positive by the sign convention.
    pub k: f64,
    /// Dual vector η* (mixture case only).
    pub eta: Option<Vec<f64>>,
    /// Rate value I(λ*).
    pub i_star: f64,
    /// Final KKT residual ∞-norm.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl InstantonSolution {
    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.x.clone())
    }

    pub fn lambda_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.lambda.clone())
    }

    pub fn w_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.w.clone())
    }

    pub fn eta_vec(&self) -> Option<DVector<f64>> {
        self.eta.as_ref().map(|e| DVector::from_vec(e.clone()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }
}

/// Initial iterate assembled from the nominal point.
#[derive(Debug, Clone)]
pub struct InstantonInit {
    pub x0: DVector<f64>,
    pub lam0: DVector<f64>,
    pub w0: DVector<f64>,
    pub k0: f64,
    pub eta0: Option<DVector<f64>>,
    /// Ray parameter of the bracketed boundary crossing.
    pub boundary_t: f64,
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    /// Bisection stops when the bracket is this tight.
    pub bracket_tol: f64,
    /// Abort the march past this ray parameter.
    pub max_t: f64,
    /// Normal-ray refinements (d ← Σ·N̂) when no direction hint is given;
    /// brings the boundary point near the instanton before Newton starts.
    pub max_direction_refinements: usize,
    pub newton: NewtonOptions,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            bracket_tol: 1e-3,
            max_t: 1e3,
            max_direction_refinements: 40,
            newton: NewtonOptions::default(),
        }
    }
}

/// KKT Newton options: converge at ∞-norm ≤ 1e-10, accept a stalled line
/// search if the residual already satisfies the solution invariant (1e-8).
#[derive(Debug, Clone)]
pub struct KktNewtonOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub accept_tolerance: f64,
    pub max_halvings: usize,
    pub min_step: f64,
}

impl Default for KktNewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-10,
            accept_tolerance: 1e-8,
            max_halvings: 10,
            min_step: 1e-14,
        }
    }
}

/// Boundary data produced by one ray march: crossing point, last solvable
/// state, oriented unit-normal left vector.
struct RayCrossing {
    t: f64,
    x: DVector<f64>,
    lam: DVector<f64>,
    w: DVector<f64>,
    normal: DVector<f64>,
}

fn march_and_bisect(
    model: &dyn PowerFlowModel,
    mean: &DVector<f64>,
    x_mean: &DVector<f64>,
    d: &DVector<f64>,
    opts: &InitOptions,
) -> Result<RayCrossing, InstantonError> {
    let mut t_lo = 0.0_f64;
    let mut x = x_mean.clone();
    let mut step = 0.25;
    let mut t_hi = None;
    while t_lo + step <= opts.max_t {
        let t_try = t_lo + step;
        match solve_power_flow(model, &(mean + d * t_try), &x, &opts.newton) {
            Ok(sol) => {
                t_lo = t_try;
                x = sol.state;
                step *= 2.0;
            }
            Err(_) => {
                t_hi = Some(t_try);
                break;
            }
        }
    }
    let mut t_hi = t_hi.ok_or(InstantonError::NoBoundaryFound(opts.max_t))?;
    while t_hi - t_lo > opts.bracket_tol {
        let mid = 0.5 * (t_lo + t_hi);
        match solve_power_flow(model, &(mean + d * mid), &x, &opts.newton) {
            Ok(sol) => {
                t_lo = mid;
                x = sol.state;
            }
            Err(_) => t_hi = mid,
        }
    }
    let lam = mean + d * t_lo;
    // Left singular vector of f_x for the smallest singular value.
    let svd = model.eval_fx(&x, &lam).svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let mut w = DVector::from_column_slice(u.column(u.ncols() - 1).as_slice());
    let fl = model.eval_flambda(&x, &lam);
    let mut normal = fl.transpose() * &w;
    if normal.dot(d) < 0.0 {
        w = -w;
        normal = -normal;
    }
    let nn = normal.norm();
    w /= nn;
    normal /= nn;
    Ok(RayCrossing {
        t: t_lo,
        x,
        lam,
        w,
        normal,
    })
}

/// Builds the initial iterate: bisection along the ray `λ(t) = mean + t·d`
/// brackets the boundary; `w₀` is the smallest-singular-value left vector of
/// `f_x` there, oriented so the normal points along the ray; `k₀` comes from
/// a least-squares fit of the gradient row.
///
/// Default direction: dominant eigenvector of the covariance, oriented toward
/// load increase, then iteratively refined toward the instanton direction.
/// A `direction_hint` is honored verbatim (no refinement).
pub fn initialize_from_nominal(
    model: &dyn PowerFlowModel,
    dist: &UncertaintyModel,
    direction_hint: Option<&DVector<f64>>,
    opts: &InitOptions,
) -> Result<InstantonInit, InstantonError> {
    let mean = dist.mean();
    let x_mean = solve_power_flow(model, &mean, &model.initial_state(), &opts.newton)
        .map_err(|_| InstantonError::NominalInfeasible)?
        .state;

    let cov = dist.covariance();
    let mut d = match direction_hint {
        Some(h) => {
            let n = h.norm();
            assert!(n > 0.0, "direction hint must be nonzero");
            h / n
        }
        None => {
            let eig = cov.clone().symmetric_eigen();
            let idx = eig.eigenvalues.imax();
            let mut v = DVector::from_column_slice(eig.eigenvectors.column(idx).as_slice());
            if v.sum() < 0.0 {
                v = -v;
            }
            v
        }
    };

    let mut crossing = march_and_bisect(model, &mean, &x_mean, &d, opts)?;
    if direction_hint.is_none() {
        for _ in 0..opts.max_direction_refinements {
            let mut d_new = &cov * &crossing.normal;
            d_new /= d_new.norm();
            if (&d_new - &d).norm() < 1e-10 {
                break;
            }
            d = d_new;
            crossing = march_and_bisect(model, &mean, &x_mean, &d, opts)?;
        }
    }

    let (k0, eta0) = match dist {
        UncertaintyModel::Gaussian(g) => {
            let grad = g.rate_gradient(&crossing.lam);
            (grad.dot(&crossing.normal) / grad.norm_squared(), None)
        }
        UncertaintyModel::Mixture(m) => {
            let pooled = m.covariance();
            let rhs = &crossing.lam - m.mean();
            let eta0 = pooled
                .lu()
                .solve(&rhs)
                .expect("mixture covariance invertible");
            let k0 = crossing.normal.dot(&eta0);
            (k0, Some(eta0))
        }
    };

    Ok(InstantonInit {
        x0: crossing.x,
        lam0: crossing.lam,
        w0: crossing.w,
        k0,
        eta0,
        boundary_t: crossing.t,
    })
}

/// Stacked Gaussian KKT residual at `(x, λ, w, k)`, length `2n + m + 1`.
pub fn kkt_residual_gaussian(
    model: &dyn PowerFlowModel,
    g: &GaussianModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    k: f64,
) -> DVector<f64> {
    let n = model.state_dim();
    let m = model.param_dim();
    assert_eq!(x.len(), n, "kkt state length");
    assert_eq!(lam.len(), m, "kkt parameter length");
    assert_eq!(w.len(), n, "kkt null-vector length");
    let f = model.eval_f(x, lam);
    let jt_w = model.eval_fx(x, lam).transpose() * w;
    let normal = model.eval_flambda(x, lam).transpose() * w;
    let grad_row = g.rate_gradient(lam) * k - &normal;
    let mut out = DVector::zeros(2 * n + m + 1);
    out.rows_mut(0, n).copy_from(&f);
    out.rows_mut(n, n).copy_from(&jt_w);
    out.rows_mut(2 * n, m).copy_from(&grad_row);
    out[2 * n + m] = normal.norm_squared() - 1.0;
    out
}

/// Stacked mixture KKT residual at `(x, λ, w, k, η)`, length `2n + 2m + 1`.
pub fn kkt_residual_gmm(
    model: &dyn PowerFlowModel,
    gmm: &GaussianMixture,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    k: f64,
    eta: &DVector<f64>,
) -> DVector<f64> {
    let n = model.state_dim();
    let m = model.param_dim();
    let f = model.eval_f(x, lam);
    let jt_w = model.eval_fx(x, lam).transpose() * w;
    let normal = model.eval_flambda(x, lam).transpose() * w;
    let mut out = DVector::zeros(2 * n + 2 * m + 1);
    out.rows_mut(0, n).copy_from(&f);
    out.rows_mut(n, n).copy_from(&jt_w);
    out.rows_mut(2 * n, m).copy_from(&(&normal * k - eta));
    out.rows_mut(2 * n + m, m)
        .copy_from(&(gmm.cgf_gradient(eta) - lam));
    out[2 * n + 2 * m] = normal.norm_squared() - 1.0;
    out
}

/// `∂(f_xᵀw)/∂x`: symmetric contraction `wᵀ f_xx`, one `fxx_action` per state
/// basis vector.
fn w_hessian_contraction(
    model: &dyn PowerFlowModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let mut out = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for l in 0..n {
        e[l] = 1.0;
        let col = model.fxx_action(x, lam, &e).transpose() * w;
        out.set_column(l, &col);
        e[l] = 0.0;
    }
    out
}

/// Analytic Jacobian of [`kkt_residual_gaussian`] in `(x, λ, w, k)`.
pub fn kkt_jacobian_gaussian(
    model: &dyn PowerFlowModel,
    g: &GaussianModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    k: f64,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let m = model.param_dim();
    let nz = 2 * n + m + 1;
    let jac = model.eval_fx(x, lam);
    let fl = model.eval_flambda(x, lam);
    let normal = fl.transpose() * w;
    let mut d = DMatrix::zeros(nz, nz);
    d.view_mut((0, 0), (n, n)).copy_from(&jac);
    d.view_mut((0, n), (n, m)).copy_from(&fl);
    d.view_mut((n, 0), (n, n))
        .copy_from(&w_hessian_contraction(model, x, lam, w));
    d.view_mut((n, n + m), (n, n)).copy_from(&jac.transpose());
    d.view_mut((2 * n, n), (m, m))
        .copy_from(&(g.covariance_inv() * k));
    d.view_mut((2 * n, n + m), (m, n))
        .copy_from(&(-fl.transpose()));
    d.view_mut((2 * n, 2 * n + m), (m, 1))
        .copy_from(&g.rate_gradient(lam));
    let norm_row = (&fl * &normal) * 2.0;
    d.view_mut((2 * n + m, n + m), (1, n))
        .copy_from(&norm_row.transpose());
    d
}

/// Analytic Jacobian of [`kkt_residual_gmm`] in `(x, λ, w, k, η)`.
pub fn kkt_jacobian_gmm(
    model: &dyn PowerFlowModel,
    gmm: &GaussianMixture,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    k: f64,
    eta: &DVector<f64>,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let m = model.param_dim();
    let nz = 2 * n + 2 * m + 1;
    let jac = model.eval_fx(x, lam);
    let fl = model.eval_flambda(x, lam);
    let normal = fl.transpose() * w;
    let mut d = DMatrix::zeros(nz, nz);
    d.view_mut((0, 0), (n, n)).copy_from(&jac);
    d.view_mut((0, n), (n, m)).copy_from(&fl);
    d.view_mut((n, 0), (n, n))
        .copy_from(&w_hessian_contraction(model, x, lam, w));
    d.view_mut((n, n + m), (n, n)).copy_from(&jac.transpose());
    // k (wᵀf_λ)ᵀ − η
    d.view_mut((2 * n, n + m), (m, n))
        .copy_from(&(fl.transpose() * k));
    d.view_mut((2 * n, 2 * n + m), (m, 1)).copy_from(&normal);
    d.view_mut((2 * n, 2 * n + m + 1), (m, m))
        .copy_from(&(-DMatrix::<f64>::identity(m, m)));
    // ∇S(η) − λ
    d.view_mut((2 * n + m, n), (m, m))
        .copy_from(&(-DMatrix::<f64>::identity(m, m)));
    d.view_mut((2 * n + m, 2 * n + m + 1), (m, m))
        .copy_from(&gmm.cgf_hessian(eta));
    let norm_row = (&fl * &normal) * 2.0;
    d.view_mut((2 * n + 2 * m, n + m), (1, n))
        .copy_from(&norm_row.transpose());
    d
}

/// Damped Newton on a residual map; returns (z, iterations, residual ∞-norm).
fn newton_on_residual(
    residual: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    jacobian: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    z0: DVector<f64>,
    opts: &KktNewtonOptions,
) -> Result<(DVector<f64>, usize, f64), InstantonError> {
    let mut z = z0;
    let mut r = residual(&z);
    for it in 0..opts.max_iterations {
        let rnorm = r.amax();
        if rnorm <= opts.tolerance {
            return Ok((z, it, rnorm));
        }
        let step = match jacobian(&z).lu().solve(&(-&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return Err(InstantonError::SingularKktJacobian { iteration: it }),
        };
        let merit = r.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let z_try = &z + &step * t;
            let r_try = residual(&z_try);
            if r_try.norm() < merit {
                z = z_try;
                r = r_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Line search stalled; take the smallest step unless it is noise.
            if step.norm() * t <= opts.min_step * (1.0 + z.norm()) {
                let rnorm = r.amax();
                if rnorm <= opts.accept_tolerance {
                    return Ok((z, it, rnorm));
                }
                return Err(InstantonError::NoConvergence {
                    iterations: it,
                    residual: rnorm,
                });
            }
            z += &step * t;
            r = residual(&z);
        }
    }
    let rnorm = r.amax();
    if rnorm <= opts.accept_tolerance {
        return Ok((z, opts.max_iterations, rnorm));
    }
    Err(InstantonError::NoConvergence {
        iterations: opts.max_iterations,
        residual: rnorm,
    })
}

/// Solves the Gaussian KKT system from `init`.
pub fn solve_instanton_gaussian(
    model: &dyn PowerFlowModel,
    g: &GaussianModel,
    init: &InstantonInit,
    opts: &KktNewtonOptions,
) -> Result<InstantonSolution, InstantonError> {
    let n = model.state_dim();
    let m = model.param_dim();
    assert_eq!(g.dim(), m, "uncertainty dimension");
    let mut z0 = DVector::zeros(2 * n + m + 1);
    z0.rows_mut(0, n).copy_from(&init.x0);
    z0.rows_mut(n, m).copy_from(&init.lam0);
    z0.rows_mut(n + m, n).copy_from(&init.w0);
    z0[2 * n + m] = init.k0;

    let unpack = |z: &DVector<f64>| {
        (
            z.rows(0, n).into_owned(),
            z.rows(n, m).into_owned(),
            z.rows(n + m, n).into_owned(),
            z[2 * n + m],
        )
    };
    let residual = |z: &DVector<f64>| {
        let (x, lam, w, k) = unpack(z);
        kkt_residual_gaussian(model, g, &x, &lam, &w, k)
    };
    let jacobian = |z: &DVector<f64>| {
        let (x, lam, w, k) = unpack(z);
        kkt_jacobian_gaussian(model, g, &x, &lam, &w, k)
    };
    let (z, iterations, residual_norm) = newton_on_residual(&residual, &jacobian, z0, opts)?;
    let (x, lam, w, k) = unpack(&z);
    let outward = model.eval_flambda(&x, &lam).transpose() * &w;
    if k <= 0.0 || outward.dot(&(&lam - g.mean())) <= 0.0 {
        return Err(InstantonError::WrongSideSolution { k });
    }
    Ok(InstantonSolution {
        x: x.iter().cloned().collect(),
        lambda: lam.iter().cloned().collect(),
        w: w.iter().cloned().collect(),
        k,
        eta: None,
        i_star: g.rate(&lam),
        residual_norm,
        iterations,
    })
}

/// Solves the augmented mixture KKT system from `init` (η₀ defaults to the
/// pooled-covariance whitening of `λ₀ − mean`).
pub fn solve_instanton_gmm(
    model: &dyn PowerFlowModel,
    gmm: &GaussianMixture,
    init: &InstantonInit,
    opts: &KktNewtonOptions,
) -> Result<InstantonSolution, InstantonError> {
    let n = model.state_dim();
    let m = model.param_dim();
    assert_eq!(gmm.dim(), m, "uncertainty dimension");
    let eta0 = match &init.eta0 {
        Some(e) => e.clone(),
        None => {
            let pooled = gmm.covariance();
            pooled
                .lu()
                .solve(&(&init.lam0 - gmm.mean()))
                .expect("mixture covariance invertible")
        }
    };
    let mut z0 = DVector::zeros(2 * n + 2 * m + 1);
    z0.rows_mut(0, n).copy_from(&init.x0);
    z0.rows_mut(n, m).copy_from(&init.lam0);
    z0.rows_mut(n + m, n).copy_from(&init.w0);
    z0[2 * n + m] = init.k0;
    z0.rows_mut(2 * n + m + 1, m).copy_from(&eta0);

    let unpack = |z: &DVector<f64>| {
        (
            z.rows(0, n).into_owned(),
            z.rows(n, m).into_owned(),
            z.rows(n + m, n).into_owned(),
            z[2 * n + m],
            z.rows(2 * n + m + 1, m).into_owned(),
        )
    };
    let residual = |z: &DVector<f64>| {
        let (x, lam, w, k, eta) = unpack(z);
        kkt_residual_gmm(model, gmm, &x, &lam, &w, k, &eta)
    };
    let jacobian = |z: &DVector<f64>| {
        let (x, lam, w, k, eta) = unpack(z);
        kkt_jacobian_gmm(model, gmm, &x, &lam, &w, k, &eta)
    };
    let (z, iterations, residual_norm) = newton_on_residual(&residual, &jacobian, z0, opts)?;
    let (x, lam, w, k, eta) = unpack(&z);
    if k <= 0.0 {
        return Err(InstantonError::WrongSideSolution { k });
    }
    let i_star = gmm.rate(&lam, &eta)?;
    Ok(InstantonSolution {
        x: x.iter().cloned().collect(),
        lambda: lam.iter().cloned().collect(),
        w: w.iter().cloned().collect(),
        k,
        eta: Some(eta.iter().cloned().collect()),
        i_star,
        residual_norm,
        iterations,
    })
}
