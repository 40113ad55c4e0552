//! Power-flow residual models with exact first and second derivatives.
//!
//! A model is the mismatch map `f(x, λ)` of Eq. `f(x, λ) = 0`: `x` collects
//! the unknown voltage state, `λ` the uncertain injections. Collapse analysis
//! needs `f`, the state Jacobian `f_x`, the parameter Jacobian `f_λ`, and the
//! action of the second-derivative tensor `f_xx`. For the built-in models the
//! injections enter linearly, so `f_λ` is a constant selection matrix and
//! `f_xλ = f_λλ = 0`.

mod network;
mod polar;
mod two_bus;

pub use network::{
    Bus, BusType, InjectionKind, LambdaSlot, NetworkDescription, NetworkError, NominalInjections,
    YbusConvention,
};
pub use polar::{build_polar_ac, PolarAcModel};
pub use two_bus::{build_two_bus, TwoBusModel};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Whether second derivatives are assembled analytically or by finite
/// differences of `f_x` (step 1e-5); surfaced in solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianKind {
    Analytic,
    FiniteDifference,
}

/// Static power-flow model `f(x, λ)` with derivative evaluators.
///
/// Implementations must be immutable after construction; evaluation allocates
/// per-call so models can be shared across threads.
///
/// All evaluators panic on dimension mismatch.
pub trait PowerFlowModel: Send + Sync {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;

    /// Parameter dimension `m`.
    fn param_dim(&self) -> usize;

    /// Flat-start state used to seed Newton solves.
    fn initial_state(&self) -> DVector<f64>;

    /// Mismatch vector `f(x, λ)`, length `n`; zero iff `(x, λ)` is an equilibrium.
    fn eval_f(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64>;

    /// State Jacobian `f_x(x, λ)`, `n×n`.
    fn eval_fx(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DMatrix<f64>;

    /// Parameter Jacobian `f_λ(x, λ)`, `n×m`. Constant for the built-in models.
    fn eval_flambda(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DMatrix<f64>;

    /// Direction-contracted second derivative: the `n×n` matrix with entries
    /// `[M_v]_{ij} = Σ_k ∂²f_i/∂x_j∂x_k v_k`, i.e. `∂/∂x [f_x(x, λ)·v]`.
    ///
    /// Default implementation: central finite differences of `eval_fx`.
    fn fxx_action(&self, x: &DVector<f64>, lam: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(v.len(), self.state_dim(), "fxx_action: direction length");
        let h = 1e-5;
        let scale = 1.0 + v.norm();
        let step = h / scale;
        let xp = x + v * step;
        let xm = x - v * step;
        (self.eval_fx(&xp, lam) - self.eval_fx(&xm, lam)) / (2.0 * step)
    }

    fn hessian_kind(&self) -> HessianKind {
        HessianKind::FiniteDifference
    }

    /// Bilinear tensor action `f_xx(u, v)`: the length-`n` vector with
    /// components `Σ_{jk} ∂²f_i/∂x_j∂x_k u_j v_k`. Symmetric in `(u, v)`.
    fn eval_fxx_bilinear(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        self.fxx_action(x, lam, v) * u
    }

    fn state_names(&self) -> Vec<String>;

    fn param_names(&self) -> Vec<String>;
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    /// Newton budget exhausted or step divergence; used by the estimators as
    /// the collapse classification.
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    /// LU factorization failed mid-iteration; callers classify as collapse.
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

/// Newton solve options. Defaults: 30 iterations, ∞-norm tolerance 1e-9,
/// at most 8 step halvings, divergence when the state norm exceeds 1e6.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_halvings: usize,
    pub divergence_norm: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            tolerance: 1e-9,
            max_halvings: 8,
            divergence_norm: 1e6,
        }
    }
}

/// Converged power-flow solve.
#[derive(Debug, Clone)]
pub struct PowerFlowSolve {
    pub state: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton iteration on `eval_f` with the analytic Jacobian.
///
/// Success means residual ∞-norm ≤ `opts.tolerance` within the budget. The
/// step is damped by halving whenever the residual norm fails to decrease.
pub fn solve_power_flow(
    model: &dyn PowerFlowModel,
    lam: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<PowerFlowSolve, PowerFlowError> {
    assert_eq!(x0.len(), model.state_dim(), "solve_power_flow: x0 length");
    assert_eq!(lam.len(), model.param_dim(), "solve_power_flow: λ length");
    let mut x = x0.clone();
    let mut r = model.eval_f(&x, lam);
    for it in 0..opts.max_iterations {
        let rnorm = r.amax();
        if rnorm <= opts.tolerance {
            return Ok(PowerFlowSolve {
                state: x,
                iterations: it,
                residual: rnorm,
            });
        }
        let jac = model.eval_fx(&x, lam);
        let lu = jac.lu();
        let step = match lu.solve(&(-&r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return Err(PowerFlowError::SingularJacobian { iteration: it }),
        };
        let mut t = 1.0;
        let mut x_next = &x + &step;
        let mut r_next = model.eval_f(&x_next, lam);
        for _ in 0..opts.max_halvings {
            if r_next.amax() < rnorm {
                break;
            }
            t *= 0.5;
            x_next = &x + &step * t;
            r_next = model.eval_f(&x_next, lam);
        }
        x = x_next;
        r = r_next;
        if x.norm() > opts.divergence_norm {
            return Err(PowerFlowError::NoConvergence {
                iterations: it + 1,
                residual: r.amax(),
            });
        }
    }
    let rnorm = r.amax();
    if rnorm <= opts.tolerance {
        return Ok(PowerFlowSolve {
            state: x,
            iterations: opts.max_iterations,
            residual: rnorm,
        });
    }
    Err(PowerFlowError::NoConvergence {
        iterations: opts.max_iterations,
        residual: rnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bus_no_load_flat_start_is_equilibrium() {
        let model = build_two_bus();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::zeros(2);
        let f = model.eval_f(&x, &lam);
        assert_eq!(f, DVector::zeros(2));
    }

    #[test]
    fn two_bus_residual_linear_in_lambda() {
        let model = build_two_bus();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::from_vec(vec![0.5, 0.3]);
        let f = model.eval_f(&x, &lam);
        assert_eq!(f[0], -0.5);
        assert_eq!(f[1], -0.3);
    }

    #[test]
    fn two_bus_jacobian_at_flat_start() {
        let model = build_two_bus();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::zeros(2);
        let j = model.eval_fx(&x, &lam);
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, -4.0, -4.0, 0.0]);
        assert!((j - expect).amax() < 1e-14);
    }

    #[test]
    fn two_bus_flambda_is_negative_identity() {
        let model = build_two_bus();
        let x = DVector::from_vec(vec![0.7, -0.2]);
        let lam = DVector::from_vec(vec![0.4, 0.1]);
        let fl = model.eval_flambda(&x, &lam);
        assert!((fl + DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn two_bus_fxx_v_direction_second_equation() {
        // u = v = e1 (V direction): the -4V^2 term contributes -8 to f2.
        let model = build_two_bus();
        let x = DVector::from_vec(vec![0.83, 0.41]);
        let lam = DVector::zeros(2);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let b = model.eval_fxx_bilinear(&x, &lam, &e1, &e1);
        assert!((b[1] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn fxx_bilinear_zero_direction() {
        let model = build_two_bus();
        let x = DVector::from_vec(vec![0.9, 0.2]);
        let lam = DVector::zeros(2);
        let u = DVector::zeros(2);
        let v = DVector::from_vec(vec![0.3, -1.2]);
        let b = model.eval_fxx_bilinear(&x, &lam, &u, &v);
        assert_eq!(b.amax(), 0.0);
    }

    #[test]
    fn newton_converges_immediately_at_solution() {
        let model = build_two_bus();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::zeros(2);
        let sol = solve_power_flow(&model, &lam, &x0, &NewtonOptions::default()).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.state, x0);
    }

    #[test]
    fn newton_solves_moderate_load() {
        let model = build_two_bus();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::from_vec(vec![0.5, 0.3]);
        let sol = solve_power_flow(&model, &lam, &x0, &NewtonOptions::default()).unwrap();
        let r = model.eval_f(&sol.state, &lam);
        assert!(r.amax() <= 1e-9);
    }

    #[test]
    fn newton_reports_collapse_beyond_boundary() {
        // λ = (0, 2) is deep in the infeasible region: 0 + 8 - 4 > 0.
        let model = build_two_bus();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::from_vec(vec![0.0, 2.0]);
        let err = solve_power_flow(&model, &lam, &x0, &NewtonOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn newton_idempotent_from_solved_state() {
        let model = build_two_bus();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let lam = DVector::from_vec(vec![0.4, 0.25]);
        let sol = solve_power_flow(&model, &lam, &x0, &NewtonOptions::default()).unwrap();
        let again = solve_power_flow(&model, &lam, &sol.state, &NewtonOptions::default()).unwrap();
        assert!(again.iterations <= 1);
    }
}
