//! Analytic two-bus model.
//!
//! Load bus behind a single line, state `x = (V, α)`, loads `λ = (λ₁, λ₂)`:
//!
//! ```text
//! f₁ = −4 V sin α − λ₁
//! f₂ = −4 V² + 4 V cos α − λ₂
//! ```
//!
//! The bifurcation surface is known in closed form, `λ₁² + 4λ₂ − 4 = 0`,
//! which makes this the reference case for oracle tests.

use nalgebra::{DMatrix, DVector};

use super::{HessianKind, PowerFlowModel};

#[derive(Debug, Clone, Default)]
pub struct TwoBusModel;

pub fn build_two_bus() -> TwoBusModel {
    TwoBusModel
}

impl PowerFlowModel for TwoBusModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![1.0, 0.0])
    }

    fn eval_f(&self, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), 2, "two-bus state length");
        assert_eq!(lam.len(), 2, "two-bus parameter length");
        let (v, a) = (x[0], x[1]);
        DVector::from_vec(vec![
            -4.0 * v * a.sin() - lam[0],
            -4.0 * v * v + 4.0 * v * a.cos() - lam[1],
        ])
    }

    fn eval_fx(&self, x: &DVector<f64>, _lam: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), 2, "two-bus state length");
        let (v, a) = (x[0], x[1]);
        let (s, c) = a.sin_cos();
        DMatrix::from_row_slice(
            2,
            2,
            &[-4.0 * s, -4.0 * v * c, -8.0 * v + 4.0 * c, -4.0 * v * s],
        )
    }

    fn eval_flambda(&self, _x: &DVector<f64>, _lam: &DVector<f64>) -> DMatrix<f64> {
        -DMatrix::identity(2, 2)
    }

    fn fxx_action(&self, x: &DVector<f64>, _lam: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), 2, "two-bus state length");
        assert_eq!(v.len(), 2, "two-bus direction length");
        let (vm, a) = (x[0], x[1]);
        let (s, c) = a.sin_cos();
        // Hessians of f1 and f2 in (V, α):
        //   H1 = [[0, -4c], [-4c, 4 V s]]
        //   H2 = [[-8, -4s], [-4s, -4 V c]]
        // Row i of the action is (H_i v)^T.
        let h1 = [[0.0, -4.0 * c], [-4.0 * c, 4.0 * vm * s]];
        let h2 = [[-8.0, -4.0 * s], [-4.0 * s, -4.0 * vm * c]];
        let mut out = DMatrix::zeros(2, 2);
        for j in 0..2 {
            out[(0, j)] = h1[j][0] * v[0] + h1[j][1] * v[1];
            out[(1, j)] = h2[j][0] * v[0] + h2[j][1] * v[1];
        }
        out
    }

    fn hessian_kind(&self) -> HessianKind {
        HessianKind::Analytic
    }

    fn state_names(&self) -> Vec<String> {
        vec!["V".into(), "alpha".into()]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["lambda1".into(), "lambda2".into()]
    }
}

impl TwoBusModel {
    /// State on the bifurcation surface for boundary abscissa `s = λ₁`:
    /// `V = √(s²+4)/4`, `α = atan2(−s, 2)`. Used by oracle tests.
    pub fn boundary_state(s: f64) -> DVector<f64> {
        let q = (s * s + 4.0).sqrt();
        DVector::from_vec(vec![q / 4.0, (-s).atan2(2.0)])
    }

    /// Boundary point `(s, 1 − s²/4)` for abscissa `s = λ₁`.
    pub fn boundary_point(s: f64) -> DVector<f64> {
        DVector::from_vec(vec![s, 1.0 - s * s / 4.0])
    }
}
