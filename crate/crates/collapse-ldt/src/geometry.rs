//! Bifurcation-surface geometry at the instanton.
//!
//! The state Jacobian is singular at the fold, so the implicit sensitivity
//! `x_λ` comes from bordered solves: with `v` the right null vector of `f_x`
//! and `w` the left one,
//!
//! ```text
//! ⎡ f_x            v ⎤ ⎡ x_{λ_j} ⎤   ⎡ −f_{λ_j} ⎤
//! ⎢                  ⎥ ⎢         ⎥ = ⎢          ⎥
//! ⎣ wᵀf_xx(·, v)   0 ⎦ ⎣ α_j     ⎦   ⎣ 0        ⎦
//! ```
//!
//! The second fundamental form is then `II = wᵀ f_xx(x_λ, x_λ)`; for the
//! built-in models `f_xλ = f_λλ = 0`, so no other second derivatives enter.
//! `curvature_correction_inputs` whitens and rotates so the instanton
//! direction becomes the first axis and returns the tangential eigenvalues
//! used by the second-order probability formula.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::distributions::GaussianModel;
use crate::instanton::InstantonSolution;
use crate::model::PowerFlowModel;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not numerically singular (σ_min/σ_max = {0:.3e})")]
    NotSingular(f64),
    #[error("bordered matrix is singular or near-degenerate (cond = {0:.3e}); fold transversality violated")]
    BorderedSingular(f64),
    #[error("whitened normal fails to align with the instanton axis (⟨â, e₁⟩ = {0:.12})")]
    AlignmentFailure(f64),
}

/// Geometry bundle at the instanton.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryGeometry {
    /// Outward unit normal N = (w*ᵀ f_λ)ᵀ.
    pub normal: Vec<f64>,
    /// Right null vector v* of f_x, unit norm, first nonzero component positive.
    pub right_null: Vec<f64>,
    /// n×m sensitivity x_λ, row-major.
    pub x_lambda: Vec<Vec<f64>>,
    /// m×m symmetric second fundamental form, row-major.
    pub second_form: Vec<Vec<f64>>,
    /// Auxiliary bordered scalars α_j.
    pub alphas: Vec<f64>,
    /// Per-column bordered-solve residual norms.
    pub bordered_residuals: Vec<f64>,
    /// Condition number of the bordered matrix.
    pub bordered_condition: f64,
    /// Asymmetry of II before symmetrization.
    pub asymmetry: f64,
}

impl BoundaryGeometry {
    pub fn normal_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.normal.clone())
    }

    pub fn second_form_mat(&self) -> DMatrix<f64> {
        let m = self.second_form.len();
        DMatrix::from_fn(m, m, |i, j| self.second_form[i][j])
    }

    pub fn x_lambda_mat(&self) -> DMatrix<f64> {
        let n = self.x_lambda.len();
        let m = if n == 0 { 0 } else { self.x_lambda[0].len() };
        DMatrix::from_fn(n, m, |i, j| self.x_lambda[i][j])
    }
}

/// Unit-norm right null vector of a numerically singular matrix, computed by
/// SVD; sign fixed so the first component above 1e-9 is positive.
///
/// Errors with [`GeometryError::NotSingular`] unless σ_min ≤ 1e-6 σ_max.
pub fn right_null_vector(j: &DMatrix<f64>) -> Result<DVector<f64>, GeometryError> {
    let svd = j.clone().svd(false, true);
    let sv = &svd.singular_values;
    let ratio = sv[sv.len() - 1] / sv[0];
    if ratio.is_nan() || ratio > 1e-6 {
        return Err(GeometryError::NotSingular(ratio));
    }
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut v = DVector::from_row_slice(vt.row(vt.nrows() - 1).transpose().as_slice());
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-9) {
        if *first < 0.0 {
            v = -v;
        }
    }
    Ok(v)
}

/// Bordered matrix `M* = [[f_x, v], [wᵀf_xx(·,v), 0]]` at `(x, λ)`.
fn bordered_matrix(
    model: &dyn PowerFlowModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let jac = model.eval_fx(x, lam);
    let border_row = model.fxx_action(x, lam, v).transpose() * w;
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&jac);
    m.view_mut((0, n), (n, 1)).copy_from(v);
    m.view_mut((n, 0), (1, n))
        .copy_from(&border_row.transpose());
    m
}

/// Result of the columnwise bordered solves.
pub struct SensitivitySolve {
    pub x_lambda: DMatrix<f64>,
    pub alphas: DVector<f64>,
    pub residuals: Vec<f64>,
    pub condition: f64,
}

/// Columnwise bordered solves for the sensitivity `x_λ`.
pub fn compute_x_lambda(
    model: &dyn PowerFlowModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<SensitivitySolve, GeometryError> {
    let n = model.state_dim();
    let m = model.param_dim();
    let bordered = bordered_matrix(model, x, lam, w, v);
    let sv = bordered.clone().svd(false, false).singular_values;
    let cond = sv[0] / sv[sv.len() - 1];
    if cond.is_nan() || cond > 1e12 {
        return Err(GeometryError::BorderedSingular(cond));
    }
    let lu = bordered.clone().lu();
    let fl = model.eval_flambda(x, lam);
    let mut x_lambda = DMatrix::zeros(n, m);
    let mut alphas = DVector::zeros(m);
    let mut residuals = Vec::with_capacity(m);
    for j in 0..m {
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-fl.column(j)));
        let sol = lu
            .solve(&rhs)
            .ok_or(GeometryError::BorderedSingular(cond))?;
        residuals.push((&bordered * &sol - &rhs).norm());
        x_lambda.set_column(j, &sol.rows(0, n));
        alphas[j] = sol[n];
    }
    Ok(SensitivitySolve {
        x_lambda,
        alphas,
        residuals,
        condition: cond,
    })
}

/// `II[j][l] = wᵀ f_xx(x_{λ_j}, x_{λ_l})`, symmetrized; returns the
/// symmetrized form and the pre-symmetrization asymmetry.
pub fn second_fundamental_form(
    model: &dyn PowerFlowModel,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    w: &DVector<f64>,
    x_lambda: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let m = x_lambda.ncols();
    let mut form = DMatrix::zeros(m, m);
    // One fxx_action per column; entry (j, l) contracts column j against the
    // action of column l.
    for l in 0..m {
        let action = model.fxx_action(x, lam, &x_lambda.column(l).into_owned());
        let wt_action = action.transpose() * w;
        for j in 0..m {
            form[(j, l)] = wt_action.dot(&x_lambda.column(j).into_owned());
        }
    }
    let asym = (&form - form.transpose()).amax();
    let sym = (&form + form.transpose()) * 0.5;
    (sym, asym)
}

/// Full geometry bundle at a converged instanton.
pub fn boundary_geometry(
    model: &dyn PowerFlowModel,
    sol: &InstantonSolution,
) -> Result<BoundaryGeometry, GeometryError> {
    let x = sol.x_vec();
    let lam = sol.lambda_vec();
    let w = sol.w_vec();
    let jac = model.eval_fx(&x, &lam);
    let v = right_null_vector(&jac)?;
    let solve = compute_x_lambda(model, &x, &lam, &w, &v)?;
    let (form, asymmetry) = second_fundamental_form(model, &x, &lam, &w, &solve.x_lambda);
    let normal = model.eval_flambda(&x, &lam).transpose() * &w;
    let m = model.param_dim();
    let n = model.state_dim();
    Ok(BoundaryGeometry {
        normal: normal.iter().cloned().collect(),
        right_null: v.iter().cloned().collect(),
        x_lambda: (0..n)
            .map(|i| (0..m).map(|j| solve.x_lambda[(i, j)]).collect())
            .collect(),
        second_form: (0..m)
            .map(|i| (0..m).map(|j| form[(i, j)]).collect())
            .collect(),
        alphas: solve.alphas.iter().cloned().collect(),
        bordered_residuals: solve.residuals,
        bordered_condition: solve.condition,
        asymmetry,
    })
}

/// Whitening/rotation data for the second-order formula.
#[derive(Debug, Clone)]
pub struct CurvatureInputs {
    /// A = Σ^{1/2} R; maps standard normals to the original coordinates.
    pub a: DMatrix<f64>,
    /// Shape matrix S = Aᵀ II A / ‖Aᵀ N‖ (normalization already applied).
    pub shape: DMatrix<f64>,
    /// Eigenvalues of the trailing (m−1)×(m−1) block of S.
    pub nus: Vec<f64>,
    /// ‖Aᵀ N‖.
    pub a_t_n_norm: f64,
    /// ⟨AᵀN/‖AᵀN‖, e₁⟩; +1 for a consistent instanton, −1 when the center
    /// sits on the far side of the component mean (mixture bookkeeping).
    pub alignment: f64,
}

/// Householder reflection mapping `u/‖u‖` to `e₁` (identity when already
/// aligned).
fn householder_to_e1(u: &DVector<f64>) -> DMatrix<f64> {
    let m = u.len();
    let mut p = u / u.norm();
    p[0] -= 1.0;
    let norm2 = p.norm_squared();
    if norm2 < 1e-28 {
        return DMatrix::identity(m, m);
    }
    DMatrix::identity(m, m) - &p * p.transpose() * (2.0 / norm2)
}

/// Whitens with `A = Σ^{1/2} R` (R the Householder reflection aligning
/// `Σ^{-1/2}(center − μ)` with `e₁`), forms `S = AᵀIIA/‖AᵀN‖`, and returns
/// the eigenvalues of its trailing principal block.
///
/// The alignment of `AᵀN` with `±e₁` is verified, not assumed; a failure
/// signals an inconsistent instanton.
pub fn curvature_correction_inputs(
    g: &GaussianModel,
    center: &DVector<f64>,
    normal: &DVector<f64>,
    second_form: &DMatrix<f64>,
) -> Result<CurvatureInputs, GeometryError> {
    let m = g.dim();
    assert_eq!(center.len(), m, "center length");
    assert_eq!(normal.len(), m, "normal length");
    let u = g.covariance_sqrt_inv() * (center - g.mean());
    let r = householder_to_e1(&u);
    let a = g.covariance_sqrt() * &r;
    let a_t_n = a.transpose() * normal;
    let a_t_n_norm = a_t_n.norm();
    let alignment = a_t_n[0] / a_t_n_norm;
    if alignment.abs() < 1.0 - 1e-8 {
        return Err(GeometryError::AlignmentFailure(alignment));
    }
    let shape_full = a.transpose() * second_form * &a / a_t_n_norm;
    let shape = (&shape_full + shape_full.transpose()) * 0.5;
    let trailing = shape.view((1, 1), (m - 1, m - 1)).into_owned();
    let mut nus: Vec<f64> = trailing
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    nus.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(CurvatureInputs {
        a,
        shape,
        nus,
        a_t_n_norm,
        alignment,
    })
}
