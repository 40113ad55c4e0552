//! Covariance-scaling sweeps: per scale, solve the instanton (warm-started
//! from the previous row), extract the geometry, evaluate the first- and
//! second-order approximations, and run the scheduled Monte Carlo or
//! importance-sampling reference.

use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::cases::{CaseError, ClassifierKind, ExperimentSpec, ReferenceMethod};
use crate::distributions::{GaussianMixture, GaussianModel, UncertaintyModel};
use crate::estimators::{
    gmm_ldt_first_order, gmm_ldt_second_order, importance_sampling, ldt_first_order,
    ldt_second_order, monte_carlo, CollapseClassifier, EstimatorError, ProbabilityEstimate,
};
use crate::geometry::{boundary_geometry, curvature_correction_inputs};
use crate::instanton::{
    initialize_from_nominal, solve_instanton_gaussian, solve_instanton_gmm, InitOptions,
    InstantonInit, InstantonSolution, KktNewtonOptions,
};
use crate::model::{solve_power_flow, NewtonOptions, PowerFlowModel};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("uncertainty dimension {dist} does not match the model's {model} parameters")]
    DimensionMismatch { dist: usize, model: usize },
    #[error("nominal mean does not solve; cannot build the reference classifier")]
    NominalInfeasible,
    #[error("all sweep rows failed")]
    AllRowsFailed,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageRuntimes {
    pub instanton_s: f64,
    pub geometry_s: f64,
    pub ldt_s: f64,
    pub reference_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub c: f64,
    pub ref_method: Option<ReferenceMethod>,
    pub ref_value: Option<f64>,
    pub ref_std_error: Option<f64>,
    pub ref_samples: Option<u64>,
    pub ref_ess: Option<f64>,
    pub ldt1: Option<f64>,
    pub ldt2: Option<f64>,
    /// Second-order curvature bracket broke down; ldt2 holds the first-order
    /// fallback value.
    pub ldt2_fallback: bool,
    pub brackets: Vec<f64>,
    pub i_star: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub lambda_star: Vec<f64>,
    pub seed: u64,
    pub runtime: StageRuntimes,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seed: Option<u64>,
    pub mc_is_threshold: Option<f64>,
    pub jobs: usize,
    pub warm_start: bool,
    /// Skip the MC/IS reference columns (closed-form columns only).
    pub skip_reference: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: None,
            mc_is_threshold: None,
            jobs: 1,
            warm_start: true,
            skip_reference: false,
        }
    }
}

/// Warm-start iterate from the previous row's solution; `k` and `η` scale
/// with the covariance ratio (`∇I ∝ 1/c`).
fn warm_init(prev: &InstantonSolution, c_prev: f64, c: f64) -> InstantonInit {
    InstantonInit {
        x0: prev.x_vec(),
        lam0: prev.lambda_vec(),
        w0: prev.w_vec(),
        k0: prev.k * (c / c_prev),
        eta0: prev.eta_vec().map(|e| e * (c_prev / c)),
        boundary_t: 0.0,
    }
}

/// Hyperplane tangency point of a component: the Mahalanobis projection of
/// μ_i onto the tangent plane at λ*; the mixture IS proposal centers there.
fn hyperplane_tangency(
    component: &GaussianModel,
    lam_star: &DVector<f64>,
    normal: &DVector<f64>,
) -> DVector<f64> {
    let sn = component.covariance() * normal;
    component.mean() + &sn * (normal.dot(&(lam_star - component.mean())) / normal.dot(&sn))
}

fn is_proposal(
    dist: &UncertaintyModel,
    lam_star: &DVector<f64>,
    normal: &DVector<f64>,
) -> Result<UncertaintyModel, CaseError> {
    match dist {
        UncertaintyModel::Gaussian(g) => Ok(UncertaintyModel::Gaussian(GaussianModel::new(
            lam_star.clone(),
            g.covariance().clone(),
        )?)),
        UncertaintyModel::Mixture(m) => {
            let comps = m
                .components()
                .iter()
                .map(|c| {
                    let center = hyperplane_tangency(&c.gaussian, lam_star, normal);
                    GaussianModel::new(center, c.gaussian.covariance().clone())
                        .map(|g| (c.weight, g))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(UncertaintyModel::Mixture(GaussianMixture::new(comps)?))
        }
    }
}

/// Runs the full sweep for an experiment. Per-row failures are recorded in
/// the row and the sweep continues; only an all-rows failure is an error.
pub fn run_sweep(spec: &ExperimentSpec, opts: &SweepOptions) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    let mut spec = spec.clone();
    if let Some(threshold) = opts.mc_is_threshold {
        spec.retag_with_threshold(threshold);
    }
    let seed = opts.seed.unwrap_or(spec.seed);
    let model = spec.build_model()?;
    let base = spec.build_uncertainty()?;
    if base.dim() != model.param_dim() {
        return Err(SweepError::DimensionMismatch {
            dist: base.dim(),
            model: model.param_dim(),
        });
    }

    // Classifier warm start: nominal solved state at the (c-independent) mean.
    let warm = solve_power_flow(
        model.as_ref(),
        &base.mean(),
        &model.initial_state(),
        &NewtonOptions::default(),
    )
    .map_err(|_| SweepError::NominalInfeasible)?
    .state;

    let kkt_opts = KktNewtonOptions::default();
    let mut rows = Vec::with_capacity(spec.sweep.len());
    let mut prev: Option<(f64, InstantonSolution)> = None;
    for (row_idx, point) in spec.sweep.iter().enumerate() {
        let c = point.c;
        let row_seed = seed.wrapping_add(row_idx as u64);
        let mut row = SweepRow {
            c,
            ref_method: None,
            ref_value: None,
            ref_std_error: None,
            ref_samples: None,
            ref_ess: None,
            ldt1: None,
            ldt2: None,
            ldt2_fallback: false,
            brackets: Vec::new(),
            i_star: None,
            kkt_residual: None,
            lambda_star: Vec::new(),
            seed: row_seed,
            runtime: StageRuntimes::default(),
            error: None,
        };
        match run_row(
            model.as_ref(),
            &base,
            point.c,
            point.method,
            point.samples,
            spec.classifier,
            &warm,
            prev.as_ref().filter(|_| opts.warm_start),
            &kkt_opts,
            row_seed,
            opts,
            &mut row,
        ) {
            Ok(sol) => prev = Some((c, sol)),
            Err(e) => row.error = Some(e),
        }
        rows.push(row);
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(SweepError::AllRowsFailed);
    }
    Ok(SweepResult {
        name: spec.name.clone(),
        seed,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_row(
    model: &dyn PowerFlowModel,
    base: &UncertaintyModel,
    c: f64,
    method: ReferenceMethod,
    samples: usize,
    classifier_kind: ClassifierKind,
    warm_state: &DVector<f64>,
    prev: Option<&(f64, InstantonSolution)>,
    kkt_opts: &KktNewtonOptions,
    row_seed: u64,
    opts: &SweepOptions,
    row: &mut SweepRow,
) -> Result<InstantonSolution, String> {
    let dist_c = base.scaled(c);

    let t0 = Instant::now();
    let init = match prev {
        Some((c_prev, sol)) => warm_init(sol, *c_prev, c),
        None => initialize_from_nominal(model, &dist_c, None, &InitOptions::default())
            .map_err(|e| e.to_string())?,
    };
    let sol = match &dist_c {
        UncertaintyModel::Gaussian(g) => solve_instanton_gaussian(model, g, &init, kkt_opts),
        UncertaintyModel::Mixture(m) => solve_instanton_gmm(model, m, &init, kkt_opts),
    }
    .map_err(|e| e.to_string())?;
    row.runtime.instanton_s = t0.elapsed().as_secs_f64();
    row.i_star = Some(sol.i_star);
    row.kkt_residual = Some(sol.residual_norm);
    row.lambda_star = sol.lambda.clone();

    let t1 = Instant::now();
    let geom = boundary_geometry(model, &sol).map_err(|e| e.to_string())?;
    row.runtime.geometry_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let lam_star = sol.lambda_vec();
    let normal = geom.normal_vec();
    let form = geom.second_form_mat();
    let (ldt1, ldt2): (ProbabilityEstimate, Option<ProbabilityEstimate>) = match &dist_c {
        UncertaintyModel::Gaussian(g) => {
            let p1 = ldt_first_order(sol.i_star);
            let p2 = curvature_correction_inputs(g, &lam_star, &normal, &form)
                .map_err(EstimatorError::from)
                .and_then(|ci| ldt_second_order(sol.i_star, &ci));
            match p2 {
                Ok(p2) => (p1, Some(p2)),
                Err(EstimatorError::CurvatureBreakdown { .. }) => {
                    row.ldt2_fallback = true;
                    (p1, None)
                }
                Err(e) => return Err(e.to_string()),
            }
        }
        UncertaintyModel::Mixture(m) => {
            let p1 = gmm_ldt_first_order(m, &lam_star, &normal);
            match gmm_ldt_second_order(m, &lam_star, &normal, &form) {
                Ok(p2) => {
                    row.ldt2_fallback = p2.diagnostics.fallback_first_order;
                    (p1, Some(p2))
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    };
    row.ldt1 = Some(ldt1.value);
    match &ldt2 {
        Some(p2) => {
            row.ldt2 = Some(p2.value);
            row.brackets = p2.diagnostics.brackets.clone();
        }
        None => {
            // curvature breakdown: report the first-order value, flagged
            row.ldt2 = Some(ldt1.value);
        }
    }
    row.runtime.ldt_s = t2.elapsed().as_secs_f64();

    if !opts.skip_reference {
        let t3 = Instant::now();
        let classifier = match classifier_kind {
            ClassifierKind::Analytic => CollapseClassifier::AnalyticTwoBus,
            ClassifierKind::Powerflow => CollapseClassifier::PowerFlow {
                model,
                warm_start: warm_state.clone(),
                options: NewtonOptions::default(),
            },
        };
        let est = match method {
            ReferenceMethod::Mc => monte_carlo(&dist_c, &classifier, samples, row_seed, opts.jobs),
            ReferenceMethod::Is => {
                let proposal =
                    is_proposal(&dist_c, &lam_star, &normal).map_err(|e| e.to_string())?;
                importance_sampling(
                    &dist_c,
                    &proposal,
                    &classifier,
                    samples,
                    row_seed,
                    opts.jobs,
                )
            }
        };
        row.ref_method = Some(method);
        row.ref_value = Some(est.value);
        row.ref_std_error = est.std_error;
        row.ref_samples = est.samples;
        row.ref_ess = est.diagnostics.ess;
        row.runtime.reference_s = t3.elapsed().as_secs_f64();
    }
    Ok(sol)
}

/// Fixed CSV header; runtimes are deliberately excluded so reruns with the
/// same seed are bit-identical.
pub const CSV_HEADER: &str = "c,ref_method,ref_value,ref_std_error,ref_samples,ldt1,ldt2,ldt2_fallback,i_star,kkt_residual,lambda_star,brackets,seed,error";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Deterministic CSV rendering of a sweep.
pub fn sweep_to_csv(result: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &result.rows {
        let lambda = row
            .lambda_star
            .iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(";");
        let brackets = row
            .brackets
            .iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(";");
        let method = row
            .ref_method
            .map(|m| match m {
                ReferenceMethod::Mc => "MC",
                ReferenceMethod::Is => "IS",
            })
            .unwrap_or("");
        out.push_str(&format!(
            "{:e},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.c,
            method,
            fmt_opt(row.ref_value),
            fmt_opt(row.ref_std_error),
            row.ref_samples.map(|s| s.to_string()).unwrap_or_default(),
            fmt_opt(row.ldt1),
            fmt_opt(row.ldt2),
            row.ldt2_fallback,
            fmt_opt(row.i_star),
            fmt_opt(row.kkt_residual),
            lambda,
            brackets,
            row.seed,
            row.error.clone().unwrap_or_default().replace(',', ";"),
        ));
    }
    out
}

/// Two-column-per-series plot data: `c ref ldt1 ldt2` per line, log-log ready.
pub fn sweep_to_plot_data(result: &SweepResult) -> String {
    let mut out = String::from("# c reference ldt1 ldt2\n");
    for row in &result.rows {
        out.push_str(&format!(
            "{:e} {} {} {}\n",
            row.c,
            fmt_opt(row.ref_value),
            fmt_opt(row.ldt1),
            fmt_opt(row.ldt2),
        ));
    }
    out
}
