//! Subcommand implementations: instanton, sweep, estimate.

use std::path::Path;

use collapse_ldt::cases::{
    builtin_experiment, load_experiment, load_network, ClassifierKind, ExperimentSpec,
    ReferenceMethod,
};
use collapse_ldt::distributions::{GaussianModel, GaussianSpec, UncertaintyModel, UncertaintySpec};
use collapse_ldt::estimators::{importance_sampling, monte_carlo, CollapseClassifier};
use collapse_ldt::geometry::{boundary_geometry, curvature_correction_inputs, BoundaryGeometry};
use collapse_ldt::instanton::{
    initialize_from_nominal, solve_instanton_gaussian, solve_instanton_gmm, InitOptions,
    InstantonSolution, KktNewtonOptions,
};
use collapse_ldt::model::{
    build_polar_ac, build_two_bus, solve_power_flow, NewtonOptions, PowerFlowModel,
};
use collapse_ldt::sweep::{run_sweep, sweep_to_csv, sweep_to_plot_data, SweepOptions};
use serde::Serialize;

use crate::exit_code;

pub enum CommandError {
    Usage(String),
    Solver(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => exit_code::USAGE,
            Self::Solver(_) => exit_code::SOLVER,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Solver(m) => m,
        }
    }

    /// Machine-readable error payload for the exit path.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Self::Usage(_) => "usage",
            Self::Solver(_) => "solver",
        };
        serde_json::json!({ "error": self.message(), "kind": kind }).to_string()
    }
}

pub fn build_case_model(case: &str) -> Result<Box<dyn PowerFlowModel>, CommandError> {
    match case {
        "two_bus" => Ok(Box::new(build_two_bus())),
        "five_bus" => Ok(Box::new(
            build_polar_ac(&collapse_ldt::cases::build_five_bus())
                .map_err(|e| CommandError::Usage(e.to_string()))?,
        )),
        path if Path::new(path).exists() => {
            let net = load_network(path).map_err(|e| CommandError::Usage(e.to_string()))?;
            Ok(Box::new(
                build_polar_ac(&net).map_err(|e| CommandError::Usage(e.to_string()))?,
            ))
        }
        other => Err(CommandError::Usage(format!("unknown case {other:?}"))),
    }
}

/// Parses `--gaussian` tokens of the form `mu=0.5,0.3` and `sigma=I` /
/// `sigma=diag:0.6,1.0` / `sigma=0.35,0.08;0.08,0.55`.
pub fn parse_gaussian(tokens: &[String]) -> Result<UncertaintyModel, CommandError> {
    let mut mu: Option<Vec<f64>> = None;
    let mut sigma_token: Option<String> = None;
    for tok in tokens {
        if let Some(rest) = tok.strip_prefix("mu=") {
            let parsed = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CommandError::Usage(format!("bad mu value: {e}")))?;
            mu = Some(parsed);
        } else if let Some(rest) = tok.strip_prefix("sigma=") {
            sigma_token = Some(rest.to_string());
        } else {
            return Err(CommandError::Usage(format!(
                "unrecognized --gaussian token {tok:?} (expected mu=... or sigma=...)"
            )));
        }
    }
    let mu = mu.ok_or_else(|| CommandError::Usage("--gaussian requires mu=...".into()))?;
    let m = mu.len();
    let sigma = match sigma_token.as_deref() {
        None | Some("I") => {
            let mut rows = vec![vec![0.0; m]; m];
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            rows
        }
        Some(rest) => {
            if let Some(diag) = rest.strip_prefix("diag:") {
                let vals = diag
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CommandError::Usage(format!("bad sigma diagonal: {e}")))?;
                if vals.len() != m {
                    return Err(CommandError::Usage("sigma diagonal length != mu".into()));
                }
                let mut rows = vec![vec![0.0; m]; m];
                for (i, v) in vals.into_iter().enumerate() {
                    rows[i][i] = v;
                }
                rows
            } else {
                rest.split(';')
                    .map(|row| {
                        row.split(',')
                            .map(|v| v.trim().parse::<f64>())
                            .collect::<Result<Vec<f64>, _>>()
                            .map_err(|e| CommandError::Usage(format!("bad sigma row: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        }
    };
    UncertaintySpec::Gaussian {
        gaussian: GaussianSpec { mu, sigma },
    }
    .build()
    .map_err(|e| CommandError::Usage(e.to_string()))
}

pub fn load_uncertainty_file(path: &str) -> Result<UncertaintyModel, CommandError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CommandError::Usage(format!("cannot read {path}: {e}")))?;
    let spec: UncertaintySpec = serde_json::from_str(&text)
        .map_err(|e| CommandError::Usage(format!("bad uncertainty JSON in {path}: {e}")))?;
    spec.build().map_err(|e| CommandError::Usage(e.to_string()))
}

#[derive(Serialize)]
pub struct InstantonReport {
    pub solution: InstantonSolution,
    pub geometry: BoundaryGeometry,
    /// Tangential curvature eigenvalues (Gaussian case).
    pub curvature_eigenvalues: Vec<f64>,
    pub a_t_n_norm: Option<f64>,
    /// Whether the model's second derivatives are analytic or the
    /// finite-difference fallback.
    pub hessian: &'static str,
}

/// Solves the instanton and geometry for a case + uncertainty pair.
pub fn run_instanton(
    model: &dyn PowerFlowModel,
    dist: &UncertaintyModel,
) -> Result<InstantonReport, CommandError> {
    let init = initialize_from_nominal(model, dist, None, &InitOptions::default())
        .map_err(|e| CommandError::Solver(e.to_string()))?;
    let sol = match dist {
        UncertaintyModel::Gaussian(g) => {
            solve_instanton_gaussian(model, g, &init, &KktNewtonOptions::default())
        }
        UncertaintyModel::Mixture(m) => {
            solve_instanton_gmm(model, m, &init, &KktNewtonOptions::default())
        }
    }
    .map_err(|e| CommandError::Solver(e.to_string()))?;
    let geometry =
        boundary_geometry(model, &sol).map_err(|e| CommandError::Solver(e.to_string()))?;
    let (curvature_eigenvalues, a_t_n_norm) = match dist {
        UncertaintyModel::Gaussian(g) => {
            let ci = curvature_correction_inputs(
                g,
                &sol.lambda_vec(),
                &geometry.normal_vec(),
                &geometry.second_form_mat(),
            )
            .map_err(|e| CommandError::Solver(e.to_string()))?;
            (ci.nus.clone(), Some(ci.a_t_n_norm))
        }
        UncertaintyModel::Mixture(_) => (Vec::new(), None),
    };
    Ok(InstantonReport {
        solution: sol,
        geometry,
        curvature_eigenvalues,
        a_t_n_norm,
        hessian: match model.hessian_kind() {
            collapse_ldt::model::HessianKind::Analytic => "analytic",
            collapse_ldt::model::HessianKind::FiniteDifference => "finite_difference",
        },
    })
}

pub fn print_instanton_report(report: &InstantonReport, json: bool) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
        return;
    }
    let sol = &report.solution;
    println!("instanton λ* = {:?}", sol.lambda);
    println!("rate I(λ*)  = {:.12e}", sol.i_star);
    println!("k*          = {:.6e}", sol.k);
    if let Some(eta) = &sol.eta {
        println!("dual η*     = {eta:?}");
    }
    println!(
        "KKT residual ∞-norm = {:.3e} ({} iterations)",
        sol.residual_norm, sol.iterations
    );
    println!("normal N    = {:?}", report.geometry.normal);
    if !report.curvature_eigenvalues.is_empty() {
        println!("curvature ν = {:?}", report.curvature_eigenvalues);
    }
}

/// Resolves `--experiment` as a built-in name first, then as a file path.
pub fn resolve_experiment(reference: &str) -> Result<ExperimentSpec, CommandError> {
    if let Ok(spec) = builtin_experiment(reference) {
        return Ok(spec);
    }
    if Path::new(reference).exists() {
        return load_experiment(reference).map_err(|e| CommandError::Usage(e.to_string()));
    }
    Err(CommandError::Usage(format!(
        "unknown experiment {reference:?} (not a built-in name or file)"
    )))
}

pub struct SweepCommandOutput {
    pub csv: String,
    pub json: String,
    pub plot: String,
    pub failed_rows: usize,
    pub total_rows: usize,
}

pub fn run_sweep_command(
    spec: &ExperimentSpec,
    opts: &SweepOptions,
) -> Result<SweepCommandOutput, CommandError> {
    let result = run_sweep(spec, opts).map_err(|e| CommandError::Solver(e.to_string()))?;
    let failed_rows = result.rows.iter().filter(|r| r.error.is_some()).count();
    Ok(SweepCommandOutput {
        csv: sweep_to_csv(&result),
        json: serde_json::to_string_pretty(&result).expect("sweep serializes"),
        plot: sweep_to_plot_data(&result),
        failed_rows,
        total_rows: result.rows.len(),
    })
}

pub struct EstimateArgs<'a> {
    pub case: &'a str,
    pub dist: UncertaintyModel,
    pub scale: f64,
    pub method: ReferenceMethod,
    pub samples: usize,
    pub seed: u64,
    pub jobs: usize,
    pub classifier: ClassifierKind,
}

pub fn run_estimate(
    args: &EstimateArgs<'_>,
) -> Result<collapse_ldt::ProbabilityEstimate, CommandError> {
    let model = build_case_model(args.case)?;
    let dist = args.dist.scaled(args.scale);
    let warm = solve_power_flow(
        model.as_ref(),
        &dist.mean(),
        &model.initial_state(),
        &NewtonOptions::default(),
    )
    .map_err(|e| CommandError::Solver(e.to_string()))?
    .state;
    let classifier = match args.classifier {
        ClassifierKind::Analytic => {
            if args.case != "two_bus" {
                return Err(CommandError::Usage(
                    "analytic classifier only applies to two_bus".into(),
                ));
            }
            CollapseClassifier::AnalyticTwoBus
        }
        ClassifierKind::Powerflow => CollapseClassifier::PowerFlow {
            model: model.as_ref(),
            warm_start: warm,
            options: NewtonOptions::default(),
        },
    };
    let est = match args.method {
        ReferenceMethod::Mc => monte_carlo(&dist, &classifier, args.samples, args.seed, args.jobs),
        ReferenceMethod::Is => {
            let report = run_instanton(model.as_ref(), &dist)?;
            let lam_star = report.solution.lambda_vec();
            let normal = report.geometry.normal_vec();
            let proposal = match &dist {
                UncertaintyModel::Gaussian(g) => UncertaintyModel::Gaussian(
                    GaussianModel::new(lam_star, g.covariance().clone())
                        .map_err(|e| CommandError::Solver(e.to_string()))?,
                ),
                UncertaintyModel::Mixture(m) => {
                    let comps = m
                        .components()
                        .iter()
                        .map(|c| {
                            let sn = c.gaussian.covariance() * &normal;
                            let center = c.gaussian.mean()
                                + &sn
                                    * (normal.dot(&(&lam_star - c.gaussian.mean()))
                                        / normal.dot(&sn));
                            GaussianModel::new(center, c.gaussian.covariance().clone())
                                .map(|g| (c.weight, g))
                        })
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| CommandError::Solver(e.to_string()))?;
                    UncertaintyModel::Mixture(
                        collapse_ldt::GaussianMixture::new(comps)
                            .map_err(|e| CommandError::Solver(e.to_string()))?,
                    )
                }
            };
            importance_sampling(
                &dist,
                &proposal,
                &classifier,
                args.samples,
                args.seed,
                args.jobs,
            )
        }
    };
    Ok(est)
}

/// Uncertainty selection shared by `instanton` and `estimate`.
pub fn select_uncertainty(
    gaussian: &[String],
    uncertainty_file: Option<&str>,
) -> Result<UncertaintyModel, CommandError> {
    if !gaussian.is_empty() {
        return parse_gaussian(gaussian);
    }
    if let Some(path) = uncertainty_file {
        return load_uncertainty_file(path);
    }
    Err(CommandError::Usage(
        "no uncertainty given: use --gaussian or --uncertainty".into(),
    ))
}
