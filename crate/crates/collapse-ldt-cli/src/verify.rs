//! Release checklist: every shipped claim about the built-in cases, checked
//! end to end. `collapse-ldt verify` and the acceptance test target both run
//! this list.

use std::time::Instant;

use collapse_ldt::cases::{
    build_five_bus, builtin_experiment, ReferenceMethod, FIVE_BUS_SCALES, TWO_BUS_SCALES,
};
use collapse_ldt::distributions::{GaussianMixture, GaussianModel, UncertaintyModel};
use collapse_ldt::estimators::{
    gmm_ldt_first_order, gmm_ldt_second_order, ldt_first_order, ldt_second_order,
};
use collapse_ldt::geometry::{boundary_geometry, curvature_correction_inputs};
use collapse_ldt::instanton::{
    initialize_from_nominal, kkt_jacobian_gaussian, kkt_residual_gaussian,
    solve_instanton_gaussian, solve_instanton_gmm, InitOptions, KktNewtonOptions,
};
use collapse_ldt::model::{build_polar_ac, build_two_bus, PowerFlowModel};
use collapse_ldt::sweep::{run_sweep, sweep_to_csv, SweepOptions, SweepResult};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Published values used by the table checks.
pub const TABLE1_LDT1: [f64; 10] = [
    2.163e-1, 1.678e-1, 1.187e-1, 7.352e-2, 3.757e-2, 1.449e-2, 3.686e-3, 5.042e-4, 2.733e-5,
    3.684e-7,
];
pub const TABLE1_LDT2: [f64; 10] = [
    2.378e-1, 1.844e-1, 1.304e-1, 8.081e-2, 4.130e-2, 1.593e-2, 4.052e-3, 5.542e-4, 3.004e-5,
    4.050e-7,
];
pub const TABLE1_REF: [f64; 10] = [
    2.536e-1, 1.923e-1, 1.351e-1, 8.306e-2, 4.222e-2, 1.606e-2, 4.086e-3, 5.524e-4, 3.012e-5,
    4.034e-7,
];
pub const TABLE2_LDT1: [f64; 10] = [
    2.221e-1, 1.755e-1, 1.289e-1, 8.627e-2, 5.200e-2, 2.836e-2, 1.405e-2, 5.952e-3, 1.857e-3,
    3.491e-4,
];
pub const TABLE2_LDT2: [f64; 10] = [
    2.429e-1, 1.923e-1, 1.415e-1, 9.485e-2, 5.708e-2, 3.078e-2, 1.491e-2, 6.189e-3, 1.917e-3,
    3.601e-4,
];
pub const TABLE2_REF: [f64; 10] = [
    2.563e-1, 2.014e-1, 1.462e-1, 9.690e-2, 5.842e-2, 3.129e-2, 1.507e-2, 6.245e-3, 1.928e-3,
    3.640e-4,
];

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub elapsed_s: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {:2} [{}] ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed_s,
            self.details
        )
    }
}

pub const CHECK_NAMES: [&str; 10] = [
    "instanton-2bus",
    "table1-ldt",
    "table1-reference",
    "table2-gmm",
    "error-reduction",
    "five-bus",
    "geometry-oracle",
    "derivative-suite",
    "invariance-suite",
    "determinism",
];

/// Sweeps shared across checks, computed at most once.
struct Context {
    jobs: usize,
    gaussian_sweep: Option<SweepResult>,
    gmm_sweep: Option<SweepResult>,
    five_bus_sweep: Option<SweepResult>,
}

impl Context {
    fn new(jobs: usize) -> Self {
        Self {
            jobs,
            gaussian_sweep: None,
            gmm_sweep: None,
            five_bus_sweep: None,
        }
    }

    fn sweep(&mut self, name: &str) -> Result<&SweepResult, String> {
        let slot = match name {
            "gaussian_2bus" => &mut self.gaussian_sweep,
            "gmm_2bus" => &mut self.gmm_sweep,
            "gaussian_5bus" => &mut self.five_bus_sweep,
            _ => return Err(format!("no shared sweep {name}")),
        };
        if slot.is_none() {
            let spec = builtin_experiment(name).map_err(|e| e.to_string())?;
            let result = run_sweep(
                &spec,
                &SweepOptions {
                    jobs: self.jobs,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            *slot = Some(result);
        }
        Ok(slot.as_ref().expect("just filled"))
    }
}

fn check(
    id: usize,
    name: &'static str,
    ctx: &mut Context,
    body: impl FnOnce(&mut Context) -> Result<String, String>,
) -> CheckResult {
    let start = Instant::now();
    let outcome = body(ctx);
    let elapsed_s = start.elapsed().as_secs_f64();
    match outcome {
        Ok(details) => CheckResult {
            id,
            name,
            passed: true,
            details,
            elapsed_s,
        },
        Err(details) => CheckResult {
            id,
            name,
            passed: false,
            details,
            elapsed_s,
        },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn runtime_gate(elapsed: f64, limit: f64) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("runtime {elapsed:.2}s exceeds the {limit}s budget"),
    )
}

/// Runs the checklist; `only` filters by substring of the check name.
pub fn run_checks(only: Option<&str>, jobs: usize) -> Vec<CheckResult> {
    let mut ctx = Context::new(jobs);
    let mut results = Vec::new();
    let want = |name: &str| only.map(|f| name.contains(f)).unwrap_or(true);

    if want(CHECK_NAMES[0]) {
        results.push(check(1, CHECK_NAMES[0], &mut ctx, |_| {
            let start = Instant::now();
            let model = build_two_bus();
            let g = GaussianModel::new(DVector::from_vec(vec![0.5, 0.3]), DMatrix::identity(2, 2))
                .map_err(|e| e.to_string())?;
            let dist = UncertaintyModel::Gaussian(g.clone());
            let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
                .map_err(|e| e.to_string())?;
            let sol = solve_instanton_gaussian(&model, &g, &init, &KktNewtonOptions::default())
                .map_err(|e| e.to_string())?;
            let elapsed = start.elapsed().as_secs_f64();
            ensure(
                (sol.lambda[0] - 0.703).abs() <= 1e-3 && (sol.lambda[1] - 0.877).abs() <= 1e-3,
                format!(
                    "instanton {:?} off the published (0.703, 0.877)",
                    sol.lambda
                ),
            )?;
            runtime_gate(elapsed, 0.1)?;
            Ok(format!(
                "λ* = ({:.4}, {:.4}), solved in {:.1} ms",
                sol.lambda[0],
                sol.lambda[1],
                elapsed * 1e3
            ))
        }));
    }

    if want(CHECK_NAMES[1]) {
        results.push(check(2, CHECK_NAMES[1], &mut ctx, |_| {
            let start = Instant::now();
            let model = build_two_bus();
            let g = GaussianModel::new(
                DVector::from_vec(vec![0.5, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
            )
            .map_err(|e| e.to_string())?;
            let dist = UncertaintyModel::Gaussian(g.clone());
            let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
                .map_err(|e| e.to_string())?;
            let mut max1 = 0.0f64;
            let mut max2 = 0.0f64;
            for (i, &c) in TWO_BUS_SCALES.iter().enumerate() {
                let gc = g.scaled(c);
                let sol =
                    solve_instanton_gaussian(&model, &gc, &init, &KktNewtonOptions::default())
                        .map_err(|e| e.to_string())?;
                let geom = boundary_geometry(&model, &sol).map_err(|e| e.to_string())?;
                let ci = curvature_correction_inputs(
                    &gc,
                    &sol.lambda_vec(),
                    &geom.normal_vec(),
                    &geom.second_form_mat(),
                )
                .map_err(|e| e.to_string())?;
                let p1 = ldt_first_order(sol.i_star).value;
                let p2 = ldt_second_order(sol.i_star, &ci)
                    .map_err(|e| e.to_string())?
                    .value;
                max1 = max1.max((p1 - TABLE1_LDT1[i]).abs() / TABLE1_LDT1[i]);
                max2 = max2.max((p2 - TABLE1_LDT2[i]).abs() / TABLE1_LDT2[i]);
            }
            let elapsed = start.elapsed().as_secs_f64();
            ensure(
                max1 <= 1e-3,
                format!("LDT1 max relative deviation {max1:.2e} > 1e-3"),
            )?;
            ensure(
                max2 <= 1e-3,
                format!("LDT2 max relative deviation {max2:.2e} > 1e-3"),
            )?;
            runtime_gate(elapsed, 1.0)?;
            Ok(format!(
                "10 rows: LDT1 dev ≤ {max1:.1e}, LDT2 dev ≤ {max2:.1e}"
            ))
        }));
    }

    if want(CHECK_NAMES[2]) || want(CHECK_NAMES[4]) || want(CHECK_NAMES[9]) {
        // table1-reference (shared sweep is also used by later checks)
        if want(CHECK_NAMES[2]) {
            results.push(check(3, CHECK_NAMES[2], &mut ctx, |ctx| {
                let start = Instant::now();
                let sweep = ctx.sweep("gaussian_2bus")?;
                let mut max_sigma = 0.0f64;
                for (row, &published) in sweep.rows.iter().zip(&TABLE1_REF) {
                    let v = row.ref_value.ok_or("missing reference value")?;
                    let se = row.ref_std_error.ok_or("missing std error")?;
                    max_sigma = max_sigma.max((v - published).abs() / se);
                }
                let elapsed = start.elapsed().as_secs_f64();
                ensure(
                    max_sigma <= 4.0,
                    format!("reference deviates {max_sigma:.2}σ > 4σ from the published column"),
                )?;
                runtime_gate(elapsed, 30.0)?;
                Ok(format!(
                    "MC/IS rows within {max_sigma:.2}σ of the published column"
                ))
            }));
        }
    }

    if want(CHECK_NAMES[3]) {
        results.push(check(4, CHECK_NAMES[3], &mut ctx, |ctx| {
            let start = Instant::now();
            let sweep = ctx.sweep("gmm_2bus")?;
            let mut max1 = 0.0f64;
            let mut max2 = 0.0f64;
            let mut max2_rare = 0.0f64;
            let mut max_sigma = 0.0f64;
            for (i, row) in sweep.rows.iter().enumerate() {
                let l1 = row.ldt1.ok_or("missing ldt1")?;
                let l2 = row.ldt2.ok_or("missing ldt2")?;
                max1 = max1.max((l1 - TABLE2_LDT1[i]).abs() / TABLE2_LDT1[i]);
                let d2 = (l2 - TABLE2_LDT2[i]).abs() / TABLE2_LDT2[i];
                max2 = max2.max(d2);
                if i >= 7 {
                    max2_rare = max2_rare.max(d2);
                }
                let v = row.ref_value.ok_or("missing reference")?;
                let se = row.ref_std_error.ok_or("missing std error")?;
                max_sigma = max_sigma.max((v - TABLE2_REF[i]).abs() / se);
            }
            let elapsed = start.elapsed().as_secs_f64();
            ensure(
                max1 <= 2e-3,
                format!("GMM-LDT1 max deviation {max1:.2e} > 2e-3"),
            )?;
            ensure(
                max_sigma <= 4.0,
                format!("mixture reference deviates {max_sigma:.2}σ > 4σ"),
            )?;
            runtime_gate(elapsed, 120.0)?;
            // Known red: the published second-order mixture column is
            // reproducible to no better than ~4e-3 at the largest scales
            // under every reading of the per-component tangency formula
            // tried (the rare-event rows agree to well under 1e-3, and the
            // first-order column to 2.4e-4, so the machinery itself is not
            // in question). The 2e-3 gate is kept as stated rather than
            // loosened; the measured deviations are printed either way.
            ensure(
                max2 <= 2e-3,
                format!(
                    "GMM-LDT2 max deviation {max2:.2e} > 2e-3 on the largest scales \
                     (rare rows here ≤ {max2_rare:.1e}, LDT1 ≤ {max1:.1e}, \
                     reference within {max_sigma:.2}σ: all other sub-checks pass)"
                ),
            )?;
            Ok(format!(
                "LDT1 dev ≤ {max1:.1e}; LDT2 dev ≤ {max2:.1e} (rare rows ≤ {max2_rare:.1e}); reference within {max_sigma:.2}σ"
            ))
        }));
    }

    if want(CHECK_NAMES[4]) {
        results.push(check(5, CHECK_NAMES[4], &mut ctx, |ctx| {
            let max_rel =
                |sweep: &SweepResult, which: fn(&collapse_ldt::sweep::SweepRow) -> Option<f64>| {
                    sweep
                        .rows
                        .iter()
                        .map(|r| {
                            let v = which(r).unwrap();
                            let reference = r.ref_value.unwrap();
                            (v - reference).abs() / reference
                        })
                        .fold(0.0f64, f64::max)
                };
            let g = ctx.sweep("gaussian_2bus")?;
            let g1 = max_rel(g, |r| r.ldt1) * 100.0;
            let g2 = max_rel(g, |r| r.ldt2) * 100.0;
            let m = ctx.sweep("gmm_2bus")?;
            let m1 = max_rel(m, |r| r.ldt1) * 100.0;
            let m2 = max_rel(m, |r| r.ldt2) * 100.0;
            ensure(
                (g1 - 14.7).abs() <= 2.0,
                format!("Gaussian LDT1 max error {g1:.1}% not within 14.7±2%"),
            )?;
            ensure(
                (g2 - 6.2).abs() <= 2.0,
                format!("Gaussian LDT2 max error {g2:.1}% not within 6.2±2%"),
            )?;
            ensure(
                (m1 - 13.4).abs() <= 2.0,
                format!("mixture LDT1 max error {m1:.1}% not within 13.4±2%"),
            )?;
            ensure(
                (m2 - 5.3).abs() <= 2.0,
                format!("mixture LDT2 max error {m2:.1}% not within 5.3±2%"),
            )?;
            Ok(format!(
                "error reductions: {g1:.1}% → {g2:.1}% (Gaussian), {m1:.1}% → {m2:.1}% (mixture)"
            ))
        }));
    }

    if want(CHECK_NAMES[5]) {
        results.push(check(6, CHECK_NAMES[5], &mut ctx, |ctx| {
            let start = Instant::now();
            // (a) instanton self-consistency on the fold
            let model = build_polar_ac(&build_five_bus()).map_err(|e| e.to_string())?;
            let spec = builtin_experiment("gaussian_5bus").map_err(|e| e.to_string())?;
            let g = match spec.build_uncertainty().map_err(|e| e.to_string())? {
                UncertaintyModel::Gaussian(g) => g,
                _ => return Err("gaussian_5bus must be Gaussian".into()),
            };
            let dist = UncertaintyModel::Gaussian(g.clone());
            let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
                .map_err(|e| e.to_string())?;
            let sol = solve_instanton_gaussian(&model, &g, &init, &KktNewtonOptions::default())
                .map_err(|e| e.to_string())?;
            ensure(
                sol.residual_norm <= 1e-8,
                format!("KKT residual {:.2e} > 1e-8", sol.residual_norm),
            )?;
            let jac = model.eval_fx(&sol.x_vec(), &sol.lambda_vec());
            let sv = jac.svd(false, false).singular_values;
            let fold = sv[sv.len() - 1] / sv[0];
            ensure(fold <= 1e-8, format!("σ_min/σ_max = {fold:.2e} > 1e-8"))?;

            // (b) + (c): full sweep with references
            let sweep = ctx.sweep("gaussian_5bus")?;
            ensure(sweep.rows.len() == FIVE_BUS_SCALES.len(), "row count")?;
            let mut better = 0usize;
            for row in &sweep.rows {
                ensure(row.error.is_none(), format!("row c = {} failed: {:?}", row.c, row.error))?;
                let reference = row.ref_value.unwrap();
                let e1 = (row.ldt1.unwrap() - reference).abs() / reference;
                let e2 = (row.ldt2.unwrap() - reference).abs() / reference;
                if e2 <= e1 {
                    better += 1;
                }
            }
            let mut tail_dev = 0.0f64;
            for row in sweep.rows.iter().rev().take(3) {
                ensure(
                    row.ref_method == Some(ReferenceMethod::Is),
                    "three smallest scales must use importance sampling",
                )?;
                let reference = row.ref_value.unwrap();
                tail_dev = tail_dev.max((row.ldt2.unwrap() - reference).abs() / reference);
            }
            let elapsed = start.elapsed().as_secs_f64();
            ensure(
                tail_dev <= 0.10,
                format!("LDT2 vs IS tail deviation {:.1}% > 10%", tail_dev * 100.0),
            )?;
            ensure(
                better >= 8,
                format!("LDT2 at least as accurate as LDT1 on only {better}/11 rows"),
            )?;
            runtime_gate(elapsed, 300.0)?;
            Ok(format!(
                "fold σ-ratio {fold:.1e}; LDT2 within {:.1}% of IS in the tail; LDT2 ≤ LDT1 error on {better}/11 rows",
                tail_dev * 100.0
            ))
        }));
    }

    if want(CHECK_NAMES[6]) {
        results.push(check(7, CHECK_NAMES[6], &mut ctx, |_| {
            let model = build_two_bus();
            let g = GaussianModel::new(DVector::from_vec(vec![0.5, 0.3]), DMatrix::identity(2, 2))
                .map_err(|e| e.to_string())?;
            let dist = UncertaintyModel::Gaussian(g.clone());
            let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
                .map_err(|e| e.to_string())?;
            let sol = solve_instanton_gaussian(&model, &g, &init, &KktNewtonOptions::default())
                .map_err(|e| e.to_string())?;
            let geom = boundary_geometry(&model, &sol).map_err(|e| e.to_string())?;
            let s = sol.lambda[0];
            let q = (s * s + 4.0).sqrt();
            let mut tangent = DVector::from_vec(vec![1.0, -s / 2.0]);
            tangent /= tangent.norm();
            let form = geom.second_form_mat();
            let curv = tangent.dot(&(&form * &tangent));
            let expect = 4.0 / q.powi(3);
            ensure(
                (curv - expect).abs() <= 1e-6,
                format!("tangential curvature {curv:.9} vs parabola {expect:.9}"),
            )?;
            let mut n_expect = DVector::from_vec(vec![2.0 * s, 4.0]);
            n_expect /= n_expect.norm();
            let dev = (geom.normal_vec() - n_expect).amax();
            ensure(dev <= 1e-6, format!("normal direction off by {dev:.2e}"))?;
            Ok(format!(
                "curvature {curv:.6} matches parabola; normal ∥ (2λ₁*, 4)"
            ))
        }));
    }

    if want(CHECK_NAMES[7]) {
        results.push(check(8, CHECK_NAMES[7], &mut ctx, |_| {
            let two_bus = build_two_bus();
            derivative_check(&two_bus, 200, 21)?;
            let five_bus = build_polar_ac(&build_five_bus()).map_err(|e| e.to_string())?;
            derivative_check(&five_bus, 200, 22)?;
            rate_gradient_check()?;
            cgf_gradient_check()?;
            kkt_jacobian_check()?;
            Ok("f_x, f_λ, f_xx, ∇I, ∇S, and the KKT Jacobian all match finite differences".into())
        }));
    }

    if want(CHECK_NAMES[8]) {
        results.push(check(9, CHECK_NAMES[8], &mut ctx, |_| invariance_suite()));
    }

    if want(CHECK_NAMES[9]) {
        results.push(check(10, CHECK_NAMES[9], &mut ctx, |ctx| {
            let jobs = ctx.jobs;
            let spec = builtin_experiment("gaussian_2bus").map_err(|e| e.to_string())?;
            let base = sweep_to_csv(ctx.sweep("gaussian_2bus")?);
            let rerun = run_sweep(
                &spec,
                &SweepOptions {
                    jobs,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            ensure(
                sweep_to_csv(&rerun) == base,
                "rerun CSV differs from the first run",
            )?;
            let other_jobs = if jobs == 1 { 4 } else { 1 };
            let cross = run_sweep(
                &spec,
                &SweepOptions {
                    jobs: other_jobs,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            ensure(
                sweep_to_csv(&cross) == base,
                format!("CSV differs between jobs={jobs} and jobs={other_jobs}"),
            )?;
            Ok("CSV bit-identical across reruns and worker counts".into())
        }));
    }

    results
}

/// Finite-difference check of a model's analytic derivatives; public so a
/// deliberately broken model can demonstrate the failure path.
pub fn derivative_check(
    model: &dyn PowerFlowModel,
    points: usize,
    seed: u64,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.state_dim();
    let m = model.param_dim();
    for p in 0..points {
        let mut x = model.initial_state();
        for i in 0..n {
            x[i] += rng.gen_range(-0.2..0.2);
        }
        let lam = DVector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5));
        let h = 1e-6;
        let fx = model.eval_fx(&x, &lam);
        for k in 0..n {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (model.eval_f(&xp, &lam) - model.eval_f(&xm, &lam)) / (2.0 * h);
            let dev = (fx.column(k).clone_owned() - fd).amax();
            if dev > 1e-6 {
                return Err(format!(
                    "state-Jacobian column {k} deviates {dev:.2e} from finite differences at point {p}"
                ));
            }
        }
        let fl = model.eval_flambda(&x, &lam);
        for k in 0..m {
            let mut lp = lam.clone();
            lp[k] += h;
            let mut lm = lam.clone();
            lm[k] -= h;
            let fd = (model.eval_f(&x, &lp) - model.eval_f(&x, &lm)) / (2.0 * h);
            let dev = (fl.column(k).clone_owned() - fd).amax();
            if dev > 1e-8 {
                return Err(format!(
                    "parameter-Jacobian column {k} deviates {dev:.2e} at point {p}"
                ));
            }
        }
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let hv = 1e-5;
        let fd = (model.eval_fx(&(&x + &v * hv), &lam) - model.eval_fx(&(&x - &v * hv), &lam))
            / (2.0 * hv)
            * &u;
        let bilinear = model.eval_fxx_bilinear(&x, &lam, &u, &v);
        let dev = (bilinear.clone() - fd).amax() / (1.0 + bilinear.amax());
        if dev > 1e-4 {
            return Err(format!(
                "second-derivative bilinear action deviates {dev:.2e} at point {p}"
            ));
        }
    }
    Ok(())
}

fn rate_gradient_check() -> Result<(), String> {
    let g = GaussianModel::new(
        DVector::from_vec(vec![0.5, 0.3]),
        DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let lam = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let grad = g.rate_gradient(&lam);
        let h = 1e-6;
        for k in 0..2 {
            let mut lp = lam.clone();
            lp[k] += h;
            let mut lm = lam.clone();
            lm[k] -= h;
            let fd = (g.rate(&lp) - g.rate(&lm)) / (2.0 * h);
            if (grad[k] - fd).abs() > 1e-7 {
                return Err(format!(
                    "rate gradient component {k} off by {:.2e}",
                    (grad[k] - fd).abs()
                ));
            }
        }
    }
    Ok(())
}

fn cgf_gradient_check() -> Result<(), String> {
    let mix = two_bus_mixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let eta = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let grad = mix.cgf_gradient(&eta);
        let h = 1e-6;
        for k in 0..2 {
            let mut ep = eta.clone();
            ep[k] += h;
            let mut em = eta.clone();
            em[k] -= h;
            let fd = (mix.cgf(&ep) - mix.cgf(&em)) / (2.0 * h);
            if (grad[k] - fd).abs() > 1e-7 {
                return Err(format!(
                    "CGF gradient component {k} off by {:.2e}",
                    (grad[k] - fd).abs()
                ));
            }
        }
    }
    Ok(())
}

fn kkt_jacobian_check() -> Result<(), String> {
    let model = build_two_bus();
    let g = GaussianModel::new(
        DVector::from_vec(vec![0.5, 0.3]),
        DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let (n, m) = (2usize, 2usize);
    let nz = 2 * n + m + 1;
    let residual = |z: &DVector<f64>| {
        kkt_residual_gaussian(
            &model,
            &g,
            &z.rows(0, n).into_owned(),
            &z.rows(n, m).into_owned(),
            &z.rows(n + m, n).into_owned(),
            z[2 * n + m],
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let mut z = DVector::from_fn(nz, |_, _| rng.gen_range(-1.0..1.0));
        z[0] += 1.0;
        let h = 1e-6;
        let mut fd = DMatrix::zeros(nz, nz);
        for k in 0..nz {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            fd.set_column(k, &((residual(&zp) - residual(&zm)) / (2.0 * h)));
        }
        let analytic = kkt_jacobian_gaussian(
            &model,
            &g,
            &z.rows(0, n).into_owned(),
            &z.rows(n, m).into_owned(),
            &z.rows(n + m, n).into_owned(),
            z[2 * n + m],
        );
        let dev = (analytic - &fd).amax() / (1.0 + fd.amax());
        if dev > 1e-5 {
            return Err(format!(
                "KKT Jacobian deviates {dev:.2e} from finite differences"
            ));
        }
    }
    Ok(())
}

fn two_bus_mixture() -> Result<GaussianMixture, String> {
    let g1 = GaussianModel::new(
        DVector::from_vec(vec![0.45, 0.25]),
        DMatrix::from_row_slice(2, 2, &[0.60, 0.0, 0.0, 1.00]),
    )
    .map_err(|e| e.to_string())?;
    let g2 = GaussianModel::new(
        DVector::from_vec(vec![0.82, 0.52]),
        DMatrix::from_row_slice(2, 2, &[0.35, 0.08, 0.08, 0.55]),
    )
    .map_err(|e| e.to_string())?;
    GaussianMixture::new(vec![(0.75, g1), (0.25, g2)]).map_err(|e| e.to_string())
}

fn invariance_suite() -> Result<String, String> {
    let model = build_two_bus();
    let g = GaussianModel::new(
        DVector::from_vec(vec![0.5, 0.3]),
        DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 1.0]),
    )
    .map_err(|e| e.to_string())?;
    let dist = UncertaintyModel::Gaussian(g.clone());
    let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
        .map_err(|e| e.to_string())?;
    let opts = KktNewtonOptions::default();

    // covariance-scaling argmin invariance across all ten scales
    let base = solve_instanton_gaussian(&model, &g, &init, &opts).map_err(|e| e.to_string())?;
    for &c in &TWO_BUS_SCALES {
        let sol = solve_instanton_gaussian(&model, &g.scaled(c), &init, &opts)
            .map_err(|e| e.to_string())?;
        let dev = (sol.lambda_vec() - base.lambda_vec()).amax();
        ensure(dev < 1e-8, format!("instanton moved {dev:.2e} at c = {c}"))?;
    }

    // one-component mixture reduction: instanton, LDT1, LDT2 within 1e-8
    let mix1 = GaussianMixture::new(vec![(1.0, g.clone())]).map_err(|e| e.to_string())?;
    let mixed = solve_instanton_gmm(&model, &mix1, &init, &opts).map_err(|e| e.to_string())?;
    ensure(
        (mixed.lambda_vec() - base.lambda_vec()).amax() < 1e-8,
        "mixture reduction moved the instanton",
    )?;
    let geom = boundary_geometry(&model, &base).map_err(|e| e.to_string())?;
    let lam = base.lambda_vec();
    let n = geom.normal_vec();
    let form = geom.second_form_mat();
    let p1g = ldt_first_order(base.i_star).value;
    let p1m = gmm_ldt_first_order(&mix1, &lam, &n).value;
    ensure((p1g - p1m).abs() < 1e-8, "first-order reduction identity")?;
    let ci = curvature_correction_inputs(&g, &lam, &n, &form).map_err(|e| e.to_string())?;
    let p2g = ldt_second_order(base.i_star, &ci)
        .map_err(|e| e.to_string())?
        .value;
    let p2m = gmm_ldt_second_order(&mix1, &lam, &n, &form)
        .map_err(|e| e.to_string())?
        .value;
    ensure(
        (p2g - p2m).abs() < 1e-8,
        format!(
            "second-order reduction identity off by {:.2e}",
            (p2g - p2m).abs()
        ),
    )?;

    // LDT2 equals LDT1 exactly when II = 0
    let ci_flat = curvature_correction_inputs(&g, &lam, &n, &DMatrix::zeros(2, 2))
        .map_err(|e| e.to_string())?;
    let p2_flat = ldt_second_order(base.i_star, &ci_flat)
        .map_err(|e| e.to_string())?
        .value;
    ensure(
        p2_flat.to_bits() == p1g.to_bits(),
        "flat-boundary second order must equal first order bitwise",
    )?;

    // mixture decomposition sums exactly
    let mix = two_bus_mixture()?;
    let dist = UncertaintyModel::Mixture(mix.clone());
    let init = initialize_from_nominal(&model, &dist, None, &InitOptions::default())
        .map_err(|e| e.to_string())?;
    let sol = solve_instanton_gmm(&model, &mix, &init, &opts).map_err(|e| e.to_string())?;
    let geom = boundary_geometry(&model, &sol).map_err(|e| e.to_string())?;
    let p1 = gmm_ldt_first_order(&mix, &sol.lambda_vec(), &geom.normal_vec());
    let sum: f64 = p1
        .diagnostics
        .components
        .iter()
        .map(|t| t.weight * t.probability)
        .sum();
    ensure(
        sum.to_bits() == p1.value.to_bits(),
        "componentwise decomposition must sum exactly",
    )?;
    Ok(
        "scaling invariance, reduction identities, flat-boundary equality, exact decomposition"
            .into(),
    )
}
