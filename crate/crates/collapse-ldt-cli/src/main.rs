use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_ldt::cases::{ClassifierKind, ReferenceMethod};
use collapse_ldt::sweep::SweepOptions;
use collapse_ldt_cli::commands::{
    self, build_case_model, print_instanton_report, resolve_experiment, run_instanton,
    run_sweep_command, select_uncertainty, CommandError,
};
use collapse_ldt_cli::{exit_code, verify};

#[derive(Parser)]
#[command(
    name = "collapse-ldt",
    version,
    about = "Rare-event probabilities of voltage collapse: instanton search, LDT approximations, MC/IS references"
)]
struct Cli {
    /// Worker threads for sample loops (env COLLAPSE_LDT_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the instanton and boundary geometry for a case.
    Instanton(InstantonArgs),
    /// Run a covariance-scaling sweep and write CSV/JSON tables.
    Sweep(SweepArgs),
    /// Single-point Monte Carlo or importance-sampling estimate.
    Estimate(EstimateArgs),
    /// Run the verification checklist.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct InstantonArgs {
    /// Built-in case name (two_bus | five_bus) or a network JSON path.
    #[arg(long)]
    case: String,
    /// Inline Gaussian, e.g. --gaussian mu=0.5,0.3 sigma=I
    /// (sigma also accepts diag:a,b or full rows r11,r12;r21,r22).
    #[arg(long, num_args = 1..)]
    gaussian: Vec<String>,
    /// Uncertainty JSON file ({"gaussian": ...} or {"mixture": [...]}).
    #[arg(long)]
    uncertainty: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Built-in experiment name or experiment JSON path.
    #[arg(long)]
    experiment: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `<name>.csv` / `<name>.json` (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Covariance scale at or above which the reference uses Monte Carlo.
    #[arg(long)]
    mc_is_threshold: Option<f64>,
    /// Also write `<name>.dat` plot data (c vs probability).
    #[arg(long)]
    plot_data: bool,
    /// Skip the MC/IS reference columns.
    #[arg(long)]
    no_reference: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    case: String,
    #[arg(long, num_args = 1..)]
    gaussian: Vec<String>,
    #[arg(long)]
    uncertainty: Option<String>,
    /// Covariance scale multiplier.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_parser = ["mc", "is"])]
    method: String,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Collapse classifier (defaults: analytic for two_bus, powerflow else).
    #[arg(long, value_parser = ["analytic", "powerflow"])]
    classifier: Option<String>,
    #[arg(long)]
    json: bool,
    /// Emit a CSV row (method,c,value,std_error,samples,seed,diagnostics).
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Restrict to checks whose name contains this substring.
    #[arg(long)]
    only: Option<String>,
}

fn jobs_from(cli: &Cli) -> usize {
    cli.jobs
        .or_else(|| {
            std::env::var("COLLAPSE_LDT_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = jobs_from(&cli);
    let code = match &cli.command {
        Command::Instanton(args) => cmd_instanton(args),
        Command::Sweep(args) => cmd_sweep(args, jobs),
        Command::Estimate(args) => cmd_estimate(args, jobs),
        Command::Verify(args) => cmd_verify(args, jobs),
    };
    match code {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn cmd_instanton(args: &InstantonArgs) -> Result<i32, CommandError> {
    let model = build_case_model(&args.case)?;
    let dist = select_uncertainty(&args.gaussian, args.uncertainty.as_deref())?;
    if dist.dim() != model.param_dim() {
        return Err(CommandError::Usage(format!(
            "uncertainty dimension {} != model parameter dimension {}",
            dist.dim(),
            model.param_dim()
        )));
    }
    let report = run_instanton(model.as_ref(), &dist)?;
    print_instanton_report(&report, args.json);
    Ok(exit_code::SUCCESS)
}

fn cmd_sweep(args: &SweepArgs, jobs: usize) -> Result<i32, CommandError> {
    let spec = resolve_experiment(&args.experiment)?;
    let opts = SweepOptions {
        seed: args.seed,
        mc_is_threshold: args.mc_is_threshold,
        jobs,
        warm_start: true,
        skip_reference: args.no_reference,
    };
    let output = run_sweep_command(&spec, &opts)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| spec.output.as_ref().map(PathBuf::from));
    match &out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CommandError::Usage(format!("cannot create {dir:?}: {e}")))?;
            let write = |name: &str, contents: &str| {
                let path = dir.join(name);
                std::fs::write(&path, contents)
                    .map_err(|e| CommandError::Usage(format!("cannot write {path:?}: {e}")))
            };
            write(&format!("{}.csv", spec.name), &output.csv)?;
            write(&format!("{}.json", spec.name), &output.json)?;
            if args.plot_data {
                write(&format!("{}.dat", spec.name), &output.plot)?;
            }
            eprintln!(
                "wrote {} rows ({} failed) to {}",
                output.total_rows,
                output.failed_rows,
                dir.display()
            );
        }
        None => print!("{}", output.csv),
    }
    if output.failed_rows == output.total_rows {
        return Err(CommandError::Solver("all sweep rows failed".into()));
    }
    Ok(exit_code::SUCCESS)
}

fn cmd_estimate(args: &EstimateArgs, jobs: usize) -> Result<i32, CommandError> {
    let dist = select_uncertainty(&args.gaussian, args.uncertainty.as_deref())?;
    let method = match args.method.as_str() {
        "mc" => ReferenceMethod::Mc,
        _ => ReferenceMethod::Is,
    };
    let classifier = match args.classifier.as_deref() {
        Some("analytic") => ClassifierKind::Analytic,
        Some(_) => ClassifierKind::Powerflow,
        None if args.case == "two_bus" => ClassifierKind::Analytic,
        None => ClassifierKind::Powerflow,
    };
    let est = commands::run_estimate(&commands::EstimateArgs {
        case: &args.case,
        dist,
        scale: args.scale,
        method,
        samples: args.samples,
        seed: args.seed,
        jobs,
        classifier,
    })?;
    if args.csv {
        println!("{}", est.csv_row(args.scale));
    } else if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&est).expect("estimate serializes")
        );
    } else {
        println!(
            "{} estimate: {:e} (std error {:e}, n = {})",
            est.method,
            est.value,
            est.std_error.unwrap_or(f64::NAN),
            est.samples.unwrap_or(0)
        );
        for w in &est.diagnostics.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(exit_code::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs, jobs: usize) -> Result<i32, CommandError> {
    let results = verify::run_checks(args.only.as_deref(), jobs);
    if results.is_empty() {
        return Err(CommandError::Usage(format!(
            "--only {:?} matches no checks (known: {})",
            args.only,
            verify::CHECK_NAMES.join(", ")
        )));
    }
    let mut failed = Vec::new();
    for r in &results {
        println!("{}", r.line());
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(exit_code::SUCCESS)
    } else {
        println!(
            "{} of {} checks failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        );
        Ok(exit_code::VERIFY_FAILED)
    }
}
