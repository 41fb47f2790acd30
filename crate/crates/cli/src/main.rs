use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elopt::drosolve::DroSettings;
use elopt::estimators::{el_degrees_of_freedom, gap_ci, value_ci, ConfidenceInterval, Method};
use elopt::harness::{
    emit_records, emit_report, run_coverage_experiment, ExperimentConfig, ReportFormat,
};
use elopt::problems::{
    cvar_problem, portfolio_problem, quadratic_problem, ProblemKind, StochasticProgram,
};
use elopt::{Error, SampleSet};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_SOLVER: u8 = 3;

/// Empirical-likelihood confidence intervals for stochastic programs.
#[derive(Parser)]
#[command(name = "elopt", version)]
struct Cli {
    /// Seed for every random choice (min-side restarts, experiment data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Decimal places for printed numbers.
    #[arg(long, global = true, default_value_t = 4)]
    precision: usize,
    /// Worker threads for experiments (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Confidence interval for the optimal value.
    CiValue(IntervalArgs),
    /// Confidence interval for the optimality gap of a candidate solution.
    CiGap {
        #[command(flatten)]
        interval: IntervalArgs,
        /// Candidate solution, comma separated.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        solution: Vec<f64>,
    },
    /// Coverage experiment from a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Directory for coverage.csv, coverage.md and records.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Built-in problems and their dimensions.
    ProblemsList,
}

#[derive(Args)]
struct IntervalArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    /// CSV file, one observation per row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    #[arg(long, default_value = "el")]
    method: String,
    /// CVaR level.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Portfolio target return.
    #[arg(long, default_value_t = 1.0)]
    r_b: f64,
    /// Random restarts of the min-side solver.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Quadratic,
    Cvar,
    Portfolio,
}

impl From<ProblemArg> for ProblemKind {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Quadratic => ProblemKind::Quadratic,
            ProblemArg::Cvar => ProblemKind::Cvar,
            ProblemArg::Portfolio => ProblemKind::Portfolio,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_solver_failure() {
            EXIT_SOLVER
        } else {
            EXIT_DATA
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::CiValue(args) => interval(&args, None, seed, cli.precision),
        Command::CiGap {
            interval: args,
            solution,
        } => interval(&args, Some(&solution), seed, cli.precision),
        Command::Bench { config, out } => bench(&config, &out, cli.seed, cli.precision),
        Command::ProblemsList => Ok(problems_list()),
    }
}

fn load_data(path: &Path) -> Result<SampleSet, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("cannot read data file {}: {e}", path.display())))?;
    SampleSet::parse_csv(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn build_program(
    args: &IntervalArgs,
    data: &SampleSet,
) -> Result<Box<dyn StochasticProgram>, Failure> {
    let program: Box<dyn StochasticProgram> = match args.problem.into() {
        ProblemKind::Quadratic => Box::new(quadratic_problem()),
        ProblemKind::Cvar => {
            Box::new(cvar_problem(args.alpha).map_err(|e| Failure::usage(e.to_string()))?)
        }
        ProblemKind::Portfolio => Box::new(
            portfolio_problem(args.alpha, args.r_b, data.dim())
                .map_err(|e| Failure::usage(e.to_string()))?,
        ),
    };
    if let Some(d) = program.data_dim() {
        if d != data.dim() {
            return Err(Failure::data(format!(
                "dimension mismatch: {} expects {d} data column(s), file has {}",
                program.name(),
                data.dim()
            )));
        }
    }
    Ok(program)
}

fn interval(
    args: &IntervalArgs,
    solution: Option<&[f64]>,
    seed: u64,
    precision: usize,
) -> Result<String, Failure> {
    let method: Method = args
        .method
        .parse()
        .map_err(|e: Error| Failure::usage(e.to_string()))?;
    if !(args.beta > 0.0 && args.beta < 1.0) {
        return Err(Failure::usage(format!(
            "--beta must lie in (0,1), got {}",
            args.beta
        )));
    }
    match solution {
        None if !method.estimates_value() => {
            return Err(Failure::usage(format!(
                "{method} does not estimate optimal values; use ci-gap"
            )))
        }
        Some(_) if !method.estimates_gap() => {
            return Err(Failure::usage(format!(
                "{method} does not estimate optimality gaps; use ci-value"
            )))
        }
        _ => {}
    }
    let data = load_data(&args.data)?;
    let program = build_program(args, &data)?;
    if let Some(x) = solution {
        if x.len() != program.decision_dim() {
            return Err(Failure::data(format!(
                "dimension mismatch: solution has {} entries, {} has {} decision variables",
                x.len(),
                program.name(),
                program.decision_dim()
            )));
        }
    }
    let settings = DroSettings {
        restarts: args.restarts,
        seed,
        ..DroSettings::default()
    };
    let ci = match solution {
        None => value_ci(method, program.as_ref(), &data, args.beta, &settings)?,
        Some(x) => gap_ci(method, program.as_ref(), &data, x, args.beta, &settings)?,
    };
    Ok(render_interval(
        &ci,
        program.as_ref(),
        data.len(),
        precision,
    ))
}

fn render_interval(
    ci: &ConfidenceInterval,
    program: &dyn StochasticProgram,
    n: usize,
    p: usize,
) -> String {
    let mut lines = vec![
        format!("method={}", ci.method),
        format!("problem={}", program.name()),
        format!("n={n}"),
        format!("beta={}", ci.beta),
    ];
    if let Some(df) = ci.df_used {
        lines.push(format!("df={df}"));
    }
    lines.push(format!("lower={:.p$}", ci.lower));
    lines.push(format!("upper={:.p$}", ci.upper));
    if ci.degenerate {
        lines.push("degenerate=true".into());
    }
    if let Some(d) = &ci.diagnostics {
        lines.push(format!("inner_solver={}", d.inner_solver));
        lines.push(format!("upper_iterations={}", d.upper.iterations));
        lines.push(format!("upper_optimality_cuts={}", d.upper.optimality_cuts));
        lines.push(format!(
            "upper_feasibility_cuts={}",
            d.upper.feasibility_cuts
        ));
        lines.push(format!("upper_gap={:.3e}", d.upper.gap));
        lines.push(format!("upper_converged={}", d.upper.converged));
        lines.push(format!("lower_starts={}", d.lower.starts));
        lines.push(format!("lower_failed_starts={}", d.lower.failed_starts));
        lines.push(format!("lower_iterations={}", d.lower.iterations));
        lines.push(format!("lower_spread={:.3e}", d.lower.spread));
        lines.push(format!("lower_best_start={}", d.lower.best_start));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

fn bench(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    precision: usize,
) -> Result<String, Failure> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        Failure::data(format!(
            "cannot read config file {}: {e}",
            config_path.display()
        ))
    })?;
    let mut config = ExperimentConfig::from_toml_str(&text)?;
    if let Some(s) = seed {
        config.seed = s;
        config.dro.seed = s;
    }
    let report = run_coverage_experiment(&config)?;
    fs::create_dir_all(out)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", out.display())))?;
    let markdown = emit_report(&report, ReportFormat::Markdown { precision });
    let files = [
        ("coverage.csv", emit_report(&report, ReportFormat::Csv)),
        ("coverage.md", markdown.clone()),
        ("records.csv", emit_records(&report)),
    ];
    for (name, body) in &files {
        let path = out.join(name);
        fs::write(&path, body)
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    }
    let truth = &report.truth;
    let mut summary = format!(
        "problem={} mode={} replications={} seed={} truth={:.p$}",
        report.problem,
        report.mode,
        report.replications,
        report.seed,
        truth.value,
        p = precision
    );
    if truth.monte_carlo {
        summary.push_str(&format!(" truth_se={:.3e}", truth.std_error));
    }
    Ok(format!("{summary}\n{markdown}"))
}

fn problems_list() -> String {
    let programs: Vec<Box<dyn StochasticProgram>> = vec![
        Box::new(quadratic_problem()),
        Box::new(cvar_problem(0.9).expect("valid level")),
        Box::new(portfolio_problem(0.9, 1.0, 2).expect("valid instance")),
    ];
    let mut out = String::from("name,decision_dim,data_dim,stochastic_constraints,deterministic_constraints,inner_solver,el_df\n");
    for p in &programs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.name(),
            p.decision_dim(),
            p.data_dim().map_or("any".to_string(), |d| d.to_string()),
            p.num_stochastic_constraints(),
            p.num_deterministic_constraints(),
            p.solver_tag(),
            el_degrees_of_freedom(p.as_ref())
        ));
    }
    out
}
