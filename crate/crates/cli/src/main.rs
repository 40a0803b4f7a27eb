use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use manidsdp_core::admm::{solve, AdmmParams, Solution, Status};
use manidsdp_core::bqp::{brute_force, gen_random, relax, BqpInstance, BqpKind};
use manidsdp_core::problem::Problem;
use manidsdp_core::trace::write_csv;
use serde::Serialize;

/// Exit code for runs stopped by an iteration or time cap.
const EXIT_CAPPED: u8 = 2;

/// Slack allowed when checking that a relaxation bound lies below the true minimum.
const BOUND_SLACK: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(
    name = "manidsdp",
    version,
    about = "Low-rank dual ADMM solver for unit-diagonal SDPs and BQP relaxations"
)]
struct Cli {
    /// Worker threads; 1 makes runs bit-reproducible.
    #[arg(long, global = true, env = "MANIDSDP_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random BQP instance.
    Gen(GenArgs),
    /// Build the moment relaxation of a BQP instance.
    Relax(RelaxArgs),
    /// Solve a problem file, or an instance file after relaxing it.
    Solve(SolveArgs),
    /// Compare the relaxation bound with the brute-force minimum.
    Certify(CertifyArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: BqpKind,
    /// Variables (dense) or clique size (sparse).
    #[arg(long)]
    q: usize,
    /// Clique count (sparse only).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct RelaxArgs {
    instance: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug, Default)]
struct SolverArgs {
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    p0: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Seed for the initial factor.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with solver parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write zero in the trace's time column so traces are reproducible byte for byte.
    #[arg(long)]
    no_wall_time: bool,
}

impl SolverArgs {
    fn params(&self) -> Result<AdmmParams> {
        let mut p = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => AdmmParams::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { p.$field = v; })*
            };
        }
        set!(tol => tol, sigma0 => sigma0, sigma_min => sigma_min, sigma_max => sigma_max,
             gamma => gamma, tau1 => tau1, tau2 => tau2, max_iters => max_outer_iters, seed => seed);
        if self.p0.is_some() {
            p.p0 = self.p0;
        }
        if self.no_wall_time {
            p.record_wall_time = false;
        }
        p.validate().context("invalid solver parameters")?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Problem or BQP instance file.
    #[arg(required_unless_present = "print_config")]
    input: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Solution JSON.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Print the effective parameters as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<BqpKind, String> {
    s.parse().map_err(|e: manidsdp_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Relax(a) => cmd_relax(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Certify(a) => cmd_certify(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let t = match (a.kind, a.t) {
        (BqpKind::Dense, None | Some(1)) => 1,
        (BqpKind::Dense, Some(t)) => bail!("--t {t} given for a dense instance"),
        (BqpKind::Sparse, Some(t)) => t,
        (BqpKind::Sparse, None) => bail!("sparse instances need --t"),
    };
    let inst = gen_random(a.kind, a.q, t, a.seed)?;
    inst.save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "kind {} q {} t {} variables {} seed {}",
        kind_name(a.kind),
        inst.q(),
        inst.t(),
        inst.num_vars(),
        a.seed
    );
    Ok(ExitCode::SUCCESS)
}

fn kind_name(k: BqpKind) -> &'static str {
    match k {
        BqpKind::Dense => "dense",
        BqpKind::Sparse => "sparse",
    }
}

fn load_instance(path: &Path) -> Result<BqpInstance> {
    BqpInstance::load(path).with_context(|| format!("reading instance {}", path.display()))
}

fn cmd_relax(a: RelaxArgs) -> Result<ExitCode> {
    let inst = load_instance(&a.instance)?;
    let problem = relax(&inst)?;
    problem
        .save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    print_dims(&problem);
    Ok(ExitCode::SUCCESS)
}

fn print_dims(p: &Problem) {
    let sizes: Vec<String> = p.block_sizes().iter().map(ToString::to_string).collect();
    println!("n {} m {}", sizes.join(","), p.m());
}

/// Problem files and instance files are told apart by the instance `kind` field.
fn load_problem(path: &Path) -> Result<Problem> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("kind").is_some() {
        let inst = BqpInstance::from_file(serde_json::from_value(value)?)
            .with_context(|| format!("validating instance {}", path.display()))?;
        log::info!("relaxing instance with {} variables", inst.num_vars());
        Ok(relax(&inst)?)
    } else {
        Ok(Problem::from_file(serde_json::from_value(value)?)
            .with_context(|| format!("validating problem {}", path.display()))?)
    }
}

fn write_trace(path: &Path, sol: &Solution) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&sol.trace, BufWriter::new(f))?;
    Ok(())
}

fn run_solver(
    problem: &Problem,
    params: &AdmmParams,
    trace: Option<&Path>,
) -> Result<(Solution, f64)> {
    let start = Instant::now();
    let result = solve(problem, params);
    let elapsed = start.elapsed().as_secs_f64();
    match result {
        Ok(sol) => {
            if let Some(path) = trace {
                write_trace(path, &sol)?;
            }
            Ok((sol, elapsed))
        }
        Err(manidsdp_core::Error::Solve {
            iteration,
            source,
            trace: partial,
        }) => {
            if let Some(path) = trace {
                let f =
                    File::create(path).with_context(|| format!("creating {}", path.display()))?;
                write_csv(&partial, BufWriter::new(f))?;
            }
            bail!("solver failed at outer iteration {iteration}: {source}")
        }
        Err(e) => Err(e.into()),
    }
}

fn status_code(status: Status) -> ExitCode {
    match status {
        Status::Converged => ExitCode::SUCCESS,
        Status::MaxIterations | Status::TimeLimit => ExitCode::from(EXIT_CAPPED),
    }
}

fn status_name(status: Status) -> &'static str {
    match status {
        Status::Converged => "converged",
        Status::MaxIterations => "iteration cap",
        Status::TimeLimit => "time limit",
    }
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    status: Status,
    iterations: usize,
    eta_p: f64,
    eta_d: f64,
    eta_g: f64,
    eta_max: f64,
    primal_obj: f64,
    dual_obj: f64,
    y: &'a [f64],
    z: &'a [f64],
    /// Factor blocks as row-major nested arrays.
    factor: Vec<Vec<Vec<f64>>>,
}

fn write_solution(path: &Path, sol: &Solution) -> Result<()> {
    let last = sol.final_record().context("empty trace")?;
    let factor = sol
        .factor
        .blocks()
        .iter()
        .map(|b| {
            (0..b.nrows())
                .map(|i| b.row(i).iter().copied().collect())
                .collect()
        })
        .collect();
    let out = SolutionFile {
        status: sol.status,
        iterations: sol.trace.len(),
        eta_p: last.eta_p,
        eta_d: last.eta_d,
        eta_g: last.eta_g,
        eta_max: last.eta_max,
        primal_obj: last.primal_obj,
        dual_obj: last.dual_obj,
        y: sol.y.as_slice(),
        z: sol.z.as_slice(),
        factor,
    };
    std::fs::write(path, serde_json::to_string_pretty(&out)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<ExitCode> {
    let params = a.solver.params()?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&params)?);
        return Ok(ExitCode::SUCCESS);
    }
    let input = a.input.expect("clap enforces input unless --print-config");
    let problem = load_problem(&input)?;
    print_dims(&problem);
    let (sol, elapsed) = run_solver(&problem, &params, a.trace.as_deref())?;
    let last = sol
        .final_record()
        .context("solver returned an empty trace")?;
    println!("status {}", status_name(sol.status));
    println!(
        "eta_p {:.3e} eta_d {:.3e} eta_g {:.3e} eta_max {:.3e}",
        last.eta_p, last.eta_d, last.eta_g, last.eta_max
    );
    println!("dual_obj {:.12e}", last.dual_obj);
    println!("iterations {} time {elapsed:.3}s", sol.trace.len());
    if let Some(path) = &a.output {
        write_solution(path, &sol)?;
    }
    Ok(status_code(sol.status))
}

fn cmd_certify(a: CertifyArgs) -> Result<ExitCode> {
    let params = a.solver.params()?;
    let inst = load_instance(&a.instance)?;
    let (minimum, argmin) = brute_force(&inst)?;
    let problem = relax(&inst)?;
    let (sol, elapsed) = run_solver(&problem, &params, a.trace.as_deref())?;
    let bound = sol.dual_objective();
    let holds = bound <= minimum + BOUND_SLACK;
    let signs: String = argmin
        .iter()
        .map(|&x| if x > 0.0 { '+' } else { '-' })
        .collect();
    println!("brute_force_min {minimum:.12e} argmin {signs}");
    println!("relaxation_bound {bound:.12e}");
    println!("gap {:.3e}", minimum - bound);
    println!("status {} time {elapsed:.3}s", status_name(sol.status));
    println!("lower_bound_holds {holds}");
    if !holds {
        eprintln!("relaxation bound exceeds the brute-force minimum by more than {BOUND_SLACK:e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(status_code(sol.status))
}
