//! Command-line surface for the morinkit library.
//!
//! All outputs are machine-readable (JSON to stdout, CSV for region grids)
//! and byte-stable: for a fixed argument list and seed, two runs produce
//! identical bytes. Exit codes: 0 success, 1 computation error, 2 usage
//! error, 3 mathematically undetermined verdict.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use morinkit::classify::{
    classify_point, invariance_check, verdict_report_json, ClassifyOptions, Label, Tolerances,
};
use morinkit::lienard::{
    check_conditions, classify_discrete, cosine_integral, cosine_integral_quadrature,
    discrete_tolerances, discretize, multiplicity_search, DiscreteOperator, HBox, TaylorPair,
};
use morinkit::opcore::{oracle_by_name, MapOracle, KERNEL_TOL, RANGE_IN_TOL, RANGE_OUT_TOL};
use morinkit::whitney::{
    construct_full_spread, region_csv, rho_bound, witness_max_multiplicity, AxisBox, PointK,
    WhitneyMap,
};

#[derive(Parser)]
#[command(
    name = "morinkit",
    version,
    about = "Singularity classification toolkit: Whitney maps, transversality cascades, Neumann problems"
)]
struct Cli {
    /// Seed for every random stream (falls back to MORINKIT_SEED, then 0)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Tolerance override, repeatable: kernel, range_in, range_out
    #[arg(long = "tol", global = true, value_name = "NAME=VALUE")]
    tol: Vec<String>,

    /// Cap the rayon thread pool (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the resolved run configuration as JSON and exit
    #[arg(long, global = true)]
    show_config: bool,

    /// Write output to this file instead of stdout
    #[arg(long, global = true)]
    out: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Whitney map solving, witnesses, perturbation construction, regions
    Whitney {
        #[command(subcommand)]
        cmd: WhitneyCmd,
    },
    /// Run the singularity classification cascade on a registered map
    Classify(ClassifyArgs),
    /// Neumann problem tooling: conditions, discrete classification, multiplicity
    Lienard {
        #[command(subcommand)]
        cmd: LienardCmd,
    },
}

#[derive(Subcommand)]
enum WhitneyCmd {
    /// Solve w_k(x) = s for all real solutions
    Solve {
        #[arg(long)]
        k: usize,
        /// Target vector, comma-separated, length k
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target: Vec<f64>,
    },
    /// Find a target near 0 with the maximal number k+1 of regular solutions
    Witness {
        #[arg(long)]
        k: usize,
        /// Solutions and target must lie inside this sup-ball
        #[arg(long)]
        delta: f64,
    },
    /// Construct small perturbation coefficients with k+1 certified real roots
    Construct {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        eps: f64,
    },
    /// Solution counts on a grid over a box in target space, as CSV
    Region {
        #[arg(long)]
        k: usize,
        /// Box as lo:hi pairs per axis, semicolon-separated, e.g. -1:1;-2:2
        #[arg(long = "box", allow_hyphen_values = true)]
        bounds: String,
        /// Grid points per axis
        #[arg(long, default_value_t = 11)]
        res: usize,
    },
    /// Certified and rough solution-radius bounds for eps-small targets
    Rho {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        eps: f64,
    },
}

#[derive(Args)]
struct ClassifyArgs {
    /// Map registry key: wk:K, fn:K:N, poly:file.json, lienard:file.json
    #[arg(long)]
    map: String,
    /// Base point, comma-separated; a single scalar broadcasts
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    /// Grid intervals for lienard: maps
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Append an invariance report over this many perturbation trials
    #[arg(long)]
    invariance: Option<usize>,
}

#[derive(Subcommand)]
enum LienardCmd {
    /// Check the pointwise conditions on a nonlinearity pair
    Check {
        /// TaylorPair JSON file (defaults to the cubic family instance a=b=alpha=1)
        #[arg(long)]
        input: Option<String>,
    },
    /// Discretize and classify the zero solution of the forced problem
    Classify {
        #[arg(long)]
        input: Option<String>,
        /// Grid intervals
        #[arg(long, default_value_t = 128)]
        n: usize,
    },
    /// Search a box of forcing coefficients for maximal solution counts
    Multiplicity {
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Keep solutions inside this sup-ball
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        /// Half-width of the centered forcing-coefficient box
        #[arg(long = "box", default_value_t = 1e-2)]
        half_width: f64,
        /// Center of the forcing box, 4 comma-separated cosine coefficients
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        center: Option<Vec<f64>>,
        /// Cells per box axis, 4 comma-separated counts
        #[arg(long, value_delimiter = ',', default_value = "3,5,3,3")]
        cells: Vec<usize>,
        /// Newton starts per cell
        #[arg(long, default_value_t = 32)]
        starts: usize,
    },
    /// Closed-form cosine integrals against adaptive quadrature
    Integrals {
        /// Cosine power
        #[arg(long)]
        m: u32,
        /// Sine power
        #[arg(long, default_value_t = 0)]
        mu: u32,
    },
}

#[derive(Serialize)]
struct RunConfig {
    command: String,
    seed: u64,
    threads: Option<usize>,
    tolerances: BTreeMap<String, f64>,
    output: OutputConfig,
}

#[derive(Serialize)]
struct OutputConfig {
    path: Option<String>,
    format: &'static str,
}

/// Errors carry the exit code they should produce.
struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn compute(message: impl Into<String>) -> Self {
        CmdError { code: 1, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        CmdError { code: 2, message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for CmdError {
    fn from(e: E) -> Self {
        CmdError::compute(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        // a second call in the same process is harmless; the pool is global
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let seed = cli
        .seed
        .or_else(|| std::env::var("MORINKIT_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0);

    let overrides = match parse_tolerances(&cli.tol) {
        Ok(map) => map,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return ExitCode::from(e.code);
        }
    };

    if cli.show_config {
        let config = RunConfig {
            command: command_name(&cli.command).to_string(),
            seed,
            threads: cli.threads,
            tolerances: config_tolerances(&cli.command, &overrides),
            output: OutputConfig {
                path: cli.out.clone(),
                format: output_format(&cli.command),
            },
        };
        println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
        return ExitCode::SUCCESS;
    }

    match run(&cli.command, seed, &overrides) {
        Ok((text, undetermined)) => {
            if let Some(path) = &cli.out {
                if let Err(e) = fs::write(path, &text) {
                    eprintln!("error: cannot write {path}: {e}");
                    return ExitCode::from(1);
                }
            } else {
                print!("{text}");
            }
            if undetermined {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Whitney { cmd } => match cmd {
            WhitneyCmd::Solve { .. } => "whitney solve",
            WhitneyCmd::Witness { .. } => "whitney witness",
            WhitneyCmd::Construct { .. } => "whitney construct",
            WhitneyCmd::Region { .. } => "whitney region",
            WhitneyCmd::Rho { .. } => "whitney rho",
        },
        Command::Classify(_) => "classify",
        Command::Lienard { cmd } => match cmd {
            LienardCmd::Check { .. } => "lienard check",
            LienardCmd::Classify { .. } => "lienard classify",
            LienardCmd::Multiplicity { .. } => "lienard multiplicity",
            LienardCmd::Integrals { .. } => "lienard integrals",
        },
    }
}

fn output_format(cmd: &Command) -> &'static str {
    match cmd {
        Command::Whitney { cmd: WhitneyCmd::Region { .. } } => "csv",
        _ => "json",
    }
}

const TOL_NAMES: [&str; 3] = ["kernel", "range_in", "range_out"];

fn parse_tolerances(args: &[String]) -> Result<BTreeMap<String, f64>, CmdError> {
    let mut map = BTreeMap::new();
    for arg in args {
        let (name, value) = arg
            .split_once('=')
            .ok_or_else(|| CmdError::usage(format!("--tol expects NAME=VALUE, got '{arg}'")))?;
        if !TOL_NAMES.contains(&name) {
            return Err(CmdError::usage(format!(
                "unknown tolerance '{name}' (known: {})",
                TOL_NAMES.join(", ")
            )));
        }
        let value: f64 = value
            .parse()
            .map_err(|_| CmdError::usage(format!("tolerance '{name}' has non-numeric value")))?;
        if !(value > 0.0) {
            return Err(CmdError::usage(format!("tolerance '{name}' must be positive")));
        }
        map.insert(name.to_string(), value);
    }
    Ok(map)
}

/// Default tolerance set for the command, with overrides applied. Discrete
/// problems scale the range band with the grid; everything else uses the
/// exact-jet defaults.
fn config_tolerances(cmd: &Command, overrides: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let base = match cmd {
        Command::Classify(args) if args.map.starts_with("lienard:") => discrete_tolerances(args.n),
        Command::Lienard { cmd: LienardCmd::Classify { n, .. } } => discrete_tolerances(*n),
        _ => Tolerances {
            kernel: KERNEL_TOL,
            range_in: RANGE_IN_TOL,
            range_out: RANGE_OUT_TOL,
        },
    };
    let mut map = BTreeMap::new();
    map.insert("kernel".to_string(), base.kernel);
    map.insert("range_in".to_string(), base.range_in);
    map.insert("range_out".to_string(), base.range_out);
    for (k, v) in overrides {
        map.insert(k.clone(), *v);
    }
    map
}

fn resolve_tols(base: Tolerances, overrides: &BTreeMap<String, f64>) -> Tolerances {
    Tolerances {
        kernel: *overrides.get("kernel").unwrap_or(&base.kernel),
        range_in: *overrides.get("range_in").unwrap_or(&base.range_in),
        range_out: *overrides.get("range_out").unwrap_or(&base.range_out),
    }
}

fn generic_tols(overrides: &BTreeMap<String, f64>) -> Tolerances {
    resolve_tols(
        Tolerances { kernel: KERNEL_TOL, range_in: RANGE_IN_TOL, range_out: RANGE_OUT_TOL },
        overrides,
    )
}

/// Runs the command, returning the output text and whether the outcome was
/// mathematically undetermined (exit code 3).
fn run(
    cmd: &Command,
    seed: u64,
    overrides: &BTreeMap<String, f64>,
) -> Result<(String, bool), CmdError> {
    match cmd {
        Command::Whitney { cmd } => run_whitney(cmd, overrides),
        Command::Classify(args) => run_classify(args, seed, overrides),
        Command::Lienard { cmd } => run_lienard(cmd, seed, overrides),
    }
}

fn run_whitney(
    cmd: &WhitneyCmd,
    overrides: &BTreeMap<String, f64>,
) -> Result<(String, bool), CmdError> {
    let root_tol = *overrides.get("range_in").unwrap_or(&1e-12);
    match cmd {
        WhitneyCmd::Solve { k, target } => {
            let w = WhitneyMap::new(*k);
            if target.len() != *k {
                return Err(CmdError::usage(format!(
                    "--target needs {k} components, got {}",
                    target.len()
                )));
            }
            let s = PointK::new(target[0], target[1..].to_vec());
            let res = w.solve(&s, root_tol).map_err(CmdError::from)?;
            Ok((json_line(&res)?, false))
        }
        WhitneyCmd::Witness { k, delta } => {
            let (s_hat, res) = witness_max_multiplicity(*k, *delta, *delta)?;
            #[derive(Serialize)]
            struct Witness<'a> {
                s_hat: &'a PointK,
                solutions: &'a morinkit::whitney::SolveResult,
            }
            Ok((json_line(&Witness { s_hat: &s_hat, solutions: &res })?, false))
        }
        WhitneyCmd::Construct { k, eps } => {
            let pc = construct_full_spread(*k, *eps)?;
            Ok((json_line(&pc)?, false))
        }
        WhitneyCmd::Region { k, bounds, res } => {
            let bx = parse_box(bounds, *k)?;
            let w = WhitneyMap::new(*k);
            let verdicts = w.region_grid(&bx, *res, root_tol)?;
            Ok((region_csv(&verdicts, *k), false))
        }
        WhitneyCmd::Rho { k, eps } => {
            let rb = rho_bound(*k, *eps);
            Ok((json_line(&rb)?, false))
        }
    }
}

fn parse_box(text: &str, k: usize) -> Result<AxisBox, CmdError> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for part in text.split(';') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| CmdError::usage(format!("box axis '{part}' is not lo:hi")))?;
        let a: f64 = a.trim().parse().map_err(|_| CmdError::usage("non-numeric box bound"))?;
        let b: f64 = b.trim().parse().map_err(|_| CmdError::usage("non-numeric box bound"))?;
        if a >= b {
            return Err(CmdError::usage(format!("box axis '{part}' has lo >= hi")));
        }
        lo.push(a);
        hi.push(b);
    }
    if lo.len() != k {
        return Err(CmdError::usage(format!("box needs {k} axes, got {}", lo.len())));
    }
    Ok(AxisBox::new(lo, hi))
}

fn run_classify(
    args: &ClassifyArgs,
    seed: u64,
    overrides: &BTreeMap<String, f64>,
) -> Result<(String, bool), CmdError> {
    let (oracle, tols) = load_map(&args.map, args.n, overrides)?;
    let point = broadcast_point(&args.point, oracle.dim())?;
    let opts = ClassifyOptions { tols, seed, ..ClassifyOptions::default() };

    let (verdict, chain, diag) = classify_point(&oracle, &point, &opts)?;
    let undetermined = verdict.label == Label::Undetermined;

    let mut text = verdict_report_json(&verdict, &chain, &diag);
    if let Some(trials) = args.invariance {
        let report = invariance_check(&oracle, &point, trials, &opts)?;
        #[derive(Serialize)]
        struct WithInvariance<'a> {
            invariance: &'a morinkit::classify::InvarianceReport,
        }
        let inv = serde_json::to_string(&WithInvariance { invariance: &report })
            .map_err(|e| CmdError::compute(e.to_string()))?;
        // splice the invariance report into the verdict object
        text.pop();
        text.push(',');
        text.push_str(&inv[1..]);
    }
    text.push('\n');
    Ok((text, undetermined))
}

fn load_map(
    key: &str,
    n: usize,
    overrides: &BTreeMap<String, f64>,
) -> Result<(MapOracle, Tolerances), CmdError> {
    if let Some(path) = key.strip_prefix("lienard:") {
        let op = load_operator(Some(path), n)?;
        return Ok((op.oracle.clone(), resolve_tols(discrete_tolerances(n), overrides)));
    }
    let oracle = oracle_by_name(key)?;
    Ok((oracle, generic_tols(overrides)))
}

fn broadcast_point(point: &[f64], dim: usize) -> Result<Vec<f64>, CmdError> {
    if point.len() == dim {
        return Ok(point.to_vec());
    }
    if point.len() == 1 {
        return Ok(vec![point[0]; dim]);
    }
    Err(CmdError::usage(format!(
        "--point needs {dim} components (or a single scalar to broadcast), got {}",
        point.len()
    )))
}

fn load_pair(input: Option<&str>) -> Result<TaylorPair, CmdError> {
    match input {
        None => Ok(TaylorPair::polynomial_family(1.0, 1.0, 1.0)),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CmdError::compute(format!("cannot read {path}: {e}")))?;
            Ok(TaylorPair::from_json(&text)?)
        }
    }
}

fn load_operator(input: Option<&str>, n: usize) -> Result<DiscreteOperator, CmdError> {
    Ok(discretize(&load_pair(input)?, n)?)
}

fn run_lienard(
    cmd: &LienardCmd,
    seed: u64,
    overrides: &BTreeMap<String, f64>,
) -> Result<(String, bool), CmdError> {
    match cmd {
        LienardCmd::Check { input } => {
            let tp = load_pair(input.as_deref())?;
            let report = check_conditions(&tp);
            Ok((json_line(&report)?, false))
        }
        LienardCmd::Classify { input, n } => {
            let op = load_operator(input.as_deref(), *n)?;
            let tols = resolve_tols(discrete_tolerances(*n), overrides);
            let dc = classify_discrete(&op, Some(tols))?;
            let undetermined = dc.verdict.label == Label::Undetermined;
            Ok((json_line(&dc)?, undetermined))
        }
        LienardCmd::Multiplicity { input, n, radius, half_width, center, cells, starts } => {
            let op = load_operator(input.as_deref(), *n)?;
            if cells.len() != 4 {
                return Err(CmdError::usage("--cells needs exactly 4 counts"));
            }
            let cells = [cells[0], cells[1], cells[2], cells[3]];
            let hbox = match center {
                None => HBox::centered(*half_width, cells),
                Some(c) => {
                    if c.len() != 4 {
                        return Err(CmdError::usage("--center needs exactly 4 coefficients"));
                    }
                    HBox {
                        lo: [
                            c[0] - half_width,
                            c[1] - half_width,
                            c[2] - half_width,
                            c[3] - half_width,
                        ],
                        hi: [
                            c[0] + half_width,
                            c[1] + half_width,
                            c[2] + half_width,
                            c[3] + half_width,
                        ],
                        cells,
                    }
                }
            };
            let res = multiplicity_search(&op, *radius, &hbox, *starts, seed)?;
            Ok((json_line(&res)?, false))
        }
        LienardCmd::Integrals { m, mu } => {
            let closed = cosine_integral(*m, *mu);
            let quad = cosine_integral_quadrature(*m, *mu);
            #[derive(Serialize)]
            struct Integrals {
                m: u32,
                mu: u32,
                closed_form: f64,
                quadrature: f64,
                difference: f64,
            }
            Ok((
                json_line(&Integrals {
                    m: *m,
                    mu: *mu,
                    closed_form: closed,
                    quadrature: quad,
                    difference: closed - quad,
                })?,
                false,
            ))
        }
    }
}

fn json_line<T: Serialize>(value: &T) -> Result<String, CmdError> {
    let mut text =
        serde_json::to_string(value).map_err(|e| CmdError::compute(e.to_string()))?;
    let _ = writeln!(text);
    Ok(text)
}
