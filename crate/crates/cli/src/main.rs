//! Batch front end: subcommand dispatch, CSV emission and the self-check
//! invariant suite.
//!
//! Every run echoes its resolved configuration into a `#`-prefixed header so
//! the output is self-describing; identical invocations with identical seeds
//! produce byte-identical bodies. Exit codes: 0 success, 1 usage error,
//! 2 numerical non-convergence, 3 self-check invariant violation.

use clap::{Args, Parser, Subcommand};
use intermittency_lab::error::LabError;
use intermittency_lab::fit::fit_exponent;
use intermittency_lab::map::{distortion_check, level_sets, MapModel};
use intermittency_lab::markov::{
    markov_pressure, simulate_counts, stationary_measure, ChainConfig, TailSampler,
};
use intermittency_lab::mixing::{
    complement_series, correlation_operator, correlation_orbit, cylinder_wb_sum, return_density,
    set_rates, wandering_relation, MixingEngine, Observable, SetSpec,
};
use intermittency_lab::operator::{
    assemble_induced_op, cylinder_measures, leading_triple, pressure_and_derivatives,
    sigma_sq_orbit, BranchWeights, EigenTriple,
};
use intermittency_lab::renewal::{
    b_sequence, ergodic_degree, gf_eval, renewal_identity_residual, renewal_sequence, tail_sums,
    ErgodicDegree,
};
use intermittency_lab::tail::{read_tail_csv, write_tail_csv, TailLaw};
use intermittency_lab::zeta::{grand_partition, zeta2_eval, zeta_consistency, ZetaConfig};
use std::io::Write;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "ilab",
    version,
    about = "numerical laboratory for intermittent interval maps",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output path ('-' for standard output).
    #[arg(long, global = true, default_value = "-")]
    out: String,
    /// Seed for every pseudo-random stream in the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (falls back to INTERMITTENCY_LAB_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Renewal sequences, tail sums, generating functions and degree.
    Renewal(RenewalArgs),
    /// Level-set geometry, distortion and coding of the interval map.
    Map(MapArgs),
    /// Induced-operator eigendata, pressure derivatives and cylinder masses.
    Pressure(PressureArgs),
    /// Return densities, set rates, cylinder sums and correlations.
    Mixing(MixingArgs),
    /// Periodic-orbit partition functions and zeta consistency.
    Zeta(ZetaArgs),
    /// Renewal Markov chain: Monte Carlo, pressure, stationary weights.
    Markov(MarkovArgs),
    /// Invariant suite; exits 3 on any violation.
    #[command(name = "self-check")]
    SelfCheck(SelfCheckArgs),
    /// Composite rate report for one map exponent.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct RenewalArgs {
    /// Builtin law (geometric:q=, power:alpha=, uniform2).
    #[arg(long, conflicts_with = "tail_file")]
    tail: Option<String>,
    /// Law from a CSV file (header n,p; optional trailing '# tail: ...').
    #[arg(long)]
    tail_file: Option<String>,
    #[arg(long, default_value_t = 1000)]
    n_max: usize,
    /// Series to emit: a, b, d, d1, gf, degree.
    #[arg(long, default_value = "a")]
    emit: String,
    /// Evaluation points for --emit gf.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,0.9")]
    z: Vec<f64>,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long, default_value = "lsv:s=0.5")]
    map: String,
    #[arg(long, default_value_t = 100)]
    n_max: usize,
    /// levels, distortion or coding.
    #[arg(long, default_value = "levels")]
    emit: String,
    #[arg(long, default_value_t = 8)]
    ell: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 200)]
    cutoff: usize,
    /// Starting point for --emit coding.
    #[arg(long, default_value_t = 0.4)]
    point: f64,
}

#[derive(Args, Debug)]
struct PressureArgs {
    #[arg(long, default_value = "lsv:s=0.5")]
    map: String,
    #[arg(long, default_value_t = 400)]
    branches: usize,
    #[arg(long, default_value_t = 1024)]
    grid: usize,
    #[arg(long, default_value_t = 1e-3)]
    fd_step: f64,
    /// Derivative order requested at z = 1 (0, 1 or 2).
    #[arg(long, default_value_t = 1)]
    order: u32,
    /// report, eigen or cylinders.
    #[arg(long, default_value = "report")]
    emit: String,
    /// Evaluation parameter for --emit eigen.
    #[arg(long, default_value_t = 1.0)]
    z: f64,
    /// Induced-orbit steps for the variance estimate (order 2 reports).
    #[arg(long, default_value_t = 10_000_000)]
    orbit_len: usize,
}

#[derive(Args, Debug)]
struct MixingArgs {
    #[arg(long, default_value = "lsv:s=0.5")]
    map: String,
    #[arg(long, default_value_t = 4096)]
    grid: usize,
    #[arg(long, default_value_t = 2000)]
    n_max: usize,
    #[arg(long, default_value_t = 400)]
    branches: usize,
    /// u, v, rate, wb, corr, wandering or complement.
    #[arg(long, default_value = "u")]
    emit: String,
    /// Set for rate/complement runs, e.g. intervals:0.6-0.9.
    #[arg(long, default_value = "intervals:0.6-0.9")]
    set: String,
    /// Observables for --emit corr.
    #[arg(long, default_value = "pow:0.6")]
    f: String,
    #[arg(long, default_value = "cos:1")]
    g: String,
    /// operator or orbit.
    #[arg(long, default_value = "operator")]
    method: String,
    #[arg(long, default_value_t = 100_000_000)]
    orbit_len: usize,
    #[arg(long, default_value_t = 6)]
    ell: usize,
}

#[derive(Args, Debug)]
struct ZetaArgs {
    #[arg(long, default_value = "lsv:s=1")]
    map: String,
    #[arg(long, default_value_t = 8)]
    symbols: usize,
    #[arg(long, default_value_t = 6)]
    period: usize,
    #[arg(long, default_value_t = 1.0)]
    z: f64,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, default_value_t = 1e-13)]
    fp_tol: f64,
    #[arg(long, default_value_t = 0.0)]
    prune: f64,
    /// xi, zeta2 or consistency.
    #[arg(long, default_value = "xi")]
    emit: String,
    #[arg(long, default_value_t = 14)]
    n_max: usize,
}

#[derive(Args, Debug)]
struct MarkovArgs {
    #[arg(long, default_value = "geometric:q=0.5", conflicts_with = "tail_file")]
    tail: String,
    #[arg(long)]
    tail_file: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 50)]
    n_max: usize,
    /// simulate, pressure or stationary.
    #[arg(long, default_value = "simulate")]
    emit: String,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    z: Vec<f64>,
}

#[derive(Args, Debug)]
struct SelfCheckArgs {
    /// Fast subset only.
    #[arg(long)]
    quick: bool,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    #[arg(long, default_value_t = 4096)]
    grid: usize,
    #[arg(long, default_value_t = 2000)]
    n_max: usize,
    #[arg(long, default_value_t = 400)]
    branches: usize,
}

fn main() {
    let code = run();
    std::process::exit(code);
}

/// Expands `--args-from <file>` tokens (one flag per line; `--key value` or
/// `--key=value`).
fn expand_args() -> Result<Vec<String>, String> {
    let raw: Vec<String> = std::env::args().collect();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == "--args-from" {
            let path = raw
                .get(i + 1)
                .ok_or_else(|| "--args-from needs a file path".to_string())?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {path}: {e}"))?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once(' ') {
                    // "--key value" (a '=' inside the value is fine)
                    Some((k, v)) if !k.contains('=') => {
                        out.push(k.trim().to_string());
                        out.push(v.trim().to_string());
                    }
                    _ => out.push(line.to_string()),
                }
            }
            i += 2;
        } else {
            out.push(raw[i].clone());
            i += 1;
        }
    }
    Ok(out)
}

fn run() -> i32 {
    let argv = match expand_args() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("{e}");
                return 1;
            }
            // help/version requests exit cleanly
            print!("{e}");
            return 0;
        }
    };
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("INTERMITTENCY_LAB_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1);
    match dispatch(&cli, threads) {
        Ok(()) => 0,
        Err(CliError::Lab(e)) => {
            eprintln!("error: {e}");
            match e {
                LabError::Numerical { .. } => 2,
                _ => 1,
            }
        }
        Err(CliError::Io(e)) => {
            eprintln!("i/o error: {e}");
            1
        }
        Err(CliError::SelfCheck(n)) => {
            eprintln!("self-check: {n} invariant violation(s)");
            3
        }
    }
}

enum CliError {
    Lab(LabError),
    Io(std::io::Error),
    SelfCheck(usize),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn emit(out: &str, header: &[String], body: &str) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("# intermittency-lab {VERSION}\n"));
    for h in header {
        text.push_str(&format!("# {h}\n"));
    }
    text.push_str(body);
    if out == "-" {
        std::io::stdout().write_all(text.as_bytes())?;
    } else {
        std::fs::write(out, text)?;
    }
    Ok(())
}

fn load_tail(
    builtin: &Option<String>,
    file: &Option<String>,
    default: &str,
) -> Result<(TailLaw, String), CliError> {
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        Ok((read_tail_csv(&text)?, format!("file:{path}")))
    } else {
        let spec = builtin.clone().unwrap_or_else(|| default.to_string());
        Ok((TailLaw::parse(&spec)?, spec))
    }
}

fn series_csv(values: &[f64]) -> String {
    let mut s = String::from("n,value\n");
    for (n, v) in values.iter().enumerate() {
        s.push_str(&format!("{n},{v}\n"));
    }
    s
}

fn solve_triple(m: &MapModel, z: f64, branches: usize, grid: usize) -> Result<EigenTriple, LabError> {
    let op = assemble_induced_op(m, z, branches, grid, &BranchWeights::Derivative)?;
    leading_triple(&op, 1e-12, 5000)
}

fn dispatch(cli: &Cli, threads: usize) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Renewal(a) => cmd_renewal(cli, a),
        Cmd::Map(a) => cmd_map(cli, a),
        Cmd::Pressure(a) => cmd_pressure(cli, a),
        Cmd::Mixing(a) => cmd_mixing(cli, a, threads),
        Cmd::Zeta(a) => cmd_zeta(cli, a),
        Cmd::Markov(a) => cmd_markov(cli, a, threads),
        Cmd::SelfCheck(a) => cmd_self_check(cli, a),
        Cmd::Pipeline(a) => cmd_pipeline(cli, a),
    }
}

fn cmd_renewal(cli: &Cli, a: &RenewalArgs) -> Result<(), CliError> {
    let (law, tail_desc) = load_tail(&a.tail, &a.tail_file, "geometric:q=0.5")?;
    let header = vec![
        "subcommand: renewal".into(),
        format!(
            "config: tail={tail_desc} n_max={} emit={} seed={}",
            a.n_max, a.emit, cli.seed
        ),
    ];
    let body = match a.emit.as_str() {
        "a" => series_csv(&renewal_sequence(&law, a.n_max)?.a),
        "b" => {
            let seq = renewal_sequence(&law, a.n_max)?;
            series_csv(&b_sequence(&seq)?)
        }
        "d" => series_csv(&tail_sums(&law, a.n_max)?.0),
        "d1" => series_csv(&tail_sums(&law, a.n_max)?.1),
        "gf" => {
            let mut s = String::from("z,a,d,d1,b,identity_residual\n");
            for &z in &a.z {
                let g = gf_eval(&law, z)?;
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    g.z,
                    g.a,
                    g.d,
                    g.d1,
                    g.b.map(|b| b.to_string()).unwrap_or_else(|| "inf".into()),
                    g.identity_residual
                ));
            }
            s
        }
        "degree" => {
            let d = ergodic_degree(&law)?;
            let mut s = String::from("key,value\n");
            match d {
                ErgodicDegree::Finite(v) => s.push_str(&format!("degree,{v}\n")),
                ErgodicDegree::InfiniteDegree => s.push_str("degree,infinite\n"),
                ErgodicDegree::Undefined => s.push_str("degree,undefined\n"),
            }
            s
        }
        other => {
            return Err(LabError::Parse(format!("unknown --emit '{other}' for renewal")).into())
        }
    };
    emit(&cli.out, &header, &body)
}

fn cmd_map(cli: &Cli, a: &MapArgs) -> Result<(), CliError> {
    let m = MapModel::parse(&a.map)?;
    let header = vec![
        "subcommand: map".into(),
        format!(
            "config: map={} n_max={} emit={} ell={} samples={} cutoff={} point={} seed={}",
            a.map, a.n_max, a.emit, a.ell, a.samples, a.cutoff, a.point, cli.seed
        ),
    ];
    let body = match a.emit.as_str() {
        "levels" => {
            let geo = level_sets(&m, a.n_max)?;
            let mut s = String::from("n,x_n,len_n\n");
            for n in 1..=geo.n_max() {
                s.push_str(&format!("{n},{},{}\n", geo.endpoint(n), geo.length(n)));
            }
            s
        }
        "distortion" => {
            let sups = distortion_check(&m, a.ell, a.samples, a.cutoff, cli.seed)?;
            let mut s = String::from("ell,sup_log_gap\n");
            for (l, v) in sups.iter().enumerate() {
                s.push_str(&format!("{l},{v}\n"));
            }
            s
        }
        "coding" => {
            let word = m.coding(a.point, a.n_max)?;
            let mut s = String::from("j,symbol\n");
            for (j, w) in word.iter().enumerate() {
                s.push_str(&format!("{j},{w}\n"));
            }
            s
        }
        other => return Err(LabError::Parse(format!("unknown --emit '{other}' for map")).into()),
    };
    emit(&cli.out, &header, &body)
}

fn cmd_pressure(cli: &Cli, a: &PressureArgs) -> Result<(), CliError> {
    let m = MapModel::parse(&a.map)?;
    let header = vec![
        "subcommand: pressure".into(),
        format!(
            "config: map={} branches={} grid={} fd_step={} order={} emit={} z={} seed={}",
            a.map, a.branches, a.grid, a.fd_step, a.order, a.emit, a.z, cli.seed
        ),
    ];
    let body = match a.emit.as_str() {
        "report" => {
            let rep = pressure_and_derivatives(&m, a.branches, a.grid, a.fd_step, a.order)?;
            let mut s = String::from("key,value\n");
            s.push_str(&format!("p_at_1,{}\n", rep.p_at_1));
            if let Some(d1) = rep.zd_p {
                s.push_str(&format!("zd_p,{d1}\n"));
            }
            if let Some(d2) = rep.zd2_p {
                s.push_str(&format!("zd2_p,{d2}\n"));
                let batch = (a.orbit_len / 1000).max(16);
                let (s2, se) = sigma_sq_orbit(&m, 1000, batch, 100_000, cli.seed, 1_000_000)?;
                s.push_str(&format!("sigma2_orbit,{s2}\n"));
                s.push_str(&format!("sigma2_orbit_se,{se}\n"));
            }
            s.push_str(&format!("m1_target,{}\n", rep.m1_target));
            s
        }
        "eigen" => {
            let triple = solve_triple(&m, a.z, a.branches, a.grid)?;
            let mut s = format!(
                "# lambda={} z={} N={} n_grid={}\nx,h,nu\n",
                triple.lambda, triple.z, triple.n_branches, a.grid
            );
            let h = triple.h.values();
            for (i, nu) in triple.nu.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", triple.h.x_of(i), h[i], nu));
            }
            s
        }
        "cylinders" => {
            let triple = solve_triple(&m, 1.0, a.branches, a.grid)?;
            let cm = cylinder_measures(&triple, &m, a.branches)?;
            write_tail_csv(&cm.law)
        }
        other => {
            return Err(LabError::Parse(format!("unknown --emit '{other}' for pressure")).into())
        }
    };
    emit(&cli.out, &header, &body)
}

fn cmd_mixing(cli: &Cli, a: &MixingArgs, threads: usize) -> Result<(), CliError> {
    let m = MapModel::parse(&a.map)?;
    let header = vec![
        "subcommand: mixing".into(),
        format!(
            "config: map={} grid={} n_max={} branches={} emit={} set={} f={} g={} method={} orbit_len={} ell={} threads={threads} seed={}",
            a.map, a.grid, a.n_max, a.branches, a.emit, a.set, a.f, a.g, a.method, a.orbit_len,
            a.ell, cli.seed
        ),
    ];
    let op_grid = a.grid.clamp(256, 1024);
    let triple = solve_triple(&m, 1.0, a.branches, op_grid)?;
    let eng = MixingEngine::new(&m, &triple, a.grid, a.n_max)?;
    let body = match a.emit.as_str() {
        "u" | "v" => {
            let rd = return_density(&eng, a.n_max)?;
            if a.emit == "u" {
                series_csv(&rd.u)
            } else {
                let v = rd.v.ok_or_else(|| {
                    LabError::Unsupported("v_n needs finite measure (s < 1)".into())
                })?;
                series_csv(&v)
            }
        }
        "rate" => {
            let set = SetSpec::parse(&a.set)?;
            series_csv(&set_rates(&eng, &set, a.n_max)?.values)
        }
        "complement" => {
            let set = SetSpec::parse(&a.set)?;
            let (lhs, rhs) = complement_series(&eng, &set, a.n_max)?;
            let mut s = String::from("n,set,complement,gap\n");
            for n in 0..lhs.len() {
                s.push_str(&format!(
                    "{n},{},{},{}\n",
                    lhs[n],
                    rhs[n],
                    (lhs[n] - rhs[n]).abs()
                ));
            }
            s
        }
        "corr" => {
            let f = Observable::parse(&a.f)?;
            let g = Observable::parse(&a.g)?;
            match a.method.as_str() {
                "operator" => series_csv(&correlation_operator(&eng, &f, &g, a.n_max)?.values),
                "orbit" => {
                    let lags: Vec<usize> = (0..=a.n_max).collect();
                    let (est, se) =
                        correlation_orbit(&m, &f, &g, &lags, a.orbit_len, 100_000, cli.seed)?;
                    let mut s = String::from("n,value,ci\n");
                    for (i, lag) in lags.iter().enumerate() {
                        s.push_str(&format!("{lag},{},{}\n", est[i], 1.96 * se[i]));
                    }
                    s
                }
                other => {
                    return Err(
                        LabError::Parse(format!("unknown --method '{other}' for corr")).into()
                    )
                }
            }
        }
        "wb" => {
            let mut ns: Vec<usize> = Vec::new();
            let mut x = 8.0f64;
            while (x.round() as usize) <= a.n_max {
                ns.push(x.round() as usize);
                x *= std::f64::consts::SQRT_2;
            }
            ns.dedup();
            let sums = cylinder_wb_sum(&eng, a.ell, &ns, threads)?;
            let mut s = String::from("n,value\n");
            for (i, &n) in ns.iter().enumerate() {
                s.push_str(&format!("{n},{}\n", sums[i]));
            }
            s
        }
        "wandering" => series_csv(&wandering_relation(&eng, a.n_max)?),
        other => {
            return Err(LabError::Parse(format!("unknown --emit '{other}' for mixing")).into())
        }
    };
    emit(&cli.out, &header, &body)
}

fn cmd_zeta(cli: &Cli, a: &ZetaArgs) -> Result<(), CliError> {
    let m = MapModel::parse(&a.map)?;
    let cfg = ZetaConfig {
        n_symbols: a.symbols,
        max_period: a.period,
        z: a.z,
        w: a.w,
        fp_tol: a.fp_tol,
        prune: a.prune,
        node_guard: 50_000_000,
    };
    let header = vec![
        "subcommand: zeta".into(),
        format!(
            "config: map={} symbols={} period={} z={} w={} fp_tol={} prune={} emit={} n_max={} seed={}",
            a.map, a.symbols, a.period, a.z, a.w, a.fp_tol, a.prune, a.emit, a.n_max, cli.seed
        ),
    ];
    let mode = BranchWeights::Derivative;
    let body = match a.emit.as_str() {
        "xi" => {
            let mut s = String::from("ell,xi\n");
            for ell in 1..=a.period {
                let gp = grand_partition(&m, &mode, &cfg, ell)?;
                s.push_str(&format!("{ell},{}\n", gp.value));
            }
            s
        }
        "zeta2" => {
            let z2 = zeta2_eval(&m, &mode, &cfg)?;
            let mut s = String::from("key,value\n");
            s.push_str(&format!("zeta2,{}\n", z2.value));
            s.push_str(&format!("log_zeta2,{}\n", z2.log_value));
            s.push_str(&format!("truncation_remainder,{}\n", z2.remainder));
            s
        }
        "consistency" => {
            let rep = zeta_consistency(&m, &cfg, a.n_max)?;
            let mut s = String::from("key,value\n");
            s.push_str(&format!("z,{}\n", rep.z));
            s.push_str(&format!("log_zeta2,{}\n", rep.log_zeta2));
            s.push_str(&format!("log_direct,{}\n", rep.log_direct));
            s.push_str(&format!("gap,{}\n", rep.gap));
            for (i, q) in rep.q.iter().enumerate() {
                s.push_str(&format!("q_{},{}\n", i + 1, q));
            }
            s
        }
        other => return Err(LabError::Parse(format!("unknown --emit '{other}' for zeta")).into()),
    };
    emit(&cli.out, &header, &body)
}

fn cmd_markov(cli: &Cli, a: &MarkovArgs, threads: usize) -> Result<(), CliError> {
    let tail_opt = Some(a.tail.clone());
    let (law, tail_desc) = load_tail(&tail_opt, &a.tail_file, "geometric:q=0.5")?;
    let header = vec![
        "subcommand: markov".into(),
        format!(
            "config: tail={tail_desc} trials={} n_max={} emit={} threads={threads} seed={}",
            a.trials, a.n_max, a.emit, cli.seed
        ),
    ];
    let body = match a.emit.as_str() {
        "simulate" => {
            let cfg = ChainConfig {
                tail: law,
                seed: cli.seed,
                trials: a.trials,
            };
            // chunk trials across threads; per-trial streams make the result
            // independent of the chunking
            let sampler = TailSampler::new(&cfg.tail)?;
            let n_threads = threads.min(a.trials.max(1));
            let chunk = a.trials.div_ceil(n_threads);
            let mut counts = vec![0u64; a.n_max + 1];
            if n_threads <= 1 {
                counts = simulate_counts(&sampler, cfg.seed, 0, a.trials, a.n_max);
            } else {
                let mut parts = Vec::new();
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    let mut first = 0usize;
                    while first < a.trials {
                        let n = chunk.min(a.trials - first);
                        let s = &sampler;
                        let seed = cfg.seed;
                        let n_max = a.n_max;
                        handles.push(scope.spawn(move || simulate_counts(s, seed, first, n, n_max)));
                        first += n;
                    }
                    for h in handles {
                        parts.push(h.join().expect("simulation worker"));
                    }
                });
                for p in parts {
                    for (c, v) in counts.iter_mut().zip(p.iter()) {
                        *c += v;
                    }
                }
            }
            let trials = a.trials as f64;
            let mut s = String::from("n,u_hat,ci\n");
            s.push_str("0,1,0\n");
            for n in 1..=a.n_max {
                let p = counts[n] as f64 / trials;
                let ci = 1.96 * (p * (1.0 - p) / trials).sqrt();
                s.push_str(&format!("{n},{p},{ci}\n"));
            }
            s
        }
        "pressure" => {
            let mut s = String::from("z,pressure\n");
            for &z in &a.z {
                s.push_str(&format!("{z},{}\n", markov_pressure(&law, z)?));
            }
            s
        }
        "stationary" => {
            let pi = stationary_measure(&law, a.n_max.max(1));
            let mut s = String::from("k,pi\n");
            for (i, p) in pi.iter().enumerate() {
                s.push_str(&format!("{},{}\n", i + 1, p));
            }
            s
        }
        other => {
            return Err(LabError::Parse(format!("unknown --emit '{other}' for markov")).into())
        }
    };
    emit(&cli.out, &header, &body)
}

fn cmd_pipeline(cli: &Cli, a: &PipelineArgs) -> Result<(), CliError> {
    let m = MapModel::lsv(a.s)?;
    let d = 1.0 / a.s - 1.0;
    let header = vec![
        "subcommand: pipeline".into(),
        format!(
            "config: s={} grid={} n_max={} branches={} seed={}",
            a.s, a.grid, a.n_max, a.branches, cli.seed
        ),
    ];
    let mut s = String::from("quantity,predicted,fitted,stderr,window_lo,window_hi,note\n");
    s.push_str(&format!("ergodic_degree,{d},,,,,d = 1/s - 1\n"));

    // level-set lengths: |A_n| ~ n^{-1-1/s}
    let geo = level_sets(&m, a.branches.max(500))?;
    let mut lens = vec![0.0];
    for n in 1..=geo.n_max() {
        lens.push(geo.length(n));
    }
    let gfit = fit_exponent(&lens, 50, geo.n_max())?;
    s.push_str(&format!(
        "level_length_exponent,{},{},{},50,{},\n",
        -(1.0 + 1.0 / a.s),
        gfit.slope,
        gfit.stderr,
        geo.n_max()
    ));

    // cylinder masses follow the same power
    let triple = solve_triple(&m, 1.0, a.branches, a.grid.clamp(256, 1024))?;
    let cm = cylinder_measures(&triple, &m, a.branches)?;
    let mut probs = vec![0.0];
    probs.extend_from_slice(&cm.raw);
    let pfit = fit_exponent(&probs, 50, a.branches)?;
    s.push_str(&format!(
        "cylinder_mass_exponent,{},{},{},50,{},lambda={}\n",
        -(1.0 + 1.0 / a.s),
        pfit.slope,
        pfit.stderr,
        a.branches,
        triple.lambda
    ));

    // return-density rates
    let eng = MixingEngine::new(&m, &triple, a.grid, a.n_max)?;
    let rd = return_density(&eng, a.n_max)?;
    let (lo, hi) = (a.n_max / 10, a.n_max);
    if a.s < 1.0 {
        let v = rd.v.expect("finite measure");
        let vfit = fit_exponent(&v, lo, hi)?;
        s.push_str(&format!(
            "v_exponent,{},{},{},{},{},mixing rate ~ n^-d\n",
            -d, vfit.slope, vfit.stderr, lo, hi
        ));
        let seq = renewal_sequence(&cm.law, a.n_max)?;
        let b = b_sequence(&seq)?;
        let bfit = fit_exponent(&b, lo, hi)?;
        s.push_str(&format!(
            "b_exponent,{},{},{},{},{},renewal route\n",
            -d, bfit.slope, bfit.stderr, lo, hi
        ));
    } else if a.s > 1.0 {
        let ufit = fit_exponent(&rd.u, lo, hi)?;
        s.push_str(&format!(
            "u_exponent,{},{},{},{},{},scaling rate ~ n^d\n",
            d, ufit.slope, ufit.stderr, lo, hi
        ));
    } else {
        let ufit = fit_exponent(&rd.u, lo, hi)?;
        s.push_str(&format!(
            "u_exponent,,{},{},{},{},logarithmic regime (no tolerance enforced)\n",
            ufit.slope, ufit.stderr, lo, hi
        ));
    }
    emit(&cli.out, &header, &s)
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn cmd_self_check(cli: &Cli, a: &SelfCheckArgs) -> Result<(), CliError> {
    let mut checks: Vec<Check> = Vec::new();

    // renewal exactness on the geometric law
    {
        let law = TailLaw::geometric(0.5)?;
        let seq = renewal_sequence(&law, 256)?;
        let worst = seq.a[1..]
            .iter()
            .map(|&x| (x - 0.5).abs())
            .fold(0.0f64, f64::max);
        checks.push(check(
            "renewal_geometric_closed_form",
            worst < 1e-12,
            format!("max |a_n - 1/2| = {worst:.3e}"),
        ));
        let (dsum, _) = tail_sums(&law, 256)?;
        let res = renewal_identity_residual(&dsum, &seq.a, 256);
        checks.push(check("renewal_identity", res < 1e-10, format!("residual {res:.3e}")));
    }
    // map geometry
    {
        let m = MapModel::lsv(1.0)?;
        let geo = level_sets(&m, 2000)?;
        let nx = 2000.0 * geo.endpoint(2000);
        checks.push(check(
            "level_asymptotics",
            (nx - 0.5).abs() < 0.01,
            format!("n x_n = {nx:.4}"),
        ));
    }
    // Markov-mode operator exactness
    {
        let m = MapModel::lsv(0.5)?;
        let law = TailLaw::geometric(0.5)?;
        let p = law.materialize(60)[1..].to_vec();
        let op = assemble_induced_op(&m, 0.5, 60, 128, &BranchWeights::Constant(p))?;
        let triple = leading_triple(&op, 1e-13, 500)?;
        let want: f64 = (1..=60).map(|k| 0.5f64.powi(k as i32) * law.p(k)).sum();
        let gap = (triple.lambda - want).abs();
        checks.push(check("markov_mode_eigenvalue", gap < 1e-10, format!("gap {gap:.3e}")));
    }
    // zeta Markov closed form
    {
        let m = MapModel::lsv(1.0)?;
        let law = TailLaw::geometric(0.5)?;
        let p = law.materialize(30)[1..].to_vec();
        let cfg = ZetaConfig {
            n_symbols: 30,
            max_period: 3,
            z: 0.7,
            w: 1.0,
            ..ZetaConfig::default()
        };
        let gp = grand_partition(&m, &BranchWeights::Constant(p), &cfg, 3)?;
        let gen: f64 = (1..=30).map(|k| 0.7f64.powi(k as i32) * law.p(k)).sum();
        let gap = (gp.value - gen.powi(3)).abs();
        checks.push(check("zeta_markov_power", gap < 1e-10, format!("gap {gap:.3e}")));
    }
    if !a.quick {
        // operator identity at consistent truncation
        {
            let m = MapModel::lsv(0.5)?;
            let f = intermittency_lab::grid::GridFn::from_fn(513, |x| (2.0 * x).cos());
            let r = intermittency_lab::operator::identity_check(&m, 0.5, &f, 150, 513)?;
            checks.push(check("operator_identity", r < 1e-8, format!("residual {r:.3e}")));
        }
        // engine mass conservation
        {
            let m = MapModel::lsv(0.5)?;
            let triple = solve_triple(&m, 1.0, 200, 512)?;
            let eng = MixingEngine::new(&m, &triple, 1024, 200)?;
            let init = eng.init_indicator(&[(0.6, 0.9)])?;
            let m0 = eng.total_mass_of(&init);
            let mut ev = init;
            for _ in 0..150 {
                eng.step(&mut ev);
            }
            let drift = (eng.total_mass_of(&ev) - m0).abs() / m0;
            checks.push(check(
                "mixing_mass_conservation",
                drift < 1e-9,
                format!("relative drift {drift:.3e}"),
            ));
        }
        // Monte Carlo pinned stream
        {
            let law = TailLaw::geometric(0.5)?;
            let sampler = TailSampler::new(&law)?;
            let counts = simulate_counts(&sampler, cli.seed, 0, 20_000, 30);
            let p1 = counts[1] as f64 / 20_000.0;
            checks.push(check(
                "markov_simulation_sane",
                (p1 - 0.5).abs() < 0.02,
                format!("u_hat_1 = {p1}"),
            ));
        }
    }

    let mut body = String::from("check,status,detail\n");
    let mut failures = 0;
    for c in &checks {
        if !c.pass {
            failures += 1;
        }
        body.push_str(&format!(
            "{},{},{}\n",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        ));
    }
    let header = vec![
        "subcommand: self-check".into(),
        format!("config: quick={} seed={}", a.quick, cli.seed),
    ];
    emit(&cli.out, &header, &body)?;
    if failures > 0 {
        return Err(CliError::SelfCheck(failures));
    }
    Ok(())
}
