//! The `pchaos` command line: kernel algebra, bounds, CLT condition checks,
//! simulation and the Ornstein-Uhlenbeck experiments.
//!
//! Exit status 0 on success, 2 on validation failure, 3 when a numerical
//! guard trips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::algebra::{
    assumption_a_check, assumption_c_value, g_hat_norm_bound, g_hat_operator, g_operator,
    product_expand, star_contract, symmetrize, verify_contraction_identity, verify_useful_identity,
};
use crate::bounds::{
    assemble_d2, assemble_d3, clt_conditions, AssembleOptions, CltMember, BoundReport, CovMatrix, Mode,
};
use crate::chaos::ChaosExpansion;
use crate::error::{Error, Result};
use crate::oulevy::{self, OUConfig, Which};
use crate::simulate::{DISCREPANCY_NOTE, 
    empirical_cov, empirical_discrepancy, simulate_functionals, skewness_kurtosis, with_workers,
    TestFunctionFamily, DEFAULT_SEED,
};
use crate::space::{file_err, Kernel, Tolerance};
use crate::util::{fmt17, fmt6};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_DIR_ENV: &str = "PCHAOS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "pchaos-out";

#[derive(Debug, Parser)]
#[command(name = "pchaos", version, about = "Chaos expansions and normal-approximation bounds on discretized Poisson spaces")]
pub struct Cli {
    /// Output directory for reports.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    pub out_dir: PathBuf,
    /// Seed for every random draw (decimal or 0x-prefixed hex).
    #[arg(long, global = true, value_parser = parse_seed, default_value = "0x5EED")]
    pub seed: u64,
    /// Worker threads for Monte Carlo work (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Absolute tolerance for symmetry, centering and identity checks.
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub abs_tol: f64,
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub rel_tol: f64,
    /// What goes to stdout: a short human summary or the CSV table.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contractions, symmetrization, G and Ĝ operators on kernel files.
    Algebra(AlgebraArgs),
    /// Malliavin-Stein and interpolation bounds for a vector of functionals.
    Bound(BoundArgs),
    /// Covariance and contraction conditions of the OU family over a T grid.
    CltCheck(OuArgs),
    /// Simulate functionals and compare with a Gaussian.
    Simulate(SimulateArgs),
    /// End-to-end OU example: kernels, covariances, bound, simulation.
    OuDemo(OuArgs),
    /// Rate table of the Q / Qh contraction norms over a T grid.
    Rates(OuArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgebraOp {
    Contract,
    Symmetrize,
    G,
    Ghat,
    GhatBound,
    Product,
    ContractionIdentity,
    UsefulIdentity,
    AssumptionA,
    AssumptionC,
}

#[derive(Debug, Args)]
pub struct AlgebraArgs {
    #[arg(long, value_enum)]
    pub op: AlgebraOp,
    /// Left kernel file.
    #[arg(long)]
    pub f: PathBuf,
    /// Right kernel file; defaults to the left one.
    #[arg(long)]
    pub g: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    #[arg(long, default_value_t = 1)]
    pub l: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long, default_value_t = 1)]
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundMode {
    Analytic,
    Montecarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Distance {
    D2,
    D3,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Manifest listing chaos-expansion files and the target covariance.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = BoundMode::Analytic)]
    pub mode: BoundMode,
    #[arg(long, value_enum, default_value_t = Distance::D3)]
    pub distance: Distance,
    #[arg(long, default_value_t = 100_000)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub reps: usize,
    /// Also write every replication to samples.csv.
    #[arg(long)]
    pub samples: bool,
}

#[derive(Debug, Args)]
pub struct OuArgs {
    /// OU config file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_which, default_value = "Q")]
    pub which: Which,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub cells_per_unit: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Horizons for rate fits.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400")]
    pub t_grid: Vec<f64>,
}

fn parse_seed(s: &str) -> std::result::Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("invalid seed '{s}': {e}"))
}

fn parse_which(s: &str) -> std::result::Result<Which, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Chaos-expansion files plus a target covariance, paths relative to the manifest.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub functionals: Vec<String>,
    pub cov: Vec<Vec<f64>>,
}

pub fn read_manifest(path: &Path) -> Result<(Vec<ChaosExpansion>, CovMatrix)> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| file_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let list = m
        .functionals
        .iter()
        .map(|f| ChaosExpansion::read(&base.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let d = m.cov.len();
    if m.cov.iter().any(|row| row.len() != d) {
        return Err(file_err(path, "cov must be a square array"));
    }
    let c = CovMatrix::from_row_major(d, m.cov.into_iter().flatten().collect()).map_err(|e| file_err(path, e))?;
    if let Some(first) = list.first() {
        if list.iter().any(|f| !f.space().same_as(first.space())) {
            return Err(file_err(path, Error::SpaceMismatch));
        }
    }
    Ok((list, c))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Guard(_) => 3,
        Error::File { msg, .. } if msg.starts_with("numerical guard") => 3,
        _ => 2,
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs the command, writes its artifacts and returns the stdout text.
pub fn run(cli: &Cli) -> Result<String> {
    let work = || match &cli.command {
        Command::Algebra(a) => run_algebra(cli, a),
        Command::Bound(a) => run_bound(cli, a),
        Command::CltCheck(a) => run_clt_check(cli, a),
        Command::Simulate(a) => run_simulate(cli, a),
        Command::OuDemo(a) => run_ou_demo(cli, a),
        Command::Rates(a) => run_rates(cli, a),
    };
    match cli.workers {
        Some(n) => with_workers(n, work),
        None => work(),
    }
}

fn write_out(cli: &Cli, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| file_err(&cli.out_dir, e))?;
    let path = cli.out_dir.join(name);
    std::fs::write(&path, body).map_err(|e| file_err(&path, e))?;
    Ok(path)
}

fn header(cli: &Cli, command: &str) -> String {
    format!(
        "version = \"{VERSION}\"\ncommand = \"{command}\"\nseed = {}\nabs_tol = {}\nrel_tol = {}\n",
        cli.seed,
        fmt17(cli.abs_tol),
        fmt17(cli.rel_tol)
    )
}

fn tolerance(cli: &Cli) -> Tolerance {
    Tolerance::new(cli.abs_tol, cli.rel_tol)
}

fn scalar_or_summary(k: &Kernel) -> String {
    match k.as_scalar() {
        Some(v) => format!("value = {v}\n"),
        None => format!("order = {}\nnorm = {}\n", k.order(), fmt6(k.norm())),
    }
}

/// Every op but `symmetrize` takes symmetric kernels only.
fn read_kernel(path: &Path, space: Option<&Kernel>, a: &AlgebraArgs, tol: f64) -> Result<Kernel> {
    let k = Kernel::read(path, space.map(Kernel::space))?;
    if a.op != AlgebraOp::Symmetrize && !k.check_symmetry(tol) {
        return Err(file_err(path, "kernel is not symmetric; run `algebra --op symmetrize` first"));
    }
    Ok(k)
}

fn run_algebra(cli: &Cli, a: &AlgebraArgs) -> Result<String> {
    let f = read_kernel(&a.f, None, a, cli.rel_tol)?;
    let g = match &a.g {
        Some(p) => read_kernel(p, Some(&f), a, cli.rel_tol)?,
        None => f.clone(),
    };
    let tol = tolerance(cli);
    let mut out = String::new();
    let mut report = header(cli, "algebra");
    let _ = writeln!(report, "op = \"{:?}\"\nf = \"{}\"", a.op, a.f.display());
    if let Some(p) = &a.g {
        let _ = writeln!(report, "g = \"{}\"", p.display());
    }
    let mut kernel_out: Option<Kernel> = None;
    let pair = |name: &str, (lhs, rhs): (f64, f64), out: &mut String, report: &mut String| {
        let holds = tol.close(lhs, rhs);
        let _ = writeln!(out, "{name}: lhs = {} rhs = {} agree = {holds}", fmt6(lhs), fmt6(rhs));
        let _ = writeln!(report, "lhs = {}\nrhs = {}\nagree = {holds}", fmt17(lhs), fmt17(rhs));
    };
    match a.op {
        AlgebraOp::Contract => {
            let c = star_contract(&f, &g, a.r, a.l)?;
            out.push_str(&scalar_or_summary(&c));
            kernel_out = Some(c);
        }
        AlgebraOp::Symmetrize => {
            let c = symmetrize(&f)?;
            out.push_str(&scalar_or_summary(&c));
            kernel_out = Some(c);
        }
        AlgebraOp::G => {
            let c = g_operator(&f, &g, a.k)?;
            out.push_str(&scalar_or_summary(&c));
            kernel_out = Some(c);
        }
        AlgebraOp::Ghat => {
            let c = g_hat_operator(&f, &g, a.k)?;
            out.push_str(&scalar_or_summary(&c));
            kernel_out = Some(c);
        }
        AlgebraOp::GhatBound => {
            let (lhs, rhs) = g_hat_norm_bound(&f, &g, a.k)?;
            let _ = writeln!(out, "norm_sq = {}\nbound = {}\nholds = {}", fmt6(lhs), fmt6(rhs), lhs <= rhs);
            let _ = writeln!(report, "norm_sq = {}\nbound = {}", fmt17(lhs), fmt17(rhs));
        }
        AlgebraOp::Product => {
            let mut csv = String::from("k,order,norm\n");
            for (k, c) in product_expand(&f, &g)? {
                let _ = writeln!(out, "k = {k}: norm = {}", fmt6(c.norm()));
                let _ = writeln!(csv, "{k},{},{}", c.order(), fmt17(c.norm()));
                write_out(cli, &format!("algebra_product_k{k}.toml"), &c.to_toml())?;
            }
            write_out(cli, "algebra_product.csv", &csv)?;
        }
        AlgebraOp::ContractionIdentity => {
            pair("contraction identity", verify_contraction_identity(&f, &g, a.s, a.t)?, &mut out, &mut report)
        }
        AlgebraOp::UsefulIdentity => pair("useful identity", verify_useful_identity(&f, &g, a.r)?, &mut out, &mut report),
        AlgebraOp::AssumptionA => {
            let r = assumption_a_check(&f)?;
            let _ = writeln!(out, "holds = {}\nl4_norm = {}", r.holds, fmt6(r.l4_norm));
            for (r_, n) in &r.contraction_norms {
                let _ = writeln!(out, "r = {r_}: norm = {}", fmt6(*n));
                let _ = writeln!(report, "norm_r{r_} = {}", fmt17(*n));
            }
            let _ = writeln!(report, "holds = {}\nl4_norm = {}", r.holds, fmt17(r.l4_norm));
        }
        AlgebraOp::AssumptionC => {
            let v = assumption_c_value(&f, &g, a.k)?;
            let _ = writeln!(out, "value = {v}");
            let _ = writeln!(report, "value = {}", fmt17(v));
        }
    }
    if let Some(k) = kernel_out {
        if let Some(v) = k.as_scalar() {
            let _ = writeln!(report, "value = {}", fmt17(v));
        }
        write_out(cli, "algebra_result.toml", &k.to_toml())?;
    }
    write_out(cli, "algebra.toml", &report)?;
    Ok(out)
}

fn run_bound(cli: &Cli, a: &BoundArgs) -> Result<String> {
    let (list, c) = read_manifest(&a.input)?;
    let mode = match a.mode {
        BoundMode::Analytic => Mode::Analytic,
        BoundMode::Montecarlo => Mode::MonteCarlo { reps: a.reps, seed: cli.seed },
    };
    let opts = AssembleOptions::default();
    let r = match a.distance {
        Distance::D2 => assemble_d2(&list, &c, mode, &opts)?,
        Distance::D3 => assemble_d3(&list, &c, mode, &opts)?,
    };
    let mut report = header(cli, "bound");
    let _ = writeln!(report, "input = \"{}\"\ndiagonal_mass = {}", a.input.display(), fmt17(diagonal_mass(&list)));
    report.push_str("\n[bound]\n");
    report.push_str(&r.to_toml());
    write_out(cli, "bound.toml", &report)?;
    let csv = r.to_csv();
    write_out(cli, "bound.csv", &csv)?;
    Ok(match cli.format {
        Format::Csv => csv,
        Format::Text => bound_summary(&r),
    })
}

fn diagonal_mass(list: &[ChaosExpansion]) -> f64 {
    list.iter()
        .flat_map(|f| f.terms())
        .map(|k| crate::simulate::diag_free_projection(k).discarded_sq)
        .sum()
}

fn bound_summary(r: &BoundReport) -> String {
    let mut s = format!("d3 bound = {}\n", fmt6(r.d3_bound));
    if let Some(d2) = r.d2_bound {
        let _ = writeln!(s, "d2 bound = {}", fmt6(d2));
    }
    let _ = writeln!(s, "covariance term = {}\ncubic term = {}", fmt6(r.term_sq_sum), fmt6(r.cubic_term));
    s
}

fn run_simulate(cli: &Cli, a: &SimulateArgs) -> Result<String> {
    let (list, c) = read_manifest(&a.input)?;
    let samples = simulate_functionals(&list, a.reps, cli.seed)?;
    let emp = empirical_cov(&samples)?;
    let family = TestFunctionFamily::new(list.len(), TestFunctionFamily::DEFAULT_SIZE, TestFunctionFamily::DEFAULT_SEED);
    let disc = empirical_discrepancy(&samples, &c, &family)?;
    let d = list.len();
    let mut csv = String::from("i,j,empirical,se,target\n");
    for i in 0..d {
        for j in 0..d {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                i + 1,
                j + 1,
                fmt17(emp.cov.get(i, j)),
                fmt17(emp.se[i * d + j]),
                fmt17(c.get(i, j))
            );
        }
    }
    write_out(cli, "simulate_cov.csv", &csv)?;
    if a.samples {
        write_out(cli, "samples.csv", &samples.to_csv())?;
    }
    let mut report = header(cli, "simulate");
    let _ = writeln!(report, "input = \"{}\"\nreps = {}", a.input.display(), a.reps);
    let disc_sq: Vec<String> = samples.discarded_sq.iter().map(|x| fmt17(*x)).collect();
    let _ = writeln!(report, "discarded_diagonal_sq = [{}]", disc_sq.join(", "));
    let _ = writeln!(
        report,
        "discrepancy = {}\ndiscrepancy_se = {}\ndiscrepancy_note = \"{}\"",
        fmt17(disc.value),
        fmt17(disc.se),
        DISCREPANCY_NOTE
    );
    for (i, v) in samples.values.iter().enumerate() {
        let (sk, ku) = skewness_kurtosis(v);
        let _ = writeln!(report, "skewness_{} = {}\nkurtosis_{} = {}", i + 1, fmt17(sk), i + 1, fmt17(ku));
    }
    write_out(cli, "simulate.toml", &report)?;
    Ok(match cli.format {
        Format::Csv => csv,
        Format::Text => format!(
            "replications = {}\ndiscrepancy = {} (se {}, lower proxy for d3)\n",
            a.reps,
            fmt6(disc.value),
            fmt6(disc.se)
        ),
    })
}

fn ou_config(cli: &Cli, a: &OuArgs) -> Result<OUConfig> {
    let mut cfg = match &a.config {
        Some(p) => OUConfig::read(p)?,
        None => OUConfig { seed: cli.seed, ..Default::default() },
    };
    if let Some(l) = &a.lambdas {
        cfg.lambdas = l.clone();
    }
    if let Some(t) = a.t {
        cfg.t = t;
    }
    if let Some(h) = a.h {
        cfg.h = h;
    }
    if let Some(c) = a.cells_per_unit {
        cfg.cells_per_unit = c;
        cfg.nx = None;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if a.config.is_none() || cli.seed != DEFAULT_SEED {
        cfg.seed = cli.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mesh_diagnostics(cfg: &OUConfig) -> Result<String> {
    let g = oulevy::build_space(cfg)?;
    Ok(format!(
        "cells = {}\nnx = {}\ndx = {}\nx_min = {}\ntruncation_mass = {}\n",
        g.cells(),
        g.nx,
        fmt17(g.dx),
        fmt17(g.x_min),
        fmt17(g.truncation_mass)
    ))
}

fn run_ou_demo(cli: &Cli, a: &OuArgs) -> Result<String> {
    let cfg = ou_config(cli, a)?;
    let grid = (a.t_grid.len() >= 2).then_some(a.t_grid.as_slice());
    let r = oulevy::clt_demo(&cfg, a.which, grid)?;
    let d = cfg.lambdas.len();
    let mut csv = String::from("i,j,exact,limit,limit_unsymmetrized,empirical,se\n");
    for i in 0..d {
        for j in 0..d {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                i + 1,
                j + 1,
                fmt17(r.cov_exact.get(i, j)),
                fmt17(r.cov_limit.get(i, j)),
                fmt17(r.cov_limit_unsymmetrized.as_ref().unwrap_or(&r.cov_limit).get(i, j)),
                fmt17(r.empirical.cov.get(i, j)),
                fmt17(r.empirical.se[i * d + j])
            );
        }
    }
    write_out(cli, "ou_covariance.csv", &csv)?;
    write_out(cli, "ou_bound.csv", &r.bound.to_csv())?;
    if let Some(dec) = &r.decay {
        let mut s = String::from("T,d3_bound,fitted_slope,fitted_constant\n");
        for (t, v) in dec.t_grid.iter().zip(&dec.d3) {
            let _ = writeln!(s, "{},{},{},{}", fmt17(*t), fmt17(*v), fmt17(dec.slope), fmt17(dec.constant));
        }
        write_out(cli, "ou_decay.csv", &s)?;
    }
    let mut report = header(cli, "ou-demo");
    report.push_str(&r.to_toml());
    write_out(cli, "ou_demo.toml", &report)?;
    Ok(match cli.format {
        Format::Csv => csv,
        Format::Text => {
            let mut s = format!("{} example, T = {}, {} cells\n", a.which, fmt6(cfg.t), r.cells);
            let _ = writeln!(s, "d3 bound = {}", fmt6(r.bound.d3_bound));
            let _ = writeln!(
                s,
                "discrepancy = {} (se {}, lower proxy for d3)",
                fmt6(r.discrepancy.value),
                fmt6(r.discrepancy.se)
            );
            if let Some(dec) = &r.decay {
                let _ = writeln!(s, "d3 decay slope = {}, constant = {}", fmt6(dec.slope), fmt6(dec.constant));
            }
            s
        }
    })
}

fn run_rates(cli: &Cli, a: &OuArgs) -> Result<String> {
    let cfg = ou_config(cli, a)?;
    let table = oulevy::rate_experiment(&cfg, &a.t_grid, a.which)?;
    let csv = table.to_csv();
    write_out(cli, "rates.csv", &csv)?;
    let mut report = header(cli, "rates");
    let _ = writeln!(report, "which = \"{}\"\nlambda = {}", a.which, fmt17(table.lambda));
    for (name, s) in oulevy::RATE_QUANTITIES.iter().zip(&table.slopes) {
        let _ = writeln!(report, "slope_{name} = {}", fmt17(*s));
    }
    let cells: Vec<String> = table.cells.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(report, "cells = [{}]", cells.join(", "));
    report.push_str("\n[config]\n");
    report.push_str(&cfg.to_toml());
    write_out(cli, "rates.toml", &report)?;
    Ok(match cli.format {
        Format::Csv => csv,
        Format::Text => {
            let mut s = String::new();
            for (name, sl) in oulevy::RATE_QUANTITIES.iter().zip(&table.slopes) {
                let _ = writeln!(s, "{name}: slope {}", fmt6(*sl));
            }
            s
        }
    })
}

fn run_clt_check(cli: &Cli, a: &OuArgs) -> Result<String> {
    let cfg = ou_config(cli, a)?;
    let mut family = Vec::with_capacity(a.t_grid.len());
    for &t in &a.t_grid {
        let c = cfg.with_t(t);
        let grid = oulevy::build_space(&c)?;
        let (kernels, exact) = match a.which {
            Which::A => (
                cfg.lambdas.iter().map(|&l| oulevy::kernel_a(&grid, &c, l)).collect::<Result<Vec<_>>>()?,
                oulevy::cov_exact_matrix(&c, Which::A)?,
            ),
            w => (oulevy::block_kernels(&grid, &c, w)?, oulevy::block_cov_exact_sym_matrix(&c, w)?),
        };
        family.push(CltMember { label: t, kernels, exact_cov: Some(exact) });
    }
    let limit = match a.which {
        Which::A => oulevy::cov_limit(&cfg, a.which)?,
        w => oulevy::block_limit_sym(&cfg, w)?,
    };
    let rows = clt_conditions(&family, &limit)?;
    let mut csv = String::from("T,component,r,l,value\n");
    for row in &rows {
        let t = fmt17(row.label);
        let _ = writeln!(csv, "{t},covariance_gap,,,{}", fmt17(row.covariance_gap));
        let _ = writeln!(csv, "{t},grid_covariance_gap,,,{}", fmt17(row.grid_covariance_gap));
        for (i, r, l, v) in &row.contraction_norms {
            let _ = writeln!(csv, "{t},{i},{r},{l},{}", fmt17(*v));
        }
    }
    write_out(cli, "clt_check.csv", &csv)?;
    let mut report = header(cli, "clt-check");
    let _ = writeln!(report, "which = \"{}\"", a.which);
    for row in &rows {
        let _ = writeln!(
            report,
            "\n[[horizon]]\nT = {}\ncovariance_gap = {}\ngrid_covariance_gap = {}\nd3_bound = {}\nassumptions_ab = {}",
            fmt17(row.label),
            fmt17(row.covariance_gap),
            fmt17(row.grid_covariance_gap),
            fmt17(row.d3_bound),
            row.assumptions_ab
        );
        if let Some(c) = row.assumption_c_max {
            let _ = writeln!(report, "assumption_c_max = {}", fmt17(c));
        }
        let l4: Vec<String> = row.l4_fourth.iter().map(|x| fmt17(*x)).collect();
        let _ = writeln!(report, "l4_fourth = [{}]", l4.join(", "));
    }
    report.push_str("\n[config]\n");
    report.push_str(&cfg.to_toml());
    report.push_str(&mesh_diagnostics(&cfg)?);
    write_out(cli, "clt_check.toml", &report)?;
    Ok(match cli.format {
        Format::Csv => csv,
        Format::Text => {
            let mut s = String::new();
            for row in &rows {
                let worst = row.contraction_norms.iter().fold(0.0f64, |m, x| m.max(x.3));
                let _ = writeln!(
                    s,
                    "T = {}: covariance gap {}, largest contraction norm {}",
                    fmt6(row.label),
                    fmt6(row.covariance_gap),
                    fmt6(worst)
                );
            }
            s
        }
    })
}
