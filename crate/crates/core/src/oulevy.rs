//! Functionals of stationary Ornstein-Uhlenbeck Lévy processes: the empirical
//! mean A, the empirical second moment Q and the shifted joint moment Q_h.
//!
//! The control measure ν(du)dx on R x R is discretized as (atom, x-interval)
//! cells with weight mass(atom) * Δx, kernels are evaluated at x-midpoints.
//! Covariances use closed forms and never touch the grid.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::Deserialize;

use crate::algebra::contraction_norm;
use crate::bounds::{assemble_d3, AssembleOptions, BoundReport, CovMatrix, Mode};
use crate::chaos::ChaosExpansion;
use crate::error::{Error, Result};
use crate::simulate::{
    empirical_cov, empirical_discrepancy, simulate_functionals, skewness_kurtosis, Discrepancy,
    EmpiricalCov, TestFunctionFamily, DEFAULT_SEED,
};
use crate::space::{file_err, DiscreteSpace, Kernel};
use crate::util::{fmt17, loglog_slope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    A,
    Q,
    Qh,
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Which::A),
            "Q" | "q" => Ok(Which::Q),
            "Qh" | "qh" | "QH" => Ok(Which::Qh),
            other => Err(Error::Range(format!("unknown functional '{other}', expected A, Q or Qh"))),
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::A => "A",
            Which::Q => "Q",
            Which::Qh => "Qh",
        })
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}
fn default_t() -> f64 {
    100.0
}
fn default_cells_per_unit() -> f64 {
    1.0
}
fn default_marks() -> Vec<(f64, f64)> {
    vec![(-1.0, 0.5), (1.0, 0.5)]
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_reps() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OUConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(rename = "T", default = "default_t")]
    pub t: f64,
    #[serde(default)]
    pub h: f64,
    /// Defaults to -20 / min λ.
    #[serde(default)]
    pub x_min: Option<f64>,
    /// Overrides `cells_per_unit` when set.
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default = "default_cells_per_unit")]
    pub cells_per_unit: f64,
    /// (u, mass) pairs.
    #[serde(default = "default_marks")]
    pub mark_atoms: Vec<(f64, f64)>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
}

impl Default for OUConfig {
    fn default() -> Self {
        OUConfig {
            lambdas: default_lambdas(),
            t: default_t(),
            h: 0.0,
            x_min: None,
            nx: None,
            cells_per_unit: default_cells_per_unit(),
            mark_atoms: default_marks(),
            seed: default_seed(),
            reps: default_reps(),
        }
    }
}

impl OUConfig {
    pub fn new(lambdas: Vec<f64>, t: f64) -> Self {
        OUConfig { lambdas, t, ..Default::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: OUConfig = toml::from_str(text).map_err(|e| Error::Range(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        Self::from_toml(&text).map_err(|e| file_err(path, e))
    }

    pub fn with_t(&self, t: f64) -> Self {
        OUConfig { t, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Range("lambdas must be a nonempty list of positive reals".into()));
        }
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::Range(format!("T must be positive, got {}", self.t)));
        }
        if !(self.h.is_finite() && self.h >= 0.0) {
            return Err(Error::Range(format!("h must be nonnegative, got {}", self.h)));
        }
        if let Some(x) = self.x_min {
            if !(x.is_finite() && x < 0.0) {
                return Err(Error::Range(format!("x_min must be negative, got {x}")));
            }
        }
        if self.nx == Some(0) || !(self.cells_per_unit.is_finite() && self.cells_per_unit > 0.0) {
            return Err(Error::Range("mesh must have at least one cell".into()));
        }
        if self.mark_atoms.is_empty()
            || self.mark_atoms.iter().any(|(u, m)| !u.is_finite() || !(m.is_finite() && *m > 0.0))
        {
            return Err(Error::Range("mark_atoms must be (u, mass) pairs with positive mass".into()));
        }
        let m2 = self.mark_moment(2);
        if (m2 - 1.0).abs() > 1e-12 {
            return Err(Error::Range(format!("mark measure must satisfy ∫u² dν = 1, got {m2}")));
        }
        if self.reps == 0 {
            return Err(Error::Range("reps must be positive".into()));
        }
        Ok(())
    }

    pub fn mark_moment(&self, j: i32) -> f64 {
        self.mark_atoms.iter().map(|(u, m)| m * u.powi(j)).sum()
    }

    /// c_ν² = ∫u⁴ dν.
    pub fn c_nu_sq(&self) -> f64 {
        self.mark_moment(4)
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambdas.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min.unwrap_or(-20.0 / self.lambda_min())
    }

    pub fn x_max(&self) -> f64 {
        self.t + self.h
    }

    pub fn nx(&self) -> usize {
        self.nx
            .unwrap_or_else(|| ((self.x_max() - self.x_min()) * self.cells_per_unit).ceil().max(1.0) as usize)
    }
}

/// Discretized R x R with the cell coordinates kept for kernel evaluation.
#[derive(Debug, Clone)]
pub struct OuGrid {
    pub space: Arc<DiscreteSpace>,
    /// Mark value of each cell.
    pub u: Vec<f64>,
    /// x-midpoint of each cell.
    pub x: Vec<f64>,
    pub nx: usize,
    pub dx: f64,
    pub x_min: f64,
    /// exp(2 λ_min x_min), the order of the truncated tail mass.
    pub truncation_mass: f64,
}

impl OuGrid {
    pub fn cells(&self) -> usize {
        self.u.len()
    }
}

/// Cells are atom-major: cell a * nx + i has mark atom a and x-interval i.
pub fn build_space(cfg: &OUConfig) -> Result<OuGrid> {
    cfg.validate()?;
    let nx = cfg.nx();
    let x_min = cfg.x_min();
    let dx = (cfg.x_max() - x_min) / nx as f64;
    let mut weights = Vec::with_capacity(nx * cfg.mark_atoms.len());
    let mut labels = Vec::with_capacity(weights.capacity());
    let mut u = Vec::with_capacity(weights.capacity());
    let mut x = Vec::with_capacity(weights.capacity());
    for (ua, mass) in &cfg.mark_atoms {
        for i in 0..nx {
            let xm = x_min + (i as f64 + 0.5) * dx;
            weights.push(mass * dx);
            labels.push(format!("u={ua},x={xm}"));
            u.push(*ua);
            x.push(xm);
        }
    }
    let space = DiscreteSpace::with_labels(weights, labels)?;
    Ok(OuGrid {
        space,
        u,
        x,
        nx,
        dx,
        x_min,
        truncation_mass: (2.0 * cfg.lambda_min() * x_min).exp(),
    })
}

/// g_{λ,T}(u, x) = u √(2λ/T) ∫_{x∨0}^T exp(-λ(t - x)) dt.
pub fn a_value(lambda: f64, t: f64, u: f64, x: f64) -> f64 {
    if x > t {
        return 0.0;
    }
    let inner = if x <= 0.0 {
        (lambda * x).exp() * -(-lambda * t).exp_m1()
    } else {
        -(-lambda * (t - x)).exp_m1()
    } / lambda;
    u * (2.0 * lambda / t).sqrt() * inner
}

/// exp(λ(x + x')) (exp(-2λ(x∨x'∨0)) - exp(-2λT)) for x∨x' <= T, else 0.
fn q_profile(lambda: f64, t: f64, x: f64, y: f64) -> f64 {
    let top = x.max(y);
    if top > t {
        return 0.0;
    }
    if top <= 0.0 {
        (lambda * (x + y)).exp() * -(-2.0 * lambda * t).exp_m1()
    } else {
        (-lambda * (x - y).abs()).exp() - (lambda * (x + y - 2.0 * t)).exp()
    }
}

/// H_{λ,T}(u, x; u', x').
pub fn h_value(lambda: f64, t: f64, u: f64, x: f64, v: f64, y: f64) -> f64 {
    u * v * q_profile(lambda, t, x, y) / t
}

/// H*_{λ,T}(u, x).
pub fn h_star_value(lambda: f64, t: f64, u: f64, x: f64) -> f64 {
    u * u * q_profile(lambda, t, x, x) / t
}

/// H^h_{λ,T}(u, x; u', x') = H_{λ,T}(u, x; u', x' - h), not symmetric for h > 0.
pub fn h_shift_value(lambda: f64, t: f64, h: f64, u: f64, x: f64, v: f64, y: f64) -> f64 {
    h_value(lambda, t, u, x, v, y - h)
}

/// H^{*,h}_{λ,T}(u, x) = exp(-λh) H*_{λ,T}(u, x).
pub fn h_star_shift_value(lambda: f64, t: f64, h: f64, u: f64, x: f64) -> f64 {
    (-lambda * h).exp() * h_star_value(lambda, t, u, x)
}

/// First-chaos kernel of A(T, λ).
pub fn kernel_a(grid: &OuGrid, cfg: &OUConfig, lambda: f64) -> Result<Kernel> {
    let v = (0..grid.cells()).map(|z| a_value(lambda, cfg.t, grid.u[z], grid.x[z])).collect();
    Kernel::new(grid.space.clone(), 1, v)
}

fn order2(grid: &OuGrid, f: impl Fn(usize, usize) -> f64) -> Result<Kernel> {
    let m = grid.cells();
    let mut v = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            v.push(f(a, b));
        }
    }
    Kernel::new(grid.space.clone(), 2, v)
}

/// (√T H*, √T H), the kernels of Q(T, λ) = I₁(√T H*) + I₂(√T H).
pub fn kernel_q(grid: &OuGrid, cfg: &OUConfig, lambda: f64) -> Result<(Kernel, Kernel)> {
    let (t, s) = (cfg.t, cfg.t.sqrt());
    let first = (0..grid.cells()).map(|z| s * h_star_value(lambda, t, grid.u[z], grid.x[z])).collect();
    let first = Kernel::new(grid.space.clone(), 1, first)?;
    let second = order2(grid, |a, b| s * h_value(lambda, t, grid.u[a], grid.x[a], grid.u[b], grid.x[b]))?;
    Ok((first, second))
}

/// (√T H^{*,h}, √T sym H^h); the order-2 kernel is symmetrized since I₂ only sees that part.
pub fn kernel_qh(grid: &OuGrid, cfg: &OUConfig, lambda: f64, h: f64) -> Result<(Kernel, Kernel)> {
    let (t, s) = (cfg.t, cfg.t.sqrt());
    let first = (0..grid.cells())
        .map(|z| s * h_star_shift_value(lambda, t, h, grid.u[z], grid.x[z]))
        .collect();
    let first = Kernel::new(grid.space.clone(), 1, first)?;
    let (u, x) = (&grid.u, &grid.x);
    let second = order2(grid, |a, b| {
        0.5 * s
            * (h_shift_value(lambda, t, h, u[a], x[a], u[b], x[b])
                + h_shift_value(lambda, t, h, u[b], x[b], u[a], x[a]))
    })?;
    Ok((first, second))
}

/// The functionals of the chosen example as chaos expansions, one per λ.
pub fn functionals(grid: &OuGrid, cfg: &OUConfig, which: Which) -> Result<Vec<ChaosExpansion>> {
    cfg.lambdas
        .iter()
        .map(|&l| match which {
            Which::A => ChaosExpansion::single(kernel_a(grid, cfg, l)?),
            Which::Q => {
                let (a, b) = kernel_q(grid, cfg, l)?;
                ChaosExpansion::new(grid.space.clone(), 0.0, vec![a, b])
            }
            Which::Qh => {
                let (a, b) = kernel_qh(grid, cfg, l, cfg.h)?;
                ChaosExpansion::new(grid.space.clone(), 0.0, vec![a, b])
            }
        })
        .collect()
}

/// (I₁ kernels..., I₂ kernels...) for Q or Qh, matching the block matrices.
pub fn block_kernels(grid: &OuGrid, cfg: &OUConfig, which: Which) -> Result<Vec<Kernel>> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &l in &cfg.lambdas {
        let (a, b) = match which {
            Which::A => return Err(Error::Range("the A example has no block structure".into())),
            Which::Q => kernel_q(grid, cfg, l)?,
            Which::Qh => kernel_qh(grid, cfg, l, cfg.h)?,
        };
        first.push(a);
        second.push(b);
    }
    first.extend(second);
    Ok(first)
}

/// 1 - exp(-x) without cancellation.
fn one_minus_exp(x: f64) -> f64 {
    -(-x).exp_m1()
}

fn a_cov(li: f64, lj: f64, t: f64) -> f64 {
    let s = li + lj;
    let (ei, ej) = (one_minus_exp(li * t), one_minus_exp(lj * t));
    2.0 / (t * (li * lj).sqrt()) * (ei * ej / s + t - ei / li - ej / lj + one_minus_exp(s * t) / s)
}

fn star_cov(li: f64, lj: f64, t: f64, c2: f64) -> f64 {
    let s = li + lj;
    let (fi, fj) = (one_minus_exp(2.0 * li * t), one_minus_exp(2.0 * lj * t));
    c2 / t * (fi * fj / (2.0 * s) + t - fi / (2.0 * li) - fj / (2.0 * lj) + one_minus_exp(2.0 * s * t) / (2.0 * s))
}

fn double_cov(li: f64, lj: f64, t: f64) -> f64 {
    let s = li + lj;
    let (fi, fj) = (one_minus_exp(2.0 * li * t), one_minus_exp(2.0 * lj * t));
    2.0 / t
        * (fi * fj / (s * s)
            + 2.0 / s * (t - fi / (2.0 * li) - fj / (2.0 * lj) + one_minus_exp(2.0 * s * t) / (2.0 * s)))
}

fn check_index(cfg: &OUConfig, i: usize, cells: usize) -> Result<()> {
    if i >= cells {
        return Err(Error::IndexOutOfRange { index: i, cells });
    }
    let _ = cfg;
    Ok(())
}

/// Exact finite-T covariance of the i-th and j-th functionals.
///
/// For Qh the second-chaos part follows the shift identity on the raw,
/// unsymmetrized H^h, which makes it coincide with the Q case.
pub fn cov_exact(cfg: &OUConfig, which: Which, i: usize, j: usize) -> Result<f64> {
    let d = cfg.lambdas.len();
    check_index(cfg, i, d)?;
    check_index(cfg, j, d)?;
    let (li, lj, t) = (cfg.lambdas[i], cfg.lambdas[j], cfg.t);
    Ok(match which {
        Which::A => cfg.mark_moment(2) * a_cov(li, lj, t),
        Which::Q => star_cov(li, lj, t, cfg.c_nu_sq()) + double_cov(li, lj, t),
        Which::Qh => (-(li + lj) * cfg.h).exp() * star_cov(li, lj, t, cfg.c_nu_sq()) + double_cov(li, lj, t),
    })
}

/// Exact covariance of the 2d-vector (I₁ parts, I₂ parts) for Q or Qh.
pub fn block_cov_exact(cfg: &OUConfig, which: Which, i: usize, j: usize) -> Result<f64> {
    let d = cfg.lambdas.len();
    check_index(cfg, i, 2 * d)?;
    check_index(cfg, j, 2 * d)?;
    let t = cfg.t;
    let shift = |a: usize, b: usize| match which {
        Which::Qh => (-(cfg.lambdas[a] + cfg.lambdas[b]) * cfg.h).exp(),
        _ => 1.0,
    };
    Ok(match (which, i < d, j < d) {
        (Which::A, ..) => return Err(Error::Range("the A example has no block structure".into())),
        (_, true, true) => shift(i, j) * star_cov(cfg.lambdas[i], cfg.lambdas[j], t, cfg.c_nu_sq()),
        (_, false, false) => double_cov(cfg.lambdas[i - d], cfg.lambdas[j - d], t),
        _ => 0.0,
    })
}

/// B, C or E.
pub fn cov_limit(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    cfg.validate()?;
    let l = &cfg.lambdas;
    let c2 = cfg.c_nu_sq();
    CovMatrix::from_fn(l.len(), |i, j| {
        let s = l[i] + l[j];
        match which {
            Which::A => 2.0 / (l[i] * l[j]).sqrt(),
            Which::Q => 4.0 / s + c2,
            Which::Qh => 4.0 / s + c2 * (-s * cfg.h).exp(),
        }
    })
}

/// D (Q) or D^h (Qh), the 2d x 2d block limits.
pub fn block_limit(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    cfg.validate()?;
    if which == Which::A {
        return Err(Error::Range("the A example has no block structure".into()));
    }
    let l = &cfg.lambdas;
    let d = l.len();
    let c2 = cfg.c_nu_sq();
    CovMatrix::from_fn(2 * d, |i, j| match (i < d, j < d) {
        (true, true) => {
            let s = l[i] + l[j];
            c2 * if which == Which::Qh { (-s * cfg.h).exp() } else { 1.0 }
        }
        (false, false) => 4.0 / (l[i - d] + l[j - d]),
        _ => 0.0,
    })
}

pub fn cov_exact_matrix(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    let d = cfg.lambdas.len();
    let v = (0..d * d).map(|k| cov_exact(cfg, which, k / d, k % d)).collect::<Result<Vec<_>>>()?;
    CovMatrix::from_row_major(d, v)
}

pub fn block_cov_exact_matrix(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    let d = 2 * cfg.lambdas.len();
    let v = (0..d * d).map(|k| block_cov_exact(cfg, which, k / d, k % d)).collect::<Result<Vec<_>>>()?;
    CovMatrix::from_row_major(d, v)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        const N: usize = 20;
        (0..N)
            .map(|k| {
                let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (N as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for n in 2..=N {
                        let p2 = ((2 * n - 1) as f64 * x * p1 - (n - 1) as f64 * p0) / n as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = N as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    })
}

/// ∫ f over [a, b], split at `breaks` and into panels no longer than `panel`.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], panel: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&c| c > a && c < b).collect();
    cuts.push(a);
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    let nodes = gauss_legendre();
    let mut sum = 0.0;
    for w in cuts.windows(2) {
        let n = ((w[1] - w[0]) / panel).ceil().max(1.0) as usize;
        let len = (w[1] - w[0]) / n as f64;
        for k in 0..n {
            let mid = w[0] + (k as f64 + 0.5) * len;
            sum += 0.5 * len * nodes.iter().map(|(x, wt)| wt * f(mid + 0.5 * len * x)).sum::<f64>();
        }
    }
    sum
}

/// (1/T)∫∫ P_i(x, y) P_j(y, x) with P_λ(x, y) = q_profile(λ, T, x, y - h).
///
/// With y = x + w the x-integrand is a sum of exponentials past the last
/// kink, so that stretch is integrated in closed form.
fn qh_cross(li: f64, lj: f64, t: f64, h: f64) -> f64 {
    let (lo, hi, s) = (li.min(lj), li.max(lj), li + lj);
    let tail = 30.0 / lo;
    let panel = 2.0 / hi;
    // ∫_a^b e^{λ(2x + c)} dx, with 2b + c <= 0
    let ramp = |lam: f64, a: f64, b: f64, c: f64| {
        (lam * (2.0 * b + c)).exp() * -(-2.0 * lam * (b - a)).exp_m1() / (2.0 * lam)
    };
    let inner = |w: f64| {
        let top = t - w.max(0.0);
        let low = (-w).min(0.0) - tail;
        let knee = h + (-w).max(0.0);
        let f = |x: f64| q_profile(li, t, x, x + w - h) * q_profile(lj, t, x + w, x - h);
        let mut v = integrate(f, low, knee.min(top), &[0.0, -w, h - w, h], panel);
        if top > knee {
            let (ai, aj) = ((-li * (w - h).abs()).exp(), (-lj * (w + h).abs()).exp());
            let c = w - h - 2.0 * t;
            v += ai * aj * (top - knee) - ai * ramp(lj, knee, top, c) - aj * ramp(li, knee, top, c)
                + ramp(s, knee, top, c);
        }
        v
    };
    let reach = h + tail;
    integrate(inner, -reach, reach, &[-h, 0.0, h, t - h, t], panel) / t
}

/// Covariance of the second-chaos parts of Qh as simulated, i.e. of I₂ of the
/// symmetrized H^h. Equals `double_cov` at h = 0.
fn sym_double_cov(li: f64, lj: f64, t: f64, h: f64) -> f64 {
    if h == 0.0 {
        return double_cov(li, lj, t);
    }
    0.5 * double_cov(li, lj, t) + qh_cross(li, lj, t, h)
}

fn sym_double_limit(li: f64, lj: f64, h: f64) -> f64 {
    let s = li + lj;
    let d = lj - li;
    let middle = if (d * h).abs() < 1e-8 { 2.0 * h } else { 2.0 * (d * h).sinh() / d };
    2.0 / s + ((-2.0 * li * h).exp() + (-2.0 * lj * h).exp()) / s + (-s * h).exp() * middle
}

/// Like `cov_exact`, but the Qh second-chaos part is the covariance of the
/// symmetrized kernel that is actually simulated. Same as `cov_exact` for A
/// and Q, and for Qh at h = 0.
pub fn cov_exact_sym(cfg: &OUConfig, which: Which, i: usize, j: usize) -> Result<f64> {
    if which != Which::Qh {
        return cov_exact(cfg, which, i, j);
    }
    let d = cfg.lambdas.len();
    check_index(cfg, i, d)?;
    check_index(cfg, j, d)?;
    Ok(block_cov_exact_sym(cfg, which, i, j)? + block_cov_exact_sym(cfg, which, d + i, d + j)?)
}

pub fn block_cov_exact_sym(cfg: &OUConfig, which: Which, i: usize, j: usize) -> Result<f64> {
    let d = cfg.lambdas.len();
    if which == Which::Qh && i >= d && j >= d && i < 2 * d && j < 2 * d {
        return Ok(sym_double_cov(cfg.lambdas[i - d], cfg.lambdas[j - d], cfg.t, cfg.h));
    }
    block_cov_exact(cfg, which, i, j)
}

/// Limit of `cov_exact_sym`. For Qh the second-chaos entry is
/// 2/Λ + (e^{-2λᵢh} + e^{-2λⱼh})/Λ + e^{-Λh}·2sinh((λⱼ-λᵢ)h)/(λⱼ-λᵢ), Λ = λᵢ + λⱼ,
/// which is 4/Λ only at h = 0.
pub fn cov_limit_sym(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    if which != Which::Qh {
        return cov_limit(cfg, which);
    }
    let b = block_limit_sym(cfg, which)?;
    let d = cfg.lambdas.len();
    CovMatrix::from_fn(d, |i, j| b.get(i, j) + b.get(d + i, d + j))
}

pub fn block_limit_sym(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    let b = block_limit(cfg, which)?;
    if which != Which::Qh {
        return Ok(b);
    }
    let l = &cfg.lambdas;
    let d = l.len();
    CovMatrix::from_fn(2 * d, |i, j| {
        if i >= d && j >= d {
            sym_double_limit(l[i - d], l[j - d], cfg.h)
        } else {
            b.get(i, j)
        }
    })
}

pub fn cov_exact_sym_matrix(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    let d = cfg.lambdas.len();
    let v = (0..d * d).map(|k| cov_exact_sym(cfg, which, k / d, k % d)).collect::<Result<Vec<_>>>()?;
    CovMatrix::from_row_major(d, v)
}

pub fn block_cov_exact_sym_matrix(cfg: &OUConfig, which: Which) -> Result<CovMatrix> {
    let d = 2 * cfg.lambdas.len();
    let v = (0..d * d).map(|k| block_cov_exact_sym(cfg, which, k / d, k % d)).collect::<Result<Vec<_>>>()?;
    CovMatrix::from_row_major(d, v)
}

pub const RATE_QUANTITIES: [&str; 5] = [
    "l3_cubed_first",
    "l4_squared_second",
    "star21_second",
    "star11_second",
    "star11_first_second",
];

/// Norms of the Q (or Qh) kernels at each horizon for the first λ.
#[derive(Debug, Clone)]
pub struct RateTable {
    pub which: Which,
    pub lambda: f64,
    pub t_grid: Vec<f64>,
    /// values[k][q]: quantity q at horizon t_grid[k]
    pub values: Vec<[f64; 5]>,
    pub cells: Vec<usize>,
    pub slopes: [f64; 5],
}

impl RateTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,quantity,value,fitted_slope\n");
        for (k, t) in self.t_grid.iter().enumerate() {
            for (q, name) in RATE_QUANTITIES.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", fmt17(*t), name, fmt17(self.values[k][q]), fmt17(self.slopes[q])));
            }
        }
        s
    }
}

fn rate_row(cfg: &OUConfig, which: Which) -> Result<([f64; 5], usize)> {
    let grid = build_space(cfg)?;
    let lambda = cfg.lambdas[0];
    let (hs, h) = match which {
        Which::A => return Err(Error::Range("rate relations concern Q and Qh".into())),
        Which::Q => kernel_q(&grid, cfg, lambda)?,
        Which::Qh => kernel_qh(&grid, cfg, lambda, cfg.h)?,
    };
    Ok((
        [
            hs.lp_norm(3.0).powi(3),
            h.lp_norm(4.0).powi(2),
            contraction_norm(&h, &h, 2, 1)?,
            contraction_norm(&h, &h, 1, 1)?,
            contraction_norm(&hs, &h, 1, 1)?,
        ],
        grid.cells(),
    ))
}

/// Evaluates the five rate quantities on every horizon, in parallel over T.
pub fn rate_experiment(cfg: &OUConfig, t_grid: &[f64], which: Which) -> Result<RateTable> {
    if t_grid.len() < 2 {
        return Err(Error::Range("a rate fit needs at least two horizons".into()));
    }
    let rows: Vec<([f64; 5], usize)> =
        t_grid.par_iter().map(|&t| rate_row(&cfg.with_t(t), which)).collect::<Result<_>>()?;
    let mut slopes = [0.0; 5];
    for (q, s) in slopes.iter_mut().enumerate() {
        let ys: Vec<f64> = rows.iter().map(|r| r.0[q]).collect();
        *s = loglog_slope(t_grid, &ys);
    }
    Ok(RateTable {
        which,
        lambda: cfg.lambdas[0],
        t_grid: t_grid.to_vec(),
        values: rows.iter().map(|r| r.0).collect(),
        cells: rows.iter().map(|r| r.1).collect(),
        slopes,
    })
}

/// The analytic interpolation bound at one horizon.
///
/// A is compared with B directly. For Q and Qh the bound is for the 2d-vector
/// of first- and second-chaos parts against D or its Qh analogue. The
/// covariance term uses the exact covariance rather than grid quadrature. For
/// Qh both target and covariance are those of the symmetrized kernel.
pub fn d3_at(cfg: &OUConfig, which: Which) -> Result<BoundReport> {
    let grid = build_space(cfg)?;
    let (list, c, exact) = match which {
        Which::A => (functionals(&grid, cfg, which)?, cov_limit(cfg, which)?, cov_exact_matrix(cfg, which)?),
        _ => (
            block_kernels(&grid, cfg, which)?
                .into_iter()
                .map(ChaosExpansion::single)
                .collect::<Result<Vec<_>>>()?,
            block_limit_sym(cfg, which)?,
            block_cov_exact_sym_matrix(cfg, which)?,
        ),
    };
    assemble_d3(&list, &c, Mode::Analytic, &AssembleOptions { cov_override: Some(exact) })
}

#[derive(Debug, Clone)]
pub struct DecayFit {
    pub t_grid: Vec<f64>,
    pub d3: Vec<f64>,
    pub slope: f64,
    /// Mean of d3·√T over the grid: the constant in d3 ≈ const/√T.
    pub constant: f64,
}

pub fn d3_decay(cfg: &OUConfig, t_grid: &[f64], which: Which) -> Result<DecayFit> {
    if t_grid.len() < 2 {
        return Err(Error::Range("a rate fit needs at least two horizons".into()));
    }
    let d3: Vec<f64> = t_grid
        .par_iter()
        .map(|&t| d3_at(&cfg.with_t(t), which).map(|r| r.d3_bound))
        .collect::<Result<_>>()?;
    let constant = t_grid.iter().zip(&d3).map(|(t, v)| v * t.sqrt()).sum::<f64>() / t_grid.len() as f64;
    Ok(DecayFit { t_grid: t_grid.to_vec(), slope: loglog_slope(t_grid, &d3), d3, constant })
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub which: Which,
    pub config: OUConfig,
    pub cells: usize,
    pub dx: f64,
    pub truncation_mass: f64,
    pub cov_exact: CovMatrix,
    pub cov_limit: CovMatrix,
    /// The Qh limit built from the unsymmetrized H^h (c²e^{-Λh} + 4/Λ).
    pub cov_limit_unsymmetrized: Option<CovMatrix>,
    pub bound: BoundReport,
    pub empirical: EmpiricalCov,
    /// Squared L² mass of the dropped kernel diagonals, per functional.
    pub discarded_sq: Vec<f64>,
    pub discrepancy: Discrepancy,
    /// (skewness, kurtosis) of each simulated functional.
    pub shape: Vec<(f64, f64)>,
    pub decay: Option<DecayFit>,
}

/// Kernels, bound, simulation and (optionally) the bound's decay over `t_grid`.
pub fn clt_demo(cfg: &OUConfig, which: Which, t_grid: Option<&[f64]>) -> Result<DemoReport> {
    let grid = build_space(cfg)?;
    let list = functionals(&grid, cfg, which)?;
    let bound = d3_at(cfg, which)?;
    let limit = cov_limit_sym(cfg, which)?;
    let samples = simulate_functionals(&list, cfg.reps, cfg.seed)?;
    let empirical = empirical_cov(&samples)?;
    let family = TestFunctionFamily::new(
        list.len(),
        TestFunctionFamily::DEFAULT_SIZE,
        TestFunctionFamily::DEFAULT_SEED,
    );
    let discrepancy = empirical_discrepancy(&samples, &limit, &family)?;
    let shape = samples.values.iter().map(|v| skewness_kurtosis(v)).collect();
    let decay = t_grid.map(|g| d3_decay(cfg, g, which)).transpose()?;
    Ok(DemoReport {
        which,
        config: cfg.clone(),
        cells: grid.cells(),
        dx: grid.dx,
        truncation_mass: grid.truncation_mass,
        cov_exact: cov_exact_sym_matrix(cfg, which)?,
        cov_limit: limit,
        cov_limit_unsymmetrized: (which == Which::Qh).then(|| cov_limit(cfg, which)).transpose()?,
        bound,
        empirical,
        discarded_sq: samples.discarded_sq.clone(),
        discrepancy,
        shape,
        decay,
    })
}

fn toml_list(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|x| fmt17(*x)).collect();
    format!("[{}]", v.join(", "))
}

impl OUConfig {
    pub fn to_toml(&self) -> String {
        let atoms: Vec<String> =
            self.mark_atoms.iter().map(|(u, m)| format!("[{}, {}]", fmt17(*u), fmt17(*m))).collect();
        let mut s = format!(
            "lambdas = {}\nT = {}\nh = {}\nx_min = {}\nnx = {}\ncells_per_unit = {}\nmark_atoms = [{}]\nseed = {}\nreps = {}\n",
            toml_list(&self.lambdas),
            fmt17(self.t),
            fmt17(self.h),
            fmt17(self.x_min()),
            self.nx(),
            fmt17(self.cells_per_unit),
            atoms.join(", "),
            self.seed,
            self.reps
        );
        s.push_str(&format!("c_nu_sq = {}\n", fmt17(self.c_nu_sq())));
        s
    }
}

impl DemoReport {
    pub fn to_toml(&self) -> String {
        let mut s = format!("which = \"{}\"\n", self.which);
        s.push_str(&format!("cells = {}\ndx = {}\ntruncation_mass = {}\n", self.cells, fmt17(self.dx), fmt17(self.truncation_mass)));
        s.push_str(&format!("cov_exact = {}\n", toml_list(self.cov_exact.entries())));
        s.push_str(&format!("cov_limit = {}\n", toml_list(self.cov_limit.entries())));
        if let Some(u) = &self.cov_limit_unsymmetrized {
            s.push_str(&format!("cov_limit_unsymmetrized = {}\n", toml_list(u.entries())));
        }
        s.push_str(&format!("cov_empirical = {}\n", toml_list(self.empirical.cov.entries())));
        s.push_str(&format!("cov_empirical_se = {}\n", toml_list(&self.empirical.se)));
        s.push_str(&format!("discarded_diagonal_sq = {}\n", toml_list(&self.discarded_sq)));
        let skew: Vec<f64> = self.shape.iter().map(|x| x.0).collect();
        let kurt: Vec<f64> = self.shape.iter().map(|x| x.1).collect();
        s.push_str(&format!("skewness = {}\nkurtosis = {}\n", toml_list(&skew), toml_list(&kurt)));
        s.push_str(&format!(
            "discrepancy = {}\ndiscrepancy_se = {}\ndiscrepancy_note = \"{}\"\n",
            fmt17(self.discrepancy.value),
            fmt17(self.discrepancy.se),
            crate::simulate::DISCREPANCY_NOTE
        ));
        if let Some(d) = &self.decay {
            s.push_str(&format!(
                "decay_T = {}\ndecay_d3 = {}\ndecay_slope = {}\ndecay_constant = {}\n",
                toml_list(&d.t_grid),
                toml_list(&d.d3),
                fmt17(d.slope),
                fmt17(d.constant)
            ));
        }
        s.push_str("\n[bound]\n");
        s.push_str(&self.bound.to_toml());
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_toml());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lambdas: &[f64], t: f64) -> OUConfig {
        OUConfig::new(lambdas.to_vec(), t)
    }

    #[test]
    fn space_size_and_mass() {
        let mut c = cfg(&[1.0], 10.0);
        c.nx = Some(100);
        let g = build_space(&c).unwrap();
        assert_eq!(g.cells(), 200);
        assert!((g.space.total_mass() - (10.0 + 20.0)).abs() < 1e-10);
    }

    #[test]
    fn rejects_unnormalized_marks() {
        let mut c = cfg(&[1.0], 10.0);
        c.mark_atoms = vec![(1.0, 0.7)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn a_kernel_limits() {
        let (l, t) = (2.0, 50.0);
        let near = a_value(l, t, 1.0, t - 1e-9);
        assert!(near.abs() < 1e-8);
        let x = t - 0.3;
        let want = (2.0 * l / t).sqrt() * (1.0 - (-l * 0.3f64).exp()) / l;
        assert!((a_value(l, t, 1.0, x) - want).abs() < 1e-15);
        let big = a_value(1.0, 1e4, 1.0, 0.0);
        assert!((big - (2.0f64 / 1e4).sqrt()).abs() < 1e-12);
        // x <= 0: scales like 1/√T once exp(-λT) is negligible
        assert!((a_value(1.0, 100.0, 1.0, -1.0) / a_value(1.0, 400.0, 1.0, -1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn h_kernels_on_negative_axis() {
        let (l, t, x): (f64, f64, f64) = (0.7, 30.0, -2.0);
        let want = (2.0 * l * x).exp() * (1.0 - (-2.0 * l * t).exp()) / t;
        assert!((h_star_value(l, t, -1.0, x) - want).abs() < 1e-16);
        assert!((h_value(l, t, 1.0, x, -1.0, x) + want).abs() < 1e-16);
        assert_eq!(h_value(l, t, 1.0, 1.0, 1.0, 3.0), h_value(l, t, 1.0, 3.0, 1.0, 1.0));
    }

    #[test]
    fn shifted_kernels() {
        let (l, t) = (1.3, 20.0);
        for &(x, y) in &[(-1.0, 2.0), (3.0, 0.5), (5.0, 5.5)] {
            assert_eq!(h_shift_value(l, t, 0.0, 1.0, x, -1.0, y), h_value(l, t, 1.0, x, -1.0, y));
            assert!((h_shift_value(l, t, 0.8, 1.0, x, 1.0, y) - h_value(l, t, 1.0, x, 1.0, y - 0.8)).abs() < 1e-12);
        }
        assert!(h_star_shift_value(l, t, 40.0, 1.0, 1.0) < 1e-20);
        let mut c = cfg(&[1.0], 8.0);
        c.cells_per_unit = 2.0;
        let g = build_space(&c).unwrap();
        let (a, b) = kernel_q(&g, &c, 1.0).unwrap();
        let (ah, bh) = kernel_qh(&g, &c, 1.0, 0.0).unwrap();
        assert!(a.max_abs_diff(&ah).unwrap() < 1e-12);
        assert!(b.max_abs_diff(&bh).unwrap() < 1e-12);
        assert!(b.is_symmetric());
    }

    #[test]
    fn variance_normalization_refines() {
        // ‖f_t‖² = 1 for the stationary process; check the grid quadrature converges
        let err = |cpu: f64| {
            let mut c = cfg(&[1.0], 1.0);
            c.cells_per_unit = cpu;
            let g = build_space(&c).unwrap();
            let f: Vec<f64> = (0..g.cells())
                .map(|z| if g.x[z] <= 0.0 { 2f64.sqrt() * g.u[z] * g.x[z].exp() } else { 0.0 })
                .collect();
            (Kernel::new(g.space.clone(), 1, f).unwrap().norm_sq() - 1.0).abs()
        };
        let (e1, e2) = (err(4.0), err(8.0));
        assert!(e1 < 0.02 && e2 < e1);
    }

    #[test]
    fn covariance_limits() {
        let c = cfg(&[2.0, 2.0], 1e9);
        assert!((cov_exact(&c, Which::A, 0, 1).unwrap() - 1.0).abs() < 1e-8);
        let c = cfg(&[1.0, 1.0], 1e9);
        assert!((cov_exact(&c, Which::Q, 0, 1).unwrap() - 3.0).abs() < 1e-8);
        let b = cov_limit(&cfg(&[1.0, 4.0], 10.0), Which::A).unwrap();
        assert_eq!(b.entries(), &[2.0, 1.0, 1.0, 0.5]);
        assert!(!b.is_positive_definite() && b.is_nonneg_definite());
        let c = cfg(&[1.0, 3.0], 10.0);
        assert_eq!(cov_limit(&c, Which::Q).unwrap(), cov_limit(&c, Which::Qh).unwrap());
        for t in [1.0, 10.0, 100.0] {
            let c = cfg(&[1.0, 3.0], t);
            assert_eq!(cov_exact(&c, Which::Q, 0, 1).unwrap(), cov_exact(&c, Which::Qh, 0, 1).unwrap());
        }
        assert!(cov_exact(&c, Which::Q, 2, 0).is_err());
    }

    #[test]
    fn block_sums_to_functional_covariance() {
        let mut c = cfg(&[0.5, 2.0], 40.0);
        c.h = 0.3;
        let d = c.lambdas.len();
        for which in [Which::Q, Which::Qh] {
            for i in 0..d {
                for j in 0..d {
                    let sum = block_cov_exact(&c, which, i, j).unwrap() + block_cov_exact(&c, which, d + i, d + j).unwrap();
                    assert!((sum - cov_exact(&c, which, i, j).unwrap()).abs() < 1e-14);
                }
            }
            let dl = block_limit(&c, which).unwrap();
            assert_eq!(dl.get(0, d), 0.0);
        }
    }

    #[test]
    fn exact_covariance_matches_fine_grid() {
        // closed forms agree with grid quadrature up to mesh error
        let mut c = cfg(&[1.0, 2.0], 6.0);
        c.cells_per_unit = 40.0;
        let g = build_space(&c).unwrap();
        let a0 = kernel_a(&g, &c, 1.0).unwrap();
        let a1 = kernel_a(&g, &c, 2.0).unwrap();
        let e = cov_exact(&c, Which::A, 0, 1).unwrap();
        assert!((a0.inner_product(&a1).unwrap() - e).abs() < 1e-3 * e);
        let (s0, _) = kernel_q(&g, &c, 1.0).unwrap();
        let (s1, _) = kernel_q(&g, &c, 2.0).unwrap();
        let e = block_cov_exact(&c, Which::Q, 0, 1).unwrap();
        assert!((s0.inner_product(&s1).unwrap() - e).abs() < 1e-3 * e);
    }

    #[test]
    fn symmetrized_qh_reduces_at_zero_shift() {
        let c = cfg(&[1.0, 3.0], 25.0);
        for which in [Which::A, Which::Q, Which::Qh] {
            assert_eq!(cov_limit_sym(&c, which).unwrap(), cov_limit(&c, which).unwrap());
            assert_eq!(cov_exact_sym(&c, which, 0, 1).unwrap(), cov_exact(&c, which, 0, 1).unwrap());
        }
        // quadrature path against the closed form
        for (li, lj, t) in [(1.0, 3.0, 25.0), (2.0, 2.0, 7.0), (0.5, 4.0, 60.0)] {
            let q = qh_cross(li, lj, t, 0.0);
            assert!((q - 0.5 * double_cov(li, lj, t)).abs() < 1e-11, "{li} {lj} {t}: {q}");
        }
        assert!((sym_double_limit(1.5, 1.5, 0.4) - sym_double_limit(1.5, 1.5 + 1e-10, 0.4)).abs() < 1e-8);
    }

    #[test]
    fn symmetrized_qh_matches_fine_grid() {
        let mut c = cfg(&[1.0, 2.0], 5.0);
        c.h = 0.6;
        c.cells_per_unit = 16.0;
        let g = build_space(&c).unwrap();
        let (_, b0) = kernel_qh(&g, &c, 1.0, c.h).unwrap();
        let (_, b1) = kernel_qh(&g, &c, 2.0, c.h).unwrap();
        let grid = 2.0 * b0.inner_product(&b1).unwrap();
        let sym = block_cov_exact_sym(&c, Which::Qh, 2, 3).unwrap();
        let raw = block_cov_exact(&c, Which::Qh, 2, 3).unwrap();
        assert!((grid - sym).abs() < 0.01 * sym, "grid {grid} vs {sym}");
        assert!((grid - raw).abs() > 0.05 * raw, "grid {grid} vs unsymmetrized {raw}");
    }

    #[test]
    fn symmetrized_qh_converges_like_one_over_t() {
        let mut c = cfg(&[1.0, 2.5], 1.0);
        c.h = 0.7;
        let lim = block_limit_sym(&c, Which::Qh).unwrap();
        let gap = |t: f64| {
            let c = c.with_t(t);
            (0..2).flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| (block_cov_exact_sym(&c, Which::Qh, 2 + i, 2 + j).unwrap() - lim.get(2 + i, 2 + j)).abs())
                .fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(50.0), gap(500.0));
        assert!(g2 < 1e-2 && (g1 / g2 - 10.0).abs() < 0.5, "{g1} {g2}");
        // Gaussian special case: 1/λ + e^{-2λh}(1/λ + 2h)
        let (l, h) = (1.3, 0.7);
        let want = 1.0 / l + (-2.0 * l * h as f64).exp() * (1.0 / l + 2.0 * h);
        assert!((sym_double_limit(l, l, h) - want).abs() < 1e-14);
    }

    #[test]
    fn config_round_trip() {
        let text = "lambdas = [1.0, 4.0]\nT = 50.0\nmark_atoms = [[-1.0, 0.5], [1.0, 0.5]]\n";
        let c = OUConfig::from_toml(text).unwrap();
        assert_eq!(c.lambdas, vec![1.0, 4.0]);
        assert_eq!(c.seed, DEFAULT_SEED);
        assert!(OUConfig::from_toml("lambdas = [1.0]\nbogus = 1\n").is_err());
    }
}
