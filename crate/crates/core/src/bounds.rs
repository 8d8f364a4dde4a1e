//! Malliavin-Stein (d₂) and interpolation (d₃) bounds assembled from
//! contraction norms, plus the covariance-matrix functionals they need.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::algebra::{contraction_norm, g_hat_constant, g_hat_operator, star_contract, symmetrize};
use crate::chaos::ChaosExpansion;
use crate::error::{Error, Result};
use crate::simulate::{map_blocks, mean_se, project_chaos};
use crate::space::{Kernel, Tolerance};
use crate::util::{binomial, factorial, fmt17};

/// Symmetric d x d matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl CovMatrix {
    /// Rejects input that is not symmetric to 1e-12 and averages away the rest.
    pub fn from_row_major(d: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::Dimension(format!("{} entries for a {d}x{d} matrix", entries.len())));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dimension("non-finite covariance entry".into()));
        }
        let mut e = entries;
        for i in 0..d {
            for j in i + 1..d {
                let (a, b) = (e[i * d + j], e[j * d + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Dimension(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
                let avg = 0.5 * (a + b);
                e[i * d + j] = avg;
                e[j * d + i] = avg;
            }
        }
        Ok(CovMatrix { d, entries: e })
    }

    pub fn from_fn(d: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::from_row_major(d, (0..d * d).map(|k| f(k / d, k % d)).collect())
    }

    pub fn identity(d: usize) -> Self {
        Self::diagonal(&vec![1.0; d])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        let mut entries = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            entries[i * d + i] = *v;
        }
        CovMatrix { d, entries }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.d, self.d), &self.entries).expect("shape")
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        jacobi_eigenvalues(&self.entries, self.d)
    }

    /// Largest singular value, i.e. largest |eigenvalue|.
    pub fn operator_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// ‖C⁻¹‖_op = 1 / smallest eigenvalue.
    pub fn inverse_operator_norm(&self) -> Result<f64> {
        if !self.is_positive_definite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(1.0 / self.eigenvalues()[0])
    }

    pub fn is_nonneg_definite(&self) -> bool {
        let ev = self.eigenvalues();
        let scale = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        self.d == 0 || ev[0] >= -1e-10 * scale.max(1.0)
    }

    /// Smallest eigenvalue above 1e-10 times the operator norm.
    pub fn is_positive_definite(&self) -> bool {
        let ev = self.eigenvalues();
        if self.d == 0 {
            return false;
        }
        let scale = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        ev[0] > 1e-10 * scale
    }

    /// Hilbert-Schmidt (Frobenius) distance.
    pub fn hs_distance(&self, other: &CovMatrix) -> Result<f64> {
        if self.d != other.d {
            return Err(Error::Dimension(format!("{} vs {}", self.d, other.d)));
        }
        Ok(self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }

    pub fn quadratic_form(&self, a: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += a[i] * self.entries[i * d + j] * a[j];
            }
        }
        s
    }

    /// Lower Cholesky factor, row-major, for positive definite matrices.
    pub fn cholesky(&self) -> Result<Vec<f64>> {
        let d = self.d;
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = self.entries[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        Ok(l)
    }

    /// (‖C⁻¹‖_op ‖C‖_op^{1/2}, (√(2π)/8) ‖C⁻¹‖_op^{3/2} ‖C‖_op).
    pub fn stein_constants(&self) -> Result<(f64, f64)> {
        let inv = self.inverse_operator_norm()?;
        let op = self.operator_norm();
        Ok((inv * op.sqrt(), (2.0 * PI).sqrt() / 8.0 * inv.powf(1.5) * op))
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass is below 1e-12 relative.
fn jacobi_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum();
        if off <= 1e-24 * total || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Q(C, K) ‖C - K‖_HS with Q = min over both matrices of ‖M⁻¹‖_op ‖M‖_op^{1/2}.
pub fn gaussian_wasserstein(c: &CovMatrix, k: &CovMatrix) -> Result<f64> {
    let qc = c.inverse_operator_norm()? * c.operator_norm().sqrt();
    let qk = k.inverse_operator_norm()? * k.operator_norm().sqrt();
    Ok(qc.min(qk) * c.hs_distance(k)?)
}

/// The three nested estimates of E[(a - ⟨DF, -DL⁻¹G⟩)²] for F = I_p(f), G = I_q(g).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLevels {
    /// Exact value from the orthogonal decomposition.
    pub level1: f64,
    /// After the Cauchy-Schwarz step on the Ĝ coefficients.
    pub level2: f64,
    /// After bounding each symmetrized contraction by products of self-contractions.
    pub level3: f64,
}

fn pair_k_range(p: usize, q: usize) -> std::ops::RangeInclusive<usize> {
    p.abs_diff(q).max(1)..=p + q - 2
}

/// The deterministic part (E[FG] - a)² with E[FG] = p!⟨f,g⟩ 1{p=q}.
fn deterministic_part(f: &Kernel, g: &Kernel, a: f64, cov: Option<f64>) -> Result<f64> {
    let (p, q) = (f.order(), g.order());
    let k = match cov {
        Some(c) => c,
        None if p == q => factorial(p) as f64 * f.inner_product(g)?,
        None => 0.0,
    };
    Ok((k - a).powi(2))
}

/// Exact E[(a - ⟨DF, -DL⁻¹G⟩)²], with an optional replacement for E[FG].
pub fn pair_term_exact(f: &Kernel, g: &Kernel, a: f64, cov: Option<f64>) -> Result<f64> {
    let (p, q) = (f.order(), g.order());
    if p == 0 || q == 0 {
        return Err(Error::Range("pair terms need kernels of order at least 1".into()));
    }
    let mut sum = 0.0;
    for k in pair_k_range(p, q) {
        sum += factorial(k) as f64 * g_hat_operator(f, g, k)?.norm_sq();
    }
    Ok(deterministic_part(f, g, a, cov)? + (p * p) as f64 * sum)
}

pub fn pair_term_bound(f: &Kernel, g: &Kernel, a: f64) -> Result<PairLevels> {
    let (p, q) = (f.order(), g.order());
    let level1 = pair_term_exact(f, g, a, None)?;
    let det = deterministic_part(f, g, a, None)?;
    let (mut sum2, mut sum3) = (0.0, 0.0);
    for k in pair_k_range(p, q) {
        let ck = g_hat_constant(p, q, k);
        let kf = factorial(k) as f64;
        let (mut s2, mut s3) = (0.0, 0.0);
        for t in 1..=p.min(q) {
            let s = (p + q) as i64 - k as i64 - t as i64;
            if s < 1 || s > t as i64 {
                continue;
            }
            let s = s as usize;
            s2 += symmetrize(&star_contract(f, g, t, s)?)?.norm_sq();
            s3 += contraction_norm(f, f, p - s, p - t)? * contraction_norm(g, g, q - s, q - t)?;
        }
        sum2 += kf * ck * s2;
        sum3 += kf * ck * s3;
    }
    let pp = (p * p) as f64;
    Ok(PairLevels { level1, level2: det + pp * sum2, level3: det + pp * sum3 })
}

/// Upper bound on ∫μ(dz) E[(Σ|D_zF_i|)² (Σ|D_zL⁻¹F_i|)] for F_i = I_{q_i}(f_i).
pub fn third_moment_term(kernels: &[&Kernel]) -> Result<f64> {
    let qstar = kernels
        .iter()
        .map(|f| f.order())
        .min()
        .ok_or_else(|| Error::Dimension("empty kernel list".into()))?;
    if qstar == 0 {
        return Err(Error::Range("third moment term needs orders >= 1".into()));
    }
    let d = kernels.len() as f64;
    let mut total = 0.0;
    for f in kernels {
        let q = f.order();
        let lead = (q * q * q) as f64 * (factorial(q - 1) as f64 * f.norm_sq()).sqrt();
        let mut inner = 0.0;
        for b in 1..=q {
            for a in 0..b {
                if a + b < 1 || a + b > 2 * q - 1 {
                    continue;
                }
                let qi = q as i64;
                let coef = (factorial(a + b - 1) as f64).sqrt()
                    * factorial(q - a - 1) as f64
                    * (binomial(qi - 1, qi - 1 - a as i64) as f64).powi(2)
                    * binomial(qi - 1 - a as i64, qi - b as i64) as f64;
                if coef != 0.0 {
                    inner += coef * contraction_norm(f, f, b, a)?;
                }
            }
        }
        total += lead * inner;
    }
    Ok(d * d / qstar as f64 * total)
}

/// ∫ (Σ_i |h_i|)³ dμ, the cubic term for first-chaos vectors.
pub fn first_chaos_cubic(h: &[&Kernel]) -> Result<f64> {
    let first = h.first().ok_or_else(|| Error::Dimension("empty kernel list".into()))?;
    let w = first.space().weights();
    let mut total = 0.0;
    for (z, wz) in w.iter().enumerate() {
        let s: f64 = h.iter().map(|k| k.values()[z].abs()).sum();
        total += wz * s * s * s;
    }
    Ok(total)
}

fn first_chaos_parts(h: &[&Kernel], c: &CovMatrix) -> Result<(f64, f64)> {
    let d = h.len();
    if d != c.dim() {
        return Err(Error::Dimension(format!("{d} kernels for a {}x{} matrix", c.dim(), c.dim())));
    }
    if h.iter().any(|k| k.order() != 1) {
        return Err(Error::Range("first-chaos corollaries need order-1 kernels".into()));
    }
    let k = CovMatrix::from_fn(d, |i, j| h[i].inner_product(h[j]).unwrap_or(f64::NAN))?;
    let cubes: f64 = h.iter().map(|k| k.lp_norm(3.0).powi(3)).sum();
    Ok((c.hs_distance(&k)?, (d * d) as f64 * cubes))
}

/// ‖C⁻¹‖‖C‖^{1/2} ‖C - K‖_HS + (d²√(2π)/8) ‖C⁻¹‖^{3/2} ‖C‖ Σ∫|h_i|³.
pub fn first_chaos_d2(h: &[&Kernel], c: &CovMatrix) -> Result<f64> {
    let (hs, cubic) = first_chaos_parts(h, c)?;
    let (s1, s2) = c.stein_constants()?;
    Ok(s1 * hs + s2 * cubic)
}

/// (1/2) ‖C - K‖_HS + (d²/4) Σ∫|h_i|³.
pub fn first_chaos_d3(h: &[&Kernel], c: &CovMatrix) -> Result<f64> {
    let (hs, cubic) = first_chaos_parts(h, c)?;
    Ok(0.5 * hs + 0.25 * cubic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Analytic,
    MonteCarlo { reps: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub mode: Mode,
    pub d: usize,
    /// Σ_{i,j} E[(C(i,j) - ⟨DF_i, -DL⁻¹F_j⟩)²].
    pub term_sq_sum: f64,
    /// ∫μ(dz) E[(Σ|D_zF_i|)² (Σ|D_zL⁻¹F_i|)], or its upper bound in analytic mode.
    pub cubic_term: f64,
    /// Monte Carlo standard errors of the two terms.
    pub term_se: Option<f64>,
    pub cubic_se: Option<f64>,
    /// Present iff C is positive definite.
    pub stein_constants: Option<(f64, f64)>,
    pub d2_bound: Option<f64>,
    pub d3_bound: f64,
    /// Delta-method standard error of `d3_bound` in Monte Carlo mode.
    pub d3_se: Option<f64>,
    /// Row-major d x d pair terms.
    pub per_pair: Vec<f64>,
}

impl BoundReport {
    fn finish(
        mode: Mode,
        c: &CovMatrix,
        per_pair: Vec<f64>,
        cubic_term: f64,
        term_se: Option<f64>,
        cubic_se: Option<f64>,
    ) -> Self {
        let term_sq_sum: f64 = per_pair.iter().sum();
        let stein_constants = c.stein_constants().ok();
        let d2_bound = stein_constants.map(|(a, b)| a * term_sq_sum.sqrt() + b * cubic_term);
        BoundReport {
            mode,
            d: c.dim(),
            term_sq_sum,
            cubic_term,
            term_se,
            cubic_se,
            stein_constants,
            d2_bound,
            d3_bound: 0.5 * term_sq_sum.sqrt() + 0.25 * cubic_term,
            d3_se: term_se.zip(cubic_se).map(|(a, b)| {
                let t = if term_sq_sum > 0.0 { 0.25 * a / term_sq_sum.sqrt() } else { 0.0 };
                t + 0.25 * b
            }),
            per_pair,
        }
    }

    /// One row per (i, j) pair term plus summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,i,j,value\n");
        for i in 0..self.d {
            for j in 0..self.d {
                s.push_str(&format!("pair,{},{},{}\n", i + 1, j + 1, fmt17(self.per_pair[i * self.d + j])));
            }
        }
        s.push_str(&format!("term_sq_sum,,,{}\n", fmt17(self.term_sq_sum)));
        s.push_str(&format!("cubic_term,,,{}\n", fmt17(self.cubic_term)));
        s.push_str(&format!("d3_bound,,,{}\n", fmt17(self.d3_bound)));
        if let Some(d2) = self.d2_bound {
            s.push_str(&format!("d2_bound,,,{}\n", fmt17(d2)));
        }
        s
    }

    /// TOML body (without a trailing config section).
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        match self.mode {
            Mode::Analytic => s.push_str("mode = \"analytic\"\n"),
            Mode::MonteCarlo { reps, seed } => {
                s.push_str(&format!("mode = \"montecarlo\"\nreps = {reps}\nseed = {seed}\n"))
            }
        }
        s.push_str(&format!("d = {}\n", self.d));
        s.push_str(&format!("term_sq_sum = {}\n", fmt17(self.term_sq_sum)));
        s.push_str(&format!("cubic_term = {}\n", fmt17(self.cubic_term)));
        if let Some(se) = self.term_se {
            s.push_str(&format!("term_sq_sum_se = {}\n", fmt17(se)));
        }
        if let Some(se) = self.cubic_se {
            s.push_str(&format!("cubic_term_se = {}\n", fmt17(se)));
        }
        s.push_str(&format!("d3_bound = {}\n", fmt17(self.d3_bound)));
        if let Some(se) = self.d3_se {
            s.push_str(&format!("d3_bound_se = {}\n", fmt17(se)));
        }
        if let (Some(d2), Some((a, b))) = (self.d2_bound, self.stein_constants) {
            s.push_str(&format!("d2_bound = {}\n", fmt17(d2)));
            s.push_str(&format!("stein_constants = [{}, {}]\n", fmt17(a), fmt17(b)));
        }
        let pp: Vec<String> = self.per_pair.iter().map(|x| fmt17(*x)).collect();
        s.push_str(&format!("per_pair = [{}]\n", pp.join(", ")));
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssembleOptions {
    /// Replaces E[F_i F_j] in the deterministic part of each analytic pair term.
    pub cov_override: Option<CovMatrix>,
}

fn single_kernel(f: &ChaosExpansion) -> Option<&Kernel> {
    (f.terms().len() == 1 && f.mean() == 0.0).then(|| &f.terms()[0])
}

fn check_dims(list: &[ChaosExpansion], c: &CovMatrix) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Dimension("empty functional list".into()));
    }
    if list.len() != c.dim() {
        return Err(Error::Dimension(format!(
            "{} functionals for a {}x{} matrix",
            list.len(),
            c.dim(),
            c.dim()
        )));
    }
    let tol = Tolerance::default();
    if let Some(f) = list.iter().find(|f| !f.is_centered(&tol)) {
        return Err(Error::NotCentered(f.mean()));
    }
    Ok(())
}

/// Interpolation bound d₃ ≤ (1/2)√(term_sq_sum) + (1/4) cubic_term.
pub fn assemble_d3(
    list: &[ChaosExpansion],
    c: &CovMatrix,
    mode: Mode,
    opts: &AssembleOptions,
) -> Result<BoundReport> {
    check_dims(list, c)?;
    match mode {
        Mode::Analytic => assemble_analytic(list, c, opts),
        Mode::MonteCarlo { reps, seed } => assemble_montecarlo(list, c, reps, seed),
    }
}

/// Malliavin-Stein bound d₂, defined when C is positive definite.
pub fn assemble_d2(
    list: &[ChaosExpansion],
    c: &CovMatrix,
    mode: Mode,
    opts: &AssembleOptions,
) -> Result<BoundReport> {
    if !c.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    assemble_d3(list, c, mode, opts)
}

fn assemble_analytic(list: &[ChaosExpansion], c: &CovMatrix, opts: &AssembleOptions) -> Result<BoundReport> {
    let kernels: Vec<&Kernel> = list
        .iter()
        .map(|f| {
            single_kernel(f).ok_or_else(|| {
                Error::Range("analytic mode needs every component to be a single multiple integral".into())
            })
        })
        .collect::<Result<_>>()?;
    let d = kernels.len();
    if let Some(k) = &opts.cov_override {
        if k.dim() != d {
            return Err(Error::Dimension("covariance override has the wrong size".into()));
        }
    }
    let mut per_pair = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let cov = opts.cov_override.as_ref().map(|k| k.get(i, j));
            per_pair[i * d + j] = pair_term_exact(kernels[i], kernels[j], c.get(i, j), cov)?;
        }
    }
    let cubic = if kernels.iter().all(|k| k.order() == 1) {
        first_chaos_cubic(&kernels)?
    } else {
        third_moment_term(&kernels)?
    };
    Ok(BoundReport::finish(Mode::Analytic, c, per_pair, cubic, None, None))
}

/// Per replication: D_zF and -D_zL⁻¹F for every cell, as reps x m arrays.
fn gradient_paths(f: &ChaosExpansion, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (reps, m) = x.dim();
    let mut d = Array2::<f64>::zeros((reps, m));
    let mut g = Array2::<f64>::zeros((reps, m));
    for fk in f.terms() {
        let p = fk.order();
        // S[r, z] = I_{p-1}(f(z, ·)) on replication r
        let s: Array2<f64> = match p {
            1 => {
                let row = ArrayView2::from_shape((1, m), fk.values()).expect("shape");
                row.broadcast((reps, m)).expect("broadcast").to_owned()
            }
            2 => {
                let fm = ArrayView2::from_shape((m, m), fk.values()).expect("shape");
                x.dot(&fm.t())
            }
            _ => {
                let mut s = Array2::<f64>::zeros((reps, m));
                for z in 0..m {
                    let slice = fk.slice(z)?;
                    let fm = ArrayView2::from_shape((m.pow(p as u32 - 2), m), slice.values())
                        .expect("shape");
                    let y = x.dot(&fm.t());
                    for r in 0..reps {
                        let xr = x.row(r);
                        let mut cur: Vec<f64> = y.row(r).to_vec();
                        while cur.len() > 1 {
                            cur = cur
                                .chunks_exact(m)
                                .map(|c| c.iter().zip(xr.iter()).map(|(a, b)| a * b).sum())
                                .collect();
                        }
                        s[[r, z]] = cur[0];
                    }
                }
                s
            }
        };
        d.scaled_add(p as f64, &s);
        g += &s;
    }
    Ok((d, g))
}

struct McBlock {
    pair_sums: Vec<f64>,
    sq: Vec<f64>,
    cubic: Vec<f64>,
}

fn assemble_montecarlo(list: &[ChaosExpansion], c: &CovMatrix, reps: usize, seed: u64) -> Result<BoundReport> {
    let space = list[0].space().clone();
    let projected: Vec<ChaosExpansion> = list
        .iter()
        .map(|f| Ok(project_chaos(f)?.expansion))
        .collect::<Result<_>>()?;
    let d = list.len();
    let w = space.weights().to_vec();
    let blocks = map_blocks(&space, reps, seed, |batch| {
        let x = batch.centered();
        let paths: Vec<(Array2<f64>, Array2<f64>)> =
            projected.iter().map(|f| gradient_paths(f, x)).collect::<Result<_>>()?;
        let n = batch.replications();
        let mut out = McBlock { pair_sums: vec![0.0; d * d], sq: Vec::with_capacity(n), cubic: Vec::with_capacity(n) };
        for r in 0..n {
            let mut total = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let di = paths[i].0.row(r);
                    let gj = paths[j].1.row(r);
                    let inner: f64 = (0..w.len()).map(|z| w[z] * di[z] * gj[z]).sum();
                    let e = (c.get(i, j) - inner).powi(2);
                    out.pair_sums[i * d + j] += e;
                    total += e;
                }
            }
            out.sq.push(total);
            let mut cub = 0.0;
            for (z, wz) in w.iter().enumerate() {
                let a: f64 = paths.iter().map(|p| p.0[[r, z]].abs()).sum();
                let b: f64 = paths.iter().map(|p| p.1[[r, z]].abs()).sum();
                cub += wz * a * a * b;
            }
            out.cubic.push(cub);
        }
        Ok(out)
    })?;
    let mut pair = vec![0.0; d * d];
    let mut sq = Vec::with_capacity(reps);
    let mut cubic = Vec::with_capacity(reps);
    for b in blocks {
        for (a, v) in pair.iter_mut().zip(&b.pair_sums) {
            *a += v;
        }
        sq.extend(b.sq);
        cubic.extend(b.cubic);
    }
    let per_pair = pair.iter().map(|s| s / reps as f64).collect();
    let (_, term_se) = mean_se(&sq);
    let (cubic_mean, cubic_se) = mean_se(&cubic);
    Ok(BoundReport::finish(
        Mode::MonteCarlo { reps, seed },
        c,
        per_pair,
        cubic_mean,
        Some(term_se),
        Some(cubic_se),
    ))
}

/// S₁..S₆ and the two d₃ estimates for (I₁(g_1..g_m), I₂(h_1..h_n)).
#[derive(Debug, Clone)]
pub struct SingleDoubleBound {
    pub s: [f64; 6],
    pub first: f64,
    pub second: f64,
}

/// Norms of a second-order kernel that the single/double bound consumes.
struct DoubleNorms {
    norm: f64,
    l4_sq: f64,
    /// ‖h ⋆₁⁰ h‖ = ‖h ⋆₂¹ h‖
    star10: f64,
    star11: f64,
}

pub fn single_double_bound(g: &[&Kernel], h: &[&Kernel], c: &CovMatrix) -> Result<SingleDoubleBound> {
    let (m, n) = (g.len(), h.len());
    if c.dim() != m + n {
        return Err(Error::Dimension(format!("{} + {} kernels for a {}x{} matrix", m, n, c.dim(), c.dim())));
    }
    if g.iter().any(|k| k.order() != 1) || h.iter().any(|k| k.order() != 2) {
        return Err(Error::Range("expected order-1 g kernels and order-2 h kernels".into()));
    }
    let hn: Vec<DoubleNorms> = h
        .iter()
        .map(|k| {
            Ok(DoubleNorms {
                norm: k.norm(),
                l4_sq: k.lp_norm(4.0).powi(2),
                star10: contraction_norm(k, k, 1, 0)?,
                star11: star_contract(k, k, 1, 1)?.norm(),
            })
        })
        .collect::<Result<_>>()?;
    let mut s = [0.0; 6];
    for i1 in 0..m {
        for i2 in 0..m {
            s[0] += (c.get(i1, i2) - g[i1].inner_product(g[i2])?).powi(2);
        }
    }
    for j1 in 0..n {
        for j2 in 0..n {
            let det = (c.get(m + j1, m + j2) - 2.0 * h[j1].inner_product(h[j2])?).powi(2);
            let a = star_contract(h[j1], h[j2], 2, 1)?.norm_sq();
            let b = star_contract(h[j1], h[j2], 1, 1)?.norm_sq();
            s[1] += det + 4.0 * a + 8.0 * b;
            s[4] += det + 4.0 * hn[j1].star10 * hn[j2].star10 + 8.0 * hn[j1].star11 * hn[j2].star11;
        }
    }
    for i in 0..m {
        for j in 0..n {
            let cij = c.get(i, m + j);
            s[2] += 2.0 * cij * cij + 5.0 * star_contract(g[i], h[j], 1, 1)?.norm_sq();
            s[5] += 2.0 * cij * cij + 5.0 * g[i].norm_sq() * hn[j].star11;
        }
    }
    let cubes: f64 = g.iter().map(|k| k.lp_norm(3.0).powi(3)).sum();
    let quads: f64 = hn
        .iter()
        .map(|x| x.norm * (x.l4_sq + 2f64.sqrt() * x.star10))
        .sum();
    s[3] = (m * m) as f64 * cubes + 8.0 * (n * n) as f64 * quads;
    let first = 0.5 * (s[0] + s[1] + s[2]).sqrt() + s[3];
    let second = 0.5 * (s[0] + s[4] + s[5]).sqrt() + s[3];
    Ok(SingleDoubleBound { s, first, second })
}

/// One row of the CLT-condition report.
#[derive(Debug, Clone)]
pub struct CltRow {
    pub label: f64,
    /// max_{i,j} |E[F_i F_j] - C(i,j)|, from the exact covariance when one is supplied.
    pub covariance_gap: f64,
    /// The same gap with E[F_i F_j] = 1{q_i=q_j} q_i!⟨f_i,f_j⟩ on the grid.
    pub grid_covariance_gap: f64,
    /// (component, r, l, ‖f ⋆ᵣˡ f‖) for r = 1..q, l = 1..min(r, q-1).
    pub contraction_norms: Vec<(usize, usize, usize, f64)>,
    pub l4_fourth: Vec<f64>,
    pub assumptions_ab: bool,
    /// Largest Assumption C value over pairs and k, when cheap enough to form.
    pub assumption_c_max: Option<f64>,
    pub d3_bound: f64,
}

/// Conditions for the chaotic-vector CLT, for each member of an indexed family.
/// One member F = (I_{q_1}(f_1), ..., I_{q_d}(f_d)) of an indexed family.
#[derive(Debug, Clone)]
pub struct CltMember {
    pub label: f64,
    pub kernels: Vec<Kernel>,
    /// E[F_i F_j] when known in closed form; replaces grid inner products.
    pub exact_cov: Option<CovMatrix>,
}

pub fn clt_conditions(family: &[CltMember], c: &CovMatrix) -> Result<Vec<CltRow>> {
    let mut rows = Vec::with_capacity(family.len());
    for member in family {
        let ks = &member.kernels;
        let d = ks.len();
        if d != c.dim() {
            return Err(Error::Dimension(format!("{d} kernels for a {}x{} matrix", c.dim(), c.dim())));
        }
        let mut gap = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let e = if ks[i].order() == ks[j].order() {
                    factorial(ks[i].order()) as f64 * ks[i].inner_product(&ks[j])?
                } else {
                    0.0
                };
                gap = gap.max((e - c.get(i, j)).abs());
            }
        }
        let exact_gap = match &member.exact_cov {
            Some(k) if k.dim() != d => {
                return Err(Error::Dimension("exact covariance has the wrong size".into()))
            }
            Some(k) => (0..d * d).map(|n| (k.get(n / d, n % d) - c.get(n / d, n % d)).abs()).fold(0.0, f64::max),
            None => gap,
        };
        let mut norms = Vec::new();
        let mut ab = true;
        for (i, f) in ks.iter().enumerate() {
            let q = f.order();
            for r in 1..=q {
                for l in 1..=r.min(q.saturating_sub(1)) {
                    norms.push((i + 1, r, l, contraction_norm(f, f, r, l)?));
                }
            }
            ab &= crate::algebra::assumption_a_check(f).map(|r| r.holds).unwrap_or(true);
        }
        let m = ks.first().map_or(0, Kernel::cells) as f64;
        let mut cmax: Option<f64> = Some(0.0);
        for f in ks {
            for g in ks {
                let (p, q) = (f.order(), g.order());
                if p.max(q) < 2 {
                    continue;
                }
                for k in p.abs_diff(q).max(1)..=p + q - 2 {
                    if m.powi(k as i32 + 1) > 2e7 {
                        cmax = None;
                        continue;
                    }
                    let v = crate::algebra::assumption_c_value(f, g, k)?;
                    cmax = cmax.map(|x| x.max(v));
                }
            }
        }
        let list: Vec<ChaosExpansion> =
            ks.iter().map(|k| ChaosExpansion::single(k.clone())).collect::<Result<_>>()?;
        let opts = AssembleOptions { cov_override: member.exact_cov.clone() };
        let report = assemble_d3(&list, c, Mode::Analytic, &opts)?;
        rows.push(CltRow {
            label: member.label,
            covariance_gap: exact_gap,
            grid_covariance_gap: gap,
            contraction_norms: norms,
            l4_fourth: ks.iter().map(|k| k.lp_norm(4.0).powi(4)).collect(),
            assumptions_ab: ab,
            assumption_c_max: cmax,
            d3_bound: report.d3_bound,
        });
    }
    Ok(rows)
}
