//! Monte Carlo engine on the cell grid.
//!
//! Each replication draws independent Poisson(w_i) counts from its own ChaCha8
//! stream (key from the seed, stream id = replication index), cells in index
//! order. Replications are processed in fixed-size blocks, so every result is
//! the same whatever the number of worker threads.

use std::f64::consts::TAU;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::bounds::CovMatrix;
use crate::chaos::ChaosExpansion;
use crate::error::{Error, Result};
use crate::space::{DiscreteSpace, Kernel};

pub const DEFAULT_SEED: u64 = 0x5EED;
/// Replications per work unit.
pub const BLOCK: usize = 1000;
/// Refuse pathwise evaluations costing more than this many multiply-adds.
pub const WORK_BUDGET: f64 = 2e12;
/// Highest order evaluated pathwise.
pub const MAX_PATHWISE_ORDER: usize = 4;

/// Inversion below this intensity, rejection sampling above.
const INVERSION_LIMIT: f64 = 10.0;

#[derive(Debug, Clone)]
struct CellSampler {
    exp_neg: Vec<f64>,
    large: Vec<Option<Poisson<f64>>>,
}

impl CellSampler {
    fn new(space: &DiscreteSpace) -> Self {
        let w = space.weights();
        CellSampler {
            exp_neg: w.iter().map(|x| (-x).exp()).collect(),
            large: w
                .iter()
                .map(|&x| (x > INVERSION_LIMIT).then(|| Poisson::new(x).expect("positive rate")))
                .collect(),
        }
    }

    fn draw(&self, cell: usize, w: f64, rng: &mut ChaCha8Rng) -> u32 {
        if let Some(p) = &self.large[cell] {
            return p.sample(rng) as u32;
        }
        let u: f64 = rng.random();
        let mut k = 0u32;
        let mut p = self.exp_neg[cell];
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1;
            p *= w / k as f64;
            cdf += p;
        }
        k
    }
}

/// Centered counts N̂ = N - w for a contiguous range of replications.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    space: Arc<DiscreteSpace>,
    seed: u64,
    first_rep: u64,
    reps: usize,
    counts: Vec<u32>,
    centered: Vec<f64>,
}

impl SampleBatch {
    pub fn space(&self) -> &Arc<DiscreteSpace> {
        &self.space
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replications(&self) -> usize {
        self.reps
    }

    pub fn first_replication(&self) -> u64 {
        self.first_rep
    }

    /// Stream identifier of each row.
    pub fn stream_ids(&self) -> impl Iterator<Item = u64> {
        self.first_rep..self.first_rep + self.reps as u64
    }

    /// reps x m counts.
    pub fn counts(&self) -> ArrayView2<'_, u32> {
        ArrayView2::from_shape((self.reps, self.space.len()), &self.counts).expect("shape")
    }

    /// reps x m centered counts.
    pub fn centered(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.reps, self.space.len()), &self.centered).expect("shape")
    }
}

fn sample_range(
    space: &Arc<DiscreteSpace>,
    sampler: &CellSampler,
    seed: u64,
    first_rep: u64,
    reps: usize,
) -> SampleBatch {
    let w = space.weights();
    let m = w.len();
    let mut counts = Vec::with_capacity(reps * m);
    let mut centered = Vec::with_capacity(reps * m);
    for rep in first_rep..first_rep + reps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep);
        for (i, &wi) in w.iter().enumerate() {
            let n = sampler.draw(i, wi, &mut rng);
            counts.push(n);
            centered.push(n as f64 - wi);
        }
    }
    SampleBatch { space: space.clone(), seed, first_rep, reps, counts, centered }
}

/// Replications `first_rep .. first_rep + reps`.
pub fn sample_block(space: &Arc<DiscreteSpace>, seed: u64, first_rep: u64, reps: usize) -> SampleBatch {
    sample_range(space, &CellSampler::new(space), seed, first_rep, reps)
}

/// All replications `0 .. reps` in one batch.
pub fn sample_counts(space: &Arc<DiscreteSpace>, reps: usize, seed: u64) -> Result<SampleBatch> {
    if reps == 0 {
        return Err(Error::Range("need at least one replication".into()));
    }
    Ok(sample_block(space, seed, 0, reps))
}

/// Runs `f` on consecutive blocks of `BLOCK` replications and returns the
/// per-block results in replication order.
pub fn map_blocks<T, F>(space: &Arc<DiscreteSpace>, reps: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&SampleBatch) -> Result<T> + Sync,
{
    if reps == 0 {
        return Err(Error::Range("need at least one replication".into()));
    }
    let sampler = CellSampler::new(space);
    let blocks = reps.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let n = BLOCK.min(reps - start);
            f(&sample_range(space, &sampler, seed, start as u64, n))
        })
        .collect()
}

/// Runs `f` on a pool with exactly `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

fn has_repeat(idx: &[usize]) -> bool {
    (0..idx.len()).any(|a| (a + 1..idx.len()).any(|b| idx[a] == idx[b]))
}

fn for_each_index(m: usize, order: usize, mut f: impl FnMut(usize, &[usize])) {
    let n = m.pow(order as u32);
    let mut idx = vec![0usize; order];
    for flat in 0..n {
        f(flat, &idx);
        for a in (0..order).rev() {
            idx[a] += 1;
            if idx[a] < m {
                break;
            }
            idx[a] = 0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub kernel: Kernel,
    /// Squared L2 norm of the entries that were zeroed.
    pub discarded_sq: f64,
}

/// Zeroes every entry whose index tuple repeats a cell.
pub fn diag_free_projection(f: &Kernel) -> Projection {
    let p = f.order();
    if p < 2 {
        return Projection { kernel: f.clone(), discarded_sq: 0.0 };
    }
    let w = f.space().weights();
    let mut values = f.values().to_vec();
    let mut discarded_sq = 0.0;
    for_each_index(f.cells(), p, |flat, idx| {
        if has_repeat(idx) {
            let v = values[flat];
            if v != 0.0 {
                discarded_sq += v * v * idx.iter().map(|&i| w[i]).product::<f64>();
                values[flat] = 0.0;
            }
        }
    });
    let mut kernel = Kernel::new(f.space().clone(), p, values).expect("same shape");
    if f.is_symmetric() && !kernel.is_symmetric() {
        // projection preserves symmetry; the flag check only failed on rounding
        kernel = crate::algebra::symmetrize(&kernel).expect("order checked");
    }
    Projection { kernel, discarded_sq }
}

pub fn is_diagonal_free(f: &Kernel) -> bool {
    if f.order() < 2 {
        return true;
    }
    let v = f.values();
    let mut ok = true;
    for_each_index(f.cells(), f.order(), |flat, idx| {
        if ok && v[flat] != 0.0 && has_repeat(idx) {
            ok = false;
        }
    });
    ok
}

fn check_budget(m: usize, order: usize, reps: usize) -> Result<()> {
    let work = (m as f64).powi(order as i32) * reps as f64;
    if work > WORK_BUDGET {
        return Err(Error::Guard(format!(
            "pathwise evaluation of order {order} on {m} cells for {reps} replications exceeds the work budget"
        )));
    }
    Ok(())
}

/// Multilinear form Σ f(i₁..i_p) x_{i₁}···x_{i_p} for each row x of `x`.
fn multilinear_rows(f: &Kernel, x: ArrayView2<'_, f64>) -> Vec<f64> {
    let p = f.order();
    let m = f.cells();
    let rows = x.nrows();
    if p == 0 {
        return vec![f.values()[0]; rows];
    }
    // contract the last argument for all rows at once
    let fm = ArrayView2::from_shape((m.pow(p as u32 - 1), m), f.values()).expect("shape");
    let y: Array2<f64> = x.dot(&fm.t());
    let mut out = Vec::with_capacity(rows);
    for (r, yr) in y.outer_iter().enumerate() {
        let xr = x.row(r);
        let mut cur: Vec<f64> = yr.to_vec();
        while cur.len() > 1 {
            cur = cur
                .chunks_exact(m)
                .map(|c| c.iter().zip(xr.iter()).map(|(a, b)| a * b).sum())
                .collect();
        }
        out.push(cur[0]);
    }
    out
}

/// I_p(f) per replication for a diagonal-free kernel: the sum over tuples of
/// distinct cells of f times the product of centered counts.
pub fn eval_multiple_integral(f: &Kernel, batch: &SampleBatch) -> Result<Vec<f64>> {
    if !f.space().same_as(batch.space()) {
        return Err(Error::SpaceMismatch);
    }
    if f.order() > MAX_PATHWISE_ORDER {
        return Err(Error::OrderTooLarge(f.order()));
    }
    if !is_diagonal_free(f) {
        return Err(Error::NotDiagonalFree);
    }
    check_budget(f.cells(), f.order(), batch.replications())?;
    Ok(multilinear_rows(f, batch.centered()))
}

/// Chaos expansion with every kernel already diagonal-free.
#[derive(Debug, Clone)]
pub struct ProjectedChaos {
    pub expansion: ChaosExpansion,
    pub discarded_sq: f64,
}

pub fn project_chaos(f: &ChaosExpansion) -> Result<ProjectedChaos> {
    let mut discarded_sq = 0.0;
    let mut terms = Vec::new();
    for k in f.terms() {
        let p = diag_free_projection(k);
        discarded_sq += p.discarded_sq;
        terms.push(p.kernel);
    }
    Ok(ProjectedChaos {
        expansion: ChaosExpansion::new(f.space().clone(), f.mean(), terms)?,
        discarded_sq,
    })
}

/// E[F] + Σ I_k(diagonal-free part of f_k), per replication.
pub fn eval_chaos(f: &ChaosExpansion, batch: &SampleBatch) -> Result<Vec<f64>> {
    let mut out = vec![f.mean(); batch.replications()];
    for k in f.terms() {
        let proj = if is_diagonal_free(k) { k.clone() } else { diag_free_projection(k).kernel };
        for (o, v) in out.iter_mut().zip(eval_multiple_integral(&proj, batch)?) {
            *o += v;
        }
    }
    Ok(out)
}

/// Per-replication values of a vector of functionals: `values[i][r]`.
#[derive(Debug, Clone)]
pub struct FunctionalSamples {
    pub values: Vec<Vec<f64>>,
    pub seed: u64,
    /// Diagonal mass removed from each functional's kernels.
    pub discarded_sq: Vec<f64>,
}

impl FunctionalSamples {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn replications(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// CSV with a header `replication,F1,...,Fd` and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("replication");
        for i in 1..=self.dim() {
            s.push_str(&format!(",F{i}"));
        }
        s.push('\n');
        for r in 0..self.replications() {
            s.push_str(&r.to_string());
            for v in &self.values {
                s.push(',');
                s.push_str(&crate::util::fmt17(v[r]));
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates each expansion on replications `0..reps`.
pub fn simulate_functionals(
    list: &[ChaosExpansion],
    reps: usize,
    seed: u64,
) -> Result<FunctionalSamples> {
    let space = list
        .first()
        .ok_or_else(|| Error::Dimension("empty functional list".into()))?
        .space()
        .clone();
    let mut projected = Vec::with_capacity(list.len());
    let mut discarded_sq = Vec::with_capacity(list.len());
    for f in list {
        if !f.space().same_as(&space) {
            return Err(Error::SpaceMismatch);
        }
        let p = project_chaos(f)?;
        for k in p.expansion.terms() {
            check_budget(space.len(), k.order(), reps)?;
        }
        discarded_sq.push(p.discarded_sq);
        projected.push(p.expansion);
    }
    let blocks = map_blocks(&space, reps, seed, |batch| {
        projected.iter().map(|f| eval_chaos(f, batch)).collect::<Result<Vec<_>>>()
    })?;
    let mut values = vec![Vec::with_capacity(reps); list.len()];
    for block in blocks {
        for (dst, src) in values.iter_mut().zip(block) {
            dst.extend(src);
        }
    }
    Ok(FunctionalSamples { values, seed, discarded_sq })
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample skewness and kurtosis (not excess) of `xs`.
pub fn skewness_kurtosis(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2))
}

#[derive(Debug, Clone)]
pub struct EmpiricalCov {
    pub cov: CovMatrix,
    /// Standard error of each entry, row-major d x d.
    pub se: Vec<f64>,
}

/// Sample covariance of the functionals with entrywise standard errors.
pub fn empirical_cov(samples: &FunctionalSamples) -> Result<EmpiricalCov> {
    let d = samples.dim();
    let n = samples.replications();
    if d == 0 || n < 2 {
        return Err(Error::Dimension("need at least one functional and two replications".into()));
    }
    let means: Vec<f64> = samples.values.iter().map(|v| v.iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    let mut se = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let z: Vec<f64> = samples.values[i]
                .iter()
                .zip(&samples.values[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .collect();
            let (mz, sz) = mean_se(&z);
            let c = mz * n as f64 / (n - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
            se[i * d + j] = sz;
            se[j * d + i] = sz;
        }
    }
    Ok(EmpiricalCov { cov: CovMatrix::from_row_major(d, cov)?, se })
}

/// Test functions φ(x) = cos(a·x + b) with Σ|a_i a_j| <= 1 and Σ|a_i a_j a_k| <= 1.
#[derive(Debug, Clone)]
pub struct TestFunctionFamily {
    pub frequencies: Vec<Vec<f64>>,
    pub phases: Vec<f64>,
}

impl TestFunctionFamily {
    pub const DEFAULT_SIZE: usize = 64;
    pub const DEFAULT_SEED: u64 = 0xFA417;

    /// Directions are Gaussian, rescaled to an L1 norm drawn uniformly from
    /// (0, 1]; both derivative constraints reduce to ‖a‖₁ <= 1.
    pub fn new(dim: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frequencies = Vec::with_capacity(count);
        let mut phases = Vec::with_capacity(count);
        for _ in 0..count {
            let dir: Vec<f64> = (0..dim)
                .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                .collect();
            let l1: f64 = dir.iter().map(|x: &f64| x.abs()).sum();
            let scale = 1.0 - rng.random::<f64>();
            frequencies.push(dir.iter().map(|x| x * scale / l1.max(f64::MIN_POSITIVE)).collect());
            phases.push(rng.random::<f64>() * TAU);
        }
        TestFunctionFamily { frequencies, phases }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Largest Σ_{i,j}|a_i a_j| and Σ_{i,j,k}|a_i a_j a_k| over the family.
    pub fn derivative_bounds(&self) -> (f64, f64) {
        self.frequencies.iter().fold((0.0f64, 0.0f64), |(b2, b3), a| {
            let l1: f64 = a.iter().map(|x| x.abs()).sum();
            (b2.max(l1 * l1), b3.max(l1 * l1 * l1))
        })
    }
}

/// E[cos(a·X + b)] for X ~ N(0, C).
pub fn gaussian_cos_mean(a: &[f64], b: f64, c: &CovMatrix) -> f64 {
    b.cos() * (-0.5 * c.quadratic_form(a)).exp()
}

/// Attached to every reported discrepancy.
pub const DISCREPANCY_NOTE: &str = "max over a finite cosine family; a lower proxy for d3, not d3 itself";

#[derive(Debug, Clone)]
pub struct FunctionDiscrepancy {
    pub empirical: f64,
    pub se: f64,
    pub gaussian: f64,
}

#[derive(Debug, Clone)]
pub struct Discrepancy {
    /// max over the family of |empirical mean - Gaussian mean|; a lower proxy for d₃.
    pub value: f64,
    /// Standard error of the maximizing member.
    pub se: f64,
    pub argmax: Option<usize>,
    pub detail: Vec<FunctionDiscrepancy>,
}

pub fn empirical_discrepancy(
    samples: &FunctionalSamples,
    c: &CovMatrix,
    family: &TestFunctionFamily,
) -> Result<Discrepancy> {
    if c.dim() != samples.dim() {
        return Err(Error::Dimension(format!(
            "covariance is {}x{} but there are {} functionals",
            c.dim(),
            c.dim(),
            samples.dim()
        )));
    }
    if !c.is_nonneg_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let n = samples.replications();
    let mut detail = Vec::with_capacity(family.len());
    for (a, b) in family.frequencies.iter().zip(&family.phases) {
        let vals: Vec<f64> = (0..n)
            .map(|r| {
                let x: f64 = a.iter().zip(&samples.values).map(|(ai, v)| ai * v[r]).sum();
                (x + b).cos()
            })
            .collect();
        let (empirical, se) = mean_se(&vals);
        detail.push(FunctionDiscrepancy { empirical, se, gaussian: gaussian_cos_mean(a, *b, c) });
    }
    let mut value = 0.0;
    let mut se = 0.0;
    let mut argmax = None;
    for (i, d) in detail.iter().enumerate() {
        let gap = (d.empirical - d.gaussian).abs();
        if argmax.is_none() || gap > value {
            value = gap;
            se = d.se;
            argmax = Some(i);
        }
    }
    Ok(Discrepancy { value, se, argmax, detail })
}
