//! Symmetrization, star contractions, the hybrid kernels G and Ĝ, and the
//! integrability checks built on them.

use itertools::Itertools;
use ndarray::{ArrayD, ArrayView3, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::space::{entry_count, Kernel, MAX_ENTRIES, MAX_ORDER};
use crate::util::{binomial, factorial};

/// Indices of a contraction f ⋆ᵣˡ g between kernels of orders p and q.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContractionSpec {
    pub r: usize,
    pub l: usize,
    pub p: usize,
    pub q: usize,
}

impl ContractionSpec {
    pub fn new(p: usize, q: usize, r: usize, l: usize) -> Result<Self> {
        if l > r || r > p.min(q) {
            return Err(Error::Range(format!(
                "contraction needs 0 <= l <= r <= min(p, q), got p={p} q={q} r={r} l={l}"
            )));
        }
        Ok(ContractionSpec { r, l, p, q })
    }

    pub fn output_order(&self) -> usize {
        self.p + self.q - self.r - self.l
    }
}

/// Average over all permutations of the arguments.
pub fn symmetrize(f: &Kernel) -> Result<Kernel> {
    let p = f.order();
    if p > MAX_ORDER {
        return Err(Error::OrderTooLarge(p));
    }
    if f.is_symmetric() || p < 2 {
        let mut out = f.clone();
        out.set_symmetric(true);
        return Ok(out);
    }
    let v = f.view();
    let mut acc = ArrayD::<f64>::zeros(IxDyn(&vec![f.cells(); p]));
    for perm in (0..p).permutations(p) {
        acc += &v.view().permuted_axes(IxDyn(&perm));
    }
    let norm = factorial(p) as f64;
    let values = acc.iter().map(|x| x / norm).collect();
    Ok(Kernel::from_parts(f.space().clone(), p, values, true))
}

fn weight_products(w: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..order {
        out = out.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect();
    }
    out
}

/// f ⋆ᵣˡ g: the first r arguments of f and g are identified and the first l
/// of those are integrated out. Output arguments are ordered as
/// (identified but not integrated, rest of f, rest of g).
pub fn star_contract(f: &Kernel, g: &Kernel, r: usize, l: usize) -> Result<Kernel> {
    if !f.same_space(g) {
        return Err(Error::SpaceMismatch);
    }
    let spec = ContractionSpec::new(f.order(), g.order(), r, l)?;
    let out_order = spec.output_order();
    if out_order > MAX_ORDER {
        return Err(Error::OrderTooLarge(out_order));
    }
    let m = f.cells();
    let (p, q) = (f.order(), g.order());
    let pw = |k: usize| m.pow(k as u32);
    let (nz, ng, nt, ns) = (pw(l), pw(r - l), pw(p - r), pw(q - r));
    match entry_count(m, out_order) {
        Some(n) if n <= MAX_ENTRIES => {}
        _ => {
            return Err(Error::Guard(format!(
                "contraction output of order {out_order} on {m} cells is too large"
            )))
        }
    }
    let fv = ArrayView3::from_shape((nz, ng, nt), f.values()).expect("shape");
    let gv = ArrayView3::from_shape((nz, ng, ns), g.values()).expect("shape");
    let wz = weight_products(f.space().weights(), l);
    let mut fw = fv.to_owned();
    for (z, mut plane) in fw.axis_iter_mut(Axis(0)).enumerate() {
        plane *= wz[z];
    }
    let mut values = Vec::with_capacity(ng * nt * ns);
    for gamma in 0..ng {
        let a = fw.index_axis(Axis(1), gamma);
        let b = gv.index_axis(Axis(1), gamma);
        let block = a.t().dot(&b);
        values.extend(block.iter());
    }
    let symmetric = out_order < 2;
    Ok(Kernel::from_parts(f.space().clone(), out_order, values, symmetric))
}

/// ‖f ⋆ᵣˡ g‖² without materializing a large output: for symmetric inputs the
/// square norm equals ⟨f ⋆_{p-l}^{p-r} f, g ⋆_{q-l}^{q-r} g⟩, whose order is r + l.
pub fn contraction_norm_sq(f: &Kernel, g: &Kernel, r: usize, l: usize) -> Result<f64> {
    let spec = ContractionSpec::new(f.order(), g.order(), r, l)?;
    let (p, q) = (f.order(), g.order());
    let direct_order = spec.output_order();
    if f.is_symmetric() && g.is_symmetric() && r + l < direct_order {
        let a = star_contract(f, f, p - l, p - r)?;
        if std::ptr::eq(f, g) {
            return Ok(a.norm_sq());
        }
        let b = star_contract(g, g, q - l, q - r)?;
        return a.inner_product(&b);
    }
    Ok(star_contract(f, g, r, l)?.norm_sq())
}

pub fn contraction_norm(f: &Kernel, g: &Kernel, r: usize, l: usize) -> Result<f64> {
    Ok(contraction_norm_sq(f, g, r, l)?.max(0.0).sqrt())
}

/// Both sides of ‖f ⋆ₜˢ g‖² = ⟨f ⋆_{p-s}^{p-t} f, g ⋆_{q-s}^{q-t} g⟩.
pub fn verify_contraction_identity(f: &Kernel, g: &Kernel, s: usize, t: usize) -> Result<(f64, f64)> {
    let (p, q) = (f.order(), g.order());
    if !(1 <= s && s <= t && t <= p.min(q)) {
        return Err(Error::Range(format!("need 1 <= s <= t <= min(p, q), got s={s} t={t}")));
    }
    require_symmetric(f, g)?;
    let lhs = star_contract(f, g, t, s)?.norm_sq();
    let a = star_contract(f, f, p - s, p - t)?;
    let b = star_contract(g, g, q - s, q - t)?;
    Ok((lhs, a.inner_product(&b)?))
}

/// Both sides of ∫(f ⋆ᵣ⁰ g)² = ∫(f ⋆_p^{p-r} f)(g ⋆_q^{q-r} g).
pub fn verify_useful_identity(f: &Kernel, g: &Kernel, r: usize) -> Result<(f64, f64)> {
    let (p, q) = (f.order(), g.order());
    if !(1 <= r && r <= p.min(q)) {
        return Err(Error::Range(format!("need 1 <= r <= min(p, q), got r={r}")));
    }
    require_symmetric(f, g)?;
    let lhs = star_contract(f, g, r, 0)?.norm_sq();
    let a = star_contract(f, f, p, p - r)?;
    let b = star_contract(g, g, q, q - r)?;
    Ok((lhs, a.inner_product(&b)?))
}

fn require_symmetric(f: &Kernel, g: &Kernel) -> Result<()> {
    if f.is_symmetric() && g.is_symmetric() {
        Ok(())
    } else {
        Err(Error::NotSymmetric)
    }
}

/// G_k^{p,q}(f, g): the kernel of the k-th chaos in the product I_p(f) I_q(g).
pub fn g_operator(f: &Kernel, g: &Kernel, k: usize) -> Result<Kernel> {
    require_symmetric(f, g)?;
    if !f.same_space(g) {
        return Err(Error::SpaceMismatch);
    }
    let (p, q) = (f.order(), g.order());
    if k < p.abs_diff(q) || k > p + q {
        return Err(Error::Range(format!(
            "G_k^{{{p},{q}}} needs |q-p| <= k <= p+q, got k={k}"
        )));
    }
    let mut out = Kernel::zeros(f.space().clone(), k)?;
    for r in 0..=p.min(q) {
        for l in 0..=r {
            if p + q - r - l != k {
                continue;
            }
            let coef = factorial(r) * binomial(p as i64, r as i64) * binomial(q as i64, r as i64)
                * binomial(r as i64, l as i64);
            let term = symmetrize(&star_contract(f, g, r, l)?)?;
            out.axpy(coef as f64, &term)?;
        }
    }
    out.set_symmetric(true);
    Ok(out)
}

fn g_hat_range(p: usize, q: usize, k: usize) -> Result<()> {
    if p == 0 || q == 0 {
        return Err(Error::Range("Ĝ needs kernels of order at least 1".into()));
    }
    if k < p.abs_diff(q) || k + 2 > p + q {
        return Err(Error::Range(format!(
            "Ĝ_k^{{{p},{q}}} needs |q-p| <= k <= p+q-2, got k={k}"
        )));
    }
    Ok(())
}

/// Coefficient a_t of sym(f ⋆ₜˢ g) in Ĝ_k, with s = p + q - k - t.
fn g_hat_coef(p: usize, q: usize, t: usize, s: usize) -> u64 {
    factorial(t - 1)
        * binomial(p as i64 - 1, t as i64 - 1)
        * binomial(q as i64 - 1, t as i64 - 1)
        * binomial(t as i64 - 1, s as i64 - 1)
}

/// s(t, k) = p + q - k - t when it satisfies 1 <= s <= t.
fn admissible_s(p: usize, q: usize, k: usize, t: usize) -> Option<usize> {
    let s = (p + q) as i64 - k as i64 - t as i64;
    (1 <= s && s <= t as i64).then_some(s as usize)
}

/// Ĝ_k^{p,q}(f, g) by the closed-form sum over contractions.
pub fn g_hat_operator(f: &Kernel, g: &Kernel, k: usize) -> Result<Kernel> {
    require_symmetric(f, g)?;
    if !f.same_space(g) {
        return Err(Error::SpaceMismatch);
    }
    let (p, q) = (f.order(), g.order());
    g_hat_range(p, q, k)?;
    let mut out = Kernel::zeros(f.space().clone(), k)?;
    for t in 1..=p.min(q) {
        if let Some(s) = admissible_s(p, q, k, t) {
            let term = symmetrize(&star_contract(f, g, t, s)?)?;
            out.axpy(g_hat_coef(p, q, t, s) as f64, &term)?;
        }
    }
    out.set_symmetric(true);
    Ok(out)
}

/// Ĝ_k^{p,q}(f, g) as the weighted sum over z of G_k^{p-1,q-1}(f(z,·), g(z,·)).
pub fn g_hat_slice_sum(f: &Kernel, g: &Kernel, k: usize) -> Result<Kernel> {
    require_symmetric(f, g)?;
    if !f.same_space(g) {
        return Err(Error::SpaceMismatch);
    }
    g_hat_range(f.order(), g.order(), k)?;
    let mut out = Kernel::zeros(f.space().clone(), k)?;
    for (z, w) in f.space().weights().iter().enumerate() {
        let term = g_operator(&f.slice(z)?, &g.slice(z)?, k)?;
        out.axpy(*w, &term)?;
    }
    out.set_symmetric(true);
    Ok(out)
}

/// The constant C of the Ĝ norm estimate for a given k.
pub fn g_hat_constant(p: usize, q: usize, k: usize) -> f64 {
    (1..=p.min(q))
        .map(|t| {
            let s = (p + q) as i64 - k as i64 - t as i64;
            if s < 1 {
                return 0.0;
            }
            let a = g_hat_coef(p, q, t, s as usize) as f64;
            a * a
        })
        .sum()
}

/// (‖Ĝ_k‖², C · Σ_t ‖sym(f ⋆ₜ^{s(t,k)} g)‖²); the first never exceeds the second.
pub fn g_hat_norm_bound(f: &Kernel, g: &Kernel, k: usize) -> Result<(f64, f64)> {
    let (p, q) = (f.order(), g.order());
    if p == 0 || q == 0 || k < p.abs_diff(q).max(1) || k + 2 > p + q {
        return Err(Error::Range(format!(
            "norm estimate needs max(|q-p|, 1) <= k <= p+q-2, got p={p} q={q} k={k}"
        )));
    }
    let left = g_hat_operator(f, g, k)?.norm_sq();
    let mut sum = 0.0;
    for t in 1..=p.min(q) {
        if let Some(s) = admissible_s(p, q, k, t) {
            sum += symmetrize(&star_contract(f, g, t, s)?)?.norm_sq();
        }
    }
    Ok((left, g_hat_constant(p, q, k) * sum))
}

/// Chaos decomposition of I_p(f) I_q(g): pairs (k, G_k) for k = |q-p| ..= p+q.
pub fn product_expand(f: &Kernel, g: &Kernel) -> Result<Vec<(usize, Kernel)>> {
    let (p, q) = (f.order(), g.order());
    (p.abs_diff(q)..=p + q).map(|k| Ok((k, g_operator(f, g, k)?))).collect()
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub holds: bool,
    /// (r, ‖f ⋆_p^{p-r} f‖) for r = 1..=p.
    pub contraction_norms: Vec<(usize, f64)>,
    pub l4_norm: f64,
    /// max of |f| ⋆ᵣˡ |f| over r = 1..=p, l = 1..=r; absent if too large to form.
    pub b_max: Option<f64>,
}

/// On a finite grid every contraction is a finite sum, so the check always
/// holds; the report carries the norms that later bounds consume.
pub fn assumption_a_check(f: &Kernel) -> Result<AssumptionReport> {
    let p = f.order();
    let mut contraction_norms = Vec::with_capacity(p);
    for r in 1..=p {
        let n = star_contract(f, f, p, p - r)?.norm();
        contraction_norms.push((r, n));
    }
    let abs = Kernel::from_parts(
        f.space().clone(),
        p,
        f.values().iter().map(|v| v.abs()).collect(),
        f.is_symmetric(),
    );
    let mut b_max = Some(0.0f64);
    'outer: for r in 1..=p {
        for l in 1..=r {
            match star_contract(&abs, &abs, r, l) {
                Ok(c) => {
                    let mx = c.values().iter().fold(0.0f64, |a, v| a.max(*v));
                    b_max = b_max.map(|b| b.max(mx));
                }
                Err(Error::Guard(_)) => {
                    b_max = None;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let holds = contraction_norms.iter().all(|(_, n)| n.is_finite())
        && b_max.map_or(true, f64::is_finite);
    Ok(AssumptionReport {
        holds,
        contraction_norms,
        l4_norm: f.lp_norm(4.0),
        b_max,
    })
}

/// Σ_z w_z ‖G_k^{p-1,q-1}(f(z,·), g(z,·))‖.
pub fn assumption_c_value(f: &Kernel, g: &Kernel, k: usize) -> Result<f64> {
    if f.order() == 0 || g.order() == 0 {
        return Err(Error::Range("Assumption C needs kernels of order at least 1".into()));
    }
    let mut total = 0.0;
    for (z, w) in f.space().weights().iter().enumerate() {
        total += w * g_operator(&f.slice(z)?, &g.slice(z)?, k)?.norm();
    }
    Ok(total)
}
