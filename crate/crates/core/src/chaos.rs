//! Finite chaos expansions F = E[F] + Σ I_k(f_k) and the operators D, δ, L, L⁻¹.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::algebra::{g_hat_operator, symmetrize};
use crate::error::{Error, Result};
use crate::space::{file_err, DiscreteSpace, Kernel, Tolerance};
use crate::util::factorial;

/// Largest chaos order stored in an expansion.
pub const MAX_CHAOS: usize = 4;

#[derive(Debug, Clone)]
pub struct ChaosExpansion {
    space: Arc<DiscreteSpace>,
    mean: f64,
    /// Distinct orders >= 1, ascending.
    terms: Vec<Kernel>,
}

impl ChaosExpansion {
    /// Kernels may come in any order but each chaos order at most once.
    pub fn new(space: Arc<DiscreteSpace>, mean: f64, kernels: Vec<Kernel>) -> Result<Self> {
        let mut terms = kernels;
        terms.sort_by_key(|k| k.order());
        for (i, k) in terms.iter().enumerate() {
            if !k.space().same_as(&space) {
                return Err(Error::SpaceMismatch);
            }
            if k.order() == 0 {
                return Err(Error::InvalidKernel("order-0 terms belong in the mean".into()));
            }
            if k.order() > MAX_CHAOS {
                return Err(Error::OrderTooLarge(k.order()));
            }
            if !k.is_symmetric() {
                return Err(Error::NotSymmetric);
            }
            if i > 0 && terms[i - 1].order() == k.order() {
                return Err(Error::InvalidKernel(format!("order {} given twice", k.order())));
            }
        }
        Ok(ChaosExpansion { space, mean, terms })
    }

    pub fn constant(space: Arc<DiscreteSpace>, c: f64) -> Self {
        ChaosExpansion { space, mean: c, terms: Vec::new() }
    }

    /// I_p(f) for a symmetric kernel of order p >= 1.
    pub fn single(f: Kernel) -> Result<Self> {
        Self::new(f.space().clone(), 0.0, vec![f])
    }

    pub fn space(&self) -> &Arc<DiscreteSpace> {
        &self.space
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn terms(&self) -> &[Kernel] {
        &self.terms
    }

    pub fn kernel(&self, order: usize) -> Option<&Kernel> {
        self.terms.iter().find(|k| k.order() == order)
    }

    pub fn max_order(&self) -> usize {
        self.terms.last().map_or(0, Kernel::order)
    }

    pub fn is_centered(&self, tol: &Tolerance) -> bool {
        self.mean.abs() <= tol.abs
    }

    /// Σ k!‖f_k‖².
    pub fn variance(&self) -> f64 {
        self.terms.iter().map(|f| factorial(f.order()) as f64 * f.norm_sq()).sum()
    }

    /// Σ k·k!‖f_k‖² = E‖DF‖².
    pub fn derivative_energy(&self) -> f64 {
        self.terms
            .iter()
            .map(|f| (f.order() as u64 * factorial(f.order())) as f64 * f.norm_sq())
            .sum()
    }

    fn map_terms(&self, mean: f64, scale: impl Fn(usize) -> f64) -> Self {
        ChaosExpansion {
            space: self.space.clone(),
            mean,
            terms: self.terms.iter().map(|f| f.scaled(scale(f.order()))).collect(),
        }
    }

    /// Largest kernel-wise absolute difference, zero-padding absent orders.
    pub fn max_abs_diff(&self, other: &ChaosExpansion) -> Result<f64> {
        let mut worst = (self.mean - other.mean).abs();
        let top = self.max_order().max(other.max_order());
        for k in 1..=top {
            let d = match (self.kernel(k), other.kernel(k)) {
                (Some(a), Some(b)) => a.max_abs_diff(b)?,
                (Some(a), None) | (None, Some(a)) => {
                    a.values().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                }
                (None, None) => 0.0,
            };
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Reads a document with `mean` and `kernels` (kernel files relative to it).
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        let file: ChaosFile = toml::from_str(&text).map_err(|e| file_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut space: Option<Arc<DiscreteSpace>> = None;
        let mut kernels = Vec::new();
        for rel in &file.kernels {
            let kp = base.join(rel);
            let k = Kernel::read(&kp, space.as_ref())?;
            if !k.is_symmetric() {
                return Err(file_err(&kp, Error::NotSymmetric));
            }
            space.get_or_insert_with(|| k.space().clone());
            kernels.push(k);
        }
        let space = match space {
            Some(s) => s,
            None => DiscreteSpace::new(
                file.weights.ok_or_else(|| file_err(path, "constant expansion needs `weights`"))?,
            )?,
        };
        ChaosExpansion::new(space, file.mean, kernels).map_err(|e| file_err(path, e))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChaosFile {
    mean: f64,
    #[serde(default)]
    kernels: Vec<String>,
    weights: Option<Vec<f64>>,
}

/// A random field z ↦ u_z given cell by cell as chaos expansions.
#[derive(Debug, Clone)]
pub struct DerivativeField {
    space: Arc<DiscreteSpace>,
    cells: Vec<ChaosExpansion>,
}

impl DerivativeField {
    pub fn new(space: Arc<DiscreteSpace>, cells: Vec<ChaosExpansion>) -> Result<Self> {
        if cells.len() != space.len() {
            return Err(Error::Dimension(format!(
                "{} cell expansions for {} cells",
                cells.len(),
                space.len()
            )));
        }
        if cells.iter().any(|c| !c.space.same_as(&space)) {
            return Err(Error::SpaceMismatch);
        }
        Ok(DerivativeField { space, cells })
    }

    pub fn space(&self) -> &Arc<DiscreteSpace> {
        &self.space
    }

    pub fn at(&self, cell: usize) -> &ChaosExpansion {
        &self.cells[cell]
    }

    pub fn cells(&self) -> &[ChaosExpansion] {
        &self.cells
    }
}

/// D_zF = Σ k I_{k-1}(f_k(z,·)).
pub fn derivative(f: &ChaosExpansion) -> Result<DerivativeField> {
    let m = f.space.len();
    let mut cells = Vec::with_capacity(m);
    for z in 0..m {
        let mut mean = 0.0;
        let mut terms = Vec::new();
        for fk in &f.terms {
            let k = fk.order();
            let s = fk.slice(z)?.scaled(k as f64);
            if k == 1 {
                mean += s.as_scalar().expect("order 0");
            } else {
                terms.push(s);
            }
        }
        cells.push(ChaosExpansion { space: f.space.clone(), mean, terms });
    }
    DerivativeField::new(f.space.clone(), cells)
}

/// LF = -Σ k I_k(f_k).
pub fn ou_generator(f: &ChaosExpansion) -> ChaosExpansion {
    f.map_terms(0.0, |k| -(k as f64))
}

/// L⁻¹F = -Σ (1/k) I_k(f_k), defined on centered expansions.
pub fn pseudo_inverse(f: &ChaosExpansion, tol: &Tolerance) -> Result<ChaosExpansion> {
    if !f.is_centered(tol) {
        return Err(Error::NotCentered(f.mean));
    }
    Ok(f.map_terms(0.0, |k| -1.0 / k as f64))
}

/// δ(u) = Σ_k I_{k+1}(sym u_k), where u_k(z, z₁..z_k) is the order-k kernel of u_z.
pub fn divergence(u: &DerivativeField) -> Result<ChaosExpansion> {
    let space = &u.space;
    let top = u.cells.iter().map(ChaosExpansion::max_order).max().unwrap_or(0);
    let mut terms = Vec::new();
    for k in 0..=top {
        if k + 1 > MAX_CHAOS {
            return Err(Error::OrderTooLarge(k + 1));
        }
        let mut values = Vec::new();
        let mut any = false;
        for cell in &u.cells {
            if k == 0 {
                values.push(cell.mean);
                any |= cell.mean != 0.0;
            } else {
                match cell.kernel(k) {
                    Some(kk) => {
                        values.extend_from_slice(kk.values());
                        any = true;
                    }
                    None => values.extend(std::iter::repeat_n(0.0, space.len().pow(k as u32))),
                }
            }
        }
        if any {
            let raw = Kernel::new(space.clone(), k + 1, values)?;
            terms.push(symmetrize(&raw)?);
        }
    }
    ChaosExpansion::new(space.clone(), 0.0, terms)
}

/// Chaos expansion of ⟨DF, -DL⁻¹G⟩ = Σ_{p,q} p Σ_k I_k(Ĝ_k^{p,q}(f_p, g_q)).
pub fn malliavin_inner(
    f: &ChaosExpansion,
    g: &ChaosExpansion,
    tol: &Tolerance,
) -> Result<ChaosExpansion> {
    if !f.is_centered(tol) {
        return Err(Error::NotCentered(f.mean));
    }
    if !g.is_centered(tol) {
        return Err(Error::NotCentered(g.mean));
    }
    if !f.space.same_as(&g.space) {
        return Err(Error::SpaceMismatch);
    }
    let mut mean = 0.0;
    let mut acc: BTreeMap<usize, Kernel> = BTreeMap::new();
    for fp in &f.terms {
        for gq in &g.terms {
            let (p, q) = (fp.order(), gq.order());
            for k in p.abs_diff(q)..=p + q - 2 {
                let term = g_hat_operator(fp, gq, k)?;
                if k == 0 {
                    mean += p as f64 * term.as_scalar().expect("order 0");
                } else if let Some(a) = acc.get_mut(&k) {
                    a.axpy(p as f64, &term)?;
                } else {
                    acc.insert(k, term.scaled(p as f64));
                }
            }
        }
    }
    ChaosExpansion::new(f.space.clone(), mean, acc.into_values().collect())
}

/// E[F²] = mean² + Σ k!‖f_k‖².
pub fn second_moment(f: &ChaosExpansion) -> f64 {
    f.mean * f.mean + f.variance()
}

/// Cov(F, G) = Σ k!⟨f_k, g_k⟩; equals E[FG] when either input is centered.
pub fn centered_product_moment(f: &ChaosExpansion, g: &ChaosExpansion) -> Result<f64> {
    let mut total = 0.0;
    for fk in &f.terms {
        if let Some(gk) = g.kernel(fk.order()) {
            total += factorial(fk.order()) as f64 * fk.inner_product(gk)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{product_expand, star_contract};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(w: &[f64]) -> Arc<DiscreteSpace> {
        DiscreteSpace::new(w.to_vec()).unwrap()
    }

    fn random_sym(space: &Arc<DiscreteSpace>, p: usize, rng: &mut ChaCha8Rng) -> Kernel {
        let k = Kernel::from_fn(space.clone(), p, |_| rng.random_range(-1.0..1.0)).unwrap();
        symmetrize(&k).unwrap()
    }

    fn random_expansion(space: &Arc<DiscreteSpace>, top: usize, rng: &mut ChaCha8Rng) -> ChaosExpansion {
        let terms = (1..=top).map(|k| random_sym(space, k, rng)).collect();
        ChaosExpansion::new(space.clone(), 0.0, terms).unwrap()
    }

    #[test]
    fn rejects_asymmetric_and_duplicate_terms() {
        let s = sp(&[1.0, 1.0]);
        let f = Kernel::new(s.clone(), 2, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(ChaosExpansion::single(f).is_err());
        let h = Kernel::ones(s.clone(), 1).unwrap();
        assert!(ChaosExpansion::new(s, 0.0, vec![h.clone(), h]).is_err());
    }

    #[test]
    fn derivative_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sp(&[0.5, 1.0, 2.0]);
        let h = random_sym(&s, 1, &mut rng);
        let d = derivative(&ChaosExpansion::single(h.clone()).unwrap()).unwrap();
        for z in 0..3 {
            assert_eq!(d.at(z).mean(), h.values()[z]);
            assert!(d.at(z).terms().is_empty());
        }
        let f = random_sym(&s, 2, &mut rng);
        let d = derivative(&ChaosExpansion::single(f.clone()).unwrap()).unwrap();
        for z in 0..3 {
            let want = f.slice(z).unwrap().scaled(2.0);
            assert_eq!(d.at(z).kernel(1).unwrap().values(), want.values());
        }
        let d = derivative(&ChaosExpansion::constant(s, 5.0)).unwrap();
        assert!(d.cells().iter().all(|c| c.mean() == 0.0 && c.terms().is_empty()));
    }

    #[test]
    fn generator_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = sp(&[0.5, 1.0, 2.0]);
        let c = ChaosExpansion::constant(s.clone(), 5.0);
        assert_eq!(ou_generator(&c).mean(), 0.0);
        assert!(ou_generator(&c).terms().is_empty());
        let f3 = random_sym(&s, 3, &mut rng);
        let lf = ou_generator(&ChaosExpansion::single(f3.clone()).unwrap());
        assert_eq!(lf.kernel(3).unwrap().values(), f3.scaled(-3.0).values());
        let tol = Tolerance::default();
        assert!(matches!(pseudo_inverse(&c, &tol), Err(Error::NotCentered(_))));
        let f = random_expansion(&s, 3, &mut rng);
        let back = ou_generator(&pseudo_inverse(&f, &tol).unwrap());
        assert!(back.max_abs_diff(&f).unwrap() <= 1e-15);
    }

    #[test]
    fn delta_d_is_minus_l() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = sp(&[0.5, 1.0, 2.0, 0.25]);
        let f = random_expansion(&s, 3, &mut rng);
        let lhs = divergence(&derivative(&f).unwrap()).unwrap();
        let rhs = ou_generator(&f).map_terms(0.0, |_| -1.0);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        let c = ChaosExpansion::constant(s, 3.0);
        let z = divergence(&derivative(&c).unwrap()).unwrap();
        assert!(z.terms().is_empty() && z.mean() == 0.0);
    }

    #[test]
    fn divergence_of_deterministic_field() {
        let s = sp(&[1.0, 2.0]);
        let cells = vec![
            ChaosExpansion::constant(s.clone(), 3.0),
            ChaosExpansion::constant(s.clone(), -1.0),
        ];
        let u = DerivativeField::new(s, cells).unwrap();
        let d = divergence(&u).unwrap();
        assert_eq!(d.kernel(1).unwrap().values(), &[3.0, -1.0]);
    }

    #[test]
    fn inner_first_chaos_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = sp(&[0.5, 1.0, 2.0]);
        let tol = Tolerance::default();
        let h = random_sym(&s, 1, &mut rng);
        let g = random_sym(&s, 1, &mut rng);
        let fh = ChaosExpansion::single(h.clone()).unwrap();
        let inner = malliavin_inner(&fh, &fh, &tol).unwrap();
        assert!(inner.terms().is_empty());
        assert!((inner.mean() - h.norm_sq()).abs() < 1e-14);
        let fg = ChaosExpansion::single(g.clone()).unwrap();
        let inner = malliavin_inner(&fh, &fg, &tol).unwrap();
        assert!((inner.mean() - h.inner_product(&g).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn inner_first_with_second() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = sp(&[0.5, 1.0, 2.0]);
        let tol = Tolerance::default();
        let g = random_sym(&s, 1, &mut rng);
        let h = random_sym(&s, 2, &mut rng);
        let inner = malliavin_inner(
            &ChaosExpansion::single(g.clone()).unwrap(),
            &ChaosExpansion::single(h.clone()).unwrap(),
            &tol,
        )
        .unwrap();
        let want = star_contract(&g, &h, 1, 1).unwrap();
        assert_eq!(inner.mean(), 0.0);
        assert!(inner.kernel(1).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn inner_second_chaos_matches_slice_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = sp(&[0.5, 1.0, 2.0]);
        let tol = Tolerance::default();
        let f = random_sym(&s, 2, &mut rng);
        let ff = ChaosExpansion::single(f.clone()).unwrap();
        let inner = malliavin_inner(&ff, &ff, &tol).unwrap();
        assert!((inner.mean() - 2.0 * f.norm_sq()).abs() < 1e-13);
        assert!((inner.mean() - second_moment(&ff)).abs() < 1e-13);
        // oracle: 2 Σ_z w_z I₁(f_z) I₁(f_z) expanded by the product formula
        let mut k1 = Kernel::zeros(s.clone(), 1).unwrap();
        let mut k2 = Kernel::zeros(s.clone(), 2).unwrap();
        let mut k0 = 0.0;
        for (z, w) in s.weights().iter().enumerate() {
            let fz = f.slice(z).unwrap();
            for (k, g) in product_expand(&fz, &fz).unwrap() {
                match k {
                    0 => k0 += 2.0 * w * g.as_scalar().unwrap(),
                    1 => k1.axpy(2.0 * w, &g).unwrap(),
                    _ => k2.axpy(2.0 * w, &g).unwrap(),
                }
            }
        }
        assert!((inner.mean() - k0).abs() < 1e-13);
        assert!(inner.kernel(1).unwrap().max_abs_diff(&k1).unwrap() < 1e-13);
        assert!(inner.kernel(2).unwrap().max_abs_diff(&k2).unwrap() < 1e-13);
        let c21 = star_contract(&f, &f, 2, 1).unwrap().scaled(2.0);
        assert!(inner.kernel(1).unwrap().max_abs_diff(&c21).unwrap() < 1e-13);
        let c11 = symmetrize(&star_contract(&f, &f, 1, 1).unwrap()).unwrap().scaled(2.0);
        assert!(inner.kernel(2).unwrap().max_abs_diff(&c11).unwrap() < 1e-13);
    }

    #[test]
    fn inner_rejects_uncentered() {
        let s = sp(&[1.0]);
        let c = ChaosExpansion::constant(s, 1.0);
        assert!(malliavin_inner(&c, &c, &Tolerance::default()).is_err());
    }

    #[test]
    fn moments() {
        let s = sp(&[1.0, 1.0]);
        let h = Kernel::ones(s.clone(), 1).unwrap();
        let fh = ChaosExpansion::single(h).unwrap();
        assert_eq!(second_moment(&fh), 2.0);
        assert_eq!(second_moment(&ChaosExpansion::constant(s.clone(), 3.0)), 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_sym(&s, 2, &mut rng);
        let g = random_sym(&s, 2, &mut rng);
        let ff = ChaosExpansion::single(f.clone()).unwrap();
        let gg = ChaosExpansion::single(g.clone()).unwrap();
        assert_eq!(centered_product_moment(&fh, &ff).unwrap(), 0.0);
        let want = 2.0 * f.inner_product(&g).unwrap();
        assert!((centered_product_moment(&ff, &gg).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn reads_expansion_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = sp(&[1.0, 2.0]);
        Kernel::new(s.clone(), 1, vec![1.0, 2.0]).unwrap().write(&dir.path().join("f1.toml")).unwrap();
        Kernel::new(s, 2, vec![1.0, 0.5, 0.5, 0.0]).unwrap().write(&dir.path().join("f2.toml")).unwrap();
        let path = dir.path().join("F.toml");
        std::fs::write(&path, "mean = 0.5\nkernels = [\"f1.toml\", \"f2.toml\"]\n").unwrap();
        let f = ChaosExpansion::read(&path).unwrap();
        assert_eq!(f.mean(), 0.5);
        assert_eq!(f.max_order(), 2);
        Kernel::new(f.space().clone(), 2, vec![1.0, 0.5, 0.0, 0.0])
            .unwrap()
            .write(&dir.path().join("f2.toml"))
            .unwrap();
        assert!(ChaosExpansion::read(&path).is_err());
    }
}
