//! Cell grids standing in for the control measure, and dense kernels on them.
//!
//! A kernel of order p on a space with m cells stores m^p values in row-major
//! order: the first argument varies slowest.

use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayViewD, IxDyn};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::util::fmt17;

/// Largest kernel order accepted anywhere in the crate.
pub const MAX_ORDER: usize = 6;
/// Refuse to allocate kernels with more entries than this.
pub const MAX_ENTRIES: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { abs: 1e-9, rel: 1e-9 }
    }
}

impl Tolerance {
    pub fn new(abs: f64, rel: f64) -> Self {
        Tolerance { abs, rel }
    }

    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.abs + self.rel * a.abs().max(b.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSpace {
    weights: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl DiscreteSpace {
    pub fn new(weights: Vec<f64>) -> Result<Arc<Self>> {
        if weights.is_empty() {
            return Err(Error::InvalidSpace("no cells".into()));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::InvalidSpace(format!(
                "weight {i} is {w}, must be positive and finite"
            )));
        }
        if !weights.iter().sum::<f64>().is_finite() {
            return Err(Error::InvalidSpace("total mass overflows".into()));
        }
        Ok(Arc::new(DiscreteSpace { weights, labels: None }))
    }

    pub fn with_labels(weights: Vec<f64>, labels: Vec<String>) -> Result<Arc<Self>> {
        if labels.len() != weights.len() {
            return Err(Error::InvalidSpace(format!(
                "{} labels for {} cells",
                labels.len(),
                weights.len()
            )));
        }
        let mut s = Arc::try_unwrap(Self::new(weights)?).expect("fresh Arc");
        s.labels = Some(labels);
        Ok(Arc::new(s))
    }

    pub fn uniform(cells: usize, weight: f64) -> Result<Arc<Self>> {
        Self::new(vec![weight; cells])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Same cell structure: pointer equality or identical weights.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || self.weights == other.weights
    }
}

/// Number of entries of an order-`order` kernel on `m` cells, if it fits.
pub fn entry_count(m: usize, order: usize) -> Option<usize> {
    let mut n: usize = 1;
    for _ in 0..order {
        n = n.checked_mul(m)?;
    }
    Some(n)
}

#[derive(Debug, Clone)]
pub struct Kernel {
    space: Arc<DiscreteSpace>,
    order: usize,
    values: Vec<f64>,
    symmetric: bool,
}

impl Kernel {
    /// Builds a kernel and records whether its values are permutation invariant.
    pub fn new(space: Arc<DiscreteSpace>, order: usize, values: Vec<f64>) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::OrderTooLarge(order));
        }
        let expected = entry_count(space.len(), order)
            .ok_or_else(|| Error::Guard(format!("order-{order} kernel does not fit in memory")))?;
        if values.len() != expected {
            return Err(Error::InvalidKernel(format!(
                "expected {expected} values for order {order} on {} cells, got {}",
                space.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel(format!("value {i} is not finite")));
        }
        let mut k = Kernel { space, order, values, symmetric: false };
        k.symmetric = k.check_symmetry(1e-12);
        Ok(k)
    }

    /// Trusted constructor; the caller vouches for length and symmetry.
    pub(crate) fn from_parts(
        space: Arc<DiscreteSpace>,
        order: usize,
        values: Vec<f64>,
        symmetric: bool,
    ) -> Self {
        debug_assert_eq!(Some(values.len()), entry_count(space.len(), order));
        Kernel { space, order, values, symmetric }
    }

    pub fn zeros(space: Arc<DiscreteSpace>, order: usize) -> Result<Self> {
        Self::filled(space, order, 0.0)
    }

    pub fn ones(space: Arc<DiscreteSpace>, order: usize) -> Result<Self> {
        Self::filled(space, order, 1.0)
    }

    fn filled(space: Arc<DiscreteSpace>, order: usize, v: f64) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::OrderTooLarge(order));
        }
        let n = entry_count(space.len(), order)
            .filter(|n| *n <= MAX_ENTRIES)
            .ok_or_else(|| Error::Guard(format!("order-{order} kernel too large")))?;
        Ok(Kernel::from_parts(space, order, vec![v; n], true))
    }

    pub fn scalar(space: Arc<DiscreteSpace>, c: f64) -> Self {
        Kernel::from_parts(space, 0, vec![c], true)
    }

    /// Evaluates `f` on every index tuple in row-major order.
    pub fn from_fn(
        space: Arc<DiscreteSpace>,
        order: usize,
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self> {
        let m = space.len();
        let n = entry_count(m, order)
            .filter(|n| *n <= MAX_ENTRIES)
            .ok_or_else(|| Error::Guard(format!("order-{order} kernel too large")))?;
        let mut idx = vec![0usize; order];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f(&idx));
            for a in (0..order).rev() {
                idx[a] += 1;
                if idx[a] < m {
                    break;
                }
                idx[a] = 0;
            }
        }
        Kernel::new(space, order, values)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn space(&self) -> &Arc<DiscreteSpace> {
        &self.space
    }

    pub fn cells(&self) -> usize {
        self.space.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Value of an order-0 kernel.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.order == 0).then(|| self.values[0])
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order);
        let m = self.cells();
        let flat = idx.iter().fold(0usize, |acc, &i| {
            assert!(i < m, "cell index {i} out of range");
            acc * m + i
        });
        self.values[flat]
    }

    pub fn view(&self) -> ArrayViewD<'_, f64> {
        ArrayViewD::from_shape(IxDyn(&vec![self.cells(); self.order]), &self.values)
            .expect("length matches shape")
    }

    /// Exhaustive check under adjacent transpositions, which generate all permutations.
    pub fn check_symmetry(&self, rel_tol: f64) -> bool {
        if self.order < 2 {
            return true;
        }
        let v = self.view();
        (0..self.order - 1).all(|a| {
            let mut swapped = v.view();
            swapped.swap_axes(a, a + 1);
            v.iter().zip(swapped.iter()).all(|(x, y)| {
                (x - y).abs() <= rel_tol * x.abs().max(y.abs()).max(1.0)
            })
        })
    }

    pub fn same_space(&self, other: &Kernel) -> bool {
        self.space.same_as(&other.space)
    }

    fn check_compatible(&self, other: &Kernel) -> Result<()> {
        if !self.same_space(other) {
            return Err(Error::SpaceMismatch);
        }
        if self.order != other.order {
            return Err(Error::OrderMismatch { left: self.order, right: other.order });
        }
        Ok(())
    }

    /// Sum of f times the product of cell weights over all index tuples.
    pub fn integrate(&self) -> f64 {
        weighted_total(self.space.weights(), self.order, |k| self.values[k])
    }

    pub fn inner_product(&self, other: &Kernel) -> Result<f64> {
        self.check_compatible(other)?;
        let (a, b) = (&self.values, &other.values);
        Ok(weighted_total(self.space.weights(), self.order, |k| a[k] * b[k]))
    }

    pub fn norm_sq(&self) -> f64 {
        let a = &self.values;
        weighted_total(self.space.weights(), self.order, |k| a[k] * a[k])
    }

    /// L2 norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Weighted L^p norm. Panics if `exponent < 1`.
    pub fn lp_norm(&self, exponent: f64) -> f64 {
        assert!(exponent >= 1.0, "lp_norm exponent must be >= 1");
        if exponent == 2.0 {
            return self.norm();
        }
        let a = &self.values;
        weighted_total(self.space.weights(), self.order, |k| a[k].abs().powf(exponent))
            .powf(1.0 / exponent)
    }

    /// f(cell, .) as a kernel of order p - 1.
    pub fn slice(&self, cell: usize) -> Result<Kernel> {
        if self.order == 0 {
            return Err(Error::InvalidKernel("cannot slice an order-0 kernel".into()));
        }
        let m = self.cells();
        if cell >= m {
            return Err(Error::IndexOutOfRange { index: cell, cells: m });
        }
        let stride = self.values.len() / m;
        let values = self.values[cell * stride..(cell + 1) * stride].to_vec();
        Ok(Kernel::from_parts(self.space.clone(), self.order - 1, values, self.symmetric))
    }

    pub fn scaled(&self, c: f64) -> Kernel {
        let values = self.values.iter().map(|v| c * v).collect();
        Kernel::from_parts(self.space.clone(), self.order, values, self.symmetric)
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &Kernel) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        self.symmetric &= other.symmetric;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Kernel) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn set_symmetric(&mut self, flag: bool) {
        self.symmetric = flag;
    }

    /// TOML document with fields m, weights, order, values.
    pub fn to_toml(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(|x| fmt17(*x)).collect::<Vec<_>>().join(", ");
        format!(
            "m = {}\norder = {}\nweights = [{}]\nvalues = [{}]\n",
            self.cells(),
            self.order,
            join(self.space.weights()),
            join(&self.values)
        )
    }

    /// Parses a kernel document. Reuses `space` when its weights match.
    pub fn from_toml(text: &str, space: Option<&Arc<DiscreteSpace>>) -> Result<Kernel> {
        let file: KernelFile = toml::from_str(text)
            .map_err(|e| Error::InvalidKernel(format!("parse error: {e}")))?;
        if file.weights.len() != file.m {
            return Err(Error::InvalidKernel(format!(
                "m = {} but {} weights given",
                file.m,
                file.weights.len()
            )));
        }
        let space = match space {
            Some(s) if s.weights() == file.weights.as_slice() => s.clone(),
            Some(_) => return Err(Error::SpaceMismatch),
            None => DiscreteSpace::new(file.weights)?,
        };
        Kernel::new(space, file.order, file.values)
    }

    pub fn read(path: &Path, space: Option<&Arc<DiscreteSpace>>) -> Result<Kernel> {
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        Kernel::from_toml(&text, space).map_err(|e| Error::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| file_err(path, e))
    }
}

pub(crate) fn file_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::File { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    m: usize,
    weights: Vec<f64>,
    order: usize,
    values: Vec<f64>,
}

/// Sum of `val(k)` times weight products, collapsing the last axis repeatedly.
/// The reduction order is fixed, so results are reproducible bit for bit.
pub(crate) fn weighted_total(w: &[f64], order: usize, val: impl Fn(usize) -> f64) -> f64 {
    if order == 0 {
        return val(0);
    }
    let m = w.len();
    let outer = m.pow(order as u32 - 1);
    let mut acc: Vec<f64> = (0..outer)
        .map(|i| {
            let base = i * m;
            w.iter().enumerate().map(|(j, wj)| val(base + j) * wj).sum()
        })
        .collect();
    while acc.len() > 1 {
        acc = acc
            .chunks_exact(m)
            .map(|c| c.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
    }
    acc[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(w: &[f64]) -> Arc<DiscreteSpace> {
        DiscreteSpace::new(w.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(DiscreteSpace::new(vec![1.0, 0.0]).is_err());
        assert!(DiscreteSpace::new(vec![1.0, f64::NAN]).is_err());
        assert!(DiscreteSpace::new(vec![]).is_err());
        assert!(DiscreteSpace::with_labels(vec![1.0], vec!["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn integrate_examples() {
        let s = sp(&[1.0, 1.0]);
        assert_eq!(Kernel::scalar(s.clone(), 7.0).integrate(), 7.0);
        assert_eq!(Kernel::new(s, 1, vec![3.0, 4.0]).unwrap().integrate(), 7.0);
        let s = sp(&[0.5, 2.0]);
        assert_eq!(Kernel::ones(s, 2).unwrap().integrate(), 6.25);
    }

    #[test]
    fn inner_product_examples() {
        let s = sp(&[1.0, 1.0]);
        let f = Kernel::new(s.clone(), 1, vec![1.0, 2.0]).unwrap();
        let g = Kernel::new(s.clone(), 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(f.inner_product(&g).unwrap(), 11.0);
        let z = Kernel::zeros(s.clone(), 1).unwrap();
        assert_eq!(z.inner_product(&z).unwrap(), 0.0);
        let s2 = sp(&[2.0, 3.0]);
        let f = Kernel::new(s2.clone(), 1, vec![1.0, 1.0]).unwrap();
        let g = Kernel::new(s2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(f.inner_product(&g).unwrap(), -1.0);
        let h = Kernel::zeros(s, 2).unwrap();
        assert!(matches!(f.inner_product(&h), Err(Error::SpaceMismatch)));
    }

    #[test]
    fn lp_norm_examples() {
        let s = sp(&[2.0]);
        let f = Kernel::new(s.clone(), 1, vec![3.0]).unwrap();
        assert!((f.lp_norm(3.0) - 54f64.powf(1.0 / 3.0)).abs() < 1e-14);
        assert_eq!(Kernel::zeros(s, 2).unwrap().lp_norm(4.0), 0.0);
    }

    #[test]
    fn slice_examples() {
        let s = sp(&[1.0, 1.0]);
        let f = Kernel::new(s.clone(), 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(f.slice(1).unwrap().as_scalar(), Some(4.0));
        assert!(f.slice(2).is_err());
        assert!(Kernel::scalar(s, 1.0).slice(0).is_err());
    }

    #[test]
    fn symmetry_flag() {
        let s = sp(&[1.0, 1.0]);
        let f = Kernel::new(s.clone(), 2, vec![0.0, 2.0, 4.0, 0.0]).unwrap();
        assert!(!f.is_symmetric());
        let g = Kernel::new(s, 2, vec![0.0, 3.0, 3.0, 0.0]).unwrap();
        assert!(g.is_symmetric());
        assert!(g.slice(0).unwrap().is_symmetric());
    }

    #[test]
    fn toml_round_trip_is_bit_exact() {
        let s = sp(&[0.1, 1.0 / 3.0, 2.5]);
        let f = Kernel::from_fn(s, 2, |i| ((i[0] + 1) as f64).sqrt() / (i[1] + 7) as f64).unwrap();
        let back = Kernel::from_toml(&f.to_toml(), None).unwrap();
        assert_eq!(back.order(), 2);
        assert_eq!(back.space().weights(), f.space().weights());
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn toml_rejects_bad_lengths() {
        let bad = "m = 2\norder = 1\nweights = [1.0, 1.0]\nvalues = [1.0]\n";
        assert!(Kernel::from_toml(bad, None).is_err());
        let bad = "m = 3\norder = 1\nweights = [1.0, 1.0]\nvalues = [1.0, 2.0]\n";
        assert!(Kernel::from_toml(bad, None).is_err());
    }
}
