#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use poisson_chaos::algebra::symmetrize;
use poisson_chaos::simulate::diag_free_projection;
use poisson_chaos::{DiscreteSpace, Kernel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn random_space(m: usize, rng: &mut ChaCha8Rng) -> Arc<DiscreteSpace> {
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.25..1.5)).collect();
    DiscreteSpace::new(w).unwrap()
}

pub fn random_sym(space: &Arc<DiscreteSpace>, order: usize, rng: &mut ChaCha8Rng) -> Kernel {
    let raw = Kernel::from_fn(space.clone(), order, |_| rng.random_range(-1.0..1.0)).unwrap();
    symmetrize(&raw).unwrap()
}

pub fn random_diag_free(space: &Arc<DiscreteSpace>, order: usize, rng: &mut ChaCha8Rng) -> Kernel {
    diag_free_projection(&random_sym(space, order, rng)).kernel
}

/// Random symmetric, diagonal-free kernel supported on the given cells.
pub fn random_on(space: &Arc<DiscreteSpace>, order: usize, cells: &[usize], rng: &mut ChaCha8Rng) -> Kernel {
    let raw = Kernel::from_fn(space.clone(), order, |idx| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if idx.iter().all(|i| cells.contains(i)) { v } else { 0.0 }
    })
    .unwrap();
    diag_free_projection(&symmetrize(&raw).unwrap()).kernel
}
