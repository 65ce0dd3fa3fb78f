#![allow(dead_code)]

pub mod checks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use secfuse::matrix::{self, Matrix};
use secfuse::sim::{PartyModel, SystemModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `B·Bᵀ + floor·I`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Matrix {
    let b = gaussian(rng, n, n);
    &b * b.transpose() + Matrix::identity(n, n) * floor
}

/// Symmetric with eigenvalues of both signs (almost surely).
pub fn symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let b = gaussian(rng, n, n);
    (&b + b.transpose()) * 0.5
}

/// Random matrix rescaled to the given spectral norm.
pub fn with_norm(rng: &mut ChaCha8Rng, rows: usize, cols: usize, norm: f64) -> Matrix {
    let m = gaussian(rng, rows, cols);
    &m * (norm / matrix::spectral_norm(&m))
}

/// The four-party example system.
pub fn example_system() -> (SystemModel, Vec<PartyModel>) {
    let a = matrix::from_rows(&[
        &[4.58, 1.72, -0.54, -3.51, -0.14],
        &[2.77, 2.07, -0.34, -2.68, -0.01],
        &[2.07, 0.92, 0.57, -2.15, 0.19],
        &[5.36, 2.46, -0.76, -4.20, -0.22],
        &[4.03, 1.69, -0.29, -3.73, 0.58],
    ]);
    let system = SystemModel::new(a, Matrix::identity(5, 5) * 0.1).unwrap();
    let observers: [(&[&[f64]], f64); 4] = [
        (&[&[0.0, 0.0, 1.0, 0.0, 0.0]], 0.10),
        (&[&[0.0, 1.0, 0.0, 0.0, 0.0]], 0.08),
        (&[&[1.0, 0.0, 0.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 0.0, 0.0]], 0.09),
        (&[&[1.0, 0.0, 0.0, 1.0, 1.0]], 0.06),
    ];
    let parties = observers
        .iter()
        .enumerate()
        .map(|(i, (c, r))| {
            let c = matrix::from_rows(c);
            let m = c.nrows();
            PartyModel::new(i + 1, c, Matrix::identity(m, m) * *r).unwrap()
        })
        .collect();
    (system, parties)
}
