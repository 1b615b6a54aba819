//! Cross-checks the deflated power-iteration solver against a dense symmetric
//! eigendecomposition. With no previous filters beyond the zero-sum
//! constraint, the sequential objectives must equal the leading eigenvalues of
//! P0 Q P0, where P0 projects out the all-ones direction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srfb::design::solve_next_filter;
use srfb::gram::GramMatrix;

fn random_psd(k: usize, seed: u64) -> GramMatrix {
    let dim = k * k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = dim + 3;
    let a: Vec<f64> = (0..rows * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut g = GramMatrix::zeros(k);
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += a[r * dim + i] * a[r * dim + j];
            }
            g.set(i, j, acc);
        }
    }
    g
}

fn projected_matrix(q: &GramMatrix) -> DMatrix<f64> {
    let dim = q.dim;
    let qm = DMatrix::from_fn(dim, dim, |i, j| q.get(i, j));
    let u0 = DMatrix::from_element(dim, 1, 1.0 / (dim as f64).sqrt());
    let p0 = DMatrix::identity(dim, dim) - &u0 * u0.transpose();
    &p0 * qm * &p0
}

#[test]
fn sequential_objectives_match_dense_eigenvalues() {
    for seed in [100u64, 101, 102, 103, 104, 200, 201, 202, 203, 204] {
        let q = random_psd(3, seed);
        let pqp = projected_matrix(&q);
        let mut eigenvalues: Vec<f64> = pqp.symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let mut previous: Vec<Vec<f64>> = Vec::new();
        for m in 0..3 {
            let solved = solve_next_filter(&q, &previous, seed ^ (m as u64)).unwrap();
            let expect = eigenvalues[m];
            let rel = (solved.objective - expect).abs() / expect.abs().max(1e-9);
            assert!(
                rel < 1e-4,
                "seed {seed} filter {m}: objective {} vs eigenvalue {expect} (rel {rel:.2e})",
                solved.objective
            );
            previous.push(solved.coeffs);
        }
    }
}
