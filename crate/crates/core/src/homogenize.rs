//! Lifted trace form of the filter-design problem, kept for verification.
//!
//! The design problem is an inhomogeneous QCQP in f (the linear zero-sum and
//! orthogonality constraints are degree one). Appending a scalar t and working
//! on x = (f; t) makes every constraint quadratic, and lifting to X = x x^T
//! turns objective and constraints into traces against fixed symmetric
//! matrices:
//!
//! - objective: sum_n Tr(C_n X) with C_n = -(D_n^T D_n) embedded in the top-left
//!   block (minimizing it maximizes the residual energy),
//! - Tr(X) = 2 (unit filter norm plus t^2 = 1),
//! - Tr(A_t X) = 1 where A_t picks the t^2 entry,
//! - Tr(A_0 X) = 0 where A_0 couples t with the half-ones vector (zero sum),
//! - |Tr(A_i X)| <= epsilon, A_i coupling t with half of previous filter i.
//!
//! The production solver does not touch this form; tests check that evaluating
//! it at rank-one X from a feasible filter reproduces the direct quantities.

use crate::error::{Error, Result};
use crate::gram::GramMatrix;

/// A symmetric constraint matrix with inclusive bounds on Tr(A X).
#[derive(Clone, Debug)]
pub struct TraceConstraint {
    pub name: &'static str,
    /// Row-major (dim+1)^2 symmetric matrix.
    pub matrix: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug)]
pub struct HomogenizedProblem {
    /// k^2 + 1: filter coefficients plus the homogenizing scalar.
    pub dim: usize,
    /// One negated block-embedded Gram matrix per sample.
    pub objective: Vec<Vec<f64>>,
    pub constraints: Vec<TraceConstraint>,
    pub epsilon: f64,
}

fn sym_at(m: &mut [f64], dim: usize, i: usize, j: usize, v: f64) {
    m[i * dim + j] = v;
    m[j * dim + i] = v;
}

/// Build the lifted problem from per-sample Gram matrices and the previously
/// designed filters the next filter must stay near-orthogonal to.
pub fn homogenize(
    q_per_sample: &[GramMatrix],
    previous: &[Vec<f64>],
    epsilon: f64,
) -> Result<HomogenizedProblem> {
    let first = q_per_sample.first().ok_or(Error::EmptySampleSet)?;
    let d = first.dim;
    for q in q_per_sample {
        if q.dim != d {
            return Err(Error::ShapeMismatch(
                "per-sample Gram matrices must share dimensions".to_string(),
            ));
        }
    }
    for p in previous {
        if p.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "previous filter has {} coefficients, expected {d}",
                p.len()
            )));
        }
    }
    let dim = d + 1;

    let objective = q_per_sample
        .iter()
        .map(|q| {
            let mut c = vec![0.0; dim * dim];
            for i in 0..d {
                for j in 0..d {
                    c[i * dim + j] = -q.get(i, j);
                }
            }
            c
        })
        .collect();

    let mut constraints = Vec::with_capacity(previous.len() + 3);

    let mut trace = vec![0.0; dim * dim];
    for i in 0..dim {
        trace[i * dim + i] = 1.0;
    }
    constraints.push(TraceConstraint {
        name: "trace",
        matrix: trace,
        lower: 2.0,
        upper: 2.0,
    });

    let mut tsq = vec![0.0; dim * dim];
    tsq[d * dim + d] = 1.0;
    constraints.push(TraceConstraint {
        name: "homogenizing",
        matrix: tsq,
        lower: 1.0,
        upper: 1.0,
    });

    let mut zero_sum = vec![0.0; dim * dim];
    for i in 0..d {
        sym_at(&mut zero_sum, dim, i, d, 0.5);
    }
    constraints.push(TraceConstraint {
        name: "zero_sum",
        matrix: zero_sum,
        lower: 0.0,
        upper: 0.0,
    });

    for p in previous {
        let mut ortho = vec![0.0; dim * dim];
        for (i, &c) in p.iter().enumerate() {
            sym_at(&mut ortho, dim, i, d, 0.5 * c);
        }
        constraints.push(TraceConstraint {
            name: "orthogonality",
            matrix: ortho,
            lower: -epsilon,
            upper: epsilon,
        });
    }

    Ok(HomogenizedProblem {
        dim,
        objective,
        constraints,
        epsilon,
    })
}

/// Tr(A x x^T) = x^T A x without forming X.
pub fn trace_at_rank_one(matrix: &[f64], x: &[f64]) -> f64 {
    let dim = x.len();
    debug_assert_eq!(matrix.len(), dim * dim);
    let mut acc = 0.0;
    for i in 0..dim {
        let row = &matrix[i * dim..(i + 1) * dim];
        let mut inner = 0.0;
        for (a, b) in row.iter().zip(x) {
            inner += a * b;
        }
        acc += x[i] * inner;
    }
    acc
}

impl HomogenizedProblem {
    /// x = (f; t).
    pub fn lift(&self, f: &[f64], t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim);
        x.extend_from_slice(f);
        x.push(t);
        x
    }

    /// Lifted objective sum_n Tr(C_n X) at X = x x^T.
    pub fn objective_at(&self, f: &[f64], t: f64) -> f64 {
        let x = self.lift(f, t);
        self.objective.iter().map(|c| trace_at_rank_one(c, &x)).sum()
    }

    /// Each constraint's Tr(A X) at X = x x^T, in declaration order.
    pub fn constraint_values(&self, f: &[f64], t: f64) -> Vec<f64> {
        let x = self.lift(f, t);
        self.constraints
            .iter()
            .map(|c| trace_at_rank_one(&c.matrix, &x))
            .collect()
    }

    /// Names of constraints violated beyond tol at X = x x^T.
    pub fn violations(&self, f: &[f64], t: f64, tol: f64) -> Vec<&'static str> {
        let values = self.constraint_values(f, t);
        self.constraints
            .iter()
            .zip(values)
            .filter(|(c, v)| *v < c.lower - tol || *v > c.upper + tol)
            .map(|(c, _)| c.name)
            .collect()
    }
}
