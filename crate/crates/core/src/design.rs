//! Filter design by deflated projected power iteration.
//!
//! Each filter maximizes the residual-energy quadratic form f^T Q f over unit
//! vectors that sum to zero and are orthogonal to every filter designed before
//! it. That feasible set is the unit sphere of a linear subspace, so the
//! maximizer is the dominant eigenvector of P Q P, where P projects onto the
//! orthogonal complement of the all-ones vector plus the previous filters.
//! Orthogonality is enforced exactly; |dot| = 0 always sits inside the
//! near-orthogonality band the bank contract allows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::gram::GramMatrix;
use crate::seed::{derive_seed, streams};

const RAYLEIGH_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 5000;

/// One designed filter with its attained objective value.
#[derive(Clone, Debug)]
pub struct SolvedFilter {
    pub coeffs: Vec<f64>,
    pub objective: f64,
    /// True when Q carried no usable energy and the filter is the seeded
    /// deterministic feasible fallback rather than an eigenvector.
    pub fallback: bool,
}

/// A designed bank plus the per-channel objective trace (non-increasing in m).
#[derive(Clone, Debug)]
pub struct DesignedBank {
    pub bank: FilterBank,
    pub objectives: Vec<Vec<f64>>,
    pub fallback_filters: usize,
}

/// vec(f)^T Q vec(f).
pub fn filter_objective(q: &GramMatrix, f: &[f64]) -> Result<f64> {
    if f.len() != q.dim {
        return Err(Error::ShapeMismatch(format!(
            "filter has {} coefficients, Gram matrix is {}x{}",
            f.len(),
            q.dim,
            q.dim
        )));
    }
    Ok(q.quad_form(f))
}

/// Orthonormal basis of the excluded subspace: normalized ones vector plus the
/// previous filters, Gram-Schmidt cleaned so projection is numerically exact.
fn excluded_basis(dim: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(previous.len() + 1);
    let u0 = vec![1.0 / (dim as f64).sqrt(); dim];
    basis.push(u0);
    for prev in previous {
        let mut v = prev.clone();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-10 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

fn project(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= dot * bi;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        for vi in v.iter_mut() {
            *vi /= norm;
        }
    }
    norm
}

/// Seeded start vector inside the feasible subspace.
fn seeded_feasible(dim: usize, basis: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        project(&mut v, basis);
        if normalize(&mut v) > 1e-8 {
            return v;
        }
    }
}

/// First coefficient above the noise floor decides the sign.
fn fix_sign(v: &mut [f64]) {
    for &c in v.iter() {
        if c.abs() > 1e-8 {
            if c < 0.0 {
                for vi in v.iter_mut() {
                    *vi = -*vi;
                }
            }
            return;
        }
    }
}

/// Maximize f^T Q f over unit zero-sum vectors orthogonal to `previous`.
///
/// When Q has no energy left in the feasible subspace (all-zero residuals, or
/// everything already captured), the returned filter is a seeded deterministic
/// feasible vector with `fallback` set, never an error: training must survive a
/// momentarily perfect model.
pub fn solve_next_filter(
    q: &GramMatrix,
    previous: &[Vec<f64>],
    seed: u64,
) -> Result<SolvedFilter> {
    let dim = q.dim;
    if dim < 2 {
        return Err(Error::SubspaceExhausted(
            "a 1x1 filter cannot be both unit-norm and zero-sum".to_string(),
        ));
    }
    for p in previous {
        if p.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "previous filter has {} coefficients, expected {dim}",
                p.len()
            )));
        }
    }
    if previous.len() >= dim - 1 {
        return Err(Error::SubspaceExhausted(format!(
            "{} filters already fill the {}-dimensional zero-sum subspace",
            previous.len(),
            dim - 1
        )));
    }

    let basis = excluded_basis(dim, previous);
    let trace = q.trace();
    let degenerate_floor = trace.abs() * 1e-14 + f64::MIN_POSITIVE;

    let mut v = seeded_feasible(dim, &basis, seed);
    let mut tmp = vec![0.0; dim];
    // The Rayleigh quotient of each iterate is compared against the previous
    // iterate's, so the first pass must never look converged.
    let mut lambda = f64::NEG_INFINITY;
    let mut degenerate = trace <= 0.0;

    if !degenerate {
        let mut converged = false;
        for _ in 0..MAX_ITERS {
            q.matvec(&v, &mut tmp);
            project(&mut tmp, &basis);
            let new_lambda: f64 = v.iter().zip(&tmp).map(|(a, b)| a * b).sum();
            let norm = normalize(&mut tmp);
            if norm <= degenerate_floor {
                degenerate = true;
                break;
            }
            std::mem::swap(&mut v, &mut tmp);
            let delta = (new_lambda - lambda).abs();
            lambda = new_lambda;
            if delta <= RAYLEIGH_TOL * lambda.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        let _ = converged; // best effort past MAX_ITERS is accepted
    }

    if degenerate {
        let mut f = seeded_feasible(dim, &basis, derive_seed(seed, streams::SOLVER, 1));
        fix_sign(&mut f);
        let objective = q.quad_form(&f);
        return Ok(SolvedFilter {
            coeffs: f,
            objective,
            fallback: true,
        });
    }

    // Clean residual components the iteration left outside the subspace.
    project(&mut v, &basis);
    normalize(&mut v);
    fix_sign(&mut v);
    let objective = q.quad_form(&v);
    Ok(SolvedFilter {
        coeffs: v,
        objective,
        fallback: false,
    })
}

/// Design M filters per channel by sequential deflation.
pub fn design_filter_bank(
    q_per_channel: &[GramMatrix],
    filters_per_channel: usize,
    epsilon: f64,
    seed: u64,
) -> Result<DesignedBank> {
    let first = q_per_channel.first().ok_or(Error::EmptySampleSet)?;
    let k = first.k;
    for q in q_per_channel {
        if q.dim != first.dim {
            return Err(Error::ShapeMismatch(
                "per-channel Gram matrices must share dimensions".to_string(),
            ));
        }
    }
    let max = k * k - 1;
    if filters_per_channel > max {
        return Err(Error::TooManyFilters {
            requested: filters_per_channel,
            max,
        });
    }
    if filters_per_channel == 0 {
        return Err(Error::EmptyInput);
    }

    let channels = q_per_channel.len();
    let mut coeffs = Vec::with_capacity(channels * filters_per_channel * k * k);
    let mut objectives = Vec::with_capacity(channels);
    let mut fallback_filters = 0;
    for (c, q) in q_per_channel.iter().enumerate() {
        let mut previous: Vec<Vec<f64>> = Vec::with_capacity(filters_per_channel);
        let mut channel_objectives = Vec::with_capacity(filters_per_channel);
        for m in 0..filters_per_channel {
            let solve_seed = derive_seed(seed, streams::SOLVER, ((c as u64) << 32) | m as u64);
            let solved = solve_next_filter(q, &previous, solve_seed)?;
            if solved.fallback {
                fallback_filters += 1;
            }
            channel_objectives.push(solved.objective);
            coeffs.extend_from_slice(&solved.coeffs);
            previous.push(solved.coeffs);
        }
        objectives.push(channel_objectives);
    }
    let bank = FilterBank::from_filters(channels, filters_per_channel, k, epsilon, coeffs)?;
    Ok(DesignedBank {
        bank,
        objectives,
        fallback_filters,
    })
}
