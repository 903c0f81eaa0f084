//! Minimum-cost injective assignment (Kuhn–Munkres with potentials).

use std::ops::{Add, Sub};

use num_traits::{Bounded, Zero};

use crate::error::{Error, Result};

/// Element type the solver accepts: floats or integers.
pub trait AssignCost: Copy + PartialOrd + Zero + Bounded + Add<Output = Self> + Sub<Output = Self> {}

impl<T> AssignCost for T where T: Copy + PartialOrd + Zero + Bounded + Add<Output = T> + Sub<Output = T> {}

/// Maps every target (column) to a distinct query (row).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `query_of[j]` is the query assigned to target `j`.
    pub query_of: Vec<usize>,
    pub queries: usize,
}

impl Assignment {
    pub fn targets(&self) -> usize {
        self.query_of.len()
    }

    /// Target matched to `query`, if any.
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.query_of.iter().position(|&q| q == query)
    }

    pub fn is_matched(&self, query: usize, target: usize) -> bool {
        self.query_of[target] == query
    }

    pub fn total<C: AssignCost>(&self, cost: &[C], cols: usize) -> C {
        self.query_of
            .iter()
            .enumerate()
            .fold(C::zero(), |acc, (j, &i)| acc + cost[i * cols + j])
    }
}

/// Solves `min Σ_j cost[σ(j)][j]` over injective `σ` for a row-major
/// `rows × cols` matrix with `rows ≥ cols`.
///
/// Surplus rows act as zero-cost dummies. Scans use strict comparisons in index
/// order, so the result is deterministic; an all-equal matrix yields the
/// identity assignment.
pub fn solve<C: AssignCost>(cost: &[C], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::Shape {
            op: "hungarian",
            lhs: vec![rows, cols],
            rhs: vec![cost.len()],
        });
    }
    if rows < cols {
        return Err(Error::Capacity {
            queries: rows,
            targets: cols,
        });
    }
    if cols == 0 {
        return Ok(Assignment {
            query_of: Vec::new(),
            queries: rows,
        });
    }
    // Targets are the "workers" (n = cols), queries the "jobs" (m = rows).
    let (n, m) = (cols, rows);
    let at = |worker: usize, job: usize| cost[(job - 1) * cols + (worker - 1)];
    let inf = C::max_value();
    let mut u = vec![C::zero(); n + 1];
    let mut v = vec![C::zero(); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for worker in 1..=n {
        owner[0] = worker;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut query_of = vec![usize::MAX; n];
    for job in 1..=m {
        if owner[job] != 0 {
            query_of[owner[job] - 1] = job - 1;
        }
    }
    debug_assert!(query_of.iter().all(|&q| q < rows));
    Ok(Assignment {
        query_of,
        queries: rows,
    })
}
