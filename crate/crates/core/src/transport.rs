//! Exact optimal transport between equal-size, equally weighted clouds.
//!
//! With `n` points on each side every coupling with uniform marginals is a
//! convex combination of permutations, so the optimum is an assignment problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::kappa::{rho_unchecked, KappaFn};
use crate::sim::{CoupledTrajectory, EmpiricalMeasure};

pub const DEFAULT_CAP: usize = 4096;
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostSpec {
    /// `|x - y|^p`, reported as `(mean)^{1/p}`.
    Euclidean { p: f64 },
    /// `ρ(x, y)`, reported as the plain mean.
    Rho { kappa: KappaFn, t: f64 },
    /// Sum of per-particle `ρ` over blocks of `κ.dim()` coordinates.
    RhoTilde { kappa: KappaFn, t: f64 },
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            CostSpec::Euclidean { p } if !(*p >= 1.0 && p.is_finite()) => {
                Err(invalid(format!("exponent p must be >= 1, got {p}")))
            }
            CostSpec::Rho { t, .. } | CostSpec::RhoTilde { t, .. } if !(*t > 0.0) => {
                Err(invalid(format!("T must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }

    pub fn cost(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            CostSpec::Euclidean { p } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                if *p == 2.0 {
                    d2
                } else {
                    d2.sqrt().powf(*p)
                }
            }
            CostSpec::Rho { kappa, t } => rho_unchecked(kappa, *t, x, y),
            CostSpec::RhoTilde { kappa, t } => {
                let d = kappa.dim();
                x.chunks(d)
                    .zip(y.chunks(d))
                    .map(|(a, b)| rho_unchecked(kappa, *t, a, b))
                    .sum()
            }
        }
    }

    /// Maps a mean cost to the reported distance.
    pub fn finish(&self, mean_cost: f64) -> f64 {
        match self {
            CostSpec::Euclidean { p } => mean_cost.max(0.0).powf(1.0 / p),
            _ => mean_cost,
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            CostSpec::Euclidean { .. } => Ok(()),
            CostSpec::Rho { kappa, .. } => ensure_dim(kappa.dim(), d),
            CostSpec::RhoTilde { kappa, .. } => {
                if d.is_multiple_of(kappa.dim()) {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch {
                        expected: kappa.dim() * (d / kappa.dim() + 1),
                        got: d,
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transport {
    pub value: f64,
    pub mean_cost: f64,
    /// `assignment[i]` is the index in `ν` matched to point `i` of `μ`.
    pub assignment: Vec<usize>,
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cost: &CostSpec) -> Result<Vec<f64>> {
    cost.validate()?;
    if mu.len() != nu.len() {
        return Err(Error::Unsupported(format!(
            "unequal sizes {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    ensure_dim(mu.dim(), nu.dim())?;
    cost.check_dim(mu.dim())?;
    let n = mu.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| cost.cost(mu.point(i), nu.point(j))).collect())
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if !flat.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(flat)
}

/// Minimum-cost perfect matching on a dense `n x n` matrix.
///
/// Shortest augmenting paths with dual potentials, `O(n³)`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

pub fn optimal_transport(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cost: &CostSpec,
    cap: usize,
) -> Result<Transport> {
    if mu.len() > cap {
        return Err(Error::TooLarge { n: mu.len(), cap });
    }
    let n = mu.len();
    let c = cost_matrix(mu, nu, cost)?;
    let assignment = solve_assignment(&c, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
    let mean_cost = total / n as f64;
    Ok(Transport {
        value: cost.finish(mean_cost),
        mean_cost,
        assignment,
    })
}

/// Exact transport distance with the default size cap.
pub fn wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cost: &CostSpec) -> Result<f64> {
    Ok(optimal_transport(mu, nu, cost, DEFAULT_CAP)?.value)
}

/// Minimum over all `n!` permutations; `n <= 8`.
pub fn brute_force_wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cost: &CostSpec) -> Result<f64> {
    let n = mu.len();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge {
            n,
            cap: BRUTE_FORCE_MAX,
        });
    }
    let c = cost_matrix(mu, nu, cost)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm.
    let mut counters = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(cost.finish(best / n as f64))
}

/// Cost of the synchronous coupling at `step`: an upper bound on the distance
/// between the two marginals.
pub fn coupling_upper_bound(trajs: &[CoupledTrajectory], cost: &CostSpec, step: usize) -> Result<f64> {
    cost.validate()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in trajs.iter().filter(|t| !t.diverged()) {
        let j = t
            .index_of(step)
            .ok_or_else(|| invalid(format!("step {step} was not recorded")))?;
        cost.check_dim(t.x[j].len())?;
        total += cost.cost(&t.x[j], &t.y[j]);
        count += 1;
    }
    if count == 0 {
        return Err(invalid("no usable trajectories"));
    }
    Ok(cost.finish(total / count as f64))
}
