//! Optimal resource-block allocation for the with-replacement sampling
//! scheme.
//!
//! Minimizes the variance proxy sum_k p_k / (U_k q_k) over allocations q with
//! sum q_k = M. The program is separable and convex, so stationarity gives
//! the closed form q_k* proportional to sqrt(p_k / U_k); an independent
//! projected-gradient solver is kept around to cross-check it.

use crate::datasets::WEIGHT_TOL;
use crate::error::{Error, Result};
use crate::flcore::SamplingPolicy;

const MAX_ITERS: usize = 200_000;
const CONDITION_WARN_RATIO: f64 = 1e8;

/// Allocation problem instance: device weights, success probabilities, and
/// the number of resource blocks to split.
#[derive(Debug, Clone)]
pub struct SchedulingProblem {
    pub p: Vec<f64>,
    pub u: Vec<f64>,
    pub m: usize,
}

impl SchedulingProblem {
    pub fn validate(&self) -> Result<()> {
        if self.p.is_empty() || self.p.len() != self.u.len() {
            return Err(Error::Config(
                "p and U must be non-empty and equally long".into(),
            ));
        }
        if self.m < 1 {
            return Err(Error::Config("need at least one resource block".into()));
        }
        if self.p.iter().any(|&pk| !(pk > 0.0)) {
            return Err(Error::Config("all weights p_k must be positive".into()));
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL.max(1e-9) {
            return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
        }
        if self.u.iter().any(|&uk| !(uk > 0.0) || uk > 1.0) {
            return Err(Error::Config(
                "success probabilities must lie in (0, 1]".into(),
            ));
        }
        let ratios: Vec<f64> = self.p.iter().zip(&self.u).map(|(&p, &u)| p / u).collect();
        let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
        if hi / lo > CONDITION_WARN_RATIO {
            log::warn!(
                "allocation problem is badly conditioned: p/U spread {:.3e}",
                hi / lo
            );
        }
        Ok(())
    }

    /// Objective sum_k p_k / (U_k q_k) at a given allocation.
    pub fn objective(&self, q: &[f64]) -> f64 {
        self.p
            .iter()
            .zip(&self.u)
            .zip(q)
            .map(|((&pk, &uk), &qk)| pk / (uk * qk))
            .sum()
    }
}

/// Optimal allocation and its objective value.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub q: Vec<f64>,
    pub objective: f64,
}

/// Closed-form optimum: q_k* = M sqrt(p_k/U_k) / sum_j sqrt(p_j/U_j), with
/// objective (sum_j sqrt(p_j/U_j))^2 / M.
pub fn solve_optimal_q(prob: &SchedulingProblem) -> Result<Allocation> {
    prob.validate()?;
    let roots: Vec<f64> = prob
        .p
        .iter()
        .zip(&prob.u)
        .map(|(&pk, &uk)| (pk / uk).sqrt())
        .collect();
    let total: f64 = roots.iter().sum();
    let m = prob.m as f64;
    let q = roots.iter().map(|&r| m * r / total).collect();
    Ok(Allocation {
        q,
        objective: total * total / m,
    })
}

/// Numeric cross-check: projected gradient descent on the affine constraint
/// sum q = M with backtracking, run until the KKT residual (the spread of the
/// per-coordinate gradients) drops below `tol` relative to their mean.
pub fn verify_with_iterative_solver(prob: &SchedulingProblem, tol: f64) -> Result<Vec<f64>> {
    prob.validate()?;
    if !(tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let n = prob.p.len();
    let a: Vec<f64> = prob.p.iter().zip(&prob.u).map(|(&p, &u)| p / u).collect();
    let m = prob.m as f64;
    let mut q = vec![m / n as f64; n];
    for _ in 0..MAX_ITERS {
        // gradient of sum a_k/q_k is -a_k/q_k^2
        let g: Vec<f64> = a.iter().zip(&q).map(|(&ak, &qk)| -ak / (qk * qk)).collect();
        let mean_g = g.iter().sum::<f64>() / n as f64;
        let spread = g
            .iter()
            .map(|&gk| (gk - mean_g).abs())
            .fold(0.0f64, f64::max);
        if spread <= tol * mean_g.abs() {
            return Ok(q);
        }
        // Newton direction for the equality-constrained problem: the Hessian
        // is diagonal (2 a_k / q_k^3), and the multiplier nu keeps the step
        // on the constraint plane. An exact line search (bisection on the
        // monotone directional derivative) guards the early iterations.
        let h: Vec<f64> = a
            .iter()
            .zip(&q)
            .map(|(&ak, &qk)| 2.0 * ak / (qk * qk * qk))
            .collect();
        let inv_h_sum: f64 = h.iter().map(|&hk| 1.0 / hk).sum();
        let nu: f64 = g.iter().zip(&h).map(|(&gk, &hk)| gk / hk).sum::<f64>() / inv_h_sum;
        let d: Vec<f64> = g.iter().zip(&h).map(|(&gk, &hk)| (gk - nu) / hk).collect();
        let s_cap = q
            .iter()
            .zip(&d)
            .filter(|&(_, &dk)| dk > 0.0)
            .map(|(&qk, &dk)| qk / dk)
            .fold(f64::INFINITY, f64::min);
        let deriv = |s: f64| -> f64 {
            a.iter()
                .zip(&q)
                .zip(&d)
                .map(|((&ak, &qk), &dk)| ak * dk / ((qk - s * dk) * (qk - s * dk)))
                .sum()
        };
        let mut hi = 0.999 * s_cap;
        let mut s = if deriv(hi) <= 0.0 {
            hi
        } else {
            let mut lo = 0.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if deriv(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        // guard against rounding pushing an entry non-positive
        while q.iter().zip(&d).any(|(&qk, &dk)| qk - s * dk <= 0.0) {
            s *= 0.5;
        }
        for (qk, dk) in q.iter_mut().zip(&d) {
            *qk -= s * dk;
        }
        let scale = m / q.iter().sum::<f64>();
        for qk in q.iter_mut() {
            *qk *= scale;
        }
    }
    Err(Error::Numerical(format!(
        "allocation solver did not reach tolerance {tol} in {MAX_ITERS} iterations"
    )))
}

/// Turn an allocation into the with-replacement sampling distribution
/// q̂_k = q_k / M.
pub fn to_sampling_policy(prob: &SchedulingProblem, q: &[f64]) -> Result<SamplingPolicy> {
    if q.len() != prob.p.len() {
        return Err(Error::Config("allocation length mismatch".into()));
    }
    let m = prob.m as f64;
    let mut probs: Vec<f64> = q.iter().map(|&qk| qk / m).collect();
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "allocation sums to {} resource blocks, expected {}",
            sum * m,
            prob.m
        )));
    }
    // remove residual rounding so the policy's own sum check passes
    for pk in probs.iter_mut() {
        *pk /= sum;
    }
    Ok(SamplingPolicy::SchemeII { probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn two_device() -> SchedulingProblem {
        SchedulingProblem {
            p: vec![0.5, 0.5],
            u: vec![1.0, 0.25],
            m: 1,
        }
    }

    #[test]
    fn two_device_closed_form() {
        let sol = solve_optimal_q(&two_device()).unwrap();
        assert_abs_diff_eq!(sol.q[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.q[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.objective, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(two_device().objective(&[0.5, 0.5]), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn two_device_grid_search() {
        let prob = two_device();
        let mut best = (f64::INFINITY, 0.0);
        let mut s = 1e-3;
        while s < 1.0 {
            let f = prob.objective(&[s, 1.0 - s]);
            if f < best.0 {
                best = (f, s);
            }
            s += 1e-3;
        }
        let sol = solve_optimal_q(&prob).unwrap();
        assert!((best.1 - sol.q[0]).abs() <= 1e-3);
        assert!(sol.objective <= best.0 + 1e-9);
    }

    #[test]
    fn symmetric_instance_gives_uniform_allocation() {
        let n = 8;
        let prob = SchedulingProblem {
            p: vec![1.0 / n as f64; n],
            u: vec![0.37; n],
            m: 3,
        };
        let sol = solve_optimal_q(&prob).unwrap();
        for &qk in &sol.q {
            assert_abs_diff_eq!(qk, 3.0 / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn iterative_solver_matches_closed_form() {
        for seed in 0..5u64 {
            let mut r = rng::split(seed, 0xa110, 0);
            let n = 6;
            let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let prob = SchedulingProblem {
                p: raw.iter().map(|&x| x / total).collect(),
                u: (0..n).map(|_| r.gen_range(0.05..1.0)).collect(),
                m: 4,
            };
            let sol = solve_optimal_q(&prob).unwrap();
            let num = verify_with_iterative_solver(&prob, 1e-8).unwrap();
            for (a, b) in sol.q.iter().zip(&num) {
                assert!((a - b).abs() <= 1e-6, "closed form {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn uniform_u_scaling_leaves_allocation_unchanged() {
        let prob = SchedulingProblem {
            p: vec![0.2, 0.3, 0.5],
            u: vec![0.9, 0.6, 0.3],
            m: 2,
        };
        let scaled = SchedulingProblem {
            u: prob.u.iter().map(|&u| u / 3.0).collect(),
            ..prob.clone()
        };
        let a = solve_optimal_q(&prob).unwrap();
        let b = solve_optimal_q(&scaled).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(b.objective, 3.0 * a.objective, epsilon = 1e-9);
    }

    #[test]
    fn single_device_gets_all_blocks() {
        let prob = SchedulingProblem {
            p: vec![1.0],
            u: vec![0.5],
            m: 7,
        };
        let sol = solve_optimal_q(&prob).unwrap();
        assert_abs_diff_eq!(sol.q[0], 7.0, epsilon = 1e-12);
        let num = verify_with_iterative_solver(&prob, 1e-8).unwrap();
        assert_abs_diff_eq!(num[0], 7.0, epsilon = 1e-9);
    }

    #[test]
    fn optimum_beats_random_feasible_points() {
        let prob = SchedulingProblem {
            p: vec![0.1, 0.2, 0.3, 0.4],
            u: vec![0.8, 0.5, 0.9, 0.2],
            m: 2,
        };
        let sol = solve_optimal_q(&prob).unwrap();
        let mut r = rng::split(99, 0xa110, 1);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|&x| 2.0 * x / total).collect();
            assert!(sol.objective <= prob.objective(&q) + 1e-12);
        }
    }

    #[test]
    fn invalid_problems_rejected() {
        let mut prob = two_device();
        prob.u[0] = 0.0;
        assert!(solve_optimal_q(&prob).is_err());
        let mut prob = two_device();
        prob.p[0] = 0.6;
        assert!(solve_optimal_q(&prob).is_err());
        let mut prob = two_device();
        prob.m = 0;
        assert!(solve_optimal_q(&prob).is_err());
    }

    #[test]
    fn policy_conversion_round_trips() {
        let prob = SchedulingProblem {
            p: vec![0.5, 0.5],
            u: vec![1.0, 0.25],
            m: 4,
        };
        let sol = solve_optimal_q(&prob).unwrap();
        let policy = to_sampling_policy(&prob, &sol.q).unwrap();
        policy.validate(2, 4).unwrap();
        match policy {
            SamplingPolicy::SchemeII { probs } => {
                assert_abs_diff_eq!(probs[0], 1.0 / 3.0, epsilon = 1e-12);
            }
            _ => unreachable!(),
        }
    }
}

