//! Convergence-bound arithmetic: the variance constant B, the O(1/T) bound
//! for the unbiased algorithm, and the comparative effects of the round
//! budget K, local epochs E, and retransmission count ell.

use crate::error::{Error, Result};
use crate::flcore::theory_gamma;

/// Which sampling scheme's variance constant to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    I,
    II,
}

/// Everything the bound needs.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub mu: f64,
    pub l: f64,
    /// Per-device stochastic-gradient variance bounds sigma_k^2.
    pub sigma_sq: Vec<f64>,
    /// Heterogeneity gap Gamma = F* - sum p_k F_k*.
    pub gamma_cap: f64,
    /// Gradient-norm bound G.
    pub g: f64,
    pub p: Vec<f64>,
    /// Per-device expected RB usage q_k.
    pub q: Vec<f64>,
    /// Per-device success probabilities U_k.
    pub u: Vec<f64>,
    pub e_steps: usize,
    pub k_rounds: usize,
    pub m: usize,
    /// ||w0 - w*||^2.
    pub w0_dist_sq: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Config("mu must be positive".into()));
        }
        if self.l < self.mu {
            return Err(Error::Config(format!(
                "need mu <= L, got mu={} L={}",
                self.mu, self.l
            )));
        }
        let n = self.p.len();
        if n == 0 || self.q.len() != n || self.u.len() != n || self.sigma_sq.len() != n {
            return Err(Error::Config(
                "p, q, U, sigma_sq must share one length per device".into(),
            ));
        }
        if self.gamma_cap < 0.0 || self.g < 0.0 || self.w0_dist_sq < 0.0 {
            return Err(Error::Config(
                "Gamma, G, and the initial distance must be non-negative".into(),
            ));
        }
        if self.sigma_sq.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("sigma_k^2 must be non-negative".into()));
        }
        if self.e_steps < 1 || self.k_rounds < 1 || self.m < 1 {
            return Err(Error::Config("E, K, and M must be at least 1".into()));
        }
        Ok(())
    }
}

/// Aggregation variance constant: sum p_k (1/(q_k U_k) - 1) for scheme I,
/// sum p_k (1/(q_k U_k) - 1/M) for scheme II.
pub fn compute_b(p: &[f64], q: &[f64], u: &[f64], m: usize, scheme: Scheme) -> Result<f64> {
    if p.len() != q.len() || p.len() != u.len() {
        return Err(Error::Config("p, q, U length mismatch".into()));
    }
    let baseline = match scheme {
        Scheme::I => 1.0,
        Scheme::II => 1.0 / m as f64,
    };
    let mut b = 0.0;
    for ((&pk, &qk), &uk) in p.iter().zip(q).zip(u) {
        if !(qk * uk > 0.0) {
            return Err(Error::Config(
                "compute_b needs q_k U_k > 0 for every device".into(),
            ));
        }
        b += pk * (1.0 / (qk * uk) - baseline);
    }
    Ok(b)
}

/// The bracketed constant of the bound: (2/mu)(sum p_k^2 sigma_k^2 + 6 L Gamma
/// + 8(E-1)^2 G^2 + 4 E^2 G^2 B) + (mu gamma / 2) ||w0 - w*||^2.
fn bound_numerator(inp: &BoundInputs, b: f64, gamma: f64) -> f64 {
    let e = inp.e_steps as f64;
    let var_terms: f64 = inp
        .p
        .iter()
        .zip(&inp.sigma_sq)
        .map(|(&pk, &sk)| pk * pk * sk)
        .sum::<f64>()
        + 6.0 * inp.l * inp.gamma_cap
        + 8.0 * (e - 1.0) * (e - 1.0) * inp.g * inp.g
        + 4.0 * e * e * inp.g * inp.g * b;
    (2.0 / inp.mu) * var_terms + 0.5 * inp.mu * gamma * inp.w0_dist_sq
}

/// Expected optimality gap bound after T = KE local steps with the decaying
/// theory step size: (L/mu)/(gamma+T) * [ ... ].
pub fn theorem1_bound(inp: &BoundInputs, scheme: Scheme) -> Result<f64> {
    inp.validate()?;
    let b = compute_b(&inp.p, &inp.q, &inp.u, inp.m, scheme)?;
    let gamma = theory_gamma(inp.l, inp.mu, inp.e_steps);
    let t = (inp.k_rounds * inp.e_steps) as f64;
    Ok((inp.l / inp.mu) / (gamma + t) * bound_numerator(inp, b, gamma))
}

/// Large-T simplification dropping gamma from the denominator:
/// (L/mu)/(KE) * [ ... ].
pub fn corollary1_bound(inp: &BoundInputs, scheme: Scheme) -> Result<f64> {
    inp.validate()?;
    let b = compute_b(&inp.p, &inp.q, &inp.u, inp.m, scheme)?;
    let gamma = theory_gamma(inp.l, inp.mu, inp.e_steps);
    let t = (inp.k_rounds * inp.e_steps) as f64;
    Ok((inp.l / inp.mu) / t * bound_numerator(inp, b, gamma))
}

/// What stays fixed while E varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ESearchMode {
    /// K is held at `inputs.k_rounds`; total steps T = KE grow with E.
    FixedK,
    /// The step budget T = K*E is held at `inputs.k_rounds * inputs.e_steps`;
    /// K = max(1, T/E) shrinks as E grows.
    FixedT,
}

/// One point of the E sweep.
#[derive(Debug, Clone, Copy)]
pub struct EPoint {
    pub e_steps: usize,
    pub bound: f64,
}

/// Scan integer E over `e_range` and return the best E with the full curve.
pub fn optimal_e_search(
    inp: &BoundInputs,
    e_range: &[usize],
    mode: ESearchMode,
    scheme: Scheme,
) -> Result<(usize, Vec<EPoint>)> {
    if e_range.is_empty() {
        return Err(Error::Config("E range must be non-empty".into()));
    }
    let t_budget = inp.k_rounds * inp.e_steps;
    let mut curve = Vec::with_capacity(e_range.len());
    for &e in e_range {
        let mut probe = inp.clone();
        probe.e_steps = e;
        probe.k_rounds = match mode {
            ESearchMode::FixedK => inp.k_rounds,
            ESearchMode::FixedT => (t_budget / e).max(1),
        };
        curve.push(EPoint {
            e_steps: e,
            bound: corollary1_bound(&probe, scheme)?,
        });
    }
    let best = curve
        .iter()
        .min_by(|a, b| a.bound.partial_cmp(&b.bound).unwrap())
        .unwrap()
        .e_steps;
    Ok((best, curve))
}

/// Compare spending a factor `ell` on extra rounds (K -> ell K with the
/// single-attempt success probabilities) against spending it on uplink
/// retransmissions (K unchanged, U -> U^(ell)).
///
/// Returns `(bound_extra_rounds, bound_extra_attempts)`.
pub fn compare_k_vs_ell(
    inp: &BoundInputs,
    ell: u32,
    u_single: &[f64],
    u_ell: &[f64],
    scheme: Scheme,
) -> Result<(f64, f64)> {
    if u_single.len() != inp.p.len() || u_ell.len() != inp.p.len() {
        return Err(Error::Config("U vectors must have one entry per device".into()));
    }
    if ell < 1 {
        return Err(Error::Config("ell must be at least 1".into()));
    }
    if u_single.iter().zip(u_ell).any(|(&a, &b)| b + 1e-12 < a) {
        return Err(Error::Config(
            "U^(ell) must dominate the single-attempt U".into(),
        ));
    }
    let mut more_rounds = inp.clone();
    more_rounds.u = u_single.to_vec();
    more_rounds.k_rounds = inp.k_rounds * ell as usize;
    let mut more_attempts = inp.clone();
    more_attempts.u = u_ell.to_vec();
    Ok((
        corollary1_bound(&more_rounds, scheme)?,
        corollary1_bound(&more_attempts, scheme)?,
    ))
}
