//! Cellular geometry and uplink success probability.
//!
//! Base stations form a homogeneous Poisson point process; the tagged BS sits
//! at the origin and its `N` devices are placed uniformly in its Voronoi
//! cell. A scheduled uplink transmission is repeated `attempts` times per
//! aggregation step with selection combining at the receiver, over an
//! interference field approximated by a non-homogeneous PPP with intensity
//! `lambda * (1 - exp(-12/5 * lambda * pi * ||x||^2))`.
//!
//! The analytic success probability integrates that interference model in
//! closed form up to a one-dimensional quadrature; the Monte-Carlo estimator
//! samples from exactly the same interference model, so the two validate each
//! other's numerics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quad;
use crate::rng;

/// Saturation constant of the interferer intensity function.
const INTERFERER_INTENSITY_EXPONENT: f64 = 12.0 / 5.0;
/// Tail cutoff for the quadrature upper limit.
const TAIL_TOL: f64 = 1e-10;
/// Absolute quadrature tolerance.
const QUAD_TOL: f64 = 1e-8;
/// Interferers are sampled out to this multiple of `sim_window`.
const INTERFERER_RANGE_FACTOR: f64 = 2.0;

const MC_MIN_DRAWS: u64 = 10_000;
const MC_CHUNK: u64 = 8192;

/// How device distances in the tagged cell are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Uniform in the Voronoi cell of the tagged BS (rejection sampling).
    #[default]
    Uniform,
    /// Deterministic distance quantiles of a disc with the mean cell area,
    /// for variance-free bound studies.
    Quantile,
}

/// Parameters of the cellular network model.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    /// BS intensity (points per unit area).
    pub lambda: f64,
    /// Devices per cell, N.
    pub n_devices: usize,
    /// Resource blocks per round, M.
    pub n_rbs: usize,
    /// Normalized noise power sigma^2.
    pub noise: f64,
    /// Path-loss exponent, must exceed 2.
    pub alpha: f64,
    /// SINR threshold, linear scale.
    pub theta: f64,
    /// Transmission attempts per aggregation step, ell.
    pub attempts: u32,
    /// Half-width of the square simulation window.
    pub sim_window: f64,
    /// Interference on/off (off leaves a noise-only Rayleigh channel).
    pub interference: bool,
    /// Device placement mode.
    pub placement: Placement,
}

impl NetworkConfig {
    /// Paper-style defaults for the given cell population.
    pub fn with_defaults(lambda: f64, n_devices: usize, n_rbs: usize) -> Self {
        NetworkConfig {
            lambda,
            n_devices,
            n_rbs,
            noise: 1e-4,
            alpha: 4.0,
            theta: theta_from_db(-15.0),
            attempts: 2,
            sim_window: 5.0 / lambda.sqrt(),
            interference: true,
            placement: Placement::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.n_devices == 0 {
            return Err(Error::Config("n_devices must be at least 1".into()));
        }
        if self.n_rbs == 0 || self.n_rbs > self.n_devices {
            return Err(Error::Config(format!(
                "need 1 <= M <= N, got M={} N={}",
                self.n_rbs, self.n_devices
            )));
        }
        if self.alpha <= 2.0 {
            return Err(Error::Config("alpha must exceed 2".into()));
        }
        if self.theta <= 0.0 {
            return Err(Error::Config("theta must be positive".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if self.attempts == 0 {
            return Err(Error::Config("attempts must be at least 1".into()));
        }
        let expected_bs = self.lambda * (2.0 * self.sim_window).powi(2);
        if expected_bs < 20.0 {
            return Err(Error::Config(format!(
                "sim_window too small: expected BS count {expected_bs:.1} < 20"
            )));
        }
        Ok(())
    }
}

/// Convert an SINR threshold from dB to linear scale.
pub fn theta_from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// A sampled network geometry around the tagged BS at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRealization {
    /// Device distances to the tagged BS, sorted ascending.
    pub device_distances: Vec<f64>,
    /// Positions of the other BSs in the window.
    pub bs_positions: Vec<(f64, f64)>,
    /// Number of times the whole PPP had to be resampled.
    pub retries: u32,
}

/// Provenance of a success-probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessSource {
    Analytic,
    MonteCarlo,
}

/// Per-device success probabilities for one cell realization.
#[derive(Debug, Clone)]
pub struct SuccessModel {
    pub u: Vec<f64>,
    pub source: SuccessSource,
}

impl SuccessModel {
    /// Evaluate the analytic success probability at every device distance.
    pub fn analytic(cfg: &NetworkConfig, cell: &CellRealization) -> Result<SuccessModel> {
        let u = cell
            .device_distances
            .iter()
            .map(|&r| success_probability_analytic(cfg, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuccessModel {
            u,
            source: SuccessSource::Analytic,
        })
    }

    /// Monte-Carlo estimate at every device distance (std errors discarded).
    pub fn monte_carlo(
        cfg: &NetworkConfig,
        cell: &CellRealization,
        draws: u64,
        seed: u64,
    ) -> Result<SuccessModel> {
        let u = cell
            .device_distances
            .iter()
            .enumerate()
            .map(|(k, &r)| success_probability_mc(cfg, r, draws, seed.wrapping_add(k as u64)))
            .map(|res| res.map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuccessModel {
            u,
            source: SuccessSource::MonteCarlo,
        })
    }
}

const DEVICE_REJECTION_CAP: u64 = 200_000;
const PPP_RESAMPLE_CAP: u32 = 64;

/// Sample BS positions and device distances for the tagged cell.
pub fn sample_cell(cfg: &NetworkConfig, seed: u64) -> Result<CellRealization> {
    cfg.validate()?;
    if cfg.placement == Placement::Quantile {
        // Deterministic quantiles of the in-disc distance distribution for a
        // disc with the mean cell area 1/lambda.
        let radius = 1.0 / (std::f64::consts::PI * cfg.lambda).sqrt();
        let n = cfg.n_devices as f64;
        let device_distances = (0..cfg.n_devices)
            .map(|k| radius * ((k as f64 + 0.5) / n).sqrt())
            .collect();
        let mut rng = rng::split(seed, 0x0ce1, 0);
        let bs_positions = sample_bs_ppp(cfg, &mut rng);
        return Ok(CellRealization {
            device_distances,
            bs_positions,
            retries: 0,
        });
    }

    let mut retries = 0;
    loop {
        let mut rng = rng::split(seed, 0x0ce1, retries as u64);
        let bs_positions = sample_bs_ppp(cfg, &mut rng);
        match place_devices(cfg, &bs_positions, &mut rng) {
            Some(mut device_distances) => {
                device_distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
                return Ok(CellRealization {
                    device_distances,
                    bs_positions,
                    retries,
                });
            }
            None => {
                retries += 1;
                if retries >= PPP_RESAMPLE_CAP {
                    return Err(Error::Config(
                        "device rejection sampling kept failing; degenerate geometry".into(),
                    ));
                }
            }
        }
    }
}

fn sample_bs_ppp(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let w = cfg.sim_window;
    let mean = cfg.lambda * (2.0 * w) * (2.0 * w);
    let count = Poisson::new(mean).expect("validated mean").sample(rng) as usize;
    (0..count)
        .map(|_| (rng.gen_range(-w..w), rng.gen_range(-w..w)))
        .collect()
}

/// Uniform placement in the origin cell: accept a uniform point of the window
/// iff the origin is its nearest BS.
fn place_devices(
    cfg: &NetworkConfig,
    bs_positions: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let w = cfg.sim_window;
    let mut distances = Vec::with_capacity(cfg.n_devices);
    let mut tries = 0u64;
    while distances.len() < cfg.n_devices {
        tries += 1;
        if tries > DEVICE_REJECTION_CAP {
            return None;
        }
        let x = rng.gen_range(-w..w);
        let y = rng.gen_range(-w..w);
        let d2 = x * x + y * y;
        let in_cell = bs_positions
            .iter()
            .all(|&(bx, by)| (x - bx).powi(2) + (y - by).powi(2) > d2);
        if in_cell && d2 > 0.0 {
            distances.push(d2.sqrt());
        }
    }
    Some(distances)
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// Analytic success probability at distance `r_k` with `cfg.attempts`
/// transmission attempts.
pub fn success_probability_analytic(cfg: &NetworkConfig, r_k: f64) -> Result<f64> {
    success_probability_analytic_ell(cfg, r_k, cfg.attempts)
}

/// Analytic success probability with an explicit attempt count `ell`.
pub fn success_probability_analytic_ell(cfg: &NetworkConfig, r_k: f64, ell: u32) -> Result<f64> {
    if r_k <= 0.0 {
        return Err(Error::Config("r_k must be positive".into()));
    }
    if ell == 0 {
        return Err(Error::Config("ell must be at least 1".into()));
    }
    let r_alpha = r_k.powf(cfg.alpha);
    let noise_exp = cfg.theta * cfg.noise * r_alpha;

    let mut sum = 0.0f64;
    let mut sum_abs = 0.0f64;
    for i in 1..=ell {
        let interference = if cfg.interference {
            interference_exponent(cfg, r_alpha, i)?
        } else {
            0.0
        };
        let term = binomial(ell, i) * (-(i as f64) * noise_exp - interference).exp();
        let signed = if i % 2 == 1 { term } else { -term };
        sum += signed;
        sum_abs += term;
    }
    if sum_abs > 0.0 && sum.abs() < sum_abs * 1e-6 {
        log::warn!(
            "alternating binomial sum lost more than 6 digits at ell={ell}, r_k={r_k}: \
             |sum|={:.3e}, sum of magnitudes={:.3e}",
            sum.abs(),
            sum_abs
        );
    }
    clamp_probability(sum)
}

/// `2*pi*lambda * int_0^inf (1 - (1 + theta r^a x^-a)^-i)(1 - e^{-c x^2}) x dx`
fn interference_exponent(cfg: &NetworkConfig, r_alpha: f64, i: u32) -> Result<f64> {
    let theta_r = cfg.theta * r_alpha;
    let alpha = cfg.alpha;
    let c = INTERFERER_INTENSITY_EXPONENT * cfg.lambda * std::f64::consts::PI;
    let i_f = i as f64;

    // Beyond the cutoff the integrand is below i*theta*r^a*x^(1-a); pick the
    // cutoff so the dropped tail is below TAIL_TOL.
    let cutoff = (i_f * theta_r / ((alpha - 2.0) * TAIL_TOL)).powf(1.0 / (alpha - 2.0));
    // The integrand turns over near x* where theta r^a x^-a ~ 1, or at the
    // intensity saturation scale, whichever is smaller.
    let x_star = theta_r.powf(1.0 / alpha);
    let scale = 0.05 * x_star.min(1.0 / c.sqrt());

    let integrand = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let ratio = 1.0 + theta_r * x.powf(-alpha);
        let outage = 1.0 - ratio.powf(-i_f);
        outage * (1.0 - (-c * x * x).exp()) * x
    };
    let integral = quad::integrate(integrand, 0.0, cutoff, scale, QUAD_TOL)?;
    Ok(2.0 * std::f64::consts::PI * cfg.lambda * integral)
}

fn clamp_probability(p: f64) -> Result<f64> {
    let slack = 1e-6;
    if p < -slack || p > 1.0 + slack || !p.is_finite() {
        return Err(Error::Numerical(format!(
            "success probability {p} outside [0,1] beyond quadrature tolerance"
        )));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Interferer path-loss gains `||x||^-alpha` from the non-homogeneous PPP
/// approximation, sampled in a disc of radius `2 * sim_window`.
fn sample_interferer_powers(cfg: &NetworkConfig, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    out.clear();
    if !cfg.interference {
        return;
    }
    let radius = INTERFERER_RANGE_FACTOR * cfg.sim_window;
    let c = INTERFERER_INTENSITY_EXPONENT * cfg.lambda * std::f64::consts::PI;
    let mean = cfg.lambda * std::f64::consts::PI * radius * radius;
    let count = Poisson::new(mean).expect("positive mean").sample(rng) as usize;
    for _ in 0..count {
        let rho = radius * rng.gen_range(0f64..1f64).sqrt();
        // Thin the homogeneous parent to intensity lambda(1 - e^{-c rho^2}).
        if rng.gen_range(0f64..1f64) < 1.0 - (-c * rho * rho).exp() {
            out.push(rho.powf(-cfg.alpha));
        }
    }
}

/// One selection-combining outcome: interferer positions are fixed across the
/// `ell` attempts, fading is redrawn every attempt.
fn attempts_succeed(
    cfg: &NetworkConfig,
    signal_pow: f64,
    interferer_powers: &[f64],
    ell: u32,
    rng: &mut ChaCha8Rng,
) -> bool {
    for _ in 0..ell {
        let mut interference = 0.0;
        for &p in interferer_powers {
            let h: f64 = Exp1.sample(rng);
            interference += h * p;
        }
        let h_signal: f64 = Exp1.sample(rng);
        if h_signal * signal_pow > cfg.theta * (interference + cfg.noise) {
            return true;
        }
    }
    false
}

/// Monte-Carlo estimate of the success probability at distance `r_k`.
///
/// Returns `(estimate, standard_error)`. Draws are split into fixed-size
/// chunks with counter-derived RNG streams, so the result does not depend on
/// the number of worker threads.
pub fn success_probability_mc(
    cfg: &NetworkConfig,
    r_k: f64,
    draws: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if draws < MC_MIN_DRAWS {
        return Err(Error::Config(format!(
            "need at least {MC_MIN_DRAWS} Monte-Carlo draws, got {draws}"
        )));
    }
    if r_k <= 0.0 {
        return Err(Error::Config("r_k must be positive".into()));
    }
    let signal_pow = r_k.powf(-cfg.alpha);
    let n_chunks = draws.div_ceil(MC_CHUNK);
    let successes: u64 = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::split(seed, 0x3c17, chunk);
            let lo = chunk * MC_CHUNK;
            let hi = ((chunk + 1) * MC_CHUNK).min(draws);
            let mut powers = Vec::new();
            let mut hits = 0u64;
            for _ in lo..hi {
                sample_interferer_powers(cfg, &mut rng, &mut powers);
                if attempts_succeed(cfg, signal_pow, &powers, cfg.attempts, &mut rng) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = successes as f64 / draws as f64;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    Ok((p, se))
}

/// Channel outcomes for one aggregation step.
///
/// Each occupied resource block gets a fresh interferer realization shared
/// across the `ell` attempts of this step; realizations are independent
/// across resource blocks and across rounds.
pub fn draw_success_indicators(
    cfg: &NetworkConfig,
    cell: &CellRealization,
    scheduled: &[Option<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<bool>>> {
    let mut powers = Vec::new();
    scheduled
        .iter()
        .map(|slot| match *slot {
            None => Ok(None),
            Some(k) => {
                let r = *cell.device_distances.get(k).ok_or_else(|| {
                    Error::Config(format!("scheduled device index {k} out of range"))
                })?;
                sample_interferer_powers(cfg, rng, &mut powers);
                let ok = attempts_succeed(cfg, r.powf(-cfg.alpha), &powers, cfg.attempts, rng);
                Ok(Some(ok))
            }
        })
        .collect()
}
