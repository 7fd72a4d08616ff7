//! Federated training loop: device sampling, local SGD, and aggregation.
//!
//! One round: the BS samples devices onto the M resource blocks, broadcasts
//! the global model, scheduled devices run E local SGD steps, and each update
//! either survives its uplink or is lost. Three aggregation rules are
//! provided: the unbiased rule that reweights by the inverse scheduling and
//! success probabilities, and two biased plain-averaging baselines.

use std::time::Instant;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datasets::{LocalDataset, WEIGHT_TOL};
use crate::error::{Error, Result};
use crate::model::{self, Arch, LossSpec};
use crate::rng;
use crate::wireless::{draw_success_indicators, CellRealization, NetworkConfig};

/// How the BS assigns devices to the M resource blocks each round.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingPolicy {
    /// Uniform M-subset of the N devices, without replacement.
    SchemeI,
    /// M i.i.d. categorical draws with replacement from `probs` (sums to 1).
    SchemeII { probs: Vec<f64> },
}

impl SamplingPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            SamplingPolicy::SchemeI => "I",
            SamplingPolicy::SchemeII { .. } => "II",
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if m < 1 || n < 1 {
            return Err(Error::Config("need at least one device and one RB".into()));
        }
        match self {
            SamplingPolicy::SchemeI => {
                if m > n {
                    return Err(Error::Config(format!(
                        "scheme I needs M <= N, got M={m} N={n}"
                    )));
                }
            }
            SamplingPolicy::SchemeII { probs } => {
                if probs.len() != n {
                    return Err(Error::Config(format!(
                        "scheme II needs {n} probabilities, got {}",
                        probs.len()
                    )));
                }
                if probs.iter().any(|&q| !(q > 0.0)) {
                    return Err(Error::Config(
                        "scheme II probabilities must be positive".into(),
                    ));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > WEIGHT_TOL {
                    return Err(Error::Config(format!(
                        "scheme II probabilities sum to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Expected per-device RB usage q_k: M/N under scheme I, M*q̂_k under
    /// scheme II.
    pub fn q(&self, n: usize, m: usize) -> Vec<f64> {
        match self {
            SamplingPolicy::SchemeI => vec![m as f64 / n as f64; n],
            SamplingPolicy::SchemeII { probs } => probs.iter().map(|&q| m as f64 * q).collect(),
        }
    }
}

/// How scheduled-and-delivered updates are folded into the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationRule {
    /// w + sum over delivered RBs of p_k/(q_k U_k) * (v_k - w); unbiased.
    Unbiased,
    /// Mean of delivered local models with a fixed 1/M normalizer; falls back
    /// to the previous model when nothing is delivered.
    BiasedFraction,
    /// Mean of delivered updates normalized by the delivered count (0/0 = 0).
    BiasedWeighted,
}

impl AggregationRule {
    pub fn label(&self) -> &'static str {
        match self {
            AggregationRule::Unbiased => "unbiased",
            AggregationRule::BiasedFraction => "biased_fraction",
            AggregationRule::BiasedWeighted => "biased_weighted",
        }
    }
}

/// Learning-rate schedule, evaluated at the global local-step index t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// eta0 / (1 + round); the step used in the experiments.
    Practical { eta0: f64 },
    /// 2 / (mu (gamma + t)); the step the convergence bound assumes.
    Theory { mu: f64, gamma: f64 },
    Constant { eta: f64 },
}

/// gamma = max(8L/mu, E), the offset the theory schedule needs so that
/// eta_t <= 1/(4L) and eta_t <= 2 eta_{t+E} hold for all t.
pub fn theory_gamma(l: f64, mu: f64, e_steps: usize) -> f64 {
    (8.0 * l / mu).max(e_steps as f64)
}

impl LrSchedule {
    pub fn at(&self, t: usize, e_steps: usize) -> f64 {
        match *self {
            LrSchedule::Practical { eta0 } => eta0 / (1.0 + (t / e_steps) as f64),
            LrSchedule::Theory { mu, gamma } => 2.0 / (mu * (gamma + t as f64)),
            LrSchedule::Constant { eta } => eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Practical { eta0 } => eta0 > 0.0,
            LrSchedule::Theory { mu, gamma } => mu > 0.0 && gamma > 0.0,
            LrSchedule::Constant { eta } => eta >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning rate {self:?}")))
        }
    }
}

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Communication rounds K.
    pub rounds: usize,
    /// Local SGD steps E per scheduled device per round.
    pub local_steps: usize,
    /// Mini-batch size b.
    pub batch: usize,
    pub lr: LrSchedule,
    /// Optional L2-norm gradient clipping threshold G.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps < 1 {
            return Err(Error::Config("local_steps must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if let Some(g) = self.clip {
            if !(g > 0.0) {
                return Err(Error::Config("clip threshold must be positive".into()));
            }
        }
        self.lr.validate()
    }
}

/// Evaluation snapshot attached to a round trace.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub global_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Record of one communication round.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub round: usize,
    /// Local steps completed after this round: (round + 1) * E.
    pub t: usize,
    /// Device index per resource block.
    pub scheduled: Vec<usize>,
    /// Delivery flag per resource block.
    pub success: Vec<bool>,
    pub metrics: Option<Metrics>,
    pub wall_secs: f64,
}

impl RoundTrace {
    pub fn n_success(&self) -> usize {
        self.success.iter().filter(|&&s| s).count()
    }
}

/// A device-side optimization problem.
pub trait LocalModel: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> Result<f64>;
    fn full_grad(&self, w: &[f64]) -> Result<Vec<f64>>;
    /// Mini-batch gradient; draws the batch from `rng`.
    fn stoch_grad(&self, w: &[f64], batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Local loss backed by a dataset and a loss family.
pub struct DatasetModel<'a> {
    pub spec: &'a LossSpec,
    pub arch: Arch,
    pub data: &'a LocalDataset,
}

impl<'a> DatasetModel<'a> {
    pub fn new(spec: &'a LossSpec, data: &'a LocalDataset) -> Self {
        DatasetModel {
            spec,
            arch: spec.arch(data.dim),
            data,
        }
    }
}

impl LocalModel for DatasetModel<'_> {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        model::loss(self.spec, &self.arch, w, self.data, &idx)
    }

    fn full_grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        model::grad(self.spec, &self.arch, w, self.data, &idx)
    }

    fn stoch_grad(&self, w: &[f64], batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.data.len();
        let idx: Vec<usize> = if n < batch {
            (0..batch).map(|_| rng.gen_range(0..n)).collect()
        } else {
            rand::seq::index::sample(rng, n, batch).into_vec()
        };
        model::grad(self.spec, &self.arch, w, self.data, &idx)
    }
}

/// Scalar quadratic loss (w - c)^2 / 2; its gradient is exact, so stochastic
/// and full gradients coincide.
pub struct Quadratic {
    pub c: f64,
}

impl LocalModel for Quadratic {
    fn dim(&self) -> usize {
        1
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(0.5 * (w[0] - self.c) * (w[0] - self.c))
    }

    fn full_grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![w[0] - self.c])
    }

    fn stoch_grad(&self, w: &[f64], _batch: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.full_grad(w)
    }
}

/// Draw the per-RB device assignment for one round.
pub fn sample_schedule(
    policy: &SamplingPolicy,
    n: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    policy.validate(n, m)?;
    Ok(match policy {
        SamplingPolicy::SchemeI => rand::seq::index::sample(rng, n, m).into_vec(),
        SamplingPolicy::SchemeII { probs } => {
            let dist = WeightedIndex::new(probs)
                .map_err(|e| Error::Config(format!("bad scheme II probabilities: {e}")))?;
            (0..m).map(|_| dist.sample(rng)).collect()
        }
    })
}

fn clip_in_place(g: &mut [f64], cap: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
}

/// Run E local SGD steps from `w` and return the difference v - w that the
/// device would transmit.
pub fn local_sgd(
    mdl: &dyn LocalModel,
    w: &[f64],
    t0: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut v = w.to_vec();
    for i in 0..cfg.local_steps {
        let eta = cfg.lr.at(t0 + i, cfg.local_steps);
        let mut g = mdl.stoch_grad(&v, cfg.batch, rng)?;
        if let Some(cap) = cfg.clip {
            clip_in_place(&mut g, cap);
        }
        for (vj, gj) in v.iter_mut().zip(&g) {
            *vj -= eta * gj;
        }
    }
    for (vj, wj) in v.iter_mut().zip(w) {
        *vj -= wj;
    }
    Ok(v)
}

/// One resource block's contribution to the aggregation step.
#[derive(Debug, Clone)]
pub struct RbUpdate<'a> {
    pub device: usize,
    /// v_k - w_prev.
    pub delta: &'a [f64],
    pub success: bool,
}

/// Fold the round's delivered updates into the global model.
pub fn aggregate(
    rule: AggregationRule,
    w_prev: &[f64],
    updates: &[RbUpdate],
    p: &[f64],
    q: &[f64],
    u: &[f64],
    m: usize,
) -> Result<Vec<f64>> {
    for up in updates {
        if up.device >= p.len() {
            return Err(Error::Config(format!(
                "aggregate: device index {} out of range",
                up.device
            )));
        }
        if up.delta.len() != w_prev.len() {
            return Err(Error::Config("aggregate: dimension mismatch".into()));
        }
    }
    let mut w = w_prev.to_vec();
    match rule {
        AggregationRule::Unbiased => {
            if q.iter().zip(u).any(|(&qk, &uk)| !(qk * uk > 0.0)) {
                return Err(Error::Config(
                    "unbiased rule needs q_k U_k > 0 for every device".into(),
                ));
            }
            for up in updates.iter().filter(|up| up.success) {
                let scale = p[up.device] / (q[up.device] * u[up.device]);
                for (wj, dj) in w.iter_mut().zip(up.delta) {
                    *wj += scale * dj;
                }
            }
        }
        AggregationRule::BiasedFraction => {
            let delivered = updates.iter().filter(|up| up.success).count();
            if delivered == 0 {
                return Ok(w);
            }
            // Fixed 1/M normalizer even when fewer than M updates arrive, so
            // partial delivery shrinks the average of the delivered v_k.
            let scale = 1.0 / m as f64;
            for wj in w.iter_mut() {
                *wj = 0.0;
            }
            for up in updates.iter().filter(|up| up.success) {
                for ((wj, dj), pj) in w.iter_mut().zip(up.delta).zip(w_prev) {
                    *wj += scale * (pj + dj);
                }
            }
        }
        AggregationRule::BiasedWeighted => {
            let delivered = updates.iter().filter(|up| up.success).count();
            if delivered == 0 {
                return Ok(w);
            }
            let scale = 1.0 / delivered as f64;
            for up in updates.iter().filter(|up| up.success) {
                for (wj, dj) in w.iter_mut().zip(up.delta) {
                    *wj += scale * dj;
                }
            }
        }
    }
    Ok(w)
}

/// Uplink outcome source for a round.
pub enum ChannelModel<'a> {
    /// Independent Bernoulli(U_k) per occupied RB; for controlled tests.
    FixedU(&'a [f64]),
    /// Fresh interferer geometry and fading per occupied RB.
    Wireless {
        cfg: &'a NetworkConfig,
        cell: &'a CellRealization,
    },
}

impl ChannelModel<'_> {
    fn draw(&self, schedule: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
        match self {
            ChannelModel::FixedU(u) => schedule
                .iter()
                .map(|&k| {
                    let uk = *u
                        .get(k)
                        .ok_or_else(|| Error::Config(format!("no U for device {k}")))?;
                    Ok(rng.gen::<f64>() < uk)
                })
                .collect(),
            ChannelModel::Wireless { cfg, cell } => {
                let slots: Vec<Option<usize>> = schedule.iter().map(|&k| Some(k)).collect();
                let flags = draw_success_indicators(cfg, cell, &slots, rng)?;
                Ok(flags.into_iter().map(|f| f.unwrap_or(false)).collect())
            }
        }
    }
}

/// Everything one federated training run needs.
pub struct FederatedRun<'a> {
    pub models: Vec<&'a dyn LocalModel>,
    /// Aggregation weights p_k = n_k / n.
    pub p: &'a [f64],
    /// Success probabilities U_k used in the unbiased reweighting.
    pub u: &'a [f64],
    pub policy: SamplingPolicy,
    pub rule: AggregationRule,
    pub channel: ChannelModel<'a>,
    /// Resource blocks per round.
    pub m: usize,
    pub cfg: TrainConfig,
    pub w0: Vec<f64>,
    /// Optional per-round evaluation of the post-aggregation model; receives
    /// the round index and may skip rounds by returning `Ok(None)`.
    pub eval: Option<&'a (dyn Fn(usize, &[f64]) -> Result<Option<Metrics>> + Sync)>,
}

impl FederatedRun<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 {
            return Err(Error::Config("need at least one device".into()));
        }
        if self.p.len() != n || self.u.len() != n {
            return Err(Error::Config(
                "p and U must have one entry per device".into(),
            ));
        }
        let psum: f64 = self.p.iter().sum();
        if (psum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights p sum to {psum}")));
        }
        if self.u.iter().any(|&uk| !(0.0..=1.0).contains(&uk)) {
            return Err(Error::Config("U_k must lie in [0, 1]".into()));
        }
        let dim = self.w0.len();
        if self.models.iter().any(|mdl| mdl.dim() != dim) {
            return Err(Error::Config(
                "all devices must share the global model dimension".into(),
            ));
        }
        self.policy.validate(n, self.m)?;
        self.cfg.validate()
    }

    /// Execute K rounds of sample, broadcast, local SGD, and aggregate.
    ///
    /// RNG use is fully determined by (seed, round): stream 0 drives the
    /// schedule, stream 1 the channel, stream 2+k device k's batches. Runs
    /// that differ only in the aggregation rule therefore see identical
    /// schedules, batches, and channel outcomes.
    pub fn run(&self) -> Result<(Vec<f64>, Vec<RoundTrace>)> {
        self.validate()?;
        let n = self.models.len();
        let e_steps = self.cfg.local_steps;
        let q = self.policy.q(n, self.m);
        let mut w = self.w0.clone();
        let mut traces = Vec::with_capacity(self.cfg.rounds);
        for round in 0..self.cfg.rounds {
            let started = Instant::now();
            let round_tag = round as u64;
            let mut sched_rng = rng::split(self.cfg.seed, round_tag, 0);
            let schedule = sample_schedule(&self.policy, n, self.m, &mut sched_rng)?;

            // A device on several RBs computes once; each RB still gets its
            // own delivery draw below.
            let mut distinct = schedule.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let deltas: Vec<(usize, Vec<f64>)> = distinct
                .par_iter()
                .map(|&k| {
                    let mut dev_rng = rng::split(self.cfg.seed, round_tag, 2 + k as u64);
                    local_sgd(self.models[k], &w, round * e_steps, &self.cfg, &mut dev_rng)
                        .map(|d| (k, d))
                })
                .collect::<Result<_>>()?;
            let delta_of = |k: usize| -> &[f64] {
                let i = deltas.binary_search_by_key(&k, |&(d, _)| d).unwrap();
                &deltas[i].1
            };

            let mut chan_rng = rng::split(self.cfg.seed, round_tag, 1);
            let success = self.channel.draw(&schedule, &mut chan_rng)?;

            let updates: Vec<RbUpdate> = schedule
                .iter()
                .zip(&success)
                .map(|(&k, &s)| RbUpdate {
                    device: k,
                    delta: delta_of(k),
                    success: s,
                })
                .collect();
            w = aggregate(self.rule, &w, &updates, self.p, &q, self.u, self.m)?;
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "global model diverged at round {round}"
                )));
            }

            let metrics = match self.eval {
                Some(eval) => eval(round, &w)?,
                None => None,
            };
            traces.push(RoundTrace {
                round,
                t: (round + 1) * e_steps,
                scheduled: schedule,
                success,
                metrics,
                wall_secs: started.elapsed().as_secs_f64(),
            });
        }
        Ok((w, traces))
    }
}

/// Full-batch gradient descent on the weighted global objective; the
/// centralized benchmark the federated run is compared against.
pub fn run_centralized_gd(
    models: &[&dyn LocalModel],
    p: &[f64],
    lr: &LrSchedule,
    rounds: usize,
    w0: &[f64],
    mut on_round: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    lr.validate()?;
    let mut w = w0.to_vec();
    for round in 0..rounds {
        let eta = lr.at(round, 1);
        let mut g = vec![0.0; w.len()];
        for (mdl, &pk) in models.iter().zip(p) {
            let gk = mdl.full_grad(&w)?;
            for (gj, gkj) in g.iter_mut().zip(&gk) {
                *gj += pk * gkj;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= eta * gj;
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "centralized model diverged at round {round}"
            )));
        }
        on_round(round, &w)?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::NUM_CLASSES;
    use approx::assert_abs_diff_eq;

    fn toy_dataset(n: usize, dim: usize, seed: u64) -> LocalDataset {
        let mut rng = rng::split(seed, 0x7e57, 0);
        let features = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES) as u8).collect();
        LocalDataset::new(features, labels, dim).unwrap()
    }

    #[test]
    fn scheme_i_inclusion_frequency() {
        let (n, m, rounds) = (10usize, 2usize, 100_000usize);
        let mut counts = vec![0u64; n];
        for round in 0..rounds {
            let mut rng = rng::split(42, round as u64, 0);
            let sched = sample_schedule(&SamplingPolicy::SchemeI, n, m, &mut rng).unwrap();
            let mut seen = sched.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), m, "scheme I duplicated a device");
            for k in sched {
                counts[k] += 1;
            }
        }
        let q = m as f64 / n as f64;
        let sigma = (q * (1.0 - q) / rounds as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / rounds as f64;
            assert!((freq - q).abs() <= 3.0 * sigma, "freq {freq} vs {q}");
        }
    }

    #[test]
    fn scheme_ii_one_hot() {
        let mut probs = vec![1e-12; 5];
        probs[1] = 1.0 - 4e-12;
        let policy = SamplingPolicy::SchemeII { probs };
        let mut rng = rng::split(1, 0, 0);
        let sched = sample_schedule(&policy, 5, 8, &mut rng).unwrap();
        assert!(sched.iter().all(|&k| k == 1));
    }

    #[test]
    fn scheme_ii_uniform_rb_counts() {
        let (n, m, rounds) = (10usize, 4usize, 100_000usize);
        let policy = SamplingPolicy::SchemeII {
            probs: vec![1.0 / n as f64; n],
        };
        let mut counts = vec![0u64; n];
        for round in 0..rounds {
            let mut rng = rng::split(7, round as u64, 0);
            for k in sample_schedule(&policy, n, m, &mut rng).unwrap() {
                counts[k] += 1;
            }
        }
        // RB count per device per round is Binomial(M, 1/N).
        let mean = m as f64 / n as f64;
        let sigma = (m as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64) / rounds as f64).sqrt();
        for &c in &counts {
            let avg = c as f64 / rounds as f64;
            assert!((avg - mean).abs() <= 3.0 * sigma, "avg {avg} vs {mean}");
        }
    }

    #[test]
    fn policy_validation() {
        assert!(SamplingPolicy::SchemeI.validate(5, 6).is_err());
        let bad = SamplingPolicy::SchemeII {
            probs: vec![0.6, 0.6],
        };
        assert!(bad.validate(2, 1).is_err());
        let q = SamplingPolicy::SchemeI.q(100, 20);
        assert!(q.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn zero_lr_returns_zero_delta() {
        let spec = LossSpec::logistic(0.1);
        let data = toy_dataset(8, 4, 1);
        let mdl = DatasetModel::new(&spec, &data);
        let cfg = TrainConfig {
            rounds: 1,
            local_steps: 3,
            batch: 4,
            lr: LrSchedule::Constant { eta: 0.0 },
            clip: None,
            seed: 1,
        };
        let w = vec![0.3; mdl.dim()];
        let mut rng = rng::split(1, 0, 2);
        let delta = local_sgd(&mdl, &w, 0, &cfg, &mut rng).unwrap();
        assert!(delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_full_batch_step_matches_gradient() {
        let spec = LossSpec::logistic(0.05);
        let data = toy_dataset(6, 3, 2);
        let mdl = DatasetModel::new(&spec, &data);
        let cfg = TrainConfig {
            rounds: 1,
            local_steps: 1,
            batch: 6,
            lr: LrSchedule::Constant { eta: 0.7 },
            clip: None,
            seed: 2,
        };
        let mut rng0 = rng::split(2, 5, 0);
        let w: Vec<f64> = (0..mdl.dim()).map(|_| rng0.gen_range(-0.5..0.5)).collect();
        let mut rng = rng::split(2, 0, 2);
        let delta = local_sgd(&mdl, &w, 0, &cfg, &mut rng).unwrap();
        let g = mdl.full_grad(&w).unwrap();
        for (d, gj) in delta.iter().zip(&g) {
            assert_abs_diff_eq!(*d, -0.7 * gj, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_steps_on_quadratic_match_closed_form() {
        // v = w - eta(w - c) twice gives w + eta(2 - eta)(c - w).
        let mdl = Quadratic { c: 4.0 };
        let eta = 0.3;
        let cfg = TrainConfig {
            rounds: 1,
            local_steps: 2,
            batch: 1,
            lr: LrSchedule::Constant { eta },
            clip: None,
            seed: 3,
        };
        let w = vec![1.0];
        let mut rng = rng::split(3, 0, 2);
        let delta = local_sgd(&mdl, &w, 0, &cfg, &mut rng).unwrap();
        assert_abs_diff_eq!(delta[0], eta * (2.0 - eta) * (4.0 - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn clipping_caps_step_norm() {
        let mdl = Quadratic { c: 100.0 };
        let cfg = TrainConfig {
            rounds: 1,
            local_steps: 1,
            batch: 1,
            lr: LrSchedule::Constant { eta: 1.0 },
            clip: Some(2.0),
            seed: 4,
        };
        let mut rng = rng::split(4, 0, 2);
        let delta = local_sgd(&mdl, &[0.0], 0, &cfg, &mut rng).unwrap();
        assert_abs_diff_eq!(delta[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn aggregate_no_success_keeps_model() {
        let w = vec![1.0, -2.0];
        let d = vec![5.0, 5.0];
        let ups = vec![RbUpdate {
            device: 0,
            delta: &d,
            success: false,
        }];
        for rule in [
            AggregationRule::Unbiased,
            AggregationRule::BiasedFraction,
            AggregationRule::BiasedWeighted,
        ] {
            let out = aggregate(rule, &w, &ups, &[0.5, 0.5], &[1.0, 1.0], &[1.0, 1.0], 1).unwrap();
            assert_eq!(out, w);
        }
    }

    #[test]
    fn aggregate_full_participation_is_weighted_average() {
        let w = vec![0.0];
        let p = [0.25, 0.75];
        let d0 = vec![2.0];
        let d1 = vec![-4.0];
        let ups = vec![
            RbUpdate {
                device: 0,
                delta: &d0,
                success: true,
            },
            RbUpdate {
                device: 1,
                delta: &d1,
                success: true,
            },
        ];
        let out = aggregate(
            AggregationRule::Unbiased,
            &w,
            &ups,
            &p,
            &[1.0, 1.0],
            &[1.0, 1.0],
            2,
        )
        .unwrap();
        assert_abs_diff_eq!(out[0], 0.25 * 2.0 + 0.75 * (-4.0), epsilon = 1e-14);
    }

    #[test]
    fn unbiased_rejects_zero_success_probability() {
        let w = vec![0.0];
        let d = vec![1.0];
        let ups = vec![RbUpdate {
            device: 0,
            delta: &d,
            success: true,
        }];
        assert!(aggregate(
            AggregationRule::Unbiased,
            &w,
            &ups,
            &[1.0],
            &[1.0],
            &[0.0],
            1
        )
        .is_err());
    }

    #[test]
    fn biased_rules_coincide_at_single_rb() {
        let w = vec![1.5, -0.5];
        let d = vec![0.25, 2.0];
        let ups = vec![RbUpdate {
            device: 0,
            delta: &d,
            success: true,
        }];
        let a = aggregate(
            AggregationRule::BiasedFraction,
            &w,
            &ups,
            &[1.0],
            &[1.0],
            &[1.0],
            1,
        )
        .unwrap();
        let b = aggregate(
            AggregationRule::BiasedWeighted,
            &w,
            &ups,
            &[1.0],
            &[1.0],
            &[1.0],
            1,
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn biased_fraction_shrinks_on_partial_delivery() {
        // Two RBs, one delivered: Eq-13-style averaging halves the survivor.
        let w = vec![10.0];
        let d = vec![0.0];
        let ups = vec![
            RbUpdate {
                device: 0,
                delta: &d,
                success: true,
            },
            RbUpdate {
                device: 1,
                delta: &d,
                success: false,
            },
        ];
        let out = aggregate(
            AggregationRule::BiasedFraction,
            &w,
            &ups,
            &[0.5, 0.5],
            &[1.0, 1.0],
            &[1.0, 1.0],
            2,
        )
        .unwrap();
        assert_abs_diff_eq!(out[0], 5.0, epsilon = 1e-14);
    }

    #[test]
    fn theory_lr_properties() {
        let (l, mu, e) = (0.75, 0.5, 5usize);
        let gamma = theory_gamma(l, mu, e);
        let lr = LrSchedule::Theory { mu, gamma };
        let horizon = 40 * e;
        for t in 0..horizon {
            let eta = lr.at(t, e);
            assert!(eta > 0.0);
            assert!(lr.at(t + 1, e) < eta, "eta not decreasing at t={t}");
            assert!(eta <= 1.0 / (2.0 * l) + 1e-15, "eta {eta} > 1/(2L) at t={t}");
            assert!(eta <= 2.0 * lr.at(t + e, e) + 1e-15, "eta_t > 2 eta_(t+E)");
        }
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let q0 = Quadratic { c: 0.0 };
        let q1 = Quadratic { c: 10.0 };
        let run = FederatedRun {
            models: vec![&q0, &q1],
            p: &[0.5, 0.5],
            u: &[1.0, 1.0],
            policy: SamplingPolicy::SchemeI,
            rule: AggregationRule::Unbiased,
            channel: ChannelModel::FixedU(&[1.0, 1.0]),
            m: 1,
            cfg: TrainConfig {
                rounds: 0,
                local_steps: 1,
                batch: 1,
                lr: LrSchedule::Constant { eta: 0.1 },
                clip: None,
                seed: 5,
            },
            w0: vec![3.25],
            eval: None,
        };
        let (w, traces) = run.run().unwrap();
        assert_eq!(w, vec![3.25]);
        assert!(traces.is_empty());
    }

    #[test]
    fn centralized_single_step_from_origin() {
        let spec = LossSpec::logistic(0.01);
        let d0 = toy_dataset(5, 3, 6);
        let d1 = toy_dataset(7, 3, 7);
        let m0 = DatasetModel::new(&spec, &d0);
        let m1 = DatasetModel::new(&spec, &d1);
        let models: Vec<&dyn LocalModel> = vec![&m0, &m1];
        let p = [5.0 / 12.0, 7.0 / 12.0];
        let w0 = vec![0.0; m0.dim()];
        let eta = 0.5;
        let w = run_centralized_gd(
            &models,
            &p,
            &LrSchedule::Constant { eta },
            1,
            &w0,
            |_, _| Ok(()),
        )
        .unwrap();
        let mut g = vec![0.0; w0.len()];
        for (mdl, &pk) in models.iter().zip(&p) {
            for (gj, gkj) in g.iter_mut().zip(&mdl.full_grad(&w0).unwrap()) {
                *gj += pk * gkj;
            }
        }
        for (wj, gj) in w.iter().zip(&g) {
            assert_abs_diff_eq!(*wj, -eta * gj, epsilon = 1e-15);
        }
    }

    #[test]
    fn centralized_descends_with_safe_step() {
        let spec = LossSpec::logistic(1e-3);
        let d0 = toy_dataset(20, 4, 8);
        let mdl = DatasetModel::new(&spec, &d0);
        let models: Vec<&dyn LocalModel> = vec![&mdl];
        // L <= l2 + max mean ||x||^2 / 4 <= 1e-3 + 4/4; eta = 1/L is safe.
        let eta = 1.0 / 1.001;
        let mut prev = f64::INFINITY;
        run_centralized_gd(
            &models,
            &[1.0],
            &LrSchedule::Constant { eta },
            30,
            &vec![0.0; mdl.dim()],
            |_, w| {
                let l = mdl.loss(w).unwrap();
                assert!(l <= prev + 1e-12, "loss rose: {l} > {prev}");
                prev = l;
                Ok(())
            },
        )
        .unwrap();
    }

    #[test]
    fn full_participation_matches_centralized_gd() {
        let spec = LossSpec::logistic(1e-2);
        let d0 = toy_dataset(8, 3, 9);
        let d1 = toy_dataset(8, 3, 10);
        let m0 = DatasetModel::new(&spec, &d0);
        let m1 = DatasetModel::new(&spec, &d1);
        let models: Vec<&dyn LocalModel> = vec![&m0, &m1];
        let p = [0.5, 0.5];
        let lr = LrSchedule::Practical { eta0: 1.0 };
        let rounds = 20;
        let w0 = vec![0.0; m0.dim()];

        let run = FederatedRun {
            models: models.clone(),
            p: &p,
            u: &[1.0, 1.0],
            policy: SamplingPolicy::SchemeI,
            rule: AggregationRule::Unbiased,
            channel: ChannelModel::FixedU(&[1.0, 1.0]),
            m: 2,
            cfg: TrainConfig {
                rounds,
                local_steps: 1,
                batch: 8, // = n_k on every device, so every step is full batch
                lr,
                clip: None,
                seed: 11,
            },
            w0: w0.clone(),
            eval: None,
        };
        let (w_fed, traces) = run.run().unwrap();
        assert_eq!(traces.len(), rounds);
        let w_gd = run_centralized_gd(&models, &p, &lr, rounds, &w0, |_, _| Ok(())).unwrap();
        for (a, b) in w_fed.iter().zip(&w_gd) {
            assert!((a - b).abs() <= 1e-10, "fed {a} vs gd {b}");
        }
    }

    #[test]
    fn rule_comparison_shares_schedule_and_channel() {
        let q0 = Quadratic { c: 0.0 };
        let q1 = Quadratic { c: 10.0 };
        let base = |rule| FederatedRun {
            models: vec![&q0 as &dyn LocalModel, &q1],
            p: &[0.5, 0.5],
            u: &[1.0, 0.4],
            policy: SamplingPolicy::SchemeI,
            rule,
            channel: ChannelModel::FixedU(&[1.0, 0.4]),
            m: 2,
            cfg: TrainConfig {
                rounds: 12,
                local_steps: 2,
                batch: 1,
                lr: LrSchedule::Constant { eta: 0.05 },
                clip: None,
                seed: 12,
            },
            w0: vec![0.0],
            eval: None,
        };
        let (_, ta) = base(AggregationRule::Unbiased).run().unwrap();
        let (_, tb) = base(AggregationRule::BiasedWeighted).run().unwrap();
        for (a, b) in ta.iter().zip(&tb) {
            assert_eq!(a.scheduled, b.scheduled);
            assert_eq!(a.success, b.success);
        }
    }

    #[test]
    fn bernoulli_channel_rate_matches_u() {
        let u = [0.3];
        let chan = ChannelModel::FixedU(&u);
        let mut hits = 0usize;
        let rounds = 50_000;
        for round in 0..rounds {
            let mut rng = rng::split(13, round as u64, 1);
            if chan.draw(&[0], &mut rng).unwrap()[0] {
                hits += 1;
            }
        }
        let rate = hits as f64 / rounds as f64;
        let sigma = (0.3 * 0.7 / rounds as f64).sqrt();
        assert!((rate - 0.3).abs() <= 3.0 * sigma, "rate {rate}");
    }
}
