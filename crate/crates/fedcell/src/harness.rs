//! Experiment orchestration: TOML configs, trial loops, and CSV artifacts.
//!
//! The CLI subcommands map onto the functions here: `run` executes the
//! federated training grid and writes per-round CSVs, `compare-rules` pits
//! the three aggregation rules against each other on shared draws,
//! `diag-success` dumps analytic-vs-Monte-Carlo success probabilities,
//! `schedule` prints the optimal allocation, and `bound` sweeps the
//! convergence bound over E.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bounds::{self, BoundInputs, ESearchMode, Scheme};
use crate::datasets::{
    generate_synthetic, load_cache, load_mnist, partition_noniid, save_cache, FederatedDataset,
    LocalDataset, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::flcore::{
    AggregationRule, ChannelModel, DatasetModel, FederatedRun, LocalModel, LrSchedule, Metrics,
    RoundTrace, SamplingPolicy, TrainConfig,
};
use crate::model::{self, Family, LossSpec};
use crate::scheduling::{solve_optimal_q, to_sampling_policy, SchedulingProblem};
use crate::wireless::{sample_cell, theta_from_db, NetworkConfig, Placement, SuccessModel};

/// Environment variable overriding `[run] output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDCELL_OUTPUT_DIR";

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub network: NetworkSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub rule: RuleSection,
    pub train: TrainSection,
    #[serde(default)]
    pub run: RunSection,
    pub bound: Option<BoundSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub lambda: f64,
    pub n_devices: usize,
    pub n_rbs: usize,
    pub noise: f64,
    pub alpha: f64,
    /// SINR threshold in dB; converted to linear scale at parse time.
    pub theta_db: f64,
    pub attempts: u32,
    pub interference: bool,
    /// "uniform" (rejection-sampled in the cell) or "quantile"
    /// (deterministic distances).
    pub placement: String,
    pub sim_window: Option<f64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            lambda: 0.001,
            n_devices: 100,
            n_rbs: 20,
            noise: 1e-4,
            alpha: 4.0,
            theta_db: -15.0,
            attempts: 2,
            interference: true,
            placement: "uniform".into(),
            sim_window: None,
        }
    }
}

impl NetworkSection {
    pub fn build(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::with_defaults(self.lambda, self.n_devices, self.n_rbs);
        cfg.noise = self.noise;
        cfg.alpha = self.alpha;
        cfg.theta = theta_from_db(self.theta_db);
        cfg.attempts = self.attempts;
        cfg.interference = self.interference;
        cfg.placement = match self.placement.as_str() {
            "uniform" => Placement::Uniform,
            "quantile" => Placement::Quantile,
            other => {
                return Err(Error::Config(format!(
                    "unknown placement {other:?}; expected \"uniform\" or \"quantile\""
                )))
            }
        };
        if let Some(w) = self.sim_window {
            cfg.sim_window = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" or "mnist" (any IDX-format image/label pair).
    pub kind: String,
    #[serde(default = "default_alpha_tilde")]
    pub alpha_tilde: f64,
    #[serde(default = "default_alpha_tilde")]
    pub beta_tilde: f64,
    pub total_samples: Option<usize>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_shard_floor")]
    pub shard_floor: usize,
    /// Optional binary cache; loaded when present, written after a build.
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha_tilde() -> f64 {
    1.0
}

fn default_shard_floor() -> usize {
    100
}

impl DatasetSection {
    pub fn build(&self, n_devices: usize) -> Result<FederatedDataset> {
        if let Some(cache) = &self.cache {
            if cache.exists() {
                let fed = load_cache(cache)?;
                if fed.n_devices() != n_devices {
                    return Err(Error::Config(format!(
                        "cache {} holds {} devices, config wants {n_devices}",
                        cache.display(),
                        fed.n_devices()
                    )));
                }
                return Ok(fed);
            }
        }
        let fed = match self.kind.as_str() {
            "synthetic" => {
                let mut cfg = SyntheticConfig::new(n_devices, self.alpha_tilde, self.beta_tilde);
                if let Some(total) = self.total_samples {
                    cfg.total_samples = total;
                }
                generate_synthetic(&cfg, self.seed)?
            }
            "mnist" => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| {
                        Error::Config(format!("dataset kind \"mnist\" needs `{what}`"))
                    })
                };
                let (features, labels, dim) =
                    load_mnist(&need(&self.images, "images")?, &need(&self.labels, "labels")?)?;
                let locals = partition_noniid(
                    &features,
                    &labels,
                    dim,
                    n_devices,
                    self.shard_floor,
                    self.seed,
                )?;
                let (tf, tl, tdim) = load_mnist(
                    &need(&self.test_images, "test_images")?,
                    &need(&self.test_labels, "test_labels")?,
                )?;
                if tdim != dim {
                    return Err(Error::Data(format!(
                        "train dim {dim} != test dim {tdim}"
                    )));
                }
                FederatedDataset::from_locals(locals, LocalDataset::new(tf, tl, tdim)?)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset kind {other:?}; expected \"synthetic\" or \"mnist\""
                )))
            }
        };
        if let Some(cache) = &self.cache {
            save_cache(cache, &fed)?;
        }
        Ok(fed)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub family: String,
    pub l2: f64,
    pub hidden: Vec<usize>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            family: "mlp".into(),
            l2: 1e-4,
            hidden: vec![300, 300],
        }
    }
}

impl LossSection {
    pub fn build(&self) -> Result<LossSpec> {
        let spec = match self.family.as_str() {
            "logistic" => LossSpec::logistic(self.l2),
            "mlp" => LossSpec::mlp(self.l2, self.hidden.clone()),
            other => {
                return Err(Error::Config(format!(
                    "unknown loss family {other:?}; expected \"logistic\" or \"mlp\""
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// "I" or "II".
    pub scheme: String,
    /// Explicit scheme II probabilities; mutually exclusive with `optimal`.
    pub probs: Option<Vec<f64>>,
    /// Scheme II only: derive the probabilities from the optimal allocation.
    #[serde(default)]
    pub optimal: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            scheme: "I".into(),
            probs: None,
            optimal: false,
        }
    }
}

impl PolicySection {
    /// Build the sampling policy; `p` and `u` feed the optimal allocation
    /// when requested.
    pub fn build(&self, p: &[f64], u: &[f64], m: usize) -> Result<SamplingPolicy> {
        match self.scheme.as_str() {
            "I" => {
                if self.optimal || self.probs.is_some() {
                    return Err(Error::Config(
                        "scheme I takes neither `probs` nor `optimal`".into(),
                    ));
                }
                Ok(SamplingPolicy::SchemeI)
            }
            "II" => {
                if self.optimal && self.probs.is_some() {
                    return Err(Error::Config(
                        "`probs` and `optimal` are mutually exclusive".into(),
                    ));
                }
                if self.optimal {
                    let prob = SchedulingProblem {
                        p: p.to_vec(),
                        u: u.to_vec(),
                        m,
                    };
                    let sol = solve_optimal_q(&prob)?;
                    to_sampling_policy(&prob, &sol.q)
                } else if let Some(probs) = &self.probs {
                    Ok(SamplingPolicy::SchemeII {
                        probs: probs.clone(),
                    })
                } else {
                    Ok(SamplingPolicy::SchemeII {
                        probs: vec![1.0 / p.len() as f64; p.len()],
                    })
                }
            }
            other => Err(Error::Config(format!(
                "unknown scheme {other:?}; expected \"I\" or \"II\""
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSection {
    pub kind: String,
}

impl Default for RuleSection {
    fn default() -> Self {
        RuleSection {
            kind: "unbiased".into(),
        }
    }
}

impl RuleSection {
    pub fn build(&self) -> Result<AggregationRule> {
        parse_rule(&self.kind)
    }
}

fn parse_rule(kind: &str) -> Result<AggregationRule> {
    match kind {
        "unbiased" => Ok(AggregationRule::Unbiased),
        "biased_fraction" => Ok(AggregationRule::BiasedFraction),
        "biased_weighted" => Ok(AggregationRule::BiasedWeighted),
        other => Err(Error::Config(format!(
            "unknown aggregation rule {other:?}"
        ))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub rounds: usize,
    #[serde(default = "default_one")]
    pub local_steps: usize,
    pub batch: usize,
    pub lr: LrSection,
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSection {
    /// "practical", "theory", or "constant".
    pub kind: String,
    pub eta0: Option<f64>,
    pub eta: Option<f64>,
}

impl TrainSection {
    /// `constants` supplies (mu, L) for the theory schedule.
    pub fn build(&self, constants: Option<(f64, f64)>) -> Result<TrainConfig> {
        let lr = match self.lr.kind.as_str() {
            "practical" => LrSchedule::Practical {
                eta0: self
                    .lr
                    .eta0
                    .ok_or_else(|| Error::Config("practical lr needs `eta0`".into()))?,
            },
            "constant" => LrSchedule::Constant {
                eta: self
                    .lr
                    .eta
                    .ok_or_else(|| Error::Config("constant lr needs `eta`".into()))?,
            },
            "theory" => {
                let (mu, l) = constants.ok_or_else(|| {
                    Error::Config(
                        "theory lr needs the logistic family (mu and L are computed from it)"
                            .into(),
                    )
                })?;
                LrSchedule::Theory {
                    mu,
                    gamma: crate::flcore::theory_gamma(l, mu, self.local_steps),
                }
            }
            other => return Err(Error::Config(format!("unknown lr kind {other:?}"))),
        };
        let cfg = TrainConfig {
            rounds: self.rounds,
            local_steps: self.local_steps,
            batch: self.batch,
            lr,
            clip: self.clip,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub trials: usize,
    pub output_dir: PathBuf,
    /// Also run the centralized full-batch benchmark.
    #[serde(default)]
    pub benchmark: bool,
    /// "analytic" or "monte_carlo" source for the U_k used in aggregation.
    #[serde(default = "default_success_source")]
    pub success_source: String,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: u64,
    /// Evaluate metrics every this many rounds (always on the last round).
    #[serde(default = "default_one")]
    pub eval_every: usize,
}

fn default_success_source() -> String {
    "analytic".into()
}

fn default_mc_draws() -> u64 {
    100_000
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            trials: 1,
            output_dir: PathBuf::from("out"),
            benchmark: false,
            success_source: default_success_source(),
            mc_draws: default_mc_draws(),
            eval_every: 1,
        }
    }
}

impl RunSection {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !matches!(self.success_source.as_str(), "analytic" | "monte_carlo") {
            return Err(Error::Config(format!(
                "unknown success_source {:?}",
                self.success_source
            )));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub g: f64,
    #[serde(default)]
    pub gamma_cap: f64,
    #[serde(default)]
    pub sigma_sq: f64,
    #[serde(default = "default_one_f64")]
    pub w0_dist_sq: f64,
    pub e_min: usize,
    pub e_max: usize,
    /// "fixed_k" or "fixed_t".
    #[serde(default = "default_e_mode")]
    pub mode: String,
    #[serde(default = "default_ell")]
    pub ell: u32,
}

fn default_one_f64() -> f64 {
    1.0
}

fn default_e_mode() -> String {
    "fixed_k".into()
}

fn default_ell() -> u32 {
    2
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing

/// Per-trial wiring: geometry, success probabilities, and the policy.
struct TrialSetup {
    u: Vec<f64>,
    policy: SamplingPolicy,
    cell: crate::wireless::CellRealization,
}

fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

fn setup_trial(cfg: &ConfigFile, net: &NetworkConfig, p: &[f64], trial: usize) -> Result<TrialSetup> {
    let cell = sample_cell(net, trial_seed(cfg.dataset.seed ^ cfg.train.seed, trial))?;
    let success = match cfg.run.success_source.as_str() {
        "monte_carlo" => SuccessModel::monte_carlo(
            net,
            &cell,
            cfg.run.mc_draws,
            trial_seed(cfg.train.seed, trial),
        )?,
        _ => SuccessModel::analytic(net, &cell)?,
    };
    let policy = cfg.policy.build(p, &success.u, net.n_rbs)?;
    Ok(TrialSetup {
        u: success.u,
        policy,
        cell,
    })
}

fn evaluator<'a>(
    fed: &'a FederatedDataset,
    models: &'a [DatasetModel<'a>],
) -> impl Fn(&[f64]) -> Result<Metrics> + Sync + 'a {
    move |w: &[f64]| {
        let mut global_loss = 0.0;
        let mut train_hits = 0.0;
        let mut train_total = 0.0;
        let arch = &models[0].arch;
        for (mdl, &pk) in models.iter().zip(&fed.p) {
            global_loss += pk * mdl.loss(w)?;
            let n = mdl.data.len() as f64;
            train_hits += model::accuracy(arch, w, mdl.data) * n;
            train_total += n;
        }
        if !global_loss.is_finite() {
            return Err(Error::Numerical("non-finite global loss".into()));
        }
        Ok(Metrics {
            global_loss,
            train_acc: train_hits / train_total,
            test_acc: model::accuracy(arch, w, &fed.test),
        })
    }
}

fn csv_header() -> &'static str {
    "round,t,scheme,rule,E,ell,global_loss,train_acc,test_acc,n_success"
}

fn trace_csv_row(
    trace: &RoundTrace,
    scheme: &str,
    rule: &str,
    e_steps: usize,
    ell: u32,
) -> String {
    let (loss, tr, te) = match trace.metrics {
        Some(m) => (
            format!("{}", m.global_loss),
            format!("{}", m.train_acc),
            format!("{}", m.test_acc),
        ),
        None => (String::new(), String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        trace.round,
        trace.t,
        scheme,
        rule,
        e_steps,
        ell,
        loss,
        tr,
        te,
        trace.n_success()
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// One trial of one rule: run the federation and return the final model and
/// traces. Metrics are evaluated on the configured cadence (and always on
/// the last round).
fn run_one_trial(
    cfg: &ConfigFile,
    net: &NetworkConfig,
    spec: &LossSpec,
    fed: &FederatedDataset,
    rule: AggregationRule,
    trial: usize,
) -> Result<(Vec<f64>, Vec<RoundTrace>)> {
    let setup = setup_trial(cfg, net, &fed.p, trial)?;
    let dev_models: Vec<DatasetModel> =
        fed.locals.iter().map(|d| DatasetModel::new(spec, d)).collect();
    let models: Vec<&dyn LocalModel> =
        dev_models.iter().map(|m| m as &dyn LocalModel).collect();
    let constants = match spec.family {
        Family::Logistic => Some(model::strong_convexity_constants(spec, fed)?),
        Family::Mlp => None,
    };
    let mut train = cfg.train.build(constants)?;
    train.seed = trial_seed(cfg.train.seed, trial);
    let arch = spec.arch(fed.dim());
    let w0 = model::init_params(spec, &arch, train.seed);
    let eval = evaluator(fed, &dev_models);
    let eval_every = cfg.run.eval_every;
    let rounds = train.rounds;
    let gated = move |round: usize, w: &[f64]| -> Result<Option<Metrics>> {
        if (round + 1) % eval_every == 0 || round + 1 == rounds {
            eval(w).map(Some)
        } else {
            Ok(None)
        }
    };
    let run = FederatedRun {
        models,
        p: &fed.p,
        u: &setup.u,
        policy: setup.policy.clone(),
        rule,
        channel: ChannelModel::Wireless {
            cfg: net,
            cell: &setup.cell,
        },
        m: net.n_rbs,
        cfg: train,
        w0,
        eval: Some(&gated),
    };
    run.run()
}

// ---------------------------------------------------------------------------
// Subcommands

/// `run`: execute the configured experiment and write CSV artifacts.
///
/// Writes one `trial_<i>.csv` per trial, a `mean.csv` averaging the metric
/// columns over trials, and (with `[run] benchmark = true`) a
/// `benchmark.csv` with the centralized full-batch trajectory.
pub fn run_experiment(cfg: &ConfigFile) -> Result<Vec<PathBuf>> {
    cfg.run.validate()?;
    let net = cfg.network.build()?;
    let spec = cfg.loss.build()?;
    let rule = cfg.rule.build()?;
    let fed = cfg.dataset.build(net.n_devices)?;
    let out = cfg.run.output_dir();
    fs::create_dir_all(&out)?;

    use rayon::prelude::*;
    let results: Vec<(Vec<f64>, Vec<RoundTrace>)> = (0..cfg.run.trials)
        .into_par_iter()
        .map(|trial| run_one_trial(cfg, &net, &spec, &fed, rule, trial))
        .collect::<Result<_>>()?;

    let scheme_label = match cfg.policy.scheme.as_str() {
        "II" => "II",
        _ => "I",
    };
    let mut paths = Vec::new();
    for (trial, (_, traces)) in results.iter().enumerate() {
        let mut text = String::from(csv_header());
        text.push('\n');
        for trace in traces {
            text.push_str(&trace_csv_row(
                trace,
                scheme_label,
                rule.label(),
                cfg.train.local_steps,
                net.attempts,
            ));
            text.push('\n');
        }
        let path = out.join(format!("trial_{trial}.csv"));
        write_file(&path, &text)?;
        paths.push(path);
    }

    // Mean over trials, restricted to rounds where every trial has metrics.
    let rounds = results[0].1.len();
    let mut text = String::from(csv_header());
    text.push('\n');
    for r in 0..rounds {
        let per_trial: Vec<&RoundTrace> = results.iter().map(|(_, t)| &t[r]).collect();
        let n = per_trial.len() as f64;
        let n_success =
            per_trial.iter().map(|t| t.n_success() as f64).sum::<f64>() / n;
        let (loss, tr, te) = if per_trial.iter().all(|t| t.metrics.is_some()) {
            let mean = |f: &dyn Fn(&Metrics) -> f64| {
                per_trial.iter().map(|t| f(&t.metrics.unwrap())).sum::<f64>() / n
            };
            (
                format!("{}", mean(&|m| m.global_loss)),
                format!("{}", mean(&|m| m.train_acc)),
                format!("{}", mean(&|m| m.test_acc)),
            )
        } else {
            (String::new(), String::new(), String::new())
        };
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r,
            (r + 1) * cfg.train.local_steps,
            scheme_label,
            rule.label(),
            cfg.train.local_steps,
            net.attempts,
            loss,
            tr,
            te,
            n_success
        ));
    }
    let mean_path = out.join("mean.csv");
    write_file(&mean_path, &text)?;
    paths.push(mean_path);

    if cfg.run.benchmark {
        paths.push(run_benchmark(cfg, &spec, &fed, &out)?);
    }
    Ok(paths)
}

/// Centralized full-batch gradient descent on the same dataset and loss.
fn run_benchmark(
    cfg: &ConfigFile,
    spec: &LossSpec,
    fed: &FederatedDataset,
    out: &Path,
) -> Result<PathBuf> {
    let dev_models: Vec<DatasetModel> =
        fed.locals.iter().map(|d| DatasetModel::new(spec, d)).collect();
    let models: Vec<&dyn LocalModel> =
        dev_models.iter().map(|m| m as &dyn LocalModel).collect();
    let constants = match spec.family {
        Family::Logistic => Some(model::strong_convexity_constants(spec, fed)?),
        Family::Mlp => None,
    };
    let train = cfg.train.build(constants)?;
    let arch = spec.arch(fed.dim());
    let w0 = model::init_params(spec, &arch, cfg.train.seed);
    let eval = evaluator(fed, &dev_models);
    let mut text = String::from("round,global_loss,train_acc,test_acc\n");
    let eval_every = cfg.run.eval_every;
    let rounds = train.rounds;
    crate::flcore::run_centralized_gd(&models, &fed.p, &train.lr, rounds, &w0, |round, w| {
        if (round + 1) % eval_every == 0 || round + 1 == rounds {
            let m = eval(w)?;
            text.push_str(&format!(
                "{},{},{},{}\n",
                round, m.global_loss, m.train_acc, m.test_acc
            ));
        }
        Ok(())
    })?;
    let path = out.join("benchmark.csv");
    write_file(&path, &text)?;
    Ok(path)
}

/// `compare-rules`: run all three aggregation rules on identical schedules,
/// batches, and channel outcomes, and tabulate the final metrics.
pub fn compare_rules(cfg: &ConfigFile) -> Result<PathBuf> {
    cfg.run.validate()?;
    let net = cfg.network.build()?;
    let spec = cfg.loss.build()?;
    let fed = cfg.dataset.build(net.n_devices)?;
    let out = cfg.run.output_dir();
    fs::create_dir_all(&out)?;

    let rules = [
        AggregationRule::Unbiased,
        AggregationRule::BiasedFraction,
        AggregationRule::BiasedWeighted,
    ];
    let mut text = String::from("rule,trial,global_loss,train_acc,test_acc\n");
    use rayon::prelude::*;
    for rule in rules {
        let finals: Vec<Metrics> = (0..cfg.run.trials)
            .into_par_iter()
            .map(|trial| {
                let (_, traces) = run_one_trial(cfg, &net, &spec, &fed, rule, trial)?;
                traces
                    .last()
                    .and_then(|t| t.metrics)
                    .ok_or_else(|| Error::Config("run produced no evaluated round".into()))
            })
            .collect::<Result<_>>()?;
        for (trial, m) in finals.iter().enumerate() {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                rule.label(),
                trial,
                m.global_loss,
                m.train_acc,
                m.test_acc
            ));
        }
        let n = finals.len() as f64;
        text.push_str(&format!(
            "{},mean,{},{},{}\n",
            rule.label(),
            finals.iter().map(|m| m.global_loss).sum::<f64>() / n,
            finals.iter().map(|m| m.train_acc).sum::<f64>() / n,
            finals.iter().map(|m| m.test_acc).sum::<f64>() / n,
        ));
    }
    let path = out.join("compare_rules.csv");
    write_file(&path, &text)?;
    Ok(path)
}

/// `diag-success`: per-device analytic vs Monte-Carlo success probability.
pub fn diag_success(cfg: &ConfigFile, out: &mut dyn std::io::Write) -> Result<()> {
    cfg.run.validate()?;
    let net = cfg.network.build()?;
    let cell = sample_cell(&net, trial_seed(cfg.dataset.seed ^ cfg.train.seed, 0))?;
    let analytic = SuccessModel::analytic(&net, &cell)?;
    writeln!(out, "k,r_k,u_analytic,u_mc,stderr")?;
    for (k, &r) in cell.device_distances.iter().enumerate() {
        let (u_mc, se) = crate::wireless::success_probability_mc(
            &net,
            r,
            cfg.run.mc_draws,
            trial_seed(cfg.train.seed, k),
        )?;
        writeln!(out, "{},{},{},{},{}", k, r, analytic.u[k], u_mc, se)?;
    }
    Ok(())
}

/// `schedule`: print the optimal allocation and the uniform-vs-optimal
/// objective values.
pub fn schedule_cmd(cfg: &ConfigFile, out: &mut dyn std::io::Write) -> Result<()> {
    cfg.run.validate()?;
    let net = cfg.network.build()?;
    let fed = cfg.dataset.build(net.n_devices)?;
    let cell = sample_cell(&net, trial_seed(cfg.dataset.seed ^ cfg.train.seed, 0))?;
    let success = SuccessModel::analytic(&net, &cell)?;
    let prob = SchedulingProblem {
        p: fed.p.clone(),
        u: success.u.clone(),
        m: net.n_rbs,
    };
    let sol = solve_optimal_q(&prob)?;
    let uniform = vec![net.n_rbs as f64 / net.n_devices as f64; net.n_devices];
    writeln!(out, "k,p_k,u_k,q_star,q_hat")?;
    for k in 0..net.n_devices {
        writeln!(
            out,
            "{},{},{},{},{}",
            k,
            fed.p[k],
            success.u[k],
            sol.q[k],
            sol.q[k] / net.n_rbs as f64
        )?;
    }
    writeln!(out, "# objective_uniform,{}", prob.objective(&uniform))?;
    writeln!(out, "# objective_optimal,{}", sol.objective)?;
    Ok(())
}

/// `bound`: sweep the convergence bound over E and compare spending a factor
/// ell on extra rounds versus extra transmission attempts.
pub fn bound_cmd(cfg: &ConfigFile, out: &mut dyn std::io::Write) -> Result<()> {
    cfg.run.validate()?;
    let section = cfg
        .bound
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [bound] section".into()))?;
    let spec = cfg.loss.build()?;
    if spec.family != Family::Logistic {
        return Err(Error::Unsupported(
            "the convergence bound needs the strongly convex logistic family".into(),
        ));
    }
    let net = cfg.network.build()?;
    let fed = cfg.dataset.build(net.n_devices)?;
    let cell = sample_cell(&net, trial_seed(cfg.dataset.seed ^ cfg.train.seed, 0))?;
    let success = SuccessModel::analytic(&net, &cell)?;
    let policy = cfg.policy.build(&fed.p, &success.u, net.n_rbs)?;
    let scheme = match policy {
        SamplingPolicy::SchemeI => Scheme::I,
        SamplingPolicy::SchemeII { .. } => Scheme::II,
    };
    let (mu, l) = model::strong_convexity_constants(&spec, &fed)?;
    let n = net.n_devices;
    let inputs = BoundInputs {
        mu,
        l,
        sigma_sq: vec![section.sigma_sq; n],
        gamma_cap: section.gamma_cap,
        g: section.g,
        p: fed.p.clone(),
        q: policy.q(n, net.n_rbs),
        u: success.u.clone(),
        e_steps: cfg.train.local_steps,
        k_rounds: cfg.train.rounds,
        m: net.n_rbs,
        w0_dist_sq: section.w0_dist_sq,
    };
    let mode = match section.mode.as_str() {
        "fixed_k" => ESearchMode::FixedK,
        "fixed_t" => ESearchMode::FixedT,
        other => return Err(Error::Config(format!("unknown bound mode {other:?}"))),
    };
    if section.e_min < 1 || section.e_min > section.e_max {
        return Err(Error::Config("need 1 <= e_min <= e_max".into()));
    }
    let e_range: Vec<usize> = (section.e_min..=section.e_max).collect();
    let (best, curve) = bounds::optimal_e_search(&inputs, &e_range, mode, scheme)?;
    writeln!(out, "e,bound")?;
    for point in &curve {
        writeln!(out, "{},{}", point.e_steps, point.bound)?;
    }
    writeln!(out, "# best_e,{best}")?;

    let mut single = net.clone();
    single.attempts = 1;
    let u1 = SuccessModel::analytic(&single, &cell)?.u;
    let mut multi = net.clone();
    multi.attempts = section.ell;
    let u_ell = SuccessModel::analytic(&multi, &cell)?.u;
    let (bk, bl) = bounds::compare_k_vs_ell(&inputs, section.ell, &u1, &u_ell, scheme)?;
    writeln!(out, "# ell,{}", section.ell)?;
    writeln!(out, "# bound_extra_rounds,{bk}")?;
    writeln!(out, "# bound_extra_attempts,{bl}")?;
    Ok(())
}
