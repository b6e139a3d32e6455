//! Experiment configuration, the isolation-vs-meta sweep runner, Monte
//! Carlo excess-risk estimation, rate fitting, and the open-question probe.
//!
//! Everything is driven by labelled streams, so a sweep is bit-reproducible
//! under any parallel schedule; replications fan out across a thread pool
//! and reduce in replication order with pairwise summation.

use crate::bounds::{self, BoundParams};
use crate::divergences::CategoricalDist;
use crate::environments::{
    sample_dataset, sample_task, BoundedLoss, MetaEnvironment, Observations, Parameter,
    TaskDistribution, TaskSample,
};
use crate::error::{Error, Result};
use crate::meta_level::{
    self, EpsilonRule, FitMode, HyperFitConfig, HyperPosterior, HyperReference, PriorSpec,
    SubsetSweep, ThresholdRule,
};
use crate::numerics::{pairwise_sum, MeanSe};
use crate::rng::RandomStream;
use crate::within_task::{self, ParameterSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// `"paper-default"` or an explicit positive number.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum RateSpec {
    Named(String),
    Value(f64),
}

impl RateSpec {
    pub fn resolve(&self, loss_bound: f64) -> Result<f64> {
        match self {
            RateSpec::Named(s) if s == "paper-default" => {
                let (_, rate, _) = bounds::paper_default_constants(loss_bound);
                Ok(rate)
            }
            RateSpec::Named(s) => Err(Error::Config(format!(
                "unknown rate spec {s:?}; use \"paper-default\" or a number"
            ))),
            RateSpec::Value(v) if *v > 0.0 && v.is_finite() => Ok(*v),
            RateSpec::Value(v) => Err(Error::Config(format!("rate must be positive, got {v}"))),
        }
    }
}

/// A named rule or an explicit value for epsilon / threshold knobs.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum RuleSpec {
    Named(String),
    Value(f64),
}

impl RuleSpec {
    fn epsilon_rule(&self) -> Result<EpsilonRule> {
        match self {
            RuleSpec::Named(s) if s == "sqrt-n-over-t" => Ok(EpsilonRule::SqrtNOverT),
            RuleSpec::Named(s) if s == "n-over-t-squared" => Ok(EpsilonRule::NOverTSquared),
            RuleSpec::Named(s) => Err(Error::Config(format!("unknown epsilon rule {s:?}"))),
            RuleSpec::Value(v) if *v > 0.0 => Ok(EpsilonRule::Fixed(*v)),
            RuleSpec::Value(v) => Err(Error::Config(format!("epsilon must be positive, got {v}"))),
        }
    }

    fn threshold_rule(&self) -> Result<ThresholdRule> {
        match self {
            RuleSpec::Named(s) if s == "n-over-t" => Ok(ThresholdRule::NOverT),
            RuleSpec::Named(s) if s == "n-over-t-squared" => Ok(ThresholdRule::NOverTSquared),
            RuleSpec::Named(s) => Err(Error::Config(format!("unknown threshold rule {s:?}"))),
            RuleSpec::Value(v) if *v >= 0.0 => Ok(ThresholdRule::Fixed(*v)),
            RuleSpec::Value(v) => Err(Error::Config(format!(
                "threshold must be nonnegative, got {v}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Discrete {
        labels: usize,
        optimal_labels: usize,
        flip_prob: f64,
    },
    Gaussian {
        mean: Vec<f64>,
        task_spread: f64,
        noise_var: f64,
        clip: Option<f64>,
    },
    Mixture {
        centers: Vec<Vec<f64>>,
        cluster_spread: f64,
        noise_var: f64,
        clip: Option<f64>,
    },
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<MetaEnvironment> {
        match self {
            EnvironmentConfig::Discrete {
                labels,
                optimal_labels,
                flip_prob,
            } => MetaEnvironment::discrete(*labels, *optimal_labels, *flip_prob),
            EnvironmentConfig::Gaussian {
                mean,
                task_spread,
                noise_var,
                clip,
            } => MetaEnvironment::gaussian(mean.clone(), *task_spread, *noise_var, *clip),
            EnvironmentConfig::Mixture {
                centers,
                cluster_spread,
                noise_var,
                clip,
            } => MetaEnvironment::mixture(centers.clone(), *cluster_spread, *noise_var, *clip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyConfig {
    /// All nonempty subsets of the finite parameter set.
    Subset,
    /// One Normal x Gamma component.
    Gaussian,
    /// Dirichlet mixture with a fixed component count.
    Mixture,
    /// Dirichlet mixture with the component count selected on a grid.
    MixtureUnknownK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Exact expectation over the (finite) hyper-posterior.
    Exact,
    /// One sampled prior per replication.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFamily {
    Dirac,
    FullSimplex,
}

fn default_mode() -> String {
    "closed-form".to_owned()
}

fn default_budget() -> usize {
    100
}

fn default_xi_bar_sq() -> f64 {
    1.0
}

fn default_a_bar() -> f64 {
    2.0
}

fn default_b_bar() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub alpha: RateSpec,
    pub beta: RateSpec,
    pub family: FamilyConfig,
    #[serde(default)]
    pub components: Option<usize>,
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub epsilon: Option<RuleSpec>,
    #[serde(default)]
    pub sigma_threshold: Option<RuleSpec>,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_xi_bar_sq")]
    pub xi_bar_sq: f64,
    #[serde(default = "default_a_bar")]
    pub a_bar: f64,
    #[serde(default = "default_b_bar")]
    pub b_bar: f64,
    #[serde(default)]
    pub estimator: Option<EstimatorKind>,
    #[serde(default)]
    pub probe_family: Option<ProbeFamily>,
}

impl AlgorithmConfig {
    fn fit_mode(&self) -> Result<FitMode> {
        match self.mode.as_str() {
            "closed-form" => Ok(FitMode::ClosedForm),
            "stochastic" => Ok(FitMode::Stochastic),
            other => Err(Error::Config(format!(
                "algorithm.mode must be \"closed-form\" or \"stochastic\", got {other:?}"
            ))),
        }
    }

    fn epsilon_rule(&self) -> Result<EpsilonRule> {
        self.epsilon
            .as_ref()
            .map(|r| r.epsilon_rule())
            .unwrap_or(Ok(EpsilonRule::SqrtNOverT))
    }

    fn threshold_rule(&self) -> Result<ThresholdRule> {
        self.sigma_threshold
            .as_ref()
            .map(|r| r.threshold_rule())
            .unwrap_or(Ok(ThresholdRule::NOverT))
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub t_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub formats: Vec<String>,
}

/// Settings for the meta-level condition verification.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BernsteinConfig {
    pub candidates: usize,
    pub tested: usize,
    pub reps: usize,
    #[serde(default)]
    pub within_task_ceiling: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub algorithm: AlgorithmConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub bernstein: Option<BernsteinConfig>,
}

impl ExperimentConfig {
    /// Parse and validate; unknown keys and malformed fields are errors
    /// (the TOML error carries the offending line).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<Self> {
        self.environment.build()?;
        if self.sweep.t_grid.is_empty() || self.sweep.t_grid.iter().any(|&t| t == 0) {
            return Err(Error::Config("sweep.t_grid must be nonempty and positive".into()));
        }
        if self.sweep.n_grid.is_empty() || self.sweep.n_grid.iter().any(|&n| n == 0) {
            return Err(Error::Config("sweep.n_grid must be nonempty and positive".into()));
        }
        if self.sweep.reps < 2 {
            return Err(Error::Config("sweep.reps must be >= 2".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must be nonempty".into()));
        }
        self.algorithm.fit_mode()?;
        self.algorithm.epsilon_rule()?;
        self.algorithm.threshold_rule()?;
        let loss_bound = self.environment.build()?.loss().bound();
        self.algorithm.alpha.resolve(loss_bound)?;
        self.algorithm.beta.resolve(loss_bound)?;
        match (&self.environment, self.algorithm.family) {
            (EnvironmentConfig::Discrete { .. }, FamilyConfig::Subset) => {}
            (EnvironmentConfig::Gaussian { .. }, FamilyConfig::Gaussian) => {}
            (EnvironmentConfig::Mixture { .. } | EnvironmentConfig::Gaussian { .. }, FamilyConfig::Mixture) => {
                if self.algorithm.components.is_none() {
                    return Err(Error::Config(
                        "mixture family needs algorithm.components".into(),
                    ));
                }
            }
            (
                EnvironmentConfig::Mixture { .. } | EnvironmentConfig::Gaussian { .. },
                FamilyConfig::MixtureUnknownK,
            ) => {
                if self.algorithm.k_grid.as_ref().map_or(true, |g| g.is_empty()) {
                    return Err(Error::Config(
                        "mixture-unknown-k family needs a nonempty algorithm.k_grid".into(),
                    ));
                }
            }
            (env, fam) => {
                return Err(Error::Config(format!(
                    "family {fam:?} does not apply to environment {}",
                    match env {
                        EnvironmentConfig::Discrete { .. } => "discrete",
                        EnvironmentConfig::Gaussian { .. } => "gaussian",
                        EnvironmentConfig::Mixture { .. } => "mixture",
                    }
                )));
            }
        }
        Ok(self.clone())
    }

    fn setting_name(&self) -> String {
        let env = match &self.environment {
            EnvironmentConfig::Discrete { .. } => "discrete",
            EnvironmentConfig::Gaussian { .. } => "gaussian",
            EnvironmentConfig::Mixture { .. } => "mixture",
        };
        let fam = match self.algorithm.family {
            FamilyConfig::Subset => "subset",
            FamilyConfig::Gaussian => "gaussian",
            FamilyConfig::Mixture => "mixture",
            FamilyConfig::MixtureUnknownK => "mixture-unknown-k",
        };
        format!("{env}/{fam}")
    }
}

// ---------------------------------------------------------------------------
// Within-task evaluation shared by the estimators.
// ---------------------------------------------------------------------------

/// True excess risk of the within-task posterior built from `prior` on one
/// dataset, using the task's oracle risks.
pub fn within_task_excess(
    prior: &PriorSpec,
    sample: &TaskSample,
    loss: &BoundedLoss,
    alpha: f64,
    budget: usize,
    stream: &RandomStream,
) -> Result<f64> {
    let task = &sample.task;
    let r_star = task.optimal_risk();
    match (prior, &sample.observations) {
        (PriorSpec::Discrete { log_weights }, Observations::Labels(_)) => {
            let m = log_weights.len();
            let risks = within_task::empirical_risks(sample, loss, &ParameterSet::Labels(m))?;
            let posterior = within_task::gibbs_discrete(log_weights, &risks, alpha, sample.len())?;
            let truth: Vec<f64> = (0..m)
                .map(|j| crate::environments::true_risk(task, &Parameter::Label(j)))
                .collect::<Result<_>>()?;
            Ok(posterior.expectation(&truth)? - r_star)
        }
        (PriorSpec::Gaussian(g), Observations::Points(_)) => {
            let fit =
                within_task::variational_gaussian_posterior(sample, loss, g, alpha, budget, stream)?;
            gaussian_posterior_excess(&fit.posterior, task, r_star)
        }
        (PriorSpec::Mixture(m), Observations::Points(_)) => {
            let (_, fit) =
                within_task::variational_mixture_posterior(sample, loss, m, alpha, budget, stream)?;
            gaussian_posterior_excess(&fit.posterior, task, r_star)
        }
        _ => Err(Error::domain("prior/observation kind mismatch")),
    }
}

/// `E_{theta ~ q}[R_P(theta)] - R*`: fold the posterior variance into the
/// observation noise per coordinate and reuse the clipped-norm oracle.
fn gaussian_posterior_excess(
    q: &crate::divergences::DiagGaussian,
    task: &TaskDistribution,
    r_star: f64,
) -> Result<f64> {
    let (mean, noise_var, clip) = match task {
        TaskDistribution::Continuous {
            mean,
            noise_var,
            clip,
        } => (mean, *noise_var, *clip),
        _ => return Err(Error::domain("continuous task expected")),
    };
    let diff: Vec<f64> = q.mean().iter().zip(mean).map(|(a, b)| a - b).collect();
    let var: Vec<f64> = q.var().iter().map(|&v| v + noise_var).collect();
    Ok(crate::environments::expected_clipped_sq_norm(&diff, &var, clip)? - r_star)
}

/// Sampled-prior Monte-Carlo estimate of the meta excess risk of a
/// hyper-posterior on fresh tasks.
#[derive(Clone, Copy, Debug)]
pub struct MetaRiskEstimate {
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
    /// Set when the point estimate undershoots zero by more than 3 SEs.
    pub negative_flagged: bool,
}

pub fn estimate_meta_risk(
    posterior: &HyperPosterior,
    env: &MetaEnvironment,
    alpha: f64,
    n: usize,
    reps: usize,
    budget: usize,
    stream: &RandomStream,
) -> Result<MetaRiskEstimate> {
    if reps < 2 {
        return Err(Error::domain("estimate_meta_risk needs reps >= 2"));
    }
    let loss = env.loss();
    let draws: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rs = stream.index("eval", rep as u64);
            let prior = meta_level::sample_prior(posterior, &rs.child("prior"))?;
            let task = sample_task(env, &rs.child("task"));
            let sample = sample_dataset(&task, n, &rs.child("data"))?;
            within_task_excess(&prior, &sample, &loss, alpha, budget, &rs.child("posterior"))
        })
        .collect::<Result<_>>()?;
    let m = MeanSe::from_samples(&draws)?;
    Ok(MetaRiskEstimate {
        mean: m.mean,
        se: m.se,
        reps,
        negative_flagged: m.mean < -3.0 * m.se,
    })
}

// ---------------------------------------------------------------------------
// The isolation-vs-meta sweep.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SimulationRow {
    pub setting: String,
    pub seed: u64,
    pub t: usize,
    pub n: usize,
    pub reps: usize,
    pub estimator: EstimatorKind,
    pub meta_excess: f64,
    pub meta_se: f64,
    pub iso_excess: f64,
    pub iso_se: f64,
    pub bound_meta: f64,
    pub bound_iso: f64,
    pub regime: bounds::Regime,
    pub bound_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationTable {
    pub rows: Vec<SimulationRow>,
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

impl SimulationTable {
    /// CSV with a header row, one row per (seed, T, n), floats at 17
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,seed,t,n,reps,estimator,meta_excess,meta_se,iso_excess,iso_se,bound_meta,bound_iso,regime,bound_ok\n",
        );
        for r in &self.rows {
            let estimator = match r.estimator {
                EstimatorKind::Exact => "exact",
                EstimatorKind::Sampled => "sampled",
            };
            let regime = match r.regime {
                bounds::Regime::NotApplicable => "not-applicable",
                bounds::Regime::Bernstein => "bernstein",
                bounds::Regime::NoBernstein => "no-bernstein",
                bounds::Regime::Favorable => "favorable",
                bounds::Regime::Unfavorable => "unfavorable",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.setting,
                r.seed,
                r.t,
                r.n,
                r.reps,
                estimator,
                fmt17(r.meta_excess),
                fmt17(r.meta_se),
                fmt17(r.iso_excess),
                fmt17(r.iso_se),
                fmt17(r.bound_meta),
                fmt17(r.bound_iso),
                regime,
                r.bound_ok
            ));
        }
        out
    }

    pub fn all_bounds_hold(&self) -> bool {
        self.rows.iter().all(|r| r.bound_ok)
    }
}

struct CellOutcome {
    meta: MeanSe,
    iso: MeanSe,
}

/// Paired per-replication training and evaluation for one `(seed, t, n)`
/// cell of a discrete environment with the subset family. The meta column
/// takes the exact expectation over the hyper-posterior unless the sampled
/// estimator was requested.
fn discrete_subset_cell(
    env: &MetaEnvironment,
    labels: usize,
    t: usize,
    n: usize,
    reps: usize,
    alpha: f64,
    beta: f64,
    estimator: EstimatorKind,
    cell_stream: &RandomStream,
) -> Result<CellOutcome> {
    let family = meta_level::subset_family(labels)?;
    let loss = env.loss();
    let full_index = family.len() - 1; // the uniform prior on all labels
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, f64)> {
            let rs = cell_stream.index("rep", rep as u64);
            let mut sweep = SubsetSweep::new(labels)?;
            let mut acc = meta_level::SubsetGibbsAccumulator::new(labels, alpha, n)?;
            for ti in 0..t {
                let task = sample_task(env, &rs.index("task", ti as u64));
                let sample = sample_dataset(&task, n, &rs.index("data", ti as u64))?;
                let risks =
                    within_task::empirical_risks(&sample, &loss, &ParameterSet::Labels(labels))?;
                acc.add_task(&risks)?;
            }
            let totals = acc.free_energy_totals();
            let log_post: Vec<f64> = family
                .log_lambda()
                .iter()
                .zip(&totals)
                .map(|(&ll, &s)| ll - beta * s)
                .collect();
            let posterior = within_task::DiscretePosterior::from_log_weights(log_post)?;

            let test_task = sample_task(env, &rs.child("test/task"));
            let test_sample = sample_dataset(&test_task, n, &rs.child("test/data"))?;
            let emp =
                within_task::empirical_risks(&test_sample, &loss, &ParameterSet::Labels(labels))?;
            let truth: Vec<f64> = (0..labels)
                .map(|j| crate::environments::true_risk(&test_task, &Parameter::Label(j)))
                .collect::<Result<_>>()?;
            let mut excess = vec![0.0f64; family.len()];
            sweep.posterior_true_excess(
                &emp,
                &truth,
                test_task.optimal_risk(),
                alpha,
                n,
                &mut excess,
            )?;

            let meta = match estimator {
                EstimatorKind::Exact => {
                    let terms: Vec<f64> = posterior
                        .log_weights()
                        .iter()
                        .zip(&excess)
                        .map(|(&lw, &e)| lw.exp() * e)
                        .collect();
                    pairwise_sum(&terms)
                }
                EstimatorKind::Sampled => {
                    let weights = CategoricalDist::new(posterior.probs())?;
                    let mut rng = rs.child("draw").rng();
                    excess[weights.sample_index(&mut rng)]
                }
            };
            Ok((meta, excess[full_index]))
        })
        .collect::<Result<_>>()?;
    let meta = MeanSe::from_samples(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let iso = MeanSe::from_samples(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    Ok(CellOutcome { meta, iso })
}

/// One `(seed, t, n)` cell for a continuous environment: per replication,
/// fit the hyper-posterior on fresh tasks, then evaluate one sampled prior
/// and the fixed isolation prior on a fresh test task.
#[allow(clippy::too_many_arguments)]
fn continuous_cell(
    env: &MetaEnvironment,
    config: &AlgorithmConfig,
    t: usize,
    n: usize,
    reps: usize,
    alpha: f64,
    beta: f64,
    cell_stream: &RandomStream,
) -> Result<CellOutcome> {
    let loss = env.loss();
    let dim = env.dim().expect("continuous environment");
    let iso_prior = PriorSpec::Gaussian(crate::divergences::DiagGaussian::isotropic(
        vec![0.0; dim],
        config.a_bar / config.b_bar,
    )?);
    let mode = config.fit_mode()?;
    let epsilon = config.epsilon_rule()?;
    let threshold = config.threshold_rule()?;
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, f64)> {
            let rs = cell_stream.index("rep", rep as u64);
            let samples: Vec<TaskSample> = (0..t)
                .map(|ti| {
                    let task = sample_task(env, &rs.index("task", ti as u64));
                    sample_dataset(&task, n, &rs.index("data", ti as u64))
                })
                .collect::<Result<_>>()?;
            let make_cfg = |k: usize| -> Result<HyperFitConfig> {
                Ok(HyperFitConfig {
                    alpha,
                    beta,
                    smoothness_l: env.smoothness(),
                    reference: HyperReference::broadcast(
                        config.xi_bar_sq,
                        config.a_bar,
                        config.b_bar,
                        k,
                    )?,
                    epsilon,
                    threshold,
                    mode,
                    budget: config.budget,
                    objective_draws: 8,
                })
            };
            let posterior = match config.family {
                FamilyConfig::Gaussian => {
                    let fit = meta_level::fit_gaussian_hyperposterior(
                        &samples,
                        &loss,
                        &make_cfg(1)?,
                        &rs.child("fit"),
                    )?;
                    HyperPosterior::GaussianGamma(fit.hyper)
                }
                FamilyConfig::Mixture => {
                    let k = config
                        .components
                        .ok_or_else(|| Error::Config("mixture family needs components".into()))?;
                    let fit = meta_level::fit_mixture_hyperposterior(
                        &samples,
                        &loss,
                        k,
                        &make_cfg(k)?,
                        &rs.child("fit"),
                    )?;
                    HyperPosterior::Mixture(fit.hyper)
                }
                FamilyConfig::MixtureUnknownK => {
                    let grid = config
                        .k_grid
                        .as_ref()
                        .ok_or_else(|| Error::Config("unknown-K family needs k_grid".into()))?;
                    let fit = meta_level::fit_unknown_k_hyperposterior(
                        &samples,
                        &loss,
                        grid,
                        (config.xi_bar_sq, config.a_bar, config.b_bar),
                        &make_cfg(grid[0].max(1))?,
                        &rs.child("fit"),
                    )?;
                    HyperPosterior::Mixture(fit.fit.hyper)
                }
                FamilyConfig::Subset => {
                    return Err(Error::Config(
                        "subset family runs on discrete environments".into(),
                    ))
                }
            };

            let prior = meta_level::sample_prior(&posterior, &rs.child("prior"))?;
            let test_task = sample_task(env, &rs.child("test/task"));
            let test_sample = sample_dataset(&test_task, n, &rs.child("test/data"))?;
            let meta = within_task_excess(
                &prior,
                &test_sample,
                &loss,
                alpha,
                config.budget,
                &rs.child("posterior/meta"),
            )?;
            let iso = within_task_excess(
                &iso_prior,
                &test_sample,
                &loss,
                alpha,
                config.budget,
                &rs.child("posterior/iso"),
            )?;
            Ok((meta, iso))
        })
        .collect::<Result<_>>()?;
    let meta = MeanSe::from_samples(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let iso = MeanSe::from_samples(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    Ok(CellOutcome { meta, iso })
}

/// Theoretical bounds for one cell with paper-default constants.
fn cell_bounds(
    env: &MetaEnvironment,
    config: &ExperimentConfig,
    t: usize,
    n: usize,
) -> Result<(f64, f64, bounds::Regime)> {
    let loss_bound = env.loss().bound();
    let mut p = BoundParams::new(loss_bound);
    p.n = Some(n as u64);
    p.t = Some(t as u64);
    p.smoothness = Some(env.smoothness());
    match env {
        MetaEnvironment::Discrete(e) => {
            p.labels = Some(e.labels as u64);
            p.optimal_labels = Some(e.optimal as u64);
            let report = bounds::discrete_meta_bound(&p)?;
            let iso = report
                .aux
                .iter()
                .find(|term| term.name.starts_with("isolation 4"))
                .map(|term| term.value)
                .unwrap_or(f64::INFINITY);
            Ok((report.value, iso, report.regime))
        }
        MetaEnvironment::Gaussian(e) => {
            p.dim = Some(e.mean.len() as u64);
            p.sigma = env.sigma_dispersion();
            p.a_bar = Some(config.algorithm.a_bar);
            p.b_bar = Some(config.algorithm.b_bar);
            p.xi_bar_sq = Some(config.algorithm.xi_bar_sq);
            p.mu_star_norm_sq = Some(e.mean.iter().map(|x| x * x).sum());
            let report = bounds::gaussian_meta_bound(&p)?;
            let iso = report
                .aux
                .iter()
                .find(|term| term.name == "unfavorable branch")
                .map(|term| term.value)
                .unwrap_or(f64::INFINITY);
            Ok((report.value, iso, report.regime))
        }
        MetaEnvironment::Mixture(e) => {
            let k = config
                .algorithm
                .components
                .or_else(|| config.algorithm.k_grid.as_ref().map(|g| g[0]))
                .unwrap_or(e.centers.len());
            p.dim = Some(e.centers[0].len() as u64);
            p.components = Some(k as u64);
            p.sigma_k = env.sigma_k_dispersion();
            p.xi_bar_sq = Some(config.algorithm.xi_bar_sq);
            p.b_bar = Some(config.algorithm.b_bar);
            p.tau_norm_sq = Some(
                e.centers
                    .iter()
                    .take(k)
                    .map(|c| c.iter().map(|x| x * x).sum())
                    .collect(),
            );
            let report = bounds::mixture_meta_bound(&p)?;
            // Isolation baseline: the one-center branch with the full
            // dispersion, i.e. the no-meta-gain rate.
            p.dim = Some(e.centers[0].len() as u64);
            p.sigma = env.sigma_dispersion();
            p.a_bar = Some(config.algorithm.a_bar);
            p.mu_star_norm_sq = Some(0.0);
            let iso = bounds::gaussian_meta_bound(&p)?
                .aux
                .iter()
                .find(|term| term.name == "unfavorable branch")
                .map(|term| term.value)
                .unwrap_or(f64::INFINITY);
            Ok((report.value, iso, report.regime))
        }
    }
}

/// Run the isolation-vs-meta table over the sweep grid.
pub fn run_isolation_vs_meta(
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<SimulationTable> {
    config.validate()?;
    let env = config.environment.build()?;
    let loss_bound = env.loss().bound();
    let alpha = config.algorithm.alpha.resolve(loss_bound)?;
    let beta = config.algorithm.beta.resolve(loss_bound)?;
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => config.sweep.seeds.clone(),
    };
    let setting = config.setting_name();
    let default_estimator = match config.algorithm.family {
        FamilyConfig::Subset => EstimatorKind::Exact,
        _ => EstimatorKind::Sampled,
    };
    let estimator = config.algorithm.estimator.unwrap_or(default_estimator);

    let mut rows = Vec::new();
    for &seed in &seeds {
        for &n in &config.sweep.n_grid {
            for &t in &config.sweep.t_grid {
                let cell_stream =
                    RandomStream::new(seed).child(&format!("simulate/t{t}/n{n}"));
                let outcome = match (&env, config.algorithm.family) {
                    (MetaEnvironment::Discrete(e), FamilyConfig::Subset) => discrete_subset_cell(
                        &env,
                        e.labels,
                        t,
                        n,
                        config.sweep.reps,
                        alpha,
                        beta,
                        estimator,
                        &cell_stream,
                    )?,
                    _ => continuous_cell(
                        &env,
                        &config.algorithm,
                        t,
                        n,
                        config.sweep.reps,
                        alpha,
                        beta,
                        &cell_stream,
                    )?,
                };
                let (bound_meta, bound_iso, regime) = cell_bounds(&env, config, t, n)?;
                let bound_ok = outcome.meta.mean - 3.0 * outcome.meta.se <= bound_meta
                    && outcome.iso.mean - 3.0 * outcome.iso.se <= bound_iso;
                rows.push(SimulationRow {
                    setting: setting.clone(),
                    seed,
                    t,
                    n,
                    reps: config.sweep.reps,
                    estimator,
                    meta_excess: outcome.meta.mean,
                    meta_se: outcome.meta.se,
                    iso_excess: outcome.iso.mean,
                    iso_se: outcome.iso.se,
                    bound_meta,
                    bound_iso,
                    regime,
                    bound_ok,
                });
            }
        }
    }
    Ok(SimulationTable { rows })
}

// ---------------------------------------------------------------------------
// Rate fitting.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RatePoint {
    pub t: f64,
    pub estimate: f64,
    pub se: f64,
}

/// Log-log least-squares fit of excess estimates against `T`.
#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub dropped_nonpositive: usize,
}

pub fn rate_fit(points: &[RatePoint]) -> Result<RateReport> {
    let kept: Vec<&RatePoint> = points.iter().filter(|p| p.estimate > 0.0).collect();
    let dropped = points.len() - kept.len();
    if kept.len() < 3 {
        return Err(Error::FitUnavailable(format!(
            "need >= 3 positive points for a slope, have {}",
            kept.len()
        )));
    }
    let xs: Vec<f64> = kept.iter().map(|p| p.t.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.estimate.ln()).collect();
    let n = xs.len() as f64;
    let x_mean = pairwise_sum(&xs) / n;
    let y_mean = pairwise_sum(&ys) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
        syy += (y - y_mean) * (y - y_mean);
    }
    if sxx == 0.0 {
        return Err(Error::FitUnavailable("all T values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            (y - fit) * (y - fit)
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(RateReport {
        points: points.to_vec(),
        slope,
        intercept,
        r_squared,
        dropped_nonpositive: dropped,
    })
}

/// Rate table: the simulate sweep plus a log-log fit of the meta column per
/// `(seed, n)` pair.
#[derive(Clone, Debug, Serialize)]
pub struct RateSweep {
    pub table: SimulationTable,
    pub fits: Vec<RateFitRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFitRow {
    pub seed: u64,
    pub n: usize,
    pub report: RateReport,
}

impl RateSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,n,t,reps,excess,se,slope,intercept,r_squared\n");
        for fit in &self.fits {
            for p in &fit.report.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    fit.seed,
                    fit.n,
                    p.t,
                    self.table.rows[0].reps,
                    fmt17(p.estimate),
                    fmt17(p.se),
                    fmt17(fit.report.slope),
                    fmt17(fit.report.intercept),
                    fmt17(fit.report.r_squared),
                ));
            }
        }
        out
    }
}

pub fn run_rates(config: &ExperimentConfig, seed_override: Option<u64>) -> Result<RateSweep> {
    let table = run_isolation_vs_meta(config, seed_override)?;
    let mut fits = Vec::new();
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => config.sweep.seeds.clone(),
    };
    for &seed in &seeds {
        for &n in &config.sweep.n_grid {
            let points: Vec<RatePoint> = table
                .rows
                .iter()
                .filter(|r| r.seed == seed && r.n == n)
                .map(|r| RatePoint {
                    t: r.t as f64,
                    estimate: r.meta_excess,
                    se: r.meta_se,
                })
                .collect();
            fits.push(RateFitRow {
                seed,
                n,
                report: rate_fit(&points)?,
            });
        }
    }
    Ok(RateSweep { table, fits })
}

// ---------------------------------------------------------------------------
// Open-question probe.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub t: usize,
    pub n: usize,
    pub reps: usize,
    pub exact_excess: f64,
    pub exact_se: f64,
    pub variational_excess: f64,
    pub variational_se: f64,
    /// Mean and max over tasks and priors of the free-energy gap between
    /// the two matrix constructions.
    pub fe_gap_mean: f64,
    pub fe_gap_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeTable {
    pub family: ProbeFamily,
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,t,n,reps,exact_excess,exact_se,variational_excess,variational_se,fe_gap_mean,fe_gap_max\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.t,
                r.n,
                r.reps,
                fmt17(r.exact_excess),
                fmt17(r.exact_se),
                fmt17(r.variational_excess),
                fmt17(r.variational_se),
                fmt17(r.fe_gap_mean),
                fmt17(r.fe_gap_max),
            ));
        }
        out
    }
}

/// Build the meta risk matrix over the subset family twice (exact Gibbs
/// free energies vs restricted-family free energies), form both
/// hyper-posteriors, and report paired excess estimates. Observational:
/// there is no pass/fail.
pub fn open_question_probe(config: &ExperimentConfig) -> Result<ProbeTable> {
    config.validate()?;
    let env = config.environment.build()?;
    let labels = match &env {
        MetaEnvironment::Discrete(e) => e.labels,
        _ => {
            return Err(Error::Unsupported(
                "the open-question probe needs a discrete environment".to_owned(),
            ))
        }
    };
    let loss = env.loss();
    let loss_bound = loss.bound();
    let alpha = config.algorithm.alpha.resolve(loss_bound)?;
    let beta = config.algorithm.beta.resolve(loss_bound)?;
    let family = meta_level::subset_family(labels)?;
    let probe_family = config.algorithm.probe_family.unwrap_or(ProbeFamily::Dirac);

    let mut rows = Vec::new();
    for &seed in &config.sweep.seeds {
        for &n in &config.sweep.n_grid {
            for &t in &config.sweep.t_grid {
                let cell_stream = RandomStream::new(seed).child(&format!("probe/t{t}/n{n}"));
                let reps = config.sweep.reps;
                let per_rep: Vec<(f64, f64, f64, f64)> = (0..reps)
                    .into_par_iter()
                    .map(|rep| -> Result<(f64, f64, f64, f64)> {
                        let rs = cell_stream.index("rep", rep as u64);
                        let mut sweep = SubsetSweep::new(labels)?;
                        let mut acc_exact = vec![0.0f64; family.len()];
                        let mut acc_var = vec![0.0f64; family.len()];
                        let mut task_exact = vec![0.0f64; family.len()];
                        let mut task_var = vec![0.0f64; family.len()];
                        let mut gap_sum = 0.0;
                        let mut gap_max = 0.0f64;
                        for ti in 0..t {
                            let task = sample_task(&env, &rs.index("task", ti as u64));
                            let sample = sample_dataset(&task, n, &rs.index("data", ti as u64))?;
                            let risks = within_task::empirical_risks(
                                &sample,
                                &loss,
                                &ParameterSet::Labels(labels),
                            )?;
                            task_exact.iter_mut().for_each(|v| *v = 0.0);
                            task_var.iter_mut().for_each(|v| *v = 0.0);
                            sweep.add_gibbs_free_energies(&risks, alpha, n, &mut task_exact)?;
                            match probe_family {
                                ProbeFamily::Dirac => sweep.add_dirac_free_energies(
                                    &risks,
                                    alpha,
                                    n,
                                    &mut task_var,
                                )?,
                                ProbeFamily::FullSimplex => sweep.add_gibbs_free_energies(
                                    &risks,
                                    alpha,
                                    n,
                                    &mut task_var,
                                )?,
                            }
                            for j in 0..family.len() {
                                let gap = task_var[j] - task_exact[j];
                                gap_sum += gap;
                                gap_max = gap_max.max(gap);
                                acc_exact[j] += task_exact[j];
                                acc_var[j] += task_var[j];
                            }
                        }
                        let posterior_of = |acc: &[f64]| -> Result<Vec<f64>> {
                            let lw: Vec<f64> = family
                                .log_lambda()
                                .iter()
                                .zip(acc)
                                .map(|(&ll, &s)| ll - beta * s)
                                .collect();
                            Ok(within_task::DiscretePosterior::from_log_weights(lw)?
                                .log_weights()
                                .to_vec())
                        };
                        let post_exact = posterior_of(&acc_exact)?;
                        let post_var = posterior_of(&acc_var)?;

                        let test_task = sample_task(&env, &rs.child("test/task"));
                        let test_sample = sample_dataset(&test_task, n, &rs.child("test/data"))?;
                        let emp = within_task::empirical_risks(
                            &test_sample,
                            &loss,
                            &ParameterSet::Labels(labels),
                        )?;
                        let truth: Vec<f64> = (0..labels)
                            .map(|j| {
                                crate::environments::true_risk(&test_task, &Parameter::Label(j))
                            })
                            .collect::<Result<_>>()?;
                        let mut excess = vec![0.0f64; family.len()];
                        sweep.posterior_true_excess(
                            &emp,
                            &truth,
                            test_task.optimal_risk(),
                            alpha,
                            n,
                            &mut excess,
                        )?;
                        let expect = |lw: &[f64]| {
                            let terms: Vec<f64> = lw
                                .iter()
                                .zip(&excess)
                                .map(|(&l, &e)| l.exp() * e)
                                .collect();
                            pairwise_sum(&terms)
                        };
                        Ok((
                            expect(&post_exact),
                            expect(&post_var),
                            gap_sum / (t * family.len()) as f64,
                            gap_max,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let exact = MeanSe::from_samples(&per_rep.iter().map(|p| p.0).collect::<Vec<_>>())?;
                let var = MeanSe::from_samples(&per_rep.iter().map(|p| p.1).collect::<Vec<_>>())?;
                let gap_mean =
                    pairwise_sum(&per_rep.iter().map(|p| p.2).collect::<Vec<_>>()) / reps as f64;
                let gap_max = per_rep.iter().map(|p| p.3).fold(0.0f64, f64::max);
                rows.push(ProbeRow {
                    seed,
                    t,
                    n,
                    reps,
                    exact_excess: exact.mean,
                    exact_se: exact.se,
                    variational_excess: var.mean,
                    variational_se: var.se,
                    fe_gap_mean: gap_mean,
                    fe_gap_max: gap_max,
                });
            }
        }
    }
    Ok(ProbeTable {
        family: probe_family,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn discrete_config() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
            [environment]
            kind = "discrete"
            labels = 6
            optimal_labels = 1
            flip_prob = 0.3

            [algorithm]
            alpha = "paper-default"
            beta = 0.1
            family = "subset"

            [sweep]
            t_grid = [5, 10]
            n_grid = [15]
            reps = 8
            seeds = [3]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_fields() {
        let bad_key = r#"
            [environment]
            kind = "discrete"
            labels = 4
            optimal_labels = 1
            flip_prob = 0.2
            surprise = 1

            [algorithm]
            alpha = 0.1
            beta = 0.1
            family = "subset"

            [sweep]
            t_grid = [2]
            n_grid = [5]
            reps = 2
            seeds = [1]
        "#;
        let err = ExperimentConfig::from_toml_str(bad_key).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");

        let bad_rate = discrete_config();
        let mut text = toml::to_string(&bad_rate).unwrap();
        text = text.replace("alpha = \"paper-default\"", "alpha = \"magic\"");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn config_rejects_family_environment_mismatch() {
        let text = r#"
            [environment]
            kind = "gaussian"
            mean = [0.0]
            task_spread = 0.0
            noise_var = 1.0

            [algorithm]
            alpha = 0.1
            beta = 0.1
            family = "subset"

            [sweep]
            t_grid = [2]
            n_grid = [5]
            reps = 2
            seeds = [1]
        "#;
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn rate_fit_recovers_exact_power_laws() {
        let ts = [25.0, 50.0, 100.0, 200.0, 400.0];
        let one_over_t: Vec<RatePoint> = ts
            .iter()
            .map(|&t| RatePoint {
                t,
                estimate: 3.7 / t,
                se: 0.0,
            })
            .collect();
        let fit = rate_fit(&one_over_t).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-10, "slope={}", fit.slope);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let inv_sqrt: Vec<RatePoint> = ts
            .iter()
            .map(|&t| RatePoint {
                t,
                estimate: 0.9 / t.sqrt(),
                se: 0.0,
            })
            .collect();
        let fit = rate_fit(&inv_sqrt).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-10);
    }

    #[test]
    fn rate_fit_drops_nonpositive_points_and_needs_three() {
        let pts = vec![
            RatePoint { t: 10.0, estimate: 0.1, se: 0.0 },
            RatePoint { t: 20.0, estimate: -0.1, se: 0.0 },
            RatePoint { t: 40.0, estimate: 0.05, se: 0.0 },
        ];
        assert!(matches!(
            rate_fit(&pts),
            Err(Error::FitUnavailable(_))
        ));
    }

    #[test]
    fn rate_fit_handles_multiplicative_noise() {
        use rand::Rng;
        let stream = RandomStream::new(77).child("rate-noise");
        let mut worst: f64 = 0.0;
        for resample in 0..100 {
            let mut rng = stream.index("resample", resample).rng();
            let points: Vec<RatePoint> = (0..13)
                .map(|i| {
                    let t = 10f64.powf(i as f64 / 2.0); // 6 decades
                    let noise: f64 = rng.random_range(-1.0..1.0);
                    RatePoint {
                        t,
                        estimate: 2.0 / t * (0.1 * noise).exp(),
                        se: 0.0,
                    }
                })
                .collect();
            let fit = rate_fit(&points).unwrap();
            worst = worst.max((fit.slope + 1.0).abs());
        }
        assert!(worst < 0.15, "worst slope error {worst}");
    }

    #[test]
    fn simulate_is_deterministic_and_bounds_hold() {
        let config = discrete_config();
        let a = run_isolation_vs_meta(&config, None).unwrap();
        let b = run_isolation_vs_meta(&config, None).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.all_bounds_hold());
        // Another seed stays within statistical distance.
        let c = run_isolation_vs_meta(&config, Some(4)).unwrap();
        for (ra, rc) in a.rows.iter().zip(&c.rows) {
            let tol = 4.0 * (ra.meta_se.powi(2) + rc.meta_se.powi(2)).sqrt();
            assert!(
                (ra.meta_excess - rc.meta_excess).abs() <= tol,
                "meta mismatch: {} vs {}",
                ra.meta_excess,
                rc.meta_excess
            );
        }
    }

    #[test]
    fn estimate_meta_risk_is_zero_for_the_oracle_prior_in_a_noiseless_env() {
        let env = MetaEnvironment::discrete(4, 1, 0.0).unwrap();
        let mut lw = vec![f64::NEG_INFINITY; 4];
        lw[0] = 0.0;
        let posterior = HyperPosterior::Finite {
            priors: vec![PriorSpec::Discrete { log_weights: lw }],
            weights: CategoricalDist::uniform(1).unwrap(),
        };
        let est = estimate_meta_risk(
            &posterior,
            &env,
            0.5,
            10,
            16,
            10,
            &RandomStream::new(5).child("zero"),
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert!(!est.negative_flagged);
    }

    #[test]
    fn estimate_meta_risk_same_seed_is_bit_identical() {
        let env = MetaEnvironment::gaussian(vec![0.2], 0.1, 1.0, None).unwrap();
        let hyper = meta_level::GaussianGammaHyper::new(
            vec![vec![0.0]],
            vec![0.5],
            vec![2.0],
            vec![2.0],
        )
        .unwrap();
        let posterior = HyperPosterior::GaussianGamma(hyper);
        let stream = RandomStream::new(9).child("det");
        let a = estimate_meta_risk(&posterior, &env, 0.05, 20, 12, 10, &stream).unwrap();
        let b = estimate_meta_risk(&posterior, &env, 0.05, 20, 12, 10, &stream).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.se.to_bits(), b.se.to_bits());
    }

    fn probe_config(family: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            [environment]
            kind = "discrete"
            labels = 5
            optimal_labels = 1
            flip_prob = 0.3

            [algorithm]
            alpha = 2.0
            beta = 0.1
            family = "subset"
            probe_family = "{family}"

            [sweep]
            t_grid = [6]
            n_grid = [12]
            reps = 6
            seeds = [11]
            "#,
        ))
        .unwrap()
    }

    #[test]
    fn probe_full_simplex_columns_coincide_bitwise() {
        let table = open_question_probe(&probe_config("full-simplex")).unwrap();
        for row in &table.rows {
            assert_eq!(row.exact_excess.to_bits(), row.variational_excess.to_bits());
            assert_eq!(row.fe_gap_max, 0.0);
        }
    }

    #[test]
    fn probe_dirac_gap_is_capped_by_log_m_over_alpha_n() {
        let config = probe_config("dirac");
        let table = open_question_probe(&config).unwrap();
        let alpha = 2.0;
        let cap = 5f64.ln() / (alpha * 12.0);
        for row in &table.rows {
            assert!(row.fe_gap_max >= -1e-12);
            assert!(
                row.fe_gap_max <= cap + 1e-12,
                "gap {} cap {cap}",
                row.fe_gap_max
            );
        }
    }

    #[test]
    fn probe_rejects_continuous_environments() {
        let text = r#"
            [environment]
            kind = "gaussian"
            mean = [0.0]
            task_spread = 0.0
            noise_var = 1.0

            [algorithm]
            alpha = 0.1
            beta = 0.1
            family = "gaussian"

            [sweep]
            t_grid = [2]
            n_grid = [5]
            reps = 2
            seeds = [1]
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert!(matches!(
            open_question_probe(&config),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn mixture_simulate_round_trip() {
        let text = r#"
            [environment]
            kind = "mixture"
            centers = [[-2.0], [2.0]]
            cluster_spread = 0.0
            noise_var = 0.5

            [algorithm]
            alpha = 0.1
            beta = 0.1
            family = "mixture"
            components = 2
            sigma_threshold = 0.2

            [sweep]
            t_grid = [8]
            n_grid = [10]
            reps = 6
            seeds = [5]
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        let table = run_isolation_vs_meta(&config, None).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.all_bounds_hold());

        // Unknown-K selection over a grid runs end to end too.
        let text = text
            .replace("family = \"mixture\"", "family = \"mixture-unknown-k\"")
            .replace("components = 2", "k_grid = [1, 2]");
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        let table = run_isolation_vs_meta(&config, None).unwrap();
        assert_eq!(table.rows.len(), 1);
    }

    #[test]
    fn gaussian_simulate_round_trip() {
        let text = r#"
            [environment]
            kind = "gaussian"
            mean = [0.4, -0.2]
            task_spread = 0.0
            noise_var = 1.0

            [algorithm]
            alpha = "paper-default"
            beta = "paper-default"
            family = "gaussian"
            epsilon = "n-over-t-squared"
            sigma_threshold = 0.05

            [sweep]
            t_grid = [10, 20]
            n_grid = [10]
            reps = 8
            seeds = [2]
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        let table = run_isolation_vs_meta(&config, None).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.all_bounds_hold());
        let csv = table.to_csv();
        assert!(csv.starts_with("setting,seed,t,n,reps,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
