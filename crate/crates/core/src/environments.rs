//! Bounded losses and synthetic task environments with analytically known
//! risks and minimizers.
//!
//! Three environment kinds are shipped:
//! - discrete: finite label set, zero-one loss, uniform label flips;
//! - gaussian: task means drawn around one center, clipped squared loss;
//! - mixture: task means drawn around one of several cluster centers.
//!
//! Tasks carry their own oracle risk evaluators so excess risk is never
//! estimated by nested Monte Carlo when a closed form or one-dimensional
//! quadrature exists.

use crate::error::{Error, Result};
use crate::numerics::{chi_square_cdf, pairwise_sum};
use crate::rng::RandomStream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Tail probability below which clipping is treated as inactive.
const CLIP_NEGLIGIBLE: f64 = 1e-15;

/// A loss with a certified bound `C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundedLoss {
    /// `l(z, theta) = 1[z != theta]`, bound 1.
    ZeroOneMismatch,
    /// `l(z, theta) = min(clip, ||theta - z||^2)`, bound `clip`.
    ClippedSquared { clip: f64 },
}

impl BoundedLoss {
    pub fn bound(&self) -> f64 {
        match self {
            BoundedLoss::ZeroOneMismatch => 1.0,
            BoundedLoss::ClippedSquared { clip } => *clip,
        }
    }

    pub fn evaluate(&self, z: &Observation, theta: &Parameter) -> Result<f64> {
        match (self, z, theta) {
            (BoundedLoss::ZeroOneMismatch, Observation::Label(z), Parameter::Label(t)) => {
                Ok(if z == t { 0.0 } else { 1.0 })
            }
            (BoundedLoss::ClippedSquared { clip }, Observation::Point(z), Parameter::Point(t)) => {
                if z.len() != t.len() {
                    return Err(Error::LengthMismatch(z.len(), t.len()));
                }
                let sq: f64 = z.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(sq.min(*clip))
            }
            _ => Err(Error::domain("loss/observation/parameter kind mismatch")),
        }
    }
}

/// One observation from a task.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Label(usize),
    Point(Vec<f64>),
}

/// One decision-space point.
#[derive(Clone, Debug, PartialEq)]
pub enum Parameter {
    Label(usize),
    Point(Vec<f64>),
}

/// Discrete environment: `M` labels, minimizers drawn uniformly from the
/// first `optimal` labels, observations flipped uniformly with probability
/// `flip_prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEnv {
    pub labels: usize,
    pub optimal: usize,
    pub flip_prob: f64,
}

/// Gaussian environment: task means `mu_P ~ N(mean, task_spread * I)`,
/// observations `Z ~ N(mu_P, noise_var * I)`, clipped squared loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnv {
    pub mean: Vec<f64>,
    pub task_spread: f64,
    pub noise_var: f64,
    pub clip: f64,
}

/// Mixture environment: a uniform cluster index, then
/// `mu_P ~ N(center_k, cluster_spread * I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEnv {
    pub centers: Vec<Vec<f64>>,
    pub cluster_spread: f64,
    pub noise_var: f64,
    pub clip: f64,
}

/// A sampleable distribution over tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetaEnvironment {
    Discrete(DiscreteEnv),
    Gaussian(GaussianEnv),
    Mixture(MixtureEnv),
}

impl MetaEnvironment {
    pub fn discrete(labels: usize, optimal: usize, flip_prob: f64) -> Result<Self> {
        if labels < 2 {
            return Err(Error::domain("discrete environment needs >= 2 labels"));
        }
        if optimal == 0 || optimal > labels {
            return Err(Error::domain(format!(
                "optimal subset size must lie in [1, {labels}], got {optimal}"
            )));
        }
        let max_flip = (labels - 1) as f64 / labels as f64;
        if !(0.0..max_flip).contains(&flip_prob) {
            return Err(Error::domain(format!(
                "flip_prob must lie in [0, {max_flip}) so the planted label stays optimal"
            )));
        }
        Ok(MetaEnvironment::Discrete(DiscreteEnv {
            labels,
            optimal,
            flip_prob,
        }))
    }

    pub fn gaussian(mean: Vec<f64>, task_spread: f64, noise_var: f64, clip: Option<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("gaussian environment mean"));
        }
        if task_spread < 0.0 || noise_var < 0.0 {
            return Err(Error::domain("spread and noise variance must be >= 0"));
        }
        let clip = clip.unwrap_or_else(|| default_clip(&mean, task_spread, noise_var));
        if !(clip > 0.0) {
            return Err(Error::domain("clip must be positive"));
        }
        Ok(MetaEnvironment::Gaussian(GaussianEnv {
            mean,
            task_spread,
            noise_var,
            clip,
        }))
    }

    pub fn mixture(
        centers: Vec<Vec<f64>>,
        cluster_spread: f64,
        noise_var: f64,
        clip: Option<f64>,
    ) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Empty("mixture environment centers"));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::domain("mixture centers must share one dimension"));
        }
        if cluster_spread < 0.0 || noise_var < 0.0 {
            return Err(Error::domain("spread and noise variance must be >= 0"));
        }
        let worst = centers
            .iter()
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        let clip = clip.unwrap_or_else(|| {
            let mut anchor = vec![0.0; d];
            anchor[0] = worst;
            default_clip(&anchor, cluster_spread, noise_var)
        });
        if !(clip > 0.0) {
            return Err(Error::domain("clip must be positive"));
        }
        Ok(MetaEnvironment::Mixture(MixtureEnv {
            centers,
            cluster_spread,
            noise_var,
            clip,
        }))
    }

    pub fn loss(&self) -> BoundedLoss {
        match self {
            MetaEnvironment::Discrete(_) => BoundedLoss::ZeroOneMismatch,
            MetaEnvironment::Gaussian(e) => BoundedLoss::ClippedSquared { clip: e.clip },
            MetaEnvironment::Mixture(e) => BoundedLoss::ClippedSquared { clip: e.clip },
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            MetaEnvironment::Discrete(_) => None,
            MetaEnvironment::Gaussian(e) => Some(e.mean.len()),
            MetaEnvironment::Mixture(e) => Some(e.centers[0].len()),
        }
    }

    /// Dispersion of task minimizers around one center, `E ||mu_P - mu*||^2`.
    /// Exact for the gaussian kind (`d * task_spread`); for mixtures it is
    /// the dispersion around the overall mean of the centers.
    pub fn sigma_dispersion(&self) -> Option<f64> {
        match self {
            MetaEnvironment::Discrete(_) => None,
            MetaEnvironment::Gaussian(e) => Some(e.mean.len() as f64 * e.task_spread),
            MetaEnvironment::Mixture(e) => {
                let d = e.centers[0].len();
                let k = e.centers.len() as f64;
                let mut grand = vec![0.0; d];
                for c in &e.centers {
                    for i in 0..d {
                        grand[i] += c[i] / k;
                    }
                }
                let between: f64 = e
                    .centers
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(&grand)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / k;
                Some(between + d as f64 * e.cluster_spread)
            }
        }
    }

    /// Dispersion around the best `K` centers when `K` matches the mixture's
    /// own cluster count: `d * cluster_spread` up to cluster overlap.
    pub fn sigma_k_dispersion(&self) -> Option<f64> {
        match self {
            MetaEnvironment::Mixture(e) => Some(e.centers[0].len() as f64 * e.cluster_spread),
            MetaEnvironment::Gaussian(e) => Some(e.mean.len() as f64 * e.task_spread),
            MetaEnvironment::Discrete(_) => None,
        }
    }

    /// Quadratic-growth constant of the excess risk; 1 for the unclipped
    /// squared loss, and the trivial bound `C` for the zero-one loss.
    pub fn smoothness(&self) -> f64 {
        match self {
            MetaEnvironment::Discrete(_) => 1.0,
            MetaEnvironment::Gaussian(_) | MetaEnvironment::Mixture(_) => 1.0,
        }
    }
}

/// `25 * (noise_var * d + worst-case mean offset^2)`; keeps the clipping
/// probability below ~1e-8 in the default configurations.
fn default_clip(mean: &[f64], spread: f64, noise_var: f64) -> f64 {
    let d = mean.len() as f64;
    let center_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let offset = center_norm + 6.0 * (d * spread).sqrt() + 6.0 * (d * noise_var).sqrt();
    25.0 * (noise_var * d + offset * offset).max(1.0)
}

/// A single task: a data distribution with known oracle risk.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDistribution {
    Discrete {
        labels: usize,
        theta_star: usize,
        flip_prob: f64,
    },
    Continuous {
        mean: Vec<f64>,
        noise_var: f64,
        clip: f64,
    },
}

impl TaskDistribution {
    pub fn minimizer(&self) -> Parameter {
        match self {
            TaskDistribution::Discrete { theta_star, .. } => Parameter::Label(*theta_star),
            TaskDistribution::Continuous { mean, .. } => Parameter::Point(mean.clone()),
        }
    }

    /// Oracle minimum risk `R*`.
    pub fn optimal_risk(&self) -> f64 {
        match self {
            TaskDistribution::Discrete { flip_prob, .. } => *flip_prob,
            TaskDistribution::Continuous {
                mean,
                noise_var,
                clip,
            } => expected_clipped_sq_norm(&vec![0.0; mean.len()], &vec![*noise_var; mean.len()], *clip)
                .expect("oracle risk at the minimizer"),
        }
    }
}

/// Draw one task from the environment.
pub fn sample_task(env: &MetaEnvironment, stream: &RandomStream) -> TaskDistribution {
    let mut rng = stream.rng();
    match env {
        MetaEnvironment::Discrete(e) => TaskDistribution::Discrete {
            labels: e.labels,
            theta_star: rng.random_range(0..e.optimal),
            flip_prob: e.flip_prob,
        },
        MetaEnvironment::Gaussian(e) => {
            let sd = e.task_spread.sqrt();
            let mean = e
                .mean
                .iter()
                .map(|&m| m + sd * crate::rng::standard_normal(&mut rng))
                .collect();
            TaskDistribution::Continuous {
                mean,
                noise_var: e.noise_var,
                clip: e.clip,
            }
        }
        MetaEnvironment::Mixture(e) => {
            let k = rng.random_range(0..e.centers.len());
            let sd = e.cluster_spread.sqrt();
            let mean = e.centers[k]
                .iter()
                .map(|&m| m + sd * crate::rng::standard_normal(&mut rng))
                .collect();
            TaskDistribution::Continuous {
                mean,
                noise_var: e.noise_var,
                clip: e.clip,
            }
        }
    }
}

/// `n` i.i.d. observations from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub task: TaskDistribution,
    pub observations: Observations,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observations {
    Labels(Vec<usize>),
    Points(Vec<Vec<f64>>),
}

impl TaskSample {
    pub fn len(&self) -> usize {
        match &self.observations {
            Observations::Labels(v) => v.len(),
            Observations::Points(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw a dataset of size `n` from the task.
pub fn sample_dataset(task: &TaskDistribution, n: usize, stream: &RandomStream) -> Result<TaskSample> {
    if n == 0 {
        return Err(Error::domain("dataset size must be >= 1"));
    }
    let mut rng = stream.rng();
    let observations = match task {
        TaskDistribution::Discrete {
            labels,
            theta_star,
            flip_prob,
        } => {
            let mut draws = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.random();
                if u < *flip_prob {
                    // Uniform over the other labels.
                    let mut z = rng.random_range(0..labels - 1);
                    if z >= *theta_star {
                        z += 1;
                    }
                    draws.push(z);
                } else {
                    draws.push(*theta_star);
                }
            }
            Observations::Labels(draws)
        }
        TaskDistribution::Continuous {
            mean, noise_var, ..
        } => {
            let sd = noise_var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let draws = (0..n)
                .map(|_| {
                    mean.iter()
                        .map(|&m| m + sd * normal.sample(&mut rng))
                        .collect()
                })
                .collect();
            Observations::Points(draws)
        }
    };
    Ok(TaskSample {
        task: task.clone(),
        observations,
    })
}

/// Oracle prediction risk `R_P(theta)`, in `[0, C]`.
pub fn true_risk(task: &TaskDistribution, theta: &Parameter) -> Result<f64> {
    match (task, theta) {
        (
            TaskDistribution::Discrete {
                labels,
                theta_star,
                flip_prob,
            },
            Parameter::Label(t),
        ) => {
            if t >= labels {
                return Err(Error::domain(format!("label {t} out of range {labels}")));
            }
            Ok(if t == theta_star {
                *flip_prob
            } else {
                1.0 - flip_prob / (*labels as f64 - 1.0)
            })
        }
        (
            TaskDistribution::Continuous {
                mean,
                noise_var,
                clip,
            },
            Parameter::Point(t),
        ) => {
            if t.len() != mean.len() {
                return Err(Error::LengthMismatch(t.len(), mean.len()));
            }
            let diff: Vec<f64> = t.iter().zip(mean).map(|(a, b)| a - b).collect();
            expected_clipped_sq_norm(&diff, &vec![*noise_var; mean.len()], *clip)
        }
        _ => Err(Error::domain("task/parameter kind mismatch")),
    }
}

/// `E[min(clip, ||W||^2)]` for `W_i ~ N(diff[i], var[i])` independent.
///
/// Closed form when the clipping probability is provably negligible or all
/// variances vanish; otherwise a one-dimensional quadrature over the radial
/// decomposition (requires equal variances).
pub fn expected_clipped_sq_norm(diff: &[f64], var: &[f64], clip: f64) -> Result<f64> {
    if diff.len() != var.len() {
        return Err(Error::LengthMismatch(diff.len(), var.len()));
    }
    if diff.is_empty() {
        return Err(Error::Empty("expected_clipped_sq_norm"));
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::domain("variances must be >= 0"));
    }
    let unclipped: f64 = diff
        .iter()
        .zip(var)
        .map(|(&m, &v)| m * m + v)
        .sum();
    let norm = diff.iter().map(|&m| m * m).sum::<f64>().sqrt();
    let max_var = var.iter().fold(0.0f64, |a, &b| a.max(b));
    if max_var == 0.0 {
        return Ok(unclipped.min(clip));
    }
    // Conservative tail bound: ||W|| <= norm + sqrt(max_var) * ||U||.
    let d = diff.len();
    let slack = clip.sqrt() - norm;
    if slack > 0.0 {
        let tail = 1.0 - chi_square_cdf(d, slack * slack / max_var)?;
        if tail < CLIP_NEGLIGIBLE {
            return Ok(unclipped);
        }
    }
    let min_var = var.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if (max_var - min_var) > 1e-12 * max_var {
        if d == 2 {
            return Ok(unclipped - excess_over_clip_2d(diff, var, clip));
        }
        return Err(Error::Unsupported(
            "clipped risk with anisotropic variance is only supported in 2 dimensions".to_owned(),
        ));
    }
    Ok(unclipped - expected_excess_over_clip(norm, max_var, d, clip)?)
}

/// `E[(||W||^2 - clip)^+]` for two independent coordinates with distinct
/// variances; tensor trapezoid over both standardized axes.
fn excess_over_clip_2d(diff: &[f64], var: &[f64], clip: f64) -> f64 {
    let nodes = 1201;
    let (lo, hi) = (-8.5f64, 8.5f64);
    let h = (hi - lo) / (nodes - 1) as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI);
    let (s0, s1) = (var[0].sqrt(), var[1].sqrt());
    let mut outer = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let u0 = lo + h * i as f64;
        let w0 = diff[0] + s0 * u0;
        let mut inner = Vec::with_capacity(nodes);
        for j in 0..nodes {
            let u1 = lo + h * j as f64;
            let w1 = diff[1] + s1 * u1;
            let x = w0 * w0 + w1 * w1;
            let weight = if j == 0 || j == nodes - 1 { 0.5 } else { 1.0 };
            inner.push(weight * (-0.5 * (u0 * u0 + u1 * u1)).exp() * (x - clip).max(0.0));
        }
        let weight = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        outer.push(weight * pairwise_sum(&inner));
    }
    pairwise_sum(&outer) * h * h * norm
}

/// `E[(||W||^2 - clip)^+]` with `||W||^2 = (norm + s u)^2 + s^2 Y`,
/// `u ~ N(0,1)`, `Y ~ chi^2_{d-1}`; trapezoid over `u`.
fn expected_excess_over_clip(norm: f64, var: f64, d: usize, clip: f64) -> Result<f64> {
    let s = var.sqrt();
    let m = d - 1;
    let nodes = 4001;
    let (lo, hi) = (-12.0f64, 12.0f64);
    let h = (hi - lo) / (nodes - 1) as f64;
    let mut terms = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let u = lo + h * i as f64;
        let phi = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let q = (norm + s * u) * (norm + s * u);
        let g = if m == 0 {
            (q - clip).max(0.0)
        } else {
            let t = (clip - q) / var;
            if t <= 0.0 {
                q - clip + var * m as f64
            } else {
                let upper_mean = m as f64 * (1.0 - chi_square_cdf(m + 2, t)?);
                let tail = 1.0 - chi_square_cdf(m, t)?;
                var * (upper_mean - t * tail)
            }
        };
        let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        terms.push(w * phi * g);
    }
    Ok(pairwise_sum(&terms) * h)
}

/// `E[(l(Z, theta) - l(Z, theta*))^2]` under the task's data distribution.
pub fn loss_diff_second_moment(
    task: &TaskDistribution,
    theta: &Parameter,
    reps: usize,
    stream: &RandomStream,
) -> Result<f64> {
    match (task, theta) {
        (
            TaskDistribution::Discrete {
                labels,
                theta_star,
                flip_prob,
            },
            Parameter::Label(t),
        ) => {
            if t == theta_star {
                return Ok(0.0);
            }
            // The losses differ exactly when Z hits theta or theta*.
            Ok((1.0 - flip_prob) + flip_prob / (*labels as f64 - 1.0))
        }
        (
            TaskDistribution::Continuous {
                mean,
                noise_var,
                clip,
            },
            Parameter::Point(t),
        ) => {
            let d = mean.len();
            if t.len() != d {
                return Err(Error::LengthMismatch(t.len(), d));
            }
            let dist_sq: f64 = t.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm = dist_sq.sqrt();
            // Unclipped closed form, valid when clipping is negligible at a
            // radius covering both theta and theta*.
            let reach = norm + 12.0 * noise_var.sqrt() * (d as f64).sqrt();
            if reach * reach < *clip || *noise_var == 0.0 {
                return Ok(dist_sq * dist_sq + 4.0 * noise_var * dist_sq);
            }
            // Clipping active: Monte-Carlo fallback on the labelled stream.
            let loss = BoundedLoss::ClippedSquared { clip: *clip };
            let mut rng = stream.rng();
            let sd = noise_var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let theta_point = Parameter::Point(t.clone());
            let star = Parameter::Point(mean.clone());
            let draws: Vec<f64> = (0..reps.max(2))
                .map(|_| {
                    let z: Vec<f64> = mean.iter().map(|&m| m + sd * normal.sample(&mut rng)).collect();
                    let z = Observation::Point(z);
                    let diff = loss.evaluate(&z, &theta_point).unwrap() - loss.evaluate(&z, &star).unwrap();
                    diff * diff
                })
                .collect();
            Ok(pairwise_sum(&draws) / draws.len() as f64)
        }
        _ => Err(Error::domain("task/parameter kind mismatch")),
    }
}

/// A supremum estimate that may be flagged unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RatioBound {
    Finite(f64),
    Infinite,
}

impl RatioBound {
    pub fn finite(self) -> Option<f64> {
        match self {
            RatioBound::Finite(v) => Some(v),
            RatioBound::Infinite => None,
        }
    }
}

/// Estimate of the within-task variance/excess constant: the supremum over
/// sampled tasks and grid points of `V_t(theta, theta*) / (R(theta) - R*)`.
///
/// Grid points that duplicate the task minimizer contribute nothing; a
/// vanishing excess with non-vanishing variance yields the infinite
/// sentinel.
pub fn bernstein_constant_estimate(
    env: &MetaEnvironment,
    grid: &[Parameter],
    reps: usize,
    stream: &RandomStream,
) -> Result<RatioBound> {
    if grid.is_empty() {
        return Err(Error::Empty("bernstein grid"));
    }
    if reps == 0 {
        return Err(Error::domain("reps must be >= 1"));
    }
    let mut sup: f64 = 0.0;
    for rep in 0..reps {
        let task_stream = stream.index("task", rep as u64);
        let task = sample_task(env, &task_stream);
        let r_star = task.optimal_risk();
        for (j, theta) in grid.iter().enumerate() {
            let excess = true_risk(&task, theta)? - r_star;
            let v = loss_diff_second_moment(
                &task,
                theta,
                200_000,
                &task_stream.index("moment", j as u64),
            )?;
            if excess < 1e-12 {
                if v > 1e-12 {
                    return Ok(RatioBound::Infinite);
                }
                continue;
            }
            sup = sup.max(v / excess);
        }
    }
    Ok(RatioBound::Finite(sup))
}
