//! Empirical verification of the variance/excess inequalities: the scalar
//! log-function inequality, the meta-level condition for per-task free
//! energies with constant `8 e C`, and the within-task constant estimate.
//!
//! The population-optimal prior is approximated by the argmin over a finite
//! candidate set, estimated on a stream independent of the verification
//! stream (sample splitting). Because a suboptimal reference can flip the
//! sign of the mean gap, every report carries a sensitivity column computed
//! against the second-best candidate.

use crate::bounds::EIGHT_E;
use crate::environments::{sample_dataset, sample_task, MetaEnvironment, RatioBound};
use crate::error::{Error, Result};
use crate::meta_level::{FinitePriorFamily, PriorSpec};
use crate::numerics::MeanSe;
use crate::rng::RandomStream;
use crate::within_task;
use rayon::prelude::*;

/// Left/right sides of the scalar inequality for `f(u) = -log(u)/tau` on
/// `[exp(-C tau), 1]`:
/// `lhs = (f(x) - f(y))^2`,
/// `rhs = (8 exp(2 C tau) / tau) ((f(x)+f(y))/2 - f((x+y)/2))`.
pub fn lemma1_gap(x: f64, y: f64, tau: f64, loss_bound: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) || !(loss_bound > 0.0) {
        return Err(Error::domain("tau and the loss bound must be positive"));
    }
    let floor = (-loss_bound * tau).exp();
    for (name, v) in [("x", x), ("y", y)] {
        if !(floor - 1e-12..=1.0 + 1e-12).contains(&v) {
            return Err(Error::domain(format!(
                "{name}={v} outside [exp(-C tau), 1] = [{floor}, 1]"
            )));
        }
    }
    let f = |u: f64| -u.ln() / tau;
    let lhs = (f(x) - f(y)).powi(2);
    let rhs = 8.0 * (2.0 * loss_bound * tau).exp() / tau
        * (0.5 * (f(x) + f(y)) - f(0.5 * (x + y)));
    Ok((lhs, rhs))
}

/// Estimate of the population-optimal prior over a finite candidate set.
#[derive(Clone, Debug)]
pub struct PiStarEstimate {
    /// Argmin of the estimated expected free energy; ties to lowest index.
    pub index: usize,
    /// Runner-up for the sensitivity column.
    pub second_index: Option<usize>,
    pub estimates: Vec<MeanSe>,
}

fn candidate_log_weights(family: &FinitePriorFamily) -> Result<Vec<&[f64]>> {
    family
        .priors()
        .iter()
        .map(|p| match p {
            PriorSpec::Discrete { log_weights } => Ok(log_weights.as_slice()),
            _ => Err(Error::Unsupported(
                "pi* estimation needs discrete priors over a finite set".to_owned(),
            )),
        })
        .collect()
}

/// Free-energy draws for every candidate prior on `reps` fresh tasks.
fn free_energy_draws(
    env: &MetaEnvironment,
    candidates: &[&[f64]],
    alpha: f64,
    n: usize,
    reps: usize,
    stream: &RandomStream,
) -> Result<Vec<Vec<f64>>> {
    let m = match env {
        MetaEnvironment::Discrete(e) => e.labels,
        _ => {
            return Err(Error::Unsupported(
                "meta-level verification runs on discrete environments".to_owned(),
            ))
        }
    };
    let loss = env.loss();
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let task_stream = stream.index("rep", rep as u64);
            let task = sample_task(env, &task_stream.child("task"));
            let sample = sample_dataset(&task, n, &task_stream.child("data"))?;
            let risks = within_task::empirical_risks(
                &sample,
                &loss,
                &within_task::ParameterSet::Labels(m),
            )?;
            candidates
                .iter()
                .map(|lw| within_task::log_partition_free_energy(lw, &risks, alpha, n))
                .collect()
        })
        .collect()
}

/// Monte-Carlo argmin of the expected within-task free energy over a
/// candidate prior set; ties break to the lowest index.
pub fn estimate_pi_star(
    env: &MetaEnvironment,
    candidates: &FinitePriorFamily,
    alpha: f64,
    n: usize,
    reps: usize,
    stream: &RandomStream,
) -> Result<PiStarEstimate> {
    if reps < 100 {
        return Err(Error::domain(format!(
            "pi* estimation needs reps >= 100, got {reps}"
        )));
    }
    let lws = candidate_log_weights(candidates)?;
    let draws = free_energy_draws(env, &lws, alpha, n, reps, stream)?;
    let estimates: Vec<MeanSe> = (0..lws.len())
        .map(|j| {
            let column: Vec<f64> = draws.iter().map(|row| row[j]).collect();
            MeanSe::from_samples(&column)
        })
        .collect::<Result<_>>()?;
    let mut index = 0;
    for (j, est) in estimates.iter().enumerate() {
        if est.mean < estimates[index].mean {
            index = j;
        }
    }
    let mut second_index = None;
    for (j, est) in estimates.iter().enumerate() {
        if j == index {
            continue;
        }
        match second_index {
            None => second_index = Some(j),
            Some(s) if est.mean < estimates[s].mean => second_index = Some(j),
            _ => {}
        }
    }
    Ok(PiStarEstimate {
        index,
        second_index,
        estimates,
    })
}

/// Two sides of the meta-level variance/excess inequality for one prior.
#[derive(Clone, Copy, Debug)]
pub struct BernsteinEstimate {
    /// `mean(Delta^2)` with `Delta` the paired free-energy gap.
    pub lhs: f64,
    /// `c * mean(Delta)`.
    pub rhs: f64,
    pub se_lhs: f64,
    /// Standard error of `mean(Delta)`.
    pub se_delta: f64,
    pub reps: usize,
    pub c_used: f64,
    /// `lhs <= rhs + 3 (se_lhs + c se_delta)`.
    pub pass: bool,
}

fn bernstein_estimate(gaps: &[f64], c_used: f64) -> Result<BernsteinEstimate> {
    let squares: Vec<f64> = gaps.iter().map(|&g| g * g).collect();
    let lhs = MeanSe::from_samples(&squares)?;
    let delta = MeanSe::from_samples(gaps)?;
    let rhs = c_used * delta.mean;
    let margin = 3.0 * (lhs.se + c_used * delta.se);
    Ok(BernsteinEstimate {
        lhs: lhs.mean,
        rhs,
        se_lhs: lhs.se,
        se_delta: delta.se,
        reps: gaps.len(),
        c_used,
        pass: lhs.mean <= rhs + margin,
    })
}

/// Verification report for a set of tested priors.
#[derive(Clone, Debug)]
pub struct MetaBernsteinReport {
    pub pi_star: PiStarEstimate,
    /// One estimate per tested prior, relative to the estimated optimum.
    pub estimates: Vec<BernsteinEstimate>,
    /// The same comparisons relative to the second-best candidate.
    pub sensitivity: Vec<BernsteinEstimate>,
    pub pass_rate: f64,
}

/// Verify the meta-level condition: estimate the optimal prior on one
/// stream, then check `mean(Delta^2) <= 8 e C mean(Delta)` (within a 3-SE
/// margin) on an independent stream, where `Delta` pairs each tested
/// prior's free energy against the estimated optimum on shared draws.
pub fn verify_meta_bernstein(
    env: &MetaEnvironment,
    candidates: &FinitePriorFamily,
    tested: &[PriorSpec],
    alpha: f64,
    n: usize,
    reps: usize,
    stream: &RandomStream,
) -> Result<MetaBernsteinReport> {
    if reps < 100 {
        return Err(Error::domain(format!(
            "meta-level verification needs reps >= 100, got {reps}"
        )));
    }
    if tested.is_empty() {
        return Err(Error::Empty("tested priors"));
    }
    let pi_star = estimate_pi_star(env, candidates, alpha, n, reps, &stream.child("estimate"))?;
    let c_used = EIGHT_E * env.loss().bound();

    let mut references = vec![candidates.priors()[pi_star.index].clone()];
    if let Some(second) = pi_star.second_index {
        references.push(candidates.priors()[second].clone());
    }
    let mut all: Vec<PriorSpec> = references.clone();
    all.extend_from_slice(tested);
    let lws = candidate_log_weights(&FinitePriorFamily::uniform_reference(all)?)?
        .into_iter()
        .map(|s| s.to_vec())
        .collect::<Vec<_>>();
    let lw_refs: Vec<&[f64]> = lws.iter().map(|v| v.as_slice()).collect();
    let draws = free_energy_draws(env, &lw_refs, alpha, n, reps, &stream.child("verify"))?;

    let offset = references.len();
    let mut estimates = Vec::with_capacity(tested.len());
    let mut sensitivity = Vec::with_capacity(tested.len());
    for j in 0..tested.len() {
        let gaps: Vec<f64> = draws.iter().map(|row| row[offset + j] - row[0]).collect();
        estimates.push(bernstein_estimate(&gaps, c_used)?);
        if references.len() > 1 {
            let gaps2: Vec<f64> = draws.iter().map(|row| row[offset + j] - row[1]).collect();
            sensitivity.push(bernstein_estimate(&gaps2, c_used)?);
        }
    }
    let pass_rate = estimates.iter().filter(|e| e.pass).count() as f64 / estimates.len() as f64;
    Ok(MetaBernsteinReport {
        pi_star,
        estimates,
        sensitivity,
        pass_rate,
    })
}

/// Diagnostic wrapper around the within-task constant estimate.
#[derive(Clone, Copy, Debug)]
pub struct WithinTaskBernsteinReport {
    pub constant: RatioBound,
    pub ceiling: f64,
    pub pass: bool,
}

pub fn verify_within_task_bernstein(
    env: &MetaEnvironment,
    grid: &[crate::environments::Parameter],
    reps: usize,
    ceiling: f64,
    stream: &RandomStream,
) -> Result<WithinTaskBernsteinReport> {
    let constant = crate::environments::bernstein_constant_estimate(env, grid, reps, stream)?;
    let pass = match constant {
        RatioBound::Finite(v) => v <= ceiling,
        RatioBound::Infinite => false,
    };
    Ok(WithinTaskBernsteinReport {
        constant,
        ceiling,
        pass,
    })
}

/// Random candidate priors on a finite set: Dirichlet(1) draws, with the
/// uniform prior and a near-point mass on `anchor` mixed in when requested.
pub fn random_discrete_priors(
    labels: usize,
    count: usize,
    anchor: Option<usize>,
    stream: &RandomStream,
) -> Result<Vec<PriorSpec>> {
    use rand::Rng;
    let mut priors = Vec::with_capacity(count);
    if let Some(star) = anchor {
        let mut w = vec![0.05 / (labels as f64 - 1.0); labels];
        w[star] = 0.95;
        priors.push(PriorSpec::Discrete {
            log_weights: w.iter().map(|x| x.ln()).collect(),
        });
        priors.push(PriorSpec::Discrete {
            log_weights: vec![-(labels as f64).ln(); labels],
        });
    }
    let mut rng = stream.rng();
    while priors.len() < count {
        let raw: Vec<f64> = (0..labels)
            .map(|_| -(rng.random_range(0.0f64..1.0)).max(1e-12).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        priors.push(PriorSpec::Discrete {
            log_weights: raw.iter().map(|x| (x / total).ln()).collect(),
        });
    }
    Ok(priors)
}
