//! Within-task posteriors: the exact Gibbs posterior on a finite parameter
//! set, its free energy, and variational approximations over diagonal
//! Gaussians and Dirac masses.
//!
//! The free energy of a posterior `rho` under prior `pi` at inverse
//! temperature `alpha * n` is `E_rho[empirical risk] + KL(rho || pi) / (alpha n)`.
//! Its minimum over the full simplex is the log-partition value
//! `-(1/(alpha n)) log E_pi[exp(-alpha n risk)]`, attained by the Gibbs
//! posterior; both routes are implemented and tested against each other.

use crate::divergences::DiagGaussian;
use crate::environments::{BoundedLoss, Observations, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, log_sum_exp_terms, pairwise_sum};
use crate::rng::RandomStream;

/// Normalized distribution on a finite parameter set, stored in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePosterior {
    log_weights: Vec<f64>,
}

impl DiscretePosterior {
    /// Normalize arbitrary (finite or `-inf`) log-weights.
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::Empty("DiscretePosterior"));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::numeric("posterior log-weights must not be NaN/+inf"));
        }
        let z = log_sum_exp_terms(&log_weights)?;
        if z == f64::NEG_INFINITY {
            return Err(Error::domain("posterior has no mass"));
        }
        Ok(Self {
            log_weights: log_weights.iter().map(|w| w - z).collect(),
        })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::from_log_weights(vec![0.0; m])
    }

    pub fn one_hot(m: usize, index: usize) -> Result<Self> {
        if index >= m {
            return Err(Error::domain(format!("one-hot index {index} out of {m}")));
        }
        let mut lw = vec![f64::NEG_INFINITY; m];
        lw[index] = 0.0;
        Ok(Self { log_weights: lw })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// `E_rho[values]`.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch(values.len(), self.len()));
        }
        let terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(values)
            .map(|(&lw, &v)| lw.exp() * v)
            .collect();
        Ok(pairwise_sum(&terms))
    }
}

/// Free energy with its decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergyValue {
    pub value: f64,
    pub risk_part: f64,
    pub kl_part: f64,
}

/// Free energy that may be infinite when the posterior escapes the prior's
/// support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FreeEnergy {
    Finite(FreeEnergyValue),
    Infinite,
}

impl FreeEnergy {
    pub fn finite(self) -> Option<FreeEnergyValue> {
        match self {
            FreeEnergy::Finite(v) => Some(v),
            FreeEnergy::Infinite => None,
        }
    }

    pub fn value_or_infinity(self) -> f64 {
        match self {
            FreeEnergy::Finite(v) => v.value,
            FreeEnergy::Infinite => f64::INFINITY,
        }
    }
}

/// Finite evaluation set for empirical risks.
#[derive(Clone, Debug, PartialEq)]
pub enum ParameterSet {
    /// Labels `0..m`.
    Labels(usize),
    /// Explicit continuous points.
    Points(Vec<Vec<f64>>),
}

/// Per-parameter empirical risk `(1/n) sum_i l(Z_i, theta)`.
pub fn empirical_risks(
    sample: &TaskSample,
    loss: &BoundedLoss,
    set: &ParameterSet,
) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Empty("task sample"));
    }
    let n = sample.len() as f64;
    match (&sample.observations, loss, set) {
        (Observations::Labels(z), BoundedLoss::ZeroOneMismatch, ParameterSet::Labels(m)) => {
            if *m == 0 {
                return Err(Error::Empty("parameter set"));
            }
            let mut counts = vec![0usize; *m];
            for &obs in z {
                if obs < *m {
                    counts[obs] += 1;
                }
            }
            Ok(counts
                .iter()
                .map(|&c| (sample.len() - c) as f64 / n)
                .collect())
        }
        (Observations::Points(z), BoundedLoss::ClippedSquared { clip }, ParameterSet::Points(thetas)) => {
            if thetas.is_empty() {
                return Err(Error::Empty("parameter set"));
            }
            thetas
                .iter()
                .map(|t| {
                    let mut acc = 0.0;
                    for obs in z {
                        if obs.len() != t.len() {
                            return Err(Error::LengthMismatch(obs.len(), t.len()));
                        }
                        let sq: f64 = obs.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                        acc += sq.min(*clip);
                    }
                    Ok(acc / n)
                })
                .collect()
        }
        _ => Err(Error::domain("sample/loss/parameter-set kind mismatch")),
    }
}

/// Empirical risk of the clipped squared loss at a single point.
pub fn empirical_risk_at_point(sample: &TaskSample, clip: f64, theta: &[f64]) -> Result<f64> {
    let points = match &sample.observations {
        Observations::Points(z) => z,
        _ => return Err(Error::domain("expected continuous observations")),
    };
    let n = points.len() as f64;
    let mut acc = 0.0;
    for z in points {
        if z.len() != theta.len() {
            return Err(Error::LengthMismatch(z.len(), theta.len()));
        }
        let sq: f64 = z.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
        acc += sq.min(clip);
    }
    Ok(acc / n)
}

fn check_temperature(alpha: f64, n: usize) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    if n == 0 {
        return Err(Error::domain("n must be >= 1"));
    }
    Ok(())
}

/// Gibbs posterior on a finite set: log-weight proportional to
/// `log pi(theta) - alpha n risk(theta)`.
pub fn gibbs_discrete(
    prior_log_weights: &[f64],
    risks: &[f64],
    alpha: f64,
    n: usize,
) -> Result<DiscretePosterior> {
    check_temperature(alpha, n)?;
    if prior_log_weights.len() != risks.len() {
        return Err(Error::LengthMismatch(prior_log_weights.len(), risks.len()));
    }
    let an = alpha * n as f64;
    let lw: Vec<f64> = prior_log_weights
        .iter()
        .zip(risks)
        .map(|(&lp, &r)| lp - an * r)
        .collect();
    DiscretePosterior::from_log_weights(lw)
}

/// Free energy `E_rho[risk] + KL(rho || pi) / (alpha n)` with its exact
/// decomposition, or the infinite sentinel on a support violation.
pub fn free_energy(
    rho: &DiscretePosterior,
    prior_log_weights: &[f64],
    alpha: f64,
    n: usize,
    risks: &[f64],
) -> Result<FreeEnergy> {
    check_temperature(alpha, n)?;
    if prior_log_weights.len() != rho.len() {
        return Err(Error::LengthMismatch(prior_log_weights.len(), rho.len()));
    }
    if risks.len() != rho.len() {
        return Err(Error::LengthMismatch(risks.len(), rho.len()));
    }
    let mut risk_terms = Vec::with_capacity(rho.len());
    let mut kl_terms = Vec::with_capacity(rho.len());
    for ((&lw, &lp), &r) in rho.log_weights().iter().zip(prior_log_weights).zip(risks) {
        let p = lw.exp();
        if p == 0.0 {
            continue;
        }
        if lp == f64::NEG_INFINITY {
            return Ok(FreeEnergy::Infinite);
        }
        risk_terms.push(p * r);
        kl_terms.push(p * (lw - lp));
    }
    let risk_part = pairwise_sum(&risk_terms);
    let kl_part = (pairwise_sum(&kl_terms) / (alpha * n as f64)).max(0.0);
    Ok(FreeEnergy::Finite(FreeEnergyValue {
        value: risk_part + kl_part,
        risk_part,
        kl_part,
    }))
}

/// The minimum of the free energy over the full simplex:
/// `-(1/(alpha n)) log sum_theta pi(theta) exp(-alpha n risk(theta))`.
pub fn log_partition_free_energy(
    prior_log_weights: &[f64],
    risks: &[f64],
    alpha: f64,
    n: usize,
) -> Result<f64> {
    check_temperature(alpha, n)?;
    if prior_log_weights.len() != risks.len() {
        return Err(Error::LengthMismatch(prior_log_weights.len(), risks.len()));
    }
    let an = alpha * n as f64;
    let scaled: Vec<f64> = risks.iter().map(|&r| -an * r).collect();
    let log_z = log_sum_exp(prior_log_weights, &scaled)?;
    Ok(-log_z / an)
}

/// Best Dirac mass: one-hot at the argmin of
/// `risk(theta) + log(1/pi(theta)) / (alpha n)`, ties to the lowest index.
pub fn dirac_variational_posterior(
    prior_log_weights: &[f64],
    risks: &[f64],
    alpha: f64,
    n: usize,
) -> Result<DiscretePosterior> {
    check_temperature(alpha, n)?;
    if prior_log_weights.len() != risks.len() {
        return Err(Error::LengthMismatch(prior_log_weights.len(), risks.len()));
    }
    let an = alpha * n as f64;
    let mut best = None;
    for (j, (&lp, &r)) in prior_log_weights.iter().zip(risks).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let score = r - lp / an;
        match best {
            None => best = Some((j, score)),
            Some((_, s)) if score < s => best = Some((j, score)),
            _ => {}
        }
    }
    let (idx, _) = best.ok_or_else(|| Error::domain("prior has no support"))?;
    DiscretePosterior::one_hot(prior_log_weights.len(), idx)
}

/// Admissible within-task posterior families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariationalFamily {
    FullSimplex,
    DiracOnTheta,
    DiagGaussian,
}

/// Result of a variational fit.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalFit {
    pub posterior: DiagGaussian,
    pub objective: f64,
    /// True when the closed-form quadratic solution was provably optimal
    /// (clipping inactive) and no gradient steps were needed.
    pub closed_form: bool,
}

struct QuadData {
    z_mean: Vec<f64>,
    /// `(1/n) sum_i ||z_i - z_mean||^2`, the theta-independent part.
    scatter: f64,
}

fn quad_data(sample: &TaskSample) -> Result<QuadData> {
    let points = match &sample.observations {
        Observations::Points(z) => z,
        _ => return Err(Error::domain("variational fit needs continuous observations")),
    };
    let d = points[0].len();
    let n = points.len() as f64;
    let mut z_mean = vec![0.0; d];
    for z in points {
        for i in 0..d {
            z_mean[i] += z[i] / n;
        }
    }
    let scatter = points
        .iter()
        .map(|z| {
            z.iter()
                .zip(&z_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(QuadData { z_mean, scatter })
}

/// Closed-form minimizer of the unclipped quadratic objective:
/// `mu_i = (2 alpha n v_i z_mean_i + mu_prior_i) / (2 alpha n v_i + 1)`,
/// `var_i = v_i / (2 alpha n v_i + 1)` with `v_i` the prior variance.
fn quadratic_solution(prior: &DiagGaussian, z_mean: &[f64], an: f64) -> DiagGaussian {
    let d = prior.dim();
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for i in 0..d {
        let v = prior.var()[i];
        let denom = 2.0 * an * v + 1.0;
        mean.push((2.0 * an * v * z_mean[i] + prior.mean()[i]) / denom);
        var.push(v / denom);
    }
    DiagGaussian::new(mean, var).expect("positive variances")
}

fn kl_to_prior(q: &DiagGaussian, prior: &DiagGaussian) -> f64 {
    crate::divergences::kl_diag_gaussian(q, prior).expect("matched dims")
}

/// Does `q` provably never reach the clip boundary around the sample?
///
/// Cheap 10-sigma ball first; otherwise a chi-square tail bound on
/// `||theta - z||` with a union bound over the sample, at level 1e-10.
fn clipping_inactive(sample: &TaskSample, clip: f64, q: &DiagGaussian) -> bool {
    let points = match &sample.observations {
        Observations::Points(z) => z,
        _ => return false,
    };
    let d = q.dim();
    let sd_norm: f64 = q.var().iter().sum::<f64>().sqrt();
    let max_var = q.var().iter().fold(0.0f64, |a, &b| a.max(b));
    let per_point = 1e-10 / points.len() as f64;
    points.iter().all(|z| {
        let dist = z
            .iter()
            .zip(q.mean())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if (dist + 10.0 * sd_norm) * (dist + 10.0 * sd_norm) < clip {
            return true;
        }
        let slack = clip.sqrt() - dist;
        if slack <= 0.0 {
            return false;
        }
        match crate::numerics::chi_square_cdf(d, slack * slack / max_var) {
            Ok(cdf) => 1.0 - cdf < per_point,
            Err(_) => false,
        }
    })
}

/// Exact objective for the unclipped quadratic case.
fn exact_unclipped_objective(
    data: &QuadData,
    prior: &DiagGaussian,
    q: &DiagGaussian,
    an: f64,
) -> f64 {
    let risk: f64 = data
        .z_mean
        .iter()
        .zip(q.mean())
        .map(|(z, m)| (z - m) * (z - m))
        .sum::<f64>()
        + q.var().iter().sum::<f64>()
        + data.scatter;
    risk + kl_to_prior(q, prior) / an
}

/// Monte-Carlo objective with reparameterized draws `theta = mu + sd * eps`.
pub fn variational_objective_mc(
    sample: &TaskSample,
    clip: f64,
    prior: &DiagGaussian,
    alpha: f64,
    q: &DiagGaussian,
    eps: &[Vec<f64>],
) -> Result<f64> {
    let n = sample.len();
    check_temperature(alpha, n)?;
    let an = alpha * n as f64;
    let mut acc = 0.0;
    for e in eps {
        let theta: Vec<f64> = q
            .mean()
            .iter()
            .zip(q.var())
            .zip(e)
            .map(|((&m, &v), &x)| m + v.sqrt() * x)
            .collect();
        acc += empirical_risk_at_point(sample, clip, &theta)?;
    }
    Ok(acc / eps.len() as f64 + kl_to_prior(q, prior) / an)
}

/// Monte-Carlo gradient of the objective in `(mu, log var)`, sharing the
/// reparameterization draws with [`variational_objective_mc`].
pub fn variational_gradient_mc(
    sample: &TaskSample,
    clip: f64,
    prior: &DiagGaussian,
    alpha: f64,
    q: &DiagGaussian,
    eps: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let points = match &sample.observations {
        Observations::Points(z) => z,
        _ => return Err(Error::domain("variational fit needs continuous observations")),
    };
    let n = points.len() as f64;
    let an = alpha * n;
    let d = q.dim();
    let mut g_mean = vec![0.0; d];
    let mut g_logvar = vec![0.0; d];
    for e in eps {
        let theta: Vec<f64> = q
            .mean()
            .iter()
            .zip(q.var())
            .zip(e)
            .map(|((&m, &v), &x)| m + v.sqrt() * x)
            .collect();
        // grad of (1/n) sum_i min(clip, ||theta - z_i||^2)
        let mut g_theta = vec![0.0; d];
        for z in points {
            let sq: f64 = theta.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if sq < clip {
                for i in 0..d {
                    g_theta[i] += 2.0 * (theta[i] - z[i]) / n;
                }
            }
        }
        for i in 0..d {
            g_mean[i] += g_theta[i] / eps.len() as f64;
            g_logvar[i] += g_theta[i] * q.var()[i].sqrt() * e[i] / (2.0 * eps.len() as f64);
        }
    }
    for i in 0..d {
        g_mean[i] += (q.mean()[i] - prior.mean()[i]) / (prior.var()[i] * an);
        g_logvar[i] += 0.5 * (q.var()[i] / prior.var()[i] - 1.0) / an;
    }
    Ok((g_mean, g_logvar))
}

/// Approximate argmin over diagonal Gaussians of the within-task objective.
///
/// The closed-form quadratic solution initializes (and is returned outright
/// when clipping is provably inactive); otherwise gradient steps on
/// `(mu, log var)` with common random numbers refine it. An objective that
/// increases over three consecutive checkpoints is reported as an
/// optimization failure.
pub fn variational_gaussian_posterior(
    sample: &TaskSample,
    loss: &BoundedLoss,
    prior: &DiagGaussian,
    alpha: f64,
    budget: usize,
    stream: &RandomStream,
) -> Result<VariationalFit> {
    let clip = match loss {
        BoundedLoss::ClippedSquared { clip } => *clip,
        _ => return Err(Error::domain("variational fit requires the clipped squared loss")),
    };
    if budget == 0 {
        return Err(Error::domain("optimizer budget must be >= 1"));
    }
    let n = sample.len();
    check_temperature(alpha, n)?;
    let an = alpha * n as f64;
    let data = quad_data(sample)?;
    if data.z_mean.len() != prior.dim() {
        return Err(Error::LengthMismatch(data.z_mean.len(), prior.dim()));
    }

    let init = quadratic_solution(prior, &data.z_mean, an);
    if clipping_inactive(sample, clip, &init) {
        let objective = exact_unclipped_objective(&data, prior, &init, an);
        return Ok(VariationalFit {
            posterior: init,
            objective,
            closed_form: true,
        });
    }

    // Common random numbers for every objective/gradient evaluation.
    let d = prior.dim();
    let mut rng = stream.child("reparam").rng();
    let eps: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            (0..d)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect()
        })
        .collect();

    let mut mean = init.mean().to_vec();
    let mut logvar: Vec<f64> = init.var().iter().map(|v| v.ln()).collect();
    let mut q = init.clone();
    let mut best = q.clone();
    let mut best_obj = variational_objective_mc(sample, clip, prior, alpha, &q, &eps)?;
    let mut last_obj = best_obj;
    let mut rising = 0usize;
    let checkpoint = (budget / 10).max(1);
    let lr0 = 0.25 / (2.0 + 1.0 / (an * prior.var().iter().cloned().fold(f64::INFINITY, f64::min)));

    for step in 0..budget {
        let (g_mean, g_logvar) = variational_gradient_mc(sample, clip, prior, alpha, &q, &eps)?;
        let lr = lr0 / (1.0 + step as f64 / (budget as f64 / 4.0).max(1.0));
        for i in 0..d {
            mean[i] -= lr * g_mean[i];
            logvar[i] = (logvar[i] - lr * g_logvar[i]).clamp(-40.0, 40.0);
        }
        q = DiagGaussian::new(mean.clone(), logvar.iter().map(|l| l.exp()).collect())?;
        if (step + 1) % checkpoint == 0 || step + 1 == budget {
            let obj = variational_objective_mc(sample, clip, prior, alpha, &q, &eps)?;
            if obj < best_obj {
                best_obj = obj;
                best = q.clone();
            }
            if obj > last_obj + 1e-12 {
                rising += 1;
                if rising >= 3 {
                    return Err(Error::OptimizationFailure(format!(
                        "objective rose over 3 checkpoints (last {obj:.6})"
                    )));
                }
            } else {
                rising = 0;
            }
            last_obj = obj;
        }
    }
    Ok(VariationalFit {
        posterior: best,
        objective: best_obj,
        closed_form: false,
    })
}

/// Variational posterior under a Gaussian-mixture prior: fit each component
/// and charge `log(1/w_k)/(alpha n)` for selecting it, then keep the best
/// component (the exact solution of the mixture upper-bound objective).
pub fn variational_mixture_posterior(
    sample: &TaskSample,
    loss: &BoundedLoss,
    prior: &crate::divergences::GaussianMixture,
    alpha: f64,
    budget: usize,
    stream: &RandomStream,
) -> Result<(usize, VariationalFit)> {
    let n = sample.len();
    check_temperature(alpha, n)?;
    let an = alpha * n as f64;
    let mut best: Option<(usize, VariationalFit, f64)> = None;
    for (k, (&w, component)) in prior
        .weights()
        .probs()
        .iter()
        .zip(prior.components())
        .enumerate()
    {
        if w == 0.0 {
            continue;
        }
        let fit = variational_gaussian_posterior(
            sample,
            loss,
            component,
            alpha,
            budget,
            &stream.index("component", k as u64),
        )?;
        let score = fit.objective + (1.0 / w).ln() / an;
        match &best {
            None => best = Some((k, fit, score)),
            Some((_, _, s)) if score < *s => best = Some((k, fit, score)),
            _ => {}
        }
    }
    let (k, mut fit, score) = best.ok_or_else(|| Error::domain("mixture prior has no support"))?;
    fit.objective = score;
    Ok((k, fit))
}
