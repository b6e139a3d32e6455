//! Hyper-posteriors over priors.
//!
//! Finite prior families get the exact Gibbs-on-priors update (softmax of
//! the accumulated within-task free energies against the reference measure).
//! The subset family enumerates every nonempty subset of a finite parameter
//! set with reference mass `2^(M-m) / ((2^M - 1) C(M, m))` for `|A| = m`.
//! Gaussian and Dirichlet-mixture hyper-posteriors are fitted with the
//! closed forms for `sigma^2`, `b` and `xi^2` (each the argmin of an
//! explicit scalar objective, kept public for the grid-search oracles) and
//! an optional common-random-number pattern-search refinement.

use crate::divergences::{
    CategoricalDist, DiagGaussian, DirichletDist, GammaDist, GaussianMixture, HyperBlocks,
};
use crate::environments::{BoundedLoss, Observations, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::pairwise_sum;
use crate::rng::RandomStream;
use crate::within_task;
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// A prior a within-task learner can run with.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    /// Log-weights over a finite parameter set.
    Discrete { log_weights: Vec<f64> },
    Gaussian(DiagGaussian),
    Mixture(GaussianMixture),
}

/// An explicit list of priors with a reference distribution over them.
#[derive(Clone, Debug, PartialEq)]
pub struct FinitePriorFamily {
    priors: Vec<PriorSpec>,
    log_lambda: Vec<f64>,
}

impl FinitePriorFamily {
    pub fn new(priors: Vec<PriorSpec>, lambda: &CategoricalDist) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Empty("FinitePriorFamily"));
        }
        if priors.len() != lambda.len() {
            return Err(Error::LengthMismatch(priors.len(), lambda.len()));
        }
        Ok(Self {
            priors,
            log_lambda: lambda
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .collect(),
        })
    }

    pub fn uniform_reference(priors: Vec<PriorSpec>) -> Result<Self> {
        let lambda = CategoricalDist::uniform(priors.len())?;
        Self::new(priors, &lambda)
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn priors(&self) -> &[PriorSpec] {
        &self.priors
    }

    pub fn log_lambda(&self) -> &[f64] {
        &self.log_lambda
    }
}

/// Every nonempty subset `A` of `{0..M-1}` as a uniform prior on `A`, with
/// reference mass `2^(M-m) / ((2^M - 1) C(M, m))` for `m = |A|`.
///
/// Subsets are indexed by `mask - 1` for bitmasks `1..2^M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPriorFamily {
    labels: usize,
    log_lambda: Vec<f64>,
}

/// Enumeration cap: `2^20 - 1` subsets is the largest family we enumerate.
pub const SUBSET_FAMILY_MAX_LABELS: usize = 20;

/// Build the subset family over `M` labels.
pub fn subset_family(labels: usize) -> Result<SubsetPriorFamily> {
    if labels == 0 || labels > SUBSET_FAMILY_MAX_LABELS {
        return Err(Error::domain(format!(
            "subset family supports 1..={SUBSET_FAMILY_MAX_LABELS} labels, got {labels}"
        )));
    }
    let count = (1usize << labels) - 1;
    let denom_all = ((1u128 << labels) - 1) as f64;
    let mut log_lambda = Vec::with_capacity(count);
    for mask in 1..=count {
        let m = (mask as u32).count_ones() as usize;
        let lam = (binomial(labels, m) as f64).ln() + denom_all.ln()
            - ((labels - m) as f64) * 2f64.ln();
        log_lambda.push(-lam);
    }
    Ok(SubsetPriorFamily { labels, log_lambda })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut num: u128 = 1;
    for i in 0..k {
        num = num * (n - i) as u128 / (i + 1) as u128;
    }
    num
}

impl SubsetPriorFamily {
    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.log_lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn log_lambda(&self) -> &[f64] {
        &self.log_lambda
    }

    /// Reference mass of one subset as an exact rational
    /// `(2^(M-m), (2^M - 1) * C(M, m))`.
    pub fn mass_exact(&self, mask: usize) -> Result<(u128, u128)> {
        if mask == 0 || mask > self.len() {
            return Err(Error::domain(format!("mask {mask} out of range")));
        }
        let m = (mask as u32).count_ones() as usize;
        let num = 1u128 << (self.labels - m);
        let den = ((1u128 << self.labels) - 1) * binomial(self.labels, m);
        Ok((num, den))
    }

    /// Cardinality marginal `P(|A| = m)` as the exact rational
    /// `(2^(M-m), 2^M - 1)`.
    pub fn cardinality_marginal_exact(&self, m: usize) -> Result<(u128, u128)> {
        if m == 0 || m > self.labels {
            return Err(Error::domain(format!("cardinality {m} out of range")));
        }
        Ok((1u128 << (self.labels - m), (1u128 << self.labels) - 1))
    }

    /// Uniform log-weights of the prior attached to `mask`.
    pub fn prior_log_weights(&self, mask: usize) -> Vec<f64> {
        let m = (mask as u32).count_ones() as f64;
        (0..self.labels)
            .map(|j| {
                if mask >> j & 1 == 1 {
                    -(m.ln())
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Materialize as an explicit family (small `M` only).
    pub fn to_finite_family(&self) -> Result<FinitePriorFamily> {
        let priors = (1..=self.len())
            .map(|mask| PriorSpec::Discrete {
                log_weights: self.prior_log_weights(mask),
            })
            .collect();
        let lambda = CategoricalDist::new(self.log_lambda.iter().map(|l| l.exp()).collect())?;
        FinitePriorFamily::new(priors, &lambda)
    }
}

/// Reusable scratch for subset-sum sweeps over all `2^M - 1` nonempty
/// subsets; the experiment loops hit this once per task.
pub struct SubsetSweep {
    labels: usize,
    sums: Vec<f64>,
    aux: Vec<f64>,
}

impl SubsetSweep {
    pub fn new(labels: usize) -> Result<Self> {
        if labels == 0 || labels > SUBSET_FAMILY_MAX_LABELS {
            return Err(Error::domain(format!(
                "subset sweep supports 1..={SUBSET_FAMILY_MAX_LABELS} labels, got {labels}"
            )));
        }
        let full = 1usize << labels;
        Ok(Self {
            labels,
            sums: vec![0.0; full],
            aux: vec![0.0; full],
        })
    }

    pub fn subsets(&self) -> usize {
        (1usize << self.labels) - 1
    }

    fn check(&self, risks: &[f64], alpha: f64, n: usize, acc: &[f64]) -> Result<()> {
        if risks.len() != self.labels {
            return Err(Error::LengthMismatch(risks.len(), self.labels));
        }
        if acc.len() != self.subsets() {
            return Err(Error::LengthMismatch(acc.len(), self.subsets()));
        }
        if !(alpha > 0.0) || n == 0 {
            return Err(Error::domain("need alpha > 0 and n >= 1"));
        }
        Ok(())
    }

    /// Add the Gibbs free energy of every subset prior to `acc`:
    /// `F(A) = min_r + (log|A| - log S[A]) / (alpha n)` with
    /// `S[A] = sum_{theta in A} exp(-alpha n (risk - min))`.
    pub fn add_gibbs_free_energies(
        &mut self,
        risks: &[f64],
        alpha: f64,
        n: usize,
        acc: &mut [f64],
    ) -> Result<()> {
        self.check(risks, alpha, n, acc)?;
        let an = alpha * n as f64;
        let min = risks.iter().cloned().fold(f64::INFINITY, f64::min);
        let full = 1usize << self.labels;
        self.sums[0] = 0.0;
        for mask in 1..full {
            let low = mask.trailing_zeros() as usize;
            self.sums[mask] = self.sums[mask & (mask - 1)] + (-an * (risks[low] - min)).exp();
        }
        for mask in 1..full {
            let m = (mask as u32).count_ones() as f64;
            acc[mask - 1] += min + (m.ln() - self.sums[mask].ln()) / an;
        }
        Ok(())
    }

    /// Add the best-Dirac free energy of every subset prior to `acc`:
    /// `F(A) = min_{theta in A} risk(theta) + log|A| / (alpha n)`.
    pub fn add_dirac_free_energies(
        &mut self,
        risks: &[f64],
        alpha: f64,
        n: usize,
        acc: &mut [f64],
    ) -> Result<()> {
        self.check(risks, alpha, n, acc)?;
        let an = alpha * n as f64;
        let full = 1usize << self.labels;
        self.sums[0] = f64::INFINITY;
        for mask in 1..full {
            let low = mask.trailing_zeros() as usize;
            self.sums[mask] = self.sums[mask & (mask - 1)].min(risks[low]);
        }
        for mask in 1..full {
            let m = (mask as u32).count_ones() as f64;
            acc[mask - 1] += self.sums[mask] + m.ln() / an;
        }
        Ok(())
    }

    /// True excess of the within-task Gibbs posterior of every subset prior,
    /// written into `out`: posterior weights from `empirical_risks`, risk
    /// reported under `true_risks`, minus `optimal_risk`.
    pub fn posterior_true_excess(
        &mut self,
        empirical_risks: &[f64],
        true_risks: &[f64],
        optimal_risk: f64,
        alpha: f64,
        n: usize,
        out: &mut [f64],
    ) -> Result<()> {
        self.check(empirical_risks, alpha, n, out)?;
        if true_risks.len() != self.labels {
            return Err(Error::LengthMismatch(true_risks.len(), self.labels));
        }
        let an = alpha * n as f64;
        let min = empirical_risks.iter().cloned().fold(f64::INFINITY, f64::min);
        let full = 1usize << self.labels;
        self.sums[0] = 0.0;
        self.aux[0] = 0.0;
        for mask in 1..full {
            let prev = mask & (mask - 1);
            let low = mask.trailing_zeros() as usize;
            let w = (-an * (empirical_risks[low] - min)).exp();
            self.sums[mask] = self.sums[prev] + w;
            self.aux[mask] = self.aux[prev] + w * true_risks[low];
        }
        for mask in 1..full {
            out[mask - 1] = self.aux[mask] / self.sums[mask] - optimal_risk;
        }
        Ok(())
    }
}

/// Accumulates `sum_t F_t(A)` over tasks for every nonempty subset prior,
/// deferring logarithms by keeping running products of the per-task
/// partition sums (flushed before they can leave the `f64` range).
pub struct SubsetGibbsAccumulator {
    labels: usize,
    alpha: f64,
    n: usize,
    tasks: usize,
    min_sum: f64,
    scratch: Vec<f64>,
    log_sum: Vec<f64>,
    prod: Vec<f64>,
    pending: usize,
    chunk: usize,
}

impl SubsetGibbsAccumulator {
    pub fn new(labels: usize, alpha: f64, n: usize) -> Result<Self> {
        if labels == 0 || labels > SUBSET_FAMILY_MAX_LABELS {
            return Err(Error::domain(format!(
                "subset accumulator supports 1..={SUBSET_FAMILY_MAX_LABELS} labels, got {labels}"
            )));
        }
        if !(alpha > 0.0) || n == 0 {
            return Err(Error::domain("need alpha > 0 and n >= 1"));
        }
        let full = 1usize << labels;
        // |log S| per task is at most max(alpha n loss-range, log M); stay
        // well inside the f64 exponent range between flushes.
        let per_task = (alpha * n as f64).max((labels as f64).ln()) + 1.0;
        let chunk = ((600.0 / per_task).floor() as usize).clamp(1, 512);
        Ok(Self {
            labels,
            alpha,
            n,
            tasks: 0,
            min_sum: 0.0,
            scratch: vec![0.0; full],
            log_sum: vec![0.0; full],
            prod: vec![1.0; full],
            pending: 0,
            chunk,
        })
    }

    pub fn add_task(&mut self, risks: &[f64]) -> Result<()> {
        if risks.len() != self.labels {
            return Err(Error::LengthMismatch(risks.len(), self.labels));
        }
        let an = self.alpha * self.n as f64;
        let min = risks.iter().cloned().fold(f64::INFINITY, f64::min);
        let full = 1usize << self.labels;
        self.scratch[0] = 0.0;
        for mask in 1..full {
            let low = mask.trailing_zeros() as usize;
            self.scratch[mask] =
                self.scratch[mask & (mask - 1)] + (-an * (risks[low] - min)).exp();
        }
        for mask in 1..full {
            self.prod[mask] *= self.scratch[mask];
        }
        self.min_sum += min;
        self.tasks += 1;
        self.pending += 1;
        if self.pending >= self.chunk {
            self.flush();
        }
        Ok(())
    }

    fn flush(&mut self) {
        if self.pending == 0 {
            return;
        }
        let full = 1usize << self.labels;
        for mask in 1..full {
            self.log_sum[mask] += self.prod[mask].ln();
            self.prod[mask] = 1.0;
        }
        self.pending = 0;
    }

    /// `acc[mask-1] = sum_t F_t(A)` for every nonempty subset.
    pub fn free_energy_totals(&mut self) -> Vec<f64> {
        self.flush();
        let an = self.alpha * self.n as f64;
        let t = self.tasks as f64;
        let full = 1usize << self.labels;
        let card_ln: Vec<f64> = (0..=self.labels).map(|m| (m.max(1) as f64).ln()).collect();
        (1..full)
            .map(|mask| {
                let m = (mask as u32).count_ones() as usize;
                self.min_sum + (t * card_ln[m] - self.log_sum[mask]) / an
            })
            .collect()
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }
}

/// Within-task free energies of every subset prior in one subset-sum sweep;
/// see [`SubsetSweep::add_gibbs_free_energies`].
pub fn subset_free_energies(risks: &[f64], alpha: f64, n: usize) -> Result<Vec<f64>> {
    let mut sweep = SubsetSweep::new(risks.len())?;
    let mut acc = vec![0.0; sweep.subsets()];
    sweep.add_gibbs_free_energies(risks, alpha, n, &mut acc)?;
    Ok(acc)
}

/// Best-Dirac free energies of every subset prior; see
/// [`SubsetSweep::add_dirac_free_energies`].
pub fn subset_dirac_free_energies(risks: &[f64], alpha: f64, n: usize) -> Result<Vec<f64>> {
    let mut sweep = SubsetSweep::new(risks.len())?;
    let mut acc = vec![0.0; sweep.subsets()];
    sweep.add_dirac_free_energies(risks, alpha, n, &mut acc)?;
    Ok(acc)
}

/// True excess risk of the within-task Gibbs posterior of every subset
/// prior; see [`SubsetSweep::posterior_true_excess`].
pub fn subset_posterior_true_excess(
    empirical_risks: &[f64],
    true_risks: &[f64],
    optimal_risk: f64,
    alpha: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let mut sweep = SubsetSweep::new(empirical_risks.len())?;
    let mut out = vec![0.0; sweep.subsets()];
    sweep.posterior_true_excess(empirical_risks, true_risks, optimal_risk, alpha, n, &mut out)?;
    Ok(out)
}

/// `matrix[t][j]`: the within-task free energy of prior `j` on task `t`.
pub fn meta_empirical_risk_matrix(
    samples: &[TaskSample],
    family: &FinitePriorFamily,
    loss: &BoundedLoss,
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::Empty("meta_empirical_risk_matrix"));
    }
    samples
        .par_iter()
        .map(|sample| {
            let m = match family.priors().first() {
                Some(PriorSpec::Discrete { log_weights }) => log_weights.len(),
                _ => {
                    return Err(Error::Unsupported(
                        "free-energy matrix needs discrete priors over a finite set".to_owned(),
                    ))
                }
            };
            let risks =
                within_task::empirical_risks(sample, loss, &within_task::ParameterSet::Labels(m))?;
            family
                .priors()
                .iter()
                .map(|prior| match prior {
                    PriorSpec::Discrete { log_weights } => within_task::log_partition_free_energy(
                        log_weights,
                        &risks,
                        alpha,
                        sample.len(),
                    ),
                    _ => Err(Error::Unsupported(
                        "free-energy matrix needs discrete priors over a finite set".to_owned(),
                    )),
                })
                .collect()
        })
        .collect()
}

/// Gibbs distribution on priors: weight `j` proportional to
/// `Lambda_j exp(-beta sum_t matrix[t][j])`.
pub fn meta_gibbs_finite(
    matrix: &[Vec<f64>],
    log_lambda: &[f64],
    beta: f64,
) -> Result<CategoricalDist> {
    if matrix.is_empty() {
        return Err(Error::Empty("meta_gibbs_finite"));
    }
    if !(beta > 0.0) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    let m = log_lambda.len();
    let mut scores = vec![0.0f64; m];
    for row in matrix {
        if row.len() != m {
            return Err(Error::LengthMismatch(row.len(), m));
        }
        for (s, &v) in scores.iter_mut().zip(row) {
            *s += v;
        }
    }
    let lw: Vec<f64> = log_lambda
        .iter()
        .zip(&scores)
        .map(|(&ll, &s)| ll - beta * s)
        .collect();
    let posterior = within_task::DiscretePosterior::from_log_weights(lw)?;
    CategoricalDist::new(posterior.probs())
}

/// The empirical meta objective
/// `(1/T) sum_t (E_Pi[matrix[t][.]] - r*_t) + KL(Pi || Lambda) / (beta T)`;
/// `+inf` when `Pi` leaves the reference support.
pub fn empirical_meta_objective(
    weights: &CategoricalDist,
    matrix: &[Vec<f64>],
    log_lambda: &[f64],
    beta: f64,
    theta_star_risks: &[f64],
) -> Result<f64> {
    if matrix.is_empty() {
        return Err(Error::Empty("empirical_meta_objective"));
    }
    if matrix.len() != theta_star_risks.len() {
        return Err(Error::LengthMismatch(matrix.len(), theta_star_risks.len()));
    }
    if weights.len() != log_lambda.len() {
        return Err(Error::LengthMismatch(weights.len(), log_lambda.len()));
    }
    let t = matrix.len() as f64;
    let mut data_terms = Vec::with_capacity(matrix.len());
    for (row, &r_star) in matrix.iter().zip(theta_star_risks) {
        if row.len() != weights.len() {
            return Err(Error::LengthMismatch(row.len(), weights.len()));
        }
        let mean: f64 = row.iter().zip(weights.probs()).map(|(&v, &w)| w * v).sum();
        data_terms.push(mean - r_star);
    }
    let mut kl = 0.0;
    for (&w, &ll) in weights.probs().iter().zip(log_lambda) {
        if w == 0.0 {
            continue;
        }
        if ll == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        kl += w * (w.ln() - ll);
    }
    Ok(pairwise_sum(&data_terms) / t + kl.max(0.0) / (beta * t))
}

/// Reference hyper-prior parameters `(xi_bar^2_k, a_bar, b_bar_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperReference {
    pub xi_bar_sq: Vec<f64>,
    pub a_bar: f64,
    pub b_bar: Vec<f64>,
}

impl HyperReference {
    pub fn new(xi_bar_sq: Vec<f64>, a_bar: f64, b_bar: Vec<f64>) -> Result<Self> {
        if xi_bar_sq.is_empty() || xi_bar_sq.len() != b_bar.len() {
            return Err(Error::domain("reference blocks must be nonempty and matched"));
        }
        if xi_bar_sq.iter().chain(&b_bar).any(|&v| !(v > 0.0)) || !(a_bar > 0.0) {
            return Err(Error::domain("reference parameters must be positive"));
        }
        Ok(Self {
            xi_bar_sq,
            a_bar,
            b_bar,
        })
    }

    /// One scalar parameter set broadcast over `k` components.
    pub fn broadcast(xi_bar_sq: f64, a_bar: f64, b_bar: f64, k: usize) -> Result<Self> {
        Self::new(vec![xi_bar_sq; k], a_bar, vec![b_bar; k])
    }

    pub fn k(&self) -> usize {
        self.xi_bar_sq.len()
    }
}

/// Normal x Gamma hyper-posterior: per component `k`, means
/// `N(tau_k, xi_k^2 I_d)` and variance `Gamma(a_k, b_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGammaHyper {
    pub tau: Vec<Vec<f64>>,
    pub xi_sq: Vec<f64>,
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
}

impl GaussianGammaHyper {
    pub fn new(
        tau: Vec<Vec<f64>>,
        xi_sq: Vec<f64>,
        shape: Vec<f64>,
        rate: Vec<f64>,
    ) -> Result<Self> {
        let k = tau.len();
        if k == 0 {
            return Err(Error::Empty("GaussianGammaHyper"));
        }
        if xi_sq.len() != k || shape.len() != k || rate.len() != k {
            return Err(Error::domain("hyper blocks must agree on K"));
        }
        let d = tau[0].len();
        if d == 0 || tau.iter().any(|t| t.len() != d) {
            return Err(Error::domain("hyper means must share one dimension"));
        }
        if xi_sq.iter().chain(&shape).chain(&rate).any(|&v| !(v > 0.0)) {
            return Err(Error::domain("hyper scale/shape/rate must be positive"));
        }
        Ok(Self {
            tau,
            xi_sq,
            shape,
            rate,
        })
    }

    pub fn k(&self) -> usize {
        self.tau.len()
    }

    pub fn dim(&self) -> usize {
        self.tau[0].len()
    }

    fn blocks(&self) -> Result<(Vec<DiagGaussian>, Vec<GammaDist>)> {
        let normals = self
            .tau
            .iter()
            .zip(&self.xi_sq)
            .map(|(t, &x)| DiagGaussian::isotropic(t.clone(), x))
            .collect::<Result<Vec<_>>>()?;
        let gammas = self
            .shape
            .iter()
            .zip(&self.rate)
            .map(|(&a, &b)| GammaDist::new(a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok((normals, gammas))
    }

    /// KL to the reference `q_{0, xi_bar^2, a_bar, b_bar}`.
    pub fn kl_to_reference(&self, reference: &HyperReference) -> Result<f64> {
        if reference.k() != self.k() {
            return Err(Error::LengthMismatch(reference.k(), self.k()));
        }
        let (normals, gammas) = self.blocks()?;
        let ref_normals = reference
            .xi_bar_sq
            .iter()
            .map(|&x| DiagGaussian::isotropic(vec![0.0; self.dim()], x))
            .collect::<Result<Vec<_>>>()?;
        let ref_gammas = reference
            .b_bar
            .iter()
            .map(|&b| GammaDist::new(reference.a_bar, b))
            .collect::<Result<Vec<_>>>()?;
        crate::divergences::kl_hyper_gaussian_gamma(
            &HyperBlocks {
                normals,
                gammas,
                dirichlet: None,
                k_distribution: None,
            },
            &HyperBlocks {
                normals: ref_normals,
                gammas: ref_gammas,
                dirichlet: None,
                k_distribution: None,
            },
        )?
        .expect_finite("hyper KL")
    }
}

/// Dirichlet-mixture hyper-posterior, optionally with a distribution over
/// the component count (supported on the stored K only).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureHyper {
    pub delta: Vec<f64>,
    pub base: GaussianGammaHyper,
    pub k_distribution: Option<CategoricalDist>,
}

impl MixtureHyper {
    pub fn new(
        delta: Vec<f64>,
        base: GaussianGammaHyper,
        k_distribution: Option<CategoricalDist>,
    ) -> Result<Self> {
        if delta.len() != base.k() {
            return Err(Error::LengthMismatch(delta.len(), base.k()));
        }
        if delta.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::domain("Dirichlet parameters must be positive"));
        }
        if let Some(kd) = &k_distribution {
            let k = base.k();
            for (i, &p) in kd.probs().iter().enumerate() {
                if p > 0.0 && i + 1 != k {
                    return Err(Error::domain(
                        "K-distribution must be supported on the stored component count",
                    ));
                }
            }
        }
        Ok(Self {
            delta,
            base,
            k_distribution,
        })
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    /// KL to `Lambda = q_{(1/T)1_T, 1_K, 0, xi_bar^2, b_bar}`; the
    /// multinomial block contributes only when a K-distribution is present.
    pub fn kl_to_reference(&self, reference: &HyperReference) -> Result<f64> {
        let mut acc = self.base.kl_to_reference(reference)?;
        acc += crate::divergences::kl_dirichlet_vs_flat(&DirichletDist::new(self.delta.clone())?)?;
        if let Some(kd) = &self.k_distribution {
            acc += crate::divergences::kl_multinomial_vs_uniform(kd)?;
        }
        Ok(acc)
    }
}

/// A fitted or constructed distribution over priors.
#[derive(Clone, Debug, PartialEq)]
pub enum HyperPosterior {
    Finite {
        priors: Vec<PriorSpec>,
        weights: CategoricalDist,
    },
    Subset {
        family: SubsetPriorFamily,
        weights: CategoricalDist,
    },
    GaussianGamma(GaussianGammaHyper),
    Mixture(MixtureHyper),
}

/// Draw one prior from the hyper-posterior.
pub fn sample_prior(posterior: &HyperPosterior, stream: &RandomStream) -> Result<PriorSpec> {
    let mut rng = stream.rng();
    match posterior {
        HyperPosterior::Finite { priors, weights } => {
            let idx = weights.sample_index(&mut rng);
            Ok(priors[idx].clone())
        }
        HyperPosterior::Subset { family, weights } => {
            let idx = weights.sample_index(&mut rng);
            Ok(PriorSpec::Discrete {
                log_weights: family.prior_log_weights(idx + 1),
            })
        }
        HyperPosterior::GaussianGamma(h) => {
            if h.k() != 1 {
                return Err(Error::domain(
                    "a bare Normal x Gamma hyper must have one component",
                ));
            }
            let (normals, gammas) = h.blocks()?;
            let mean = normals[0].sample(&mut rng);
            let var = gammas[0].sample(&mut rng);
            Ok(PriorSpec::Gaussian(DiagGaussian::isotropic(mean, var)?))
        }
        HyperPosterior::Mixture(h) => {
            if let Some(kd) = &h.k_distribution {
                let drawn = kd.sample_index(&mut rng) + 1;
                if drawn != h.k() {
                    return Err(Error::domain("drawn K outside the stored component count"));
                }
            }
            let weights = DirichletDist::new(h.delta.clone())?.sample(&mut rng);
            let (normals, gammas) = h.base.blocks()?;
            let mut components = Vec::with_capacity(h.k());
            for (n, g) in normals.iter().zip(&gammas) {
                let mean = n.sample(&mut rng);
                let var = g.sample(&mut rng);
                components.push(DiagGaussian::isotropic(mean, var)?);
            }
            Ok(PriorSpec::Mixture(GaussianMixture::new(
                CategoricalDist::new(weights)?,
                components,
            )?))
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-form scalar optimizers and their objectives.
// ---------------------------------------------------------------------------

/// Per-coordinate within-task variance objective
/// `L s + (s/v - 1 + log(v/s)) / (2 alpha n)` for prior variance `v`.
pub fn sigma_sq_objective(sigma_sq: f64, prior_var: f64, alpha: f64, n: f64, l: f64) -> f64 {
    l * sigma_sq + (sigma_sq / prior_var - 1.0 + (prior_var / sigma_sq).ln()) / (2.0 * alpha * n)
}

/// Argmin of [`sigma_sq_objective`]: `v / (2 alpha L n v + 1)`.
pub fn optimal_sigma_sq(prior_var: f64, alpha: f64, n: f64, l: f64) -> f64 {
    prior_var / (2.0 * alpha * l * n * prior_var + 1.0)
}

/// Rate objective `b eps / ((a-1) alpha n) + L a / b`.
pub fn b_objective(b: f64, epsilon: f64, a: f64, alpha: f64, n: f64, l: f64) -> f64 {
    b * epsilon / ((a - 1.0) * alpha * n) + l * a / b
}

/// Argmin of [`b_objective`]: `sqrt(alpha L a (a-1) n / eps)`; needs `a > 1`.
pub fn optimal_b(epsilon: f64, a: f64, alpha: f64, n: f64, l: f64) -> Result<f64> {
    if !(a > 1.0) {
        return Err(Error::domain(format!(
            "closed-form rate needs shape a > 1 (E[1/variance] = b/(a-1)), got {a}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::domain("epsilon must be positive"));
    }
    Ok((alpha * l * a * (a - 1.0) * n / epsilon).sqrt())
}

/// Hyper-variance objective
/// `b xi / (alpha n) + (xi/xb - 1 + log(xb/xi)) / (4 beta T)`.
pub fn xi_sq_objective(
    xi_sq: f64,
    xi_bar_sq: f64,
    b: f64,
    beta: f64,
    t: f64,
    alpha: f64,
    n: f64,
) -> f64 {
    b * xi_sq / (alpha * n)
        + (xi_sq / xi_bar_sq - 1.0 + (xi_bar_sq / xi_sq).ln()) / (4.0 * beta * t)
}

/// Argmin of [`xi_sq_objective`]: `xb / (1 + 4 b xb beta T / (alpha n))`.
pub fn optimal_xi_sq(xi_bar_sq: f64, b: f64, beta: f64, t: f64, alpha: f64, n: f64) -> f64 {
    xi_bar_sq / (1.0 + 4.0 * b * xi_bar_sq * beta * t / (alpha * n))
}

// ---------------------------------------------------------------------------
// Hyper-posterior fitting.
// ---------------------------------------------------------------------------

/// Rule for the concentration scale `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonRule {
    /// `sqrt(n) / T` (the default).
    SqrtNOverT,
    /// `n / T^2`.
    NOverTSquared,
    Fixed(f64),
}

impl EpsilonRule {
    pub fn value(&self, n: f64, t: f64) -> f64 {
        match self {
            EpsilonRule::SqrtNOverT => n.sqrt() / t,
            EpsilonRule::NOverTSquared => n / (t * t),
            EpsilonRule::Fixed(v) => *v,
        }
    }
}

/// Rule for the dispersion threshold that selects the favorable regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    /// `n / T` (the default).
    NOverT,
    /// `n / T^2`.
    NOverTSquared,
    Fixed(f64),
}

impl ThresholdRule {
    pub fn value(&self, n: f64, t: f64) -> f64 {
        match self {
            ThresholdRule::NOverT => n / t,
            ThresholdRule::NOverTSquared => n / (t * t),
            ThresholdRule::Fixed(v) => *v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    ClosedForm,
    Stochastic,
}

/// Configuration shared by the Gaussian and mixture hyper fits.
#[derive(Clone, Debug)]
pub struct HyperFitConfig {
    pub alpha: f64,
    pub beta: f64,
    pub smoothness_l: f64,
    pub reference: HyperReference,
    pub epsilon: EpsilonRule,
    pub threshold: ThresholdRule,
    pub mode: FitMode,
    /// Pattern-search iterations for the stochastic refinement.
    pub budget: usize,
    /// Prior draws per objective estimate in stochastic mode.
    pub objective_draws: usize,
}

impl HyperFitConfig {
    fn validate(&self, expected_k: usize) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::domain("alpha and beta must be positive"));
        }
        if self.reference.k() != expected_k {
            return Err(Error::LengthMismatch(self.reference.k(), expected_k));
        }
        Ok(())
    }
}

/// Result of fitting a hyper-posterior, with the regime bookkeeping.
#[derive(Clone, Debug)]
pub struct HyperFit<H> {
    pub hyper: H,
    pub favorable: bool,
    /// Plug-in dispersion estimate used for the regime split.
    pub dispersion_hat: f64,
    pub epsilon: f64,
    pub threshold: f64,
}

struct TaskSummaries {
    means: Vec<Vec<f64>>,
    dim: usize,
    n_mean: f64,
    /// Pooled per-coordinate observation-noise variance estimate.
    noise_var_hat: f64,
}

fn summarize_tasks(samples: &[TaskSample]) -> Result<TaskSummaries> {
    if samples.is_empty() {
        return Err(Error::Empty("hyper fit needs tasks"));
    }
    let mut means = Vec::with_capacity(samples.len());
    let mut n_total = 0usize;
    let mut noise_acc = 0.0;
    let mut noise_terms = 0usize;
    let mut dim = 0usize;
    for sample in samples {
        let points = match &sample.observations {
            Observations::Points(z) => z,
            _ => {
                return Err(Error::Unsupported(
                    "hyper fit needs continuous tasks".to_owned(),
                ))
            }
        };
        let n = points.len();
        let d = points[0].len();
        if dim == 0 {
            dim = d;
        } else if dim != d {
            return Err(Error::LengthMismatch(dim, d));
        }
        let mut mean = vec![0.0; d];
        for z in points {
            for i in 0..d {
                mean[i] += z[i] / n as f64;
            }
        }
        if n > 1 {
            let ss: f64 = points
                .iter()
                .map(|z| {
                    z.iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            noise_acc += ss / ((n - 1) as f64 * d as f64);
            noise_terms += 1;
        }
        n_total += n;
        means.push(mean);
    }
    Ok(TaskSummaries {
        means,
        dim,
        n_mean: n_total as f64 / samples.len() as f64,
        noise_var_hat: if noise_terms > 0 {
            noise_acc / noise_terms as f64
        } else {
            0.0
        },
    })
}

fn dispersion_around(means: &[Vec<f64>], centers: &[Vec<f64>], noise_correction: f64) -> f64 {
    let raw: f64 = means
        .iter()
        .map(|m| {
            centers
                .iter()
                .map(|c| {
                    m.iter()
                        .zip(c)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / means.len() as f64;
    (raw - noise_correction).max(0.0)
}

/// Fit the Normal x Gamma hyper-posterior for Gaussian priors (one
/// component).
///
/// Closed-form mode: `tau` solves the self-consistency equation
/// `tau = mean over tasks of the posterior mean under the prior centered at
/// tau` (whose fixed point is the average of the task empirical means),
/// `a = a_bar`, and in the favorable regime `xi^2 = eps` with
/// `b = sqrt(alpha L a (a-1) n / eps)`; in the unfavorable regime the
/// reference `xi_bar^2, b_bar` are kept.
pub fn fit_gaussian_hyperposterior(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    cfg: &HyperFitConfig,
    stream: &RandomStream,
) -> Result<HyperFit<GaussianGammaHyper>> {
    cfg.validate(1)?;
    let info = summarize_tasks(samples)?;
    let t = samples.len() as f64;
    let d = info.dim;

    let mut tau = vec![0.0; d];
    for m in &info.means {
        for i in 0..d {
            tau[i] += m[i] / t;
        }
    }
    let noise_correction = d as f64 * info.noise_var_hat / info.n_mean;
    let sigma_hat = dispersion_around(&info.means, std::slice::from_ref(&tau), noise_correction);
    let epsilon = cfg.epsilon.value(info.n_mean, t);
    let threshold = cfg.threshold.value(info.n_mean, t);
    let favorable = sigma_hat <= threshold;

    let (xi_sq, rate) = if favorable {
        (
            epsilon,
            optimal_b(
                epsilon,
                cfg.reference.a_bar,
                cfg.alpha,
                info.n_mean,
                cfg.smoothness_l,
            )?,
        )
    } else {
        (cfg.reference.xi_bar_sq[0], cfg.reference.b_bar[0])
    };
    let hyper =
        GaussianGammaHyper::new(vec![tau], vec![xi_sq], vec![cfg.reference.a_bar], vec![rate])?;

    let hyper = if cfg.mode == FitMode::Stochastic {
        refine_gaussian_hyper(samples, loss, hyper, cfg, stream)?
    } else {
        hyper
    };

    Ok(HyperFit {
        hyper,
        favorable,
        dispersion_hat: sigma_hat,
        epsilon,
        threshold,
    })
}

/// Estimated meta objective of a Normal x Gamma hyper on the given tasks,
/// with common random numbers supplied as `(eps, standard gamma)` base
/// draws.
pub fn gaussian_meta_objective_crn(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    hyper: &GaussianGammaHyper,
    cfg: &HyperFitConfig,
    base: &[(Vec<f64>, f64)],
) -> Result<f64> {
    let t = samples.len() as f64;
    let d = hyper.dim();
    let mut acc = 0.0;
    for (eps, gamma_std) in base {
        let mean: Vec<f64> = (0..d)
            .map(|i| hyper.tau[0][i] + hyper.xi_sq[0].sqrt() * eps[i])
            .collect();
        let var = gamma_std / hyper.rate[0];
        let prior = DiagGaussian::isotropic(mean, var)?;
        for sample in samples {
            let fit = within_task::variational_gaussian_posterior(
                sample,
                loss,
                &prior,
                cfg.alpha,
                1,
                &RandomStream::new(0),
            )?;
            acc += fit.objective;
        }
    }
    let data_part = acc / (base.len() as f64 * t);
    Ok(data_part + hyper.kl_to_reference(&cfg.reference)? / (cfg.beta * t))
}

/// Standard-Gamma CRN draws; rescaling by `1/rate` turns them into
/// `Gamma(shape, rate)` draws for any candidate rate.
pub fn gamma_std_draws(shape: f64, count: usize, stream: &RandomStream) -> Vec<f64> {
    let g = GammaDist::new(shape, 1.0).expect("valid shape");
    let mut rng = stream.rng();
    (0..count).map(|_| g.sample(&mut rng)).collect()
}

/// Standard-normal CRN draw matrix.
pub fn normal_draws(dim: usize, count: usize, stream: &RandomStream) -> Vec<Vec<f64>> {
    let mut rng = stream.rng();
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect()
        })
        .collect()
}

/// Pattern search on `(tau, log xi^2, log b)` accepting only improvements
/// of the CRN objective, so the result is never worse than the initializer.
fn refine_gaussian_hyper(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    init: GaussianGammaHyper,
    cfg: &HyperFitConfig,
    stream: &RandomStream,
) -> Result<GaussianGammaHyper> {
    let t = samples.len() as f64;
    if cfg.beta * t < 1e-9 {
        // Degenerate meta weight: the KL anchor dwarfs the data term and the
        // objective carries no usable signal. Keep the initializer.
        return Ok(init);
    }
    let d = init.dim();
    let draws = cfg.objective_draws.max(2);
    let base: Vec<(Vec<f64>, f64)> = normal_draws(d, draws, &stream.child("eps"))
        .into_iter()
        .zip(gamma_std_draws(init.shape[0], draws, &stream.child("gamma")))
        .collect();

    let mut current = init.clone();
    let mut best = gaussian_meta_objective_crn(samples, loss, &current, cfg, &base)?;
    let mut step = 0.5;
    for _ in 0..cfg.budget {
        let mut improved = false;
        for coord in 0..d + 2 {
            for sign in [1.0, -1.0] {
                let mut cand = current.clone();
                if coord < d {
                    cand.tau[0][coord] += sign * step * (1.0 + cand.tau[0][coord].abs());
                } else if coord == d {
                    cand.xi_sq[0] *= (sign * step).exp();
                } else {
                    cand.rate[0] *= (sign * step).exp();
                }
                let obj = gaussian_meta_objective_crn(samples, loss, &cand, cfg, &base)?;
                if obj < best - 1e-12 {
                    best = obj;
                    current = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    Ok(current)
}

/// Lloyd clustering with restarts; returns `k` centers.
fn k_means(points: &[Vec<f64>], k: usize, restarts: usize, stream: &RandomStream) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut best_centers: Vec<Vec<f64>> = Vec::new();
    let mut best_sse = f64::INFINITY;
    for restart in 0..restarts.max(1) {
        let mut rng = stream.index("restart", restart as u64).rng();
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(&mut rng);
        let mut centers: Vec<Vec<f64>> = idx.iter().take(k).map(|&i| points[i].clone()).collect();
        while centers.len() < k {
            centers.push(points[0].clone());
        }
        let mut assign = vec![0usize; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (p, a) in points.iter().zip(assign.iter_mut()) {
                let mut best_j = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in centers.iter().enumerate() {
                    let dist: f64 = p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                    if dist < best_d {
                        best_d = dist;
                        best_j = j;
                    }
                }
                if *a != best_j {
                    *a = best_j;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assign) {
                counts[a] += 1;
                for i in 0..d {
                    sums[a][i] += p[i];
                }
            }
            for j in 0..k {
                if counts[j] == 0 {
                    centers[j] = points[restart % points.len()].clone();
                } else {
                    for i in 0..d {
                        centers[j][i] = sums[j][i] / counts[j] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sse: f64 = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        if sse < best_sse {
            best_sse = sse;
            best_centers = centers;
        }
    }
    best_centers
}

/// Fit the Dirichlet-mixture hyper-posterior with `k` components:
/// `delta = 2 1_K`, centers from Lloyd clustering of the per-task posterior
/// means, `b_k = T` in the favorable regime (dispersion below the
/// threshold) and `b_k = 1` otherwise, and
/// `xi_k^2 = xi_bar_k^2 / (1 + 4 b_k xi_bar_k^2 beta T / (alpha n))`.
pub fn fit_mixture_hyperposterior(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    k: usize,
    cfg: &HyperFitConfig,
    stream: &RandomStream,
) -> Result<HyperFit<MixtureHyper>> {
    if k == 0 || k > samples.len() {
        return Err(Error::domain(format!(
            "component count must lie in [1, T={}], got {k}",
            samples.len()
        )));
    }
    cfg.validate(k)?;
    let info = summarize_tasks(samples)?;
    let t = samples.len() as f64;

    let centers = k_means(&info.means, k, 10, &stream.child("kmeans"));
    let noise_correction = info.dim as f64 * info.noise_var_hat / info.n_mean;
    let dispersion_hat = dispersion_around(&info.means, &centers, noise_correction);
    let epsilon = cfg.epsilon.value(info.n_mean, t);
    let threshold = cfg.threshold.value(info.n_mean, t);
    let favorable = dispersion_hat <= threshold;
    let b_k = if favorable { t } else { 1.0 };

    let rate = vec![b_k; k];
    let xi_sq: Vec<f64> = cfg
        .reference
        .xi_bar_sq
        .iter()
        .map(|&xb| optimal_xi_sq(xb, b_k, cfg.beta, t, cfg.alpha, info.n_mean))
        .collect();
    let base = GaussianGammaHyper::new(centers, xi_sq, vec![2.0; k], rate)?;
    let hyper = MixtureHyper::new(vec![2.0; k], base, None)?;

    let hyper = if cfg.mode == FitMode::Stochastic {
        refine_mixture_hyper(samples, loss, hyper, cfg, stream)?
    } else {
        hyper
    };

    Ok(HyperFit {
        hyper,
        favorable,
        dispersion_hat,
        epsilon,
        threshold,
    })
}

/// Estimated meta objective of a mixture hyper under common random numbers.
pub fn mixture_meta_objective_crn(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    hyper: &MixtureHyper,
    cfg: &HyperFitConfig,
    stream: &RandomStream,
    draws: usize,
) -> Result<f64> {
    let t = samples.len() as f64;
    let posterior = HyperPosterior::Mixture(hyper.clone());
    let mut acc = 0.0;
    for s in 0..draws.max(2) {
        let prior = sample_prior(&posterior, &stream.index("draw", s as u64))?;
        let mixture = match prior {
            PriorSpec::Mixture(m) => m,
            _ => unreachable!("mixture hyper samples mixture priors"),
        };
        for sample in samples {
            let (_, fit) = within_task::variational_mixture_posterior(
                sample,
                loss,
                &mixture,
                cfg.alpha,
                1,
                &RandomStream::new(0),
            )?;
            acc += fit.objective;
        }
    }
    let data_part = acc / (draws.max(2) as f64 * t);
    Ok(data_part + hyper.kl_to_reference(&cfg.reference)? / (cfg.beta * t))
}

fn refine_mixture_hyper(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    init: MixtureHyper,
    cfg: &HyperFitConfig,
    stream: &RandomStream,
) -> Result<MixtureHyper> {
    let t = samples.len() as f64;
    if cfg.beta * t < 1e-9 {
        return Ok(init);
    }
    let k = init.k();
    let d = init.base.dim();
    let draws = cfg.objective_draws.max(2);
    let crn = stream.child("crn");

    let mut current = init.clone();
    let mut best = mixture_meta_objective_crn(samples, loss, &current, cfg, &crn, draws)?;
    let mut step = 0.5;
    for _ in 0..cfg.budget {
        let mut improved = false;
        for block in 0..k {
            for coord in 0..d + 2 {
                for sign in [1.0, -1.0] {
                    let mut cand = current.clone();
                    if coord < d {
                        cand.base.tau[block][coord] +=
                            sign * step * (1.0 + cand.base.tau[block][coord].abs());
                    } else if coord == d {
                        cand.base.xi_sq[block] *= (sign * step).exp();
                    } else {
                        cand.base.rate[block] *= (sign * step).exp();
                    }
                    let obj = mixture_meta_objective_crn(samples, loss, &cand, cfg, &crn, draws)?;
                    if obj < best - 1e-12 {
                        best = obj;
                        current = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    Ok(current)
}

/// Result of the unknown-K fit: the selected count, its hyper (carrying a
/// Dirac K-distribution over the `T` admissible counts) and the per-K
/// penalized objectives.
pub struct UnknownKFit {
    pub selected_k: usize,
    pub fit: HyperFit<MixtureHyper>,
    pub objectives: Vec<(usize, f64)>,
}

/// Fit over a grid of component counts, charging the Dirac multinomial
/// penalty `log T / (2 beta T)` for selecting one count, and return the
/// argmin (ties to the smallest K).
pub fn fit_unknown_k_hyperposterior(
    samples: &[TaskSample],
    loss: &BoundedLoss,
    k_grid: &[usize],
    reference_scalar: (f64, f64, f64),
    cfg_template: &HyperFitConfig,
    stream: &RandomStream,
) -> Result<UnknownKFit> {
    if k_grid.is_empty() {
        return Err(Error::Empty("K grid"));
    }
    let t = samples.len() as f64;
    let mut grid: Vec<usize> = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let penalty = t.ln() / (2.0 * cfg_template.beta * t);
    let (xi_bar_sq, a_bar, b_bar) = reference_scalar;
    let mut best: Option<(usize, f64, HyperFit<MixtureHyper>)> = None;
    let mut objectives = Vec::with_capacity(grid.len());
    for &k in &grid {
        let mut cfg = cfg_template.clone();
        cfg.reference = HyperReference::broadcast(xi_bar_sq, a_bar, b_bar, k)?;
        let fit = fit_mixture_hyperposterior(samples, loss, k, &cfg, &stream.index("k", k as u64))?;
        let objective = mixture_meta_objective_crn(
            samples,
            loss,
            &fit.hyper,
            &cfg,
            &stream.index("objective", k as u64),
            cfg.objective_draws.max(4),
        )? + penalty;
        objectives.push((k, objective));
        let better = match &best {
            None => true,
            Some((_, obj, _)) => objective < *obj,
        };
        if better {
            best = Some((k, objective, fit));
        }
    }
    let (selected_k, _, mut fit) = best.expect("nonempty grid");
    let t_cells = samples.len();
    fit.hyper = MixtureHyper::new(
        fit.hyper.delta.clone(),
        fit.hyper.base.clone(),
        Some(CategoricalDist::dirac(t_cells, selected_k - 1)?),
    )?;
    Ok(UnknownKFit {
        selected_k,
        fit,
        objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{sample_dataset, sample_task, MetaEnvironment};
    use crate::numerics::MeanSe;
    use rand::Rng;

    fn stream() -> RandomStream {
        RandomStream::new(13).child("meta-level")
    }

    fn discrete_samples(t: usize, n: usize) -> Vec<TaskSample> {
        let env = MetaEnvironment::discrete(4, 2, 0.3).unwrap();
        (0..t)
            .map(|i| {
                let task = sample_task(&env, &stream().index("task", i as u64));
                sample_dataset(&task, n, &stream().index("data", i as u64)).unwrap()
            })
            .collect()
    }

    fn discrete_prior(weights: &[f64]) -> PriorSpec {
        PriorSpec::Discrete {
            log_weights: weights
                .iter()
                .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
                .collect(),
        }
    }

    #[test]
    fn matrix_identical_priors_give_identical_columns() {
        let samples = discrete_samples(3, 20);
        let p = discrete_prior(&[0.25; 4]);
        let family = FinitePriorFamily::uniform_reference(vec![p.clone(), p]).unwrap();
        let matrix =
            meta_empirical_risk_matrix(&samples, &family, &BoundedLoss::ZeroOneMismatch, 0.5)
                .unwrap();
        for row in &matrix {
            assert_eq!(row[0], row[1]);
        }
    }

    #[test]
    fn matrix_dirac_prior_entry_is_its_empirical_risk() {
        let samples = discrete_samples(1, 10);
        let family =
            FinitePriorFamily::uniform_reference(vec![discrete_prior(&[0.0, 1.0, 0.0, 0.0])])
                .unwrap();
        let matrix =
            meta_empirical_risk_matrix(&samples, &family, &BoundedLoss::ZeroOneMismatch, 0.7)
                .unwrap();
        let risks = within_task::empirical_risks(
            &samples[0],
            &BoundedLoss::ZeroOneMismatch,
            &within_task::ParameterSet::Labels(4),
        )
        .unwrap();
        assert!((matrix[0][0] - risks[1]).abs() < 1e-14);
    }

    #[test]
    fn matrix_entries_match_per_entry_recomputation() {
        let samples = discrete_samples(3, 25);
        let mut rng = stream().child("rand-fam").rng();
        let priors: Vec<PriorSpec> = (0..4)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                discrete_prior(&raw.iter().map(|w| w / total).collect::<Vec<_>>())
            })
            .collect();
        let family = FinitePriorFamily::uniform_reference(priors.clone()).unwrap();
        let matrix =
            meta_empirical_risk_matrix(&samples, &family, &BoundedLoss::ZeroOneMismatch, 1.1)
                .unwrap();
        for (t, sample) in samples.iter().enumerate() {
            let risks = within_task::empirical_risks(
                sample,
                &BoundedLoss::ZeroOneMismatch,
                &within_task::ParameterSet::Labels(4),
            )
            .unwrap();
            for (j, prior) in priors.iter().enumerate() {
                let lw = match prior {
                    PriorSpec::Discrete { log_weights } => log_weights,
                    _ => unreachable!(),
                };
                let expect =
                    within_task::log_partition_free_energy(lw, &risks, 1.1, sample.len()).unwrap();
                assert!((matrix[t][j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meta_gibbs_tiny_beta_returns_the_reference() {
        let matrix = vec![vec![0.3, 0.9], vec![0.5, 0.1]];
        let log_lambda = vec![0.7f64.ln(), 0.3f64.ln()];
        let posterior = meta_gibbs_finite(&matrix, &log_lambda, 1e-12).unwrap();
        assert!((posterior.probs()[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn meta_gibbs_softmax_of_column_sums() {
        let matrix = vec![vec![0.0, 0.25], vec![0.0, 0.35]];
        let log_lambda = vec![0.5f64.ln(), 0.5f64.ln()];
        let beta = 2.0;
        let posterior = meta_gibbs_finite(&matrix, &log_lambda, beta).unwrap();
        let s = 0.6;
        let expect0 = 1.0 / (1.0 + (-beta * s).exp());
        assert!((posterior.probs()[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn meta_gibbs_minimizes_the_empirical_meta_objective() {
        let mut rng = stream().child("objective").rng();
        for _ in 0..20 {
            let t = rng.random_range(1..5);
            let m = rng.random_range(2..5);
            let matrix: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let log_lambda = vec![-(m as f64).ln(); m];
            let r_star = vec![0.0; t];
            let beta = rng.random_range(0.1..3.0);
            let best = meta_gibbs_finite(&matrix, &log_lambda, beta).unwrap();
            let best_obj =
                empirical_meta_objective(&best, &matrix, &log_lambda, beta, &r_star).unwrap();
            for j in 0..m {
                let vertex = CategoricalDist::dirac(m, j).unwrap();
                let obj = empirical_meta_objective(&vertex, &matrix, &log_lambda, beta, &r_star)
                    .unwrap();
                assert!(obj >= best_obj - 1e-12);
            }
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let w = CategoricalDist::new(raw.iter().map(|x| x / total).collect()).unwrap();
                let obj =
                    empirical_meta_objective(&w, &matrix, &log_lambda, beta, &r_star).unwrap();
                assert!(obj >= best_obj - 1e-12);
            }
        }
    }

    #[test]
    fn objective_at_the_reference_has_zero_kl() {
        let matrix = vec![vec![0.4, 0.6]];
        let log_lambda = vec![0.5f64.ln(), 0.5f64.ln()];
        let lambda = CategoricalDist::uniform(2).unwrap();
        let got = empirical_meta_objective(&lambda, &matrix, &log_lambda, 1.0, &[0.1]).unwrap();
        assert!((got - (0.5 - 0.1)).abs() < 1e-14);
    }

    #[test]
    fn objective_single_prior_is_average_excess_free_energy() {
        let matrix = vec![vec![0.4], vec![0.8]];
        let log_lambda = vec![0.0];
        let lambda = CategoricalDist::uniform(1).unwrap();
        let got =
            empirical_meta_objective(&lambda, &matrix, &log_lambda, 2.0, &[0.1, 0.2]).unwrap();
        assert!((got - ((0.3 + 0.6) / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn subset_family_m1_is_a_single_certain_subset() {
        let fam = subset_family(1).unwrap();
        assert_eq!(fam.len(), 1);
        assert!((fam.log_lambda()[0]).abs() < 1e-14);
    }

    #[test]
    fn subset_family_m2_masses_are_thirds() {
        let fam = subset_family(2).unwrap();
        for mask in 1..=3usize {
            let (num, den) = fam.mass_exact(mask).unwrap();
            assert_eq!(den / num, 3);
            assert_eq!(den % num, 0);
            assert!((fam.log_lambda()[mask - 1] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_family_sums_to_one_and_marginals_are_exact() {
        for m in 1..=12usize {
            let fam = subset_family(m).unwrap();
            let total: f64 = fam.log_lambda().iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "M={m} total={total}");
            for card in 1..=m {
                let mask = (1usize << card) - 1;
                let (num, den) = fam.mass_exact(mask).unwrap();
                let count = binomial(m, card);
                let (mnum, mden) = fam.cardinality_marginal_exact(card).unwrap();
                // exact rational identity: count * num / den == mnum / mden
                assert_eq!(count * num * mden, mnum * den, "M={m} card={card}");
            }
        }
    }

    #[test]
    fn subset_family_rejects_out_of_cap() {
        assert!(subset_family(0).is_err());
        assert!(subset_family(21).is_err());
    }

    #[test]
    fn subset_free_energies_match_generic_log_partition() {
        let risks = [0.2, 0.7, 0.5];
        let (alpha, n) = (0.8, 25);
        let fe = subset_free_energies(&risks, alpha, n).unwrap();
        let fam = subset_family(3).unwrap();
        for mask in 1..8usize {
            let lw = fam.prior_log_weights(mask);
            let expect = within_task::log_partition_free_energy(&lw, &risks, alpha, n).unwrap();
            assert!((fe[mask - 1] - expect).abs() < 1e-12, "mask={mask}");
        }
    }

    #[test]
    fn subset_accumulator_matches_per_task_free_energy_sums() {
        let mut rng = stream().child("acc").rng();
        let labels = 6;
        let (alpha, n) = (0.8, 30);
        let mut acc = SubsetGibbsAccumulator::new(labels, alpha, n).unwrap();
        let mut expect = vec![0.0f64; (1 << labels) - 1];
        for _ in 0..37 {
            let risks: Vec<f64> = (0..labels).map(|_| rng.random_range(0.0..1.0)).collect();
            acc.add_task(&risks).unwrap();
            let fe = subset_free_energies(&risks, alpha, n).unwrap();
            for (e, f) in expect.iter_mut().zip(&fe) {
                *e += f;
            }
        }
        let got = acc.free_energy_totals();
        assert_eq!(acc.tasks(), 37);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-9 * e.abs().max(1.0), "g={g} e={e}");
        }
    }

    #[test]
    fn subset_dirac_free_energies_match_the_dirac_variational_op() {
        let risks = [0.4, 0.1, 0.9];
        let (alpha, n) = (0.6, 40);
        let fe = subset_dirac_free_energies(&risks, alpha, n).unwrap();
        let fam = subset_family(3).unwrap();
        for mask in 1..8usize {
            let lw = fam.prior_log_weights(mask);
            let dirac = within_task::dirac_variational_posterior(&lw, &risks, alpha, n).unwrap();
            let fe_direct = within_task::free_energy(&dirac, &lw, alpha, n, &risks)
                .unwrap()
                .finite()
                .unwrap()
                .value;
            assert!((fe[mask - 1] - fe_direct).abs() < 1e-12, "mask={mask}");
            // The restricted family cannot beat the full simplex, and the
            // gap is at most log|A| / (alpha n).
            let exact = within_task::log_partition_free_energy(&lw, &risks, alpha, n).unwrap();
            let card = (mask as u32).count_ones() as f64;
            assert!(fe[mask - 1] >= exact - 1e-12);
            assert!(fe[mask - 1] - exact <= card.ln() / (alpha * n as f64) + 1e-12);
        }
    }

    #[test]
    fn subset_excess_matches_direct_posterior_average() {
        let emp = [0.3, 0.1, 0.6];
        let truth = [0.35, 0.15, 0.55];
        let (alpha, n) = (1.2, 30);
        let excess = subset_posterior_true_excess(&emp, &truth, 0.15, alpha, n).unwrap();
        let fam = subset_family(3).unwrap();
        for mask in 1..8usize {
            let lw = fam.prior_log_weights(mask);
            let post = within_task::gibbs_discrete(&lw, &emp, alpha, n).unwrap();
            let expect = post.expectation(&truth).unwrap() - 0.15;
            assert!((excess[mask - 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_b_example() {
        let b = optimal_b(1.0, 2.0, 1.0, 100.0, 1.0).unwrap();
        assert!((b - 200f64.sqrt()).abs() < 1e-12);
        assert!(optimal_b(1.0, 1.0, 1.0, 100.0, 1.0).is_err());
    }

    #[test]
    fn closed_form_xi_example() {
        let xi = optimal_xi_sq(1.0, 1.0, 1.0, 100.0, 1.0, 100.0);
        assert!((xi - 0.2).abs() < 1e-12);
    }

    #[test]
    fn closed_forms_beat_grid_search() {
        let mut rng = stream().child("grids").rng();
        for _ in 0..25 {
            let v = rng.random_range(0.1..5.0);
            let alpha = rng.random_range(0.05..2.0);
            let n = rng.random_range(10.0..500.0);
            let l = rng.random_range(0.5..3.0);
            let star = optimal_sigma_sq(v, alpha, n, l);
            let best_obj = sigma_sq_objective(star, v, alpha, n, l);
            for i in 0..200 {
                let s = star * (10f64).powf(-2.0 + 4.0 * i as f64 / 199.0);
                assert!(sigma_sq_objective(s, v, alpha, n, l) >= best_obj - 1e-12);
            }

            let a = rng.random_range(1.2..5.0);
            let eps = rng.random_range(1e-4..2.0);
            let b_star = optimal_b(eps, a, alpha, n, l).unwrap();
            let best_obj = b_objective(b_star, eps, a, alpha, n, l);
            for i in 0..200 {
                let b = b_star * (10f64).powf(-2.0 + 4.0 * i as f64 / 199.0);
                assert!(b_objective(b, eps, a, alpha, n, l) >= best_obj - 1e-12);
            }

            let xb = rng.random_range(0.1..4.0);
            let bb = rng.random_range(0.2..50.0);
            let beta = rng.random_range(0.01..2.0);
            let t = rng.random_range(5.0..500.0);
            let xi_star = optimal_xi_sq(xb, bb, beta, t, alpha, n);
            let best_obj = xi_sq_objective(xi_star, xb, bb, beta, t, alpha, n);
            for i in 0..200 {
                let xi = xi_star * (10f64).powf(-2.0 + 4.0 * i as f64 / 199.0);
                assert!(xi_sq_objective(xi, xb, bb, beta, t, alpha, n) >= best_obj - 1e-12);
            }
        }
    }

    fn gaussian_tasks(
        t: usize,
        n: usize,
        spread: f64,
        center: &[f64],
    ) -> (Vec<TaskSample>, BoundedLoss) {
        let env = MetaEnvironment::gaussian(center.to_vec(), spread, 1.0, None).unwrap();
        let loss = env.loss();
        let samples = (0..t)
            .map(|i| {
                let task = sample_task(&env, &stream().index("gtask", i as u64));
                sample_dataset(&task, n, &stream().index("gdata", i as u64)).unwrap()
            })
            .collect();
        (samples, loss)
    }

    fn fit_cfg(k: usize, mode: FitMode) -> HyperFitConfig {
        HyperFitConfig {
            alpha: 0.05,
            beta: 0.05,
            smoothness_l: 1.0,
            reference: HyperReference::broadcast(1.0, 2.0, 1.0, k).unwrap(),
            epsilon: EpsilonRule::SqrtNOverT,
            threshold: ThresholdRule::NOverT,
            mode,
            budget: 12,
            objective_draws: 8,
        }
    }

    #[test]
    fn gaussian_fit_recovers_the_shared_center() {
        let center = [0.8, -0.4];
        let (samples, loss) = gaussian_tasks(200, 40, 0.0, &center);
        let fit = fit_gaussian_hyperposterior(
            &samples,
            &loss,
            &fit_cfg(1, FitMode::ClosedForm),
            &stream().child("gfit"),
        )
        .unwrap();
        assert!(fit.favorable, "dispersion_hat={}", fit.dispersion_hat);
        // tau is the average of T*n unit-variance draws around the center.
        let se = (1.0f64 / (200.0 * 40.0)).sqrt();
        for i in 0..2 {
            assert!(
                (fit.hyper.tau[0][i] - center[i]).abs() < 3.0 * se + 1e-9,
                "tau={:?}",
                fit.hyper.tau[0]
            );
        }
        let eps = fit.epsilon;
        assert!((fit.hyper.xi_sq[0] - eps).abs() < 1e-12);
        let expect_b = optimal_b(eps, 2.0, 0.05, 40.0, 1.0).unwrap();
        assert!((fit.hyper.rate[0] - expect_b).abs() < 1e-9);
    }

    #[test]
    fn gaussian_fit_unfavorable_keeps_reference_scales() {
        let (samples, loss) = gaussian_tasks(50, 20, 2.0, &[0.0, 0.0]);
        let fit = fit_gaussian_hyperposterior(
            &samples,
            &loss,
            &fit_cfg(1, FitMode::ClosedForm),
            &stream().child("gfit-unf"),
        )
        .unwrap();
        assert!(!fit.favorable);
        assert_eq!(fit.hyper.xi_sq[0], 1.0);
        assert_eq!(fit.hyper.rate[0], 1.0);
    }

    #[test]
    fn stochastic_fit_never_ends_worse_than_its_initializer() {
        let (samples, loss) = gaussian_tasks(30, 15, 0.1, &[0.4, 0.1]);
        let cfg_closed = fit_cfg(1, FitMode::ClosedForm);
        let cfg_stoch = fit_cfg(1, FitMode::Stochastic);
        let s = stream().child("refine");
        let init = fit_gaussian_hyperposterior(&samples, &loss, &cfg_closed, &s).unwrap();
        let refined = fit_gaussian_hyperposterior(&samples, &loss, &cfg_stoch, &s).unwrap();
        let draws = 8;
        let base: Vec<(Vec<f64>, f64)> = normal_draws(2, draws, &s.child("refine/eps"))
            .into_iter()
            .zip(gamma_std_draws(2.0, draws, &s.child("refine/gamma")))
            .collect();
        let before =
            gaussian_meta_objective_crn(&samples, &loss, &init.hyper, &cfg_stoch, &base).unwrap();
        let after =
            gaussian_meta_objective_crn(&samples, &loss, &refined.hyper, &cfg_stoch, &base)
                .unwrap();
        assert!(after <= before + 1e-3, "before={before} after={after}");
    }

    #[test]
    fn stochastic_fit_with_degenerate_meta_weight_returns_the_initializer() {
        let (samples, loss) = gaussian_tasks(10, 10, 0.1, &[0.2]);
        let mut cfg = fit_cfg(1, FitMode::Stochastic);
        cfg.beta = 1e-12;
        let s = stream().child("degenerate");
        let got = fit_gaussian_hyperposterior(&samples, &loss, &cfg, &s).unwrap();
        cfg.mode = FitMode::ClosedForm;
        let init = fit_gaussian_hyperposterior(&samples, &loss, &cfg, &s).unwrap();
        assert_eq!(got.hyper, init.hyper);
    }

    #[test]
    fn mixture_fit_k1_reduces_to_the_gaussian_structure() {
        let (samples, loss) = gaussian_tasks(40, 20, 0.0, &[0.5]);
        let mut cfg = fit_cfg(1, FitMode::ClosedForm);
        cfg.threshold = ThresholdRule::Fixed(0.05);
        let fit =
            fit_mixture_hyperposterior(&samples, &loss, 1, &cfg, &stream().child("mix1")).unwrap();
        assert_eq!(fit.hyper.delta, vec![2.0]);
        assert_eq!(fit.hyper.base.k(), 1);
        assert_eq!(fit.hyper.base.shape, vec![2.0]);
        assert!(fit.favorable);
        assert_eq!(fit.hyper.base.rate, vec![40.0]);
        let expect_xi = optimal_xi_sq(1.0, 40.0, cfg.beta, 40.0, cfg.alpha, 20.0);
        assert!((fit.hyper.base.xi_sq[0] - expect_xi).abs() < 1e-12);
    }

    #[test]
    fn mixture_fit_recovers_two_separated_clusters() {
        let env =
            MetaEnvironment::mixture(vec![vec![-3.0, 0.0], vec![3.0, 0.0]], 0.0, 1.0, None)
                .unwrap();
        let loss = env.loss();
        let samples: Vec<TaskSample> = (0..100)
            .map(|i| {
                let task = sample_task(&env, &stream().index("ctask", i as u64));
                sample_dataset(&task, 30, &stream().index("cdata", i as u64)).unwrap()
            })
            .collect();
        let mut cfg = fit_cfg(2, FitMode::ClosedForm);
        cfg.threshold = ThresholdRule::Fixed(0.5);
        let fit =
            fit_mixture_hyperposterior(&samples, &loss, 2, &cfg, &stream().child("mix2")).unwrap();
        let mut taus = fit.hyper.base.tau.clone();
        taus.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        // Cluster means of per-task empirical means; se ~ sqrt(1/(50*30)).
        let se = (1.0f64 / (50.0 * 30.0)).sqrt();
        assert!((taus[0][0] + 3.0).abs() < 4.0 * se + 1e-6, "taus={taus:?}");
        assert!((taus[1][0] - 3.0).abs() < 4.0 * se + 1e-6, "taus={taus:?}");
        assert!(fit.favorable);
    }

    #[test]
    fn unknown_k_singleton_grid_returns_that_fit() {
        let (samples, loss) = gaussian_tasks(10, 10, 0.1, &[0.0]);
        let cfg = fit_cfg(1, FitMode::ClosedForm);
        let got = fit_unknown_k_hyperposterior(
            &samples,
            &loss,
            &[3],
            (1.0, 2.0, 1.0),
            &cfg,
            &stream().child("uk1"),
        )
        .unwrap();
        assert_eq!(got.selected_k, 3);
        assert_eq!(got.objectives.len(), 1);
        let kd = got.fit.hyper.k_distribution.as_ref().unwrap();
        assert_eq!(kd.len(), 10);
        assert_eq!(kd.probs()[2], 1.0);
        // Dirac multinomial over T = 10 cells costs log 10.
        let kl = crate::divergences::kl_multinomial_vs_uniform(kd).unwrap();
        assert!((kl - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unknown_k_selection_is_the_grid_argmin() {
        let env = MetaEnvironment::mixture(vec![vec![-2.0], vec![2.0]], 0.0, 0.5, None).unwrap();
        let loss = env.loss();
        let samples: Vec<TaskSample> = (0..40)
            .map(|i| {
                let task = sample_task(&env, &stream().index("uk-task", i as u64));
                sample_dataset(&task, 20, &stream().index("uk-data", i as u64)).unwrap()
            })
            .collect();
        let cfg = fit_cfg(1, FitMode::ClosedForm);
        let got = fit_unknown_k_hyperposterior(
            &samples,
            &loss,
            &[1, 2, 4],
            (1.0, 2.0, 1.0),
            &cfg,
            &stream().child("uk-grid"),
        )
        .unwrap();
        let selected_obj = got
            .objectives
            .iter()
            .find(|(k, _)| *k == got.selected_k)
            .unwrap()
            .1;
        for &(_, obj) in &got.objectives {
            assert!(selected_obj <= obj + 1e-12);
        }
    }

    #[test]
    fn sample_prior_dirac_categorical_is_constant() {
        let priors = vec![discrete_prior(&[1.0, 0.0]), discrete_prior(&[0.0, 1.0])];
        let posterior = HyperPosterior::Finite {
            priors: priors.clone(),
            weights: CategoricalDist::dirac(2, 1).unwrap(),
        };
        for rep in 0..16 {
            let got = sample_prior(&posterior, &stream().index("dirac", rep)).unwrap();
            assert_eq!(got, priors[1]);
        }
    }

    #[test]
    fn sample_prior_moments_match_the_hyper_parameters() {
        let hyper =
            GaussianGammaHyper::new(vec![vec![0.7, -0.3]], vec![0.4], vec![3.0], vec![2.0])
                .unwrap();
        let posterior = HyperPosterior::GaussianGamma(hyper);
        let mut mean0 = Vec::new();
        let mut vars = Vec::new();
        for rep in 0..100_000u64 {
            match sample_prior(&posterior, &stream().index("moments", rep)).unwrap() {
                PriorSpec::Gaussian(g) => {
                    mean0.push(g.mean()[0]);
                    vars.push(g.var()[0]);
                }
                _ => unreachable!(),
            }
        }
        let m = MeanSe::from_samples(&mean0).unwrap();
        assert!(
            (m.mean - 0.7).abs() < 3.0 * m.se,
            "mean={} se={}",
            m.mean,
            m.se
        );
        let v = MeanSe::from_samples(&vars).unwrap();
        // E[variance] = a/b = 1.5 under the rate convention.
        assert!(
            (v.mean - 1.5).abs() < 3.0 * v.se,
            "mean={} se={}",
            v.mean,
            v.se
        );
    }

    #[test]
    fn sample_prior_mixture_has_valid_weights() {
        let base = GaussianGammaHyper::new(
            vec![vec![0.0], vec![1.0]],
            vec![0.5, 0.5],
            vec![2.0, 2.0],
            vec![4.0, 4.0],
        )
        .unwrap();
        let hyper = MixtureHyper::new(vec![2.0, 2.0], base, None).unwrap();
        let posterior = HyperPosterior::Mixture(hyper);
        for rep in 0..32 {
            match sample_prior(&posterior, &stream().index("mix-draw", rep)).unwrap() {
                PriorSpec::Mixture(m) => {
                    assert_eq!(m.k(), 2);
                    let s: f64 = m.weights().probs().iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn kmeans_recovers_well_separated_points() {
        let points = vec![
            vec![0.0, 0.1],
            vec![0.1, -0.1],
            vec![5.0, 5.1],
            vec![5.1, 4.9],
        ];
        let centers = k_means(&points, 2, 5, &stream().child("km"));
        let mut xs: Vec<f64> = centers.iter().map(|c| c[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] - 0.05).abs() < 1e-9);
        assert!((xs[1] - 5.05).abs() < 1e-9);
    }
}
