//! Closed-form KL divergences for the distribution families used by the
//! within-task and meta-level machinery, plus the log-sum upper bound for
//! Gaussian mixtures (the exact mixture KL has no closed form) and Monte
//! Carlo estimators used as test oracles.
//!
//! Convention: `GammaDist { shape: a, rate: b }` has density proportional to
//! `x^(a-1) exp(-b x)`, so `E[X] = a/b` and `E[1/X] = b/(a-1)`. This is the
//! convention under which the closed-form Gamma KL below matches quadrature;
//! see the unit tests.

use crate::error::{Error, Result};
use crate::numerics::{self, MeanSe};
use crate::rng::RandomStream;
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaSampler, Normal};
use serde::{Deserialize, Serialize};

/// A KL value that may be infinite (absolute-continuity violation).
///
/// Bound arithmetic must fail loudly on the infinite case instead of
/// silently propagating `f64::INFINITY`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn finite(self) -> Option<f64> {
        match self {
            Divergence::Finite(v) => Some(v),
            Divergence::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Divergence::Infinite)
    }

    pub fn expect_finite(self, context: &str) -> Result<f64> {
        self.finite()
            .ok_or_else(|| Error::numeric(format!("infinite divergence in {context}")))
    }
}

/// Product of independent one-dimensional Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("DiagGaussian"));
        }
        if mean.len() != var.len() {
            return Err(Error::LengthMismatch(mean.len(), var.len()));
        }
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("DiagGaussian variances must be positive"));
        }
        Ok(Self { mean, var })
    }

    /// Same variance in every coordinate.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let d = x[i] - self.mean[i];
            acc += -0.5 * d * d / self.var[i]
                - 0.5 * (2.0 * std::f64::consts::PI * self.var[i]).ln();
        }
        acc
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| {
                Normal::new(m, v.sqrt())
                    .expect("validated variance")
                    .sample(rng)
            })
            .collect()
    }
}

/// Gamma distribution in the shape/rate convention (see module docs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaDist {
    shape: f64,
    rate: f64,
}

impl GammaDist {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0) || !(rate > 0.0) {
            return Err(Error::domain(format!(
                "Gamma parameters must be positive, got shape={shape} rate={rate}"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        // rand_distr parameterizes Gamma by (shape, scale).
        GammaSampler::new(self.shape, 1.0 / self.rate)
            .expect("validated parameters")
            .sample(rng)
    }
}

/// Dirichlet distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletDist {
    concentration: Vec<f64>,
}

impl DirichletDist {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.is_empty() {
            return Err(Error::Empty("DirichletDist"));
        }
        if concentration.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::domain("Dirichlet concentrations must be positive"));
        }
        Ok(Self { concentration })
    }

    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }

    pub fn dim(&self) -> usize {
        self.concentration.len()
    }

    /// A draw via normalized Gamma variates.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let draws: Vec<f64> = self
            .concentration
            .iter()
            .map(|&a| {
                GammaSampler::new(a, 1.0)
                    .expect("validated concentration")
                    .sample(rng)
            })
            .collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|g| g / total).collect()
    }
}

/// Probability vector on a finite set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("CategoricalDist"));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::domain("categorical entries must be >= 0"));
        }
        let sum = numerics::pairwise_sum(&probs);
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "categorical entries must sum to 1 (+-1e-12), got {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty("CategoricalDist::uniform"));
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
        })
    }

    /// Point mass at `index`.
    pub fn dirac(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::domain(format!("dirac index {index} out of {k}")));
        }
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Inverse-CDF draw of an index.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Mixture of diagonal Gaussians sharing one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: CategoricalDist,
    components: Vec<DiagGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: CategoricalDist, components: Vec<DiagGaussian>) -> Result<Self> {
        if weights.len() != components.len() {
            return Err(Error::LengthMismatch(weights.len(), components.len()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::domain("mixture components must share one dimension"));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &CategoricalDist {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .probs()
            .iter()
            .zip(&self.components)
            .map(|(&w, c)| {
                if w > 0.0 {
                    w.ln() + c.log_density(x)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        numerics::log_sum_exp_terms(&terms).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let k = self.weights.sample_index(rng);
        self.components[k].sample(rng)
    }
}

/// `KL(p || q) = sum_k p_k log(p_k / q_k)` with `0 log(0/.) = 0`.
///
/// Returns [`Divergence::Infinite`] when `p` puts mass where `q` has none.
pub fn kl_categorical(p: &CategoricalDist, q: &CategoricalDist) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    let mut acc = 0.0;
    for (&pk, &qk) in p.probs().iter().zip(q.probs()) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(Divergence::Infinite);
        }
        acc += pk * (pk / qk).ln();
    }
    Ok(Divergence::Finite(acc.max(0.0)))
}

/// KL between diagonal Gaussians:
/// `sum_i 0.5 [ (mu_i - mu'_i)^2 / v'_i + v_i / v'_i - 1 + log(v'_i / v_i) ]`.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::LengthMismatch(p.dim(), q.dim()));
    }
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let dm = p.mean()[i] - q.mean()[i];
        let (v, vq) = (p.var()[i], q.var()[i]);
        acc += 0.5 * (dm * dm / vq + v / vq - 1.0 + (vq / v).ln());
    }
    Ok(acc.max(0.0))
}

/// KL between Gamma distributions in the shape/rate convention:
/// `(a - a') psi(a) + log Gamma(a')/Gamma(a) + a' log(b/b') + a (b' - b)/b`.
pub fn kl_gamma(p: &GammaDist, q: &GammaDist) -> Result<f64> {
    let (a, b) = (p.shape(), p.rate());
    let (ar, br) = (q.shape(), q.rate());
    let value = (a - ar) * numerics::digamma(a)?
        + numerics::log_gamma(ar)?
        - numerics::log_gamma(a)?
        + ar * (b / br).ln()
        + a * (br - b) / b;
    Ok(value.max(0.0))
}

/// KL from `Dir(delta)` to the flat Dirichlet `Dir(1_K)`:
/// `log[Gamma(1'delta) / (Gamma(K) prod_k Gamma(delta_k))]
///  + sum_k (delta_k - 1)(psi(delta_k) - psi(1'delta))`.
pub fn kl_dirichlet_vs_flat(p: &DirichletDist) -> Result<f64> {
    let k = p.dim();
    let total: f64 = p.concentration().iter().sum();
    let mut value = numerics::log_gamma(total)? - numerics::log_gamma(k as f64)?;
    let psi_total = numerics::digamma(total)?;
    for &dk in p.concentration() {
        value -= numerics::log_gamma(dk)?;
        value += (dk - 1.0) * (numerics::digamma(dk)? - psi_total);
    }
    Ok(value.max(0.0))
}

/// KL from a multinomial with cell probabilities `x` over `T` cells to the
/// uniform multinomial: `log T - H(x)`.
pub fn kl_multinomial_vs_uniform(x: &CategoricalDist) -> Result<f64> {
    Ok(((x.len() as f64).ln() - x.entropy()).max(0.0))
}

/// Log-sum-inequality bound on a mixture KL, flagged as an upper bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureKlBound {
    pub value: Divergence,
    /// True only for a single component, where the bound is the exact KL.
    pub exact: bool,
}

/// Upper bound `KL(p || q) <= KL(w || w') + sum_k w_k KL(N_k || N'_k)` for
/// mixtures with matched component indexing.
pub fn mixture_kl_upper_bound(p: &GaussianMixture, q: &GaussianMixture) -> Result<MixtureKlBound> {
    if p.k() != q.k() {
        return Err(Error::LengthMismatch(p.k(), q.k()));
    }
    if p.dim() != q.dim() {
        return Err(Error::LengthMismatch(p.dim(), q.dim()));
    }
    let weight_term = match kl_categorical(p.weights(), q.weights())? {
        Divergence::Finite(v) => v,
        Divergence::Infinite => {
            return Ok(MixtureKlBound {
                value: Divergence::Infinite,
                exact: p.k() == 1,
            })
        }
    };
    let mut acc = weight_term;
    for ((&w, pc), qc) in p
        .weights()
        .probs()
        .iter()
        .zip(p.components())
        .zip(q.components())
    {
        if w > 0.0 {
            acc += w * kl_diag_gaussian(pc, qc)?;
        }
    }
    Ok(MixtureKlBound {
        value: Divergence::Finite(acc),
        exact: p.k() == 1,
    })
}

/// Block description of a hyper-posterior over prior parameters: Normal
/// blocks for the component means, Gamma blocks for the variances, and
/// optional Dirichlet / multinomial blocks for mixture weights and the
/// component count.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperBlocks {
    pub normals: Vec<DiagGaussian>,
    pub gammas: Vec<GammaDist>,
    pub dirichlet: Option<DirichletDist>,
    pub k_distribution: Option<CategoricalDist>,
}

/// KL between hyper-posteriors as the exact sum of per-block KLs.
///
/// The reference side must use the flat Dirichlet and the uniform
/// multinomial when those blocks are present, which is how the reference
/// hyper-prior is always constructed here.
pub fn kl_hyper_gaussian_gamma(q: &HyperBlocks, reference: &HyperBlocks) -> Result<Divergence> {
    if q.normals.len() != reference.normals.len() {
        return Err(Error::LengthMismatch(
            q.normals.len(),
            reference.normals.len(),
        ));
    }
    if q.gammas.len() != reference.gammas.len() {
        return Err(Error::LengthMismatch(q.gammas.len(), reference.gammas.len()));
    }
    let mut acc = 0.0;
    for (p, r) in q.normals.iter().zip(&reference.normals) {
        acc += kl_diag_gaussian(p, r)?;
    }
    for (p, r) in q.gammas.iter().zip(&reference.gammas) {
        acc += kl_gamma(p, r)?;
    }
    if let Some(d) = &q.dirichlet {
        acc += kl_dirichlet_vs_flat(d)?;
    }
    if let Some(x) = &q.k_distribution {
        acc += kl_multinomial_vs_uniform(x)?;
    }
    Ok(Divergence::Finite(acc))
}

/// Monte-Carlo estimate of the exact mixture KL (test oracle).
pub fn mixture_kl_monte_carlo(
    p: &GaussianMixture,
    q: &GaussianMixture,
    samples: usize,
    stream: &RandomStream,
) -> Result<MeanSe> {
    let mut rng = stream.rng();
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let x = p.sample(&mut rng);
            p.log_density(&x) - q.log_density(&x)
        })
        .collect();
    MeanSe::from_samples(&draws)
}

/// Monte-Carlo estimate of `KL(Dir(delta) || Dir(1_K))` (test oracle).
pub fn dirichlet_kl_vs_flat_monte_carlo(
    p: &DirichletDist,
    samples: usize,
    stream: &RandomStream,
) -> Result<MeanSe> {
    let k = p.dim();
    let total: f64 = p.concentration().iter().sum();
    // log densities: Dir(delta) has log norm log Gamma(total) - sum log Gamma(delta_k);
    // the flat Dirichlet has log norm log Gamma(K).
    let mut log_norm_p = numerics::log_gamma(total)?;
    for &dk in p.concentration() {
        log_norm_p -= numerics::log_gamma(dk)?;
    }
    let log_norm_q = numerics::log_gamma(k as f64)?;
    let mut rng = stream.rng();
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let w = p.sample(&mut rng);
            let log_p: f64 = log_norm_p
                + p.concentration()
                    .iter()
                    .zip(&w)
                    .map(|(&dk, &wk)| (dk - 1.0) * wk.ln())
                    .sum::<f64>();
            log_p - log_norm_q
        })
        .collect();
    MeanSe::from_samples(&draws)
}
