//! Closed-form evaluators for the excess-risk bounds, with regime flags and
//! per-term bookkeeping.
//!
//! Every report's `terms` sum to its `value` exactly; quantities that are
//! reported but not part of the sum (alternate branches, isolation
//! comparisons) go to `aux`. All logs are natural and all values are in
//! loss units.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// `8e`, the loss-bound multiplier of the meta-level variance constant.
pub const EIGHT_E: f64 = 8.0 * std::f64::consts::E;

/// Constants behind the `"paper-default"` rate setting: `c = 8 e C` and
/// `alpha = beta = 1 / (C + c)` for a loss bound `C`.
pub fn paper_default_constants(loss_bound: f64) -> (f64, f64, f64) {
    let c = EIGHT_E * loss_bound;
    let rate = 1.0 / (loss_bound + c);
    (c, rate, rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NotApplicable,
    Bernstein,
    NoBernstein,
    Favorable,
    Unfavorable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

fn term(name: &str, value: f64) -> BoundTerm {
    BoundTerm {
        name: name.to_owned(),
        value,
    }
}

/// An evaluated bound: its value, the regime it was evaluated in, the
/// addends summing to the value, and side quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub value: f64,
    pub regime: Regime,
    pub terms: Vec<BoundTerm>,
    pub aux: Vec<BoundTerm>,
}

impl BoundReport {
    fn from_terms(regime: Regime, terms: Vec<BoundTerm>, aux: Vec<BoundTerm>) -> Self {
        let value = terms.iter().map(|t| t.value).sum();
        Self {
            value,
            regime,
            terms,
            aux,
        }
    }
}

/// Inputs shared by the bound evaluators. Only the fields an evaluator
/// needs have to be set; missing fields raise a domain error naming the
/// field.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundParams {
    /// Loss bound `C`.
    pub loss_bound: f64,
    /// Variance/excess constant `c`; defaults to `8 e C`.
    pub bernstein_constant: Option<f64>,
    /// Quadratic-growth constant `L`; defaults to 1.
    pub smoothness: Option<f64>,
    /// Within-task temperature; defaults to `1/(C + c)`.
    pub alpha: Option<f64>,
    /// Meta-level temperature; defaults to `1/(C + c)`.
    pub beta: Option<f64>,
    /// Whether the within-task Bernstein condition is assumed (`1_B`).
    pub bernstein: Option<bool>,
    pub n: Option<u64>,
    pub t: Option<u64>,
    /// Finite parameter-set size `M`.
    pub labels: Option<u64>,
    /// `m* = |A*|`.
    pub optimal_labels: Option<u64>,
    pub dim: Option<u64>,
    /// Mixture component count `K`.
    pub components: Option<u64>,
    /// Task-mean dispersion around one center.
    pub sigma: Option<f64>,
    /// Task-mean dispersion around the best `K` centers.
    pub sigma_k: Option<f64>,
    /// Prior-mass exponent `d_pi`.
    pub prior_mass_dim: Option<f64>,
    /// Prior-mass constant `kappa_pi`.
    pub prior_mass_kappa: Option<f64>,
    pub xi_bar_sq: Option<f64>,
    pub a_bar: Option<f64>,
    pub b_bar: Option<f64>,
    pub mu_star_norm_sq: Option<f64>,
    /// Per-component `||tau_k||^2` for the mixture bound.
    pub tau_norm_sq: Option<Vec<f64>>,
    /// Per-prior rates for the concurrent-priors bound.
    pub rates: Option<Vec<f64>>,
    /// Empirical part fed to the single-task bound.
    pub empirical_part: Option<f64>,
    /// Component grid for the unknown-K mixture bound.
    pub k_grid: Option<Vec<u64>>,
    /// `Sigma_K` per grid entry, matched with `k_grid`.
    pub sigma_k_grid: Option<Vec<f64>>,
}

impl BoundParams {
    pub fn new(loss_bound: f64) -> Self {
        Self {
            loss_bound,
            ..Self::default()
        }
    }

    pub fn resolved_bernstein_constant(&self) -> f64 {
        self.bernstein_constant
            .unwrap_or(EIGHT_E * self.loss_bound)
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha
            .unwrap_or(1.0 / (self.loss_bound + self.resolved_bernstein_constant()))
    }

    pub fn resolved_beta(&self) -> f64 {
        self.beta
            .unwrap_or(1.0 / (self.loss_bound + self.resolved_bernstein_constant()))
    }

    pub fn resolved_smoothness(&self) -> f64 {
        self.smoothness.unwrap_or(1.0)
    }

    fn need_u(&self, field: Option<u64>, name: &str) -> Result<f64> {
        field
            .map(|v| v as f64)
            .filter(|&v| v >= 1.0)
            .ok_or_else(|| Error::domain(format!("bound needs positive integer `{name}`")))
    }

    fn need_f(&self, field: Option<f64>, name: &str) -> Result<f64> {
        field
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::domain(format!("bound needs `{name}`")))
    }
}

/// Single-task bound: `prefactor * (empirical_part + alpha C^2 (1-1_B)/8)`
/// with `prefactor = 1 / (1 - alpha c 1_B / (2 (1 - C alpha)))`.
///
/// With the Bernstein flag set and `alpha = 1/(c+C)` the prefactor is
/// exactly 2.
pub fn isolation_bound(params: &BoundParams, empirical_part: f64) -> Result<BoundReport> {
    let c_bound = params.loss_bound;
    let c = params.resolved_bernstein_constant();
    let alpha = params.resolved_alpha();
    let bernstein = params.bernstein.unwrap_or(true);
    let (prefactor, regime, hoeffding) = if bernstein {
        if alpha * c_bound >= 1.0 {
            return Err(Error::domain(format!(
                "Bernstein prefactor needs alpha < 1/C, got alpha={alpha} C={c_bound}"
            )));
        }
        let denom = 1.0 - alpha * c / (2.0 * (1.0 - c_bound * alpha));
        if denom <= 0.0 {
            return Err(Error::domain(format!(
                "Bernstein prefactor denominator must stay positive, got {denom}"
            )));
        }
        (1.0 / denom, Regime::Bernstein, 0.0)
    } else {
        (1.0, Regime::NoBernstein, alpha * c_bound * c_bound / 8.0)
    };
    let terms = vec![
        term("prefactor * empirical_part", prefactor * empirical_part),
        term("prefactor * hoeffding_slack", prefactor * hoeffding),
    ];
    let aux = vec![term("prefactor", prefactor)];
    Ok(BoundReport::from_terms(regime, terms, aux))
}

/// Meta-learning analog of the single-task bound: twice the prefactor,
/// applied to the caller-supplied infimum term
/// (`2 / (1 - alpha c 1_B / (2(1 - C alpha))) * (empirical_part + slack)`).
///
/// With the Bernstein flag and `alpha = 1/(c+C)` the prefactor is exactly 4.
pub fn meta_learning_bound(params: &BoundParams, empirical_part: f64) -> Result<BoundReport> {
    let single = isolation_bound(params, empirical_part)?;
    let terms = single
        .terms
        .iter()
        .map(|t| term(&t.name, 2.0 * t.value))
        .collect();
    let aux = vec![term(
        "prefactor",
        2.0 * single.aux.first().map(|t| t.value).unwrap_or(1.0),
    )];
    Ok(BoundReport::from_terms(single.regime, terms, aux))
}

/// Prior-mass rate. Bernstein regime (with the caller's `alpha`):
/// `2 (d_pi log(n alpha / d_pi) + log kappa_pi) / (alpha n)`.
/// Slow-rate regime (at `alpha = 2 sqrt(2 d_pi) / (sqrt(n) C)`):
/// `(C/2) sqrt(d_pi/(2n)) (log(8 e^2 n / (d_pi C^2))/2 + log(kappa_pi)/d_pi)`.
pub fn prior_mass_bound(params: &BoundParams) -> Result<BoundReport> {
    let d_pi = params.need_f(params.prior_mass_dim, "prior_mass_dim")?;
    let kappa = params.prior_mass_kappa.unwrap_or(1.0);
    let n = params.need_u(params.n, "n")?;
    if !(d_pi > 0.0) || !(kappa > 0.0) {
        return Err(Error::domain("prior-mass constants must be positive"));
    }
    let bernstein = params.bernstein.unwrap_or(true);
    if bernstein {
        let alpha = params.resolved_alpha();
        let log_arg = n * alpha / d_pi;
        if log_arg <= 1.0 {
            return Err(Error::domain(format!(
                "prior-mass bound needs n alpha / d_pi > 1 so its log stays positive, got {log_arg}"
            )));
        }
        let terms = vec![
            term("2 d_pi log(n alpha / d_pi) / (alpha n)", {
                2.0 * d_pi * log_arg.ln() / (alpha * n)
            }),
            term("2 log(kappa_pi) / (alpha n)", 2.0 * kappa.ln() / (alpha * n)),
        ];
        Ok(BoundReport::from_terms(
            Regime::Bernstein,
            terms,
            vec![term("alpha", alpha)],
        ))
    } else {
        let c_bound = params.loss_bound;
        let log_arg = 8.0 * std::f64::consts::E.powi(2) * n / (d_pi * c_bound * c_bound);
        if log_arg <= 1.0 {
            return Err(Error::domain(format!(
                "slow-rate prior-mass bound needs 8 e^2 n / (d_pi C^2) > 1, got {log_arg}"
            )));
        }
        let base = c_bound / 2.0 * (d_pi / (2.0 * n)).sqrt();
        let alpha_auto = 2.0 * (2.0 * d_pi).sqrt() / (n.sqrt() * c_bound);
        let terms = vec![
            term("base * log(8 e^2 n / (d_pi C^2)) / 2", base * 0.5 * log_arg.ln()),
            term("base * log(kappa_pi) / d_pi", base * kappa.ln() / d_pi),
        ];
        Ok(BoundReport::from_terms(
            Regime::NoBernstein,
            terms,
            vec![term("alpha (optimized)", alpha_auto)],
        ))
    }
}

/// Concurrent priors: `4 min_j rate_j + 4 log M / (beta T)`.
pub fn concurrent_priors_bound(params: &BoundParams) -> Result<BoundReport> {
    let rates = params
        .rates
        .as_ref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Empty("concurrent priors need `rates`"))?;
    let t = params.need_u(params.t, "t")?;
    let beta = params.resolved_beta();
    let m = rates.len() as f64;
    let best = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let terms = vec![
        term("4 min_rate", 4.0 * best),
        term("4 log M / (beta T)", 4.0 * m.ln() / (beta * t)),
    ];
    Ok(BoundReport::from_terms(Regime::NotApplicable, terms, vec![]))
}

/// Discrete subset-family meta rate:
/// `4 log(m*) / (alpha n) + 4 m* log(2 e M / m*) / (beta T)`.
///
/// The isolation comparisons `2 log M / (alpha n)` and `4 log M / (alpha n)`
/// are both attached as aux values.
pub fn discrete_meta_bound(params: &BoundParams) -> Result<BoundReport> {
    let m = params.need_u(params.labels, "labels")?;
    let m_star = params.need_u(params.optimal_labels, "optimal_labels")?;
    if m_star > m {
        return Err(Error::domain(format!(
            "optimal subset size {m_star} exceeds the label count {m}"
        )));
    }
    let n = params.need_u(params.n, "n")?;
    let t = params.need_u(params.t, "t")?;
    let alpha = params.resolved_alpha();
    let beta = params.resolved_beta();
    let terms = vec![
        term("4 log(m*) / (alpha n)", 4.0 * m_star.ln() / (alpha * n)),
        term(
            "4 m* log(2 e M / m*) / (beta T)",
            4.0 * m_star * (2.0 * std::f64::consts::E * m / m_star).ln() / (beta * t),
        ),
    ];
    let aux = vec![
        term("isolation 2 log M / (alpha n)", 2.0 * m.ln() / (alpha * n)),
        term("isolation 4 log M / (alpha n)", 4.0 * m.ln() / (alpha * n)),
    ];
    Ok(BoundReport::from_terms(Regime::NotApplicable, terms, aux))
}

fn gaussian_favorable_g(params: &BoundParams, n: f64, t: f64) -> Result<f64> {
    let a = params.need_f(params.a_bar, "a_bar")?;
    let b = params.need_f(params.b_bar, "b_bar")?;
    let xi = params.need_f(params.xi_bar_sq, "xi_bar_sq")?;
    let mu = params.mu_star_norm_sq.unwrap_or(0.0);
    let l = params.resolved_smoothness();
    let alpha = params.resolved_alpha();
    let beta = params.resolved_beta();
    let root = (alpha * l * a * (a - 1.0)).sqrt();
    Ok(4.0 * (a * l / (alpha * (a - 1.0))).sqrt()
        + 2.0 / beta
            * (mu / xi
                + n / (xi * t * t)
                + 1.0
                + xi.ln()
                + a
                + a / 2.0 * (alpha * l * a * (a - 1.0) / (b * b)).ln()
                + a * b / t * root))
}

/// Gaussian meta rate: the minimum of the favorable branch
/// `G * (d + log T) / T` and the unfavorable branch
/// `b_bar (d xi_bar^2 + Sigma) / ((a_bar - 1) alpha n)
///  + d log(2 a_bar alpha L n / b_bar + 1) / (2 alpha n)
///  + 2 ||mu*||^2 / (beta xi_bar^2 T)`,
/// with both branches reported and the regime flag taken from the
/// dispersion threshold `Sigma <= n/T`.
pub fn gaussian_meta_bound(params: &BoundParams) -> Result<BoundReport> {
    let a = params.need_f(params.a_bar, "a_bar")?;
    if a <= 1.0 {
        return Err(Error::domain(format!(
            "gaussian bound needs a_bar > 1 (E[1/variance] = b/(a-1)), got {a}"
        )));
    }
    let d = params.need_u(params.dim, "dim")?;
    let n = params.need_u(params.n, "n")?;
    let t = params.need_u(params.t, "t")?;
    let sigma = params.need_f(params.sigma, "sigma")?;
    let b = params.need_f(params.b_bar, "b_bar")?;
    let xi = params.need_f(params.xi_bar_sq, "xi_bar_sq")?;
    let mu = params.mu_star_norm_sq.unwrap_or(0.0);
    let l = params.resolved_smoothness();
    let alpha = params.resolved_alpha();
    let beta = params.resolved_beta();

    let g = gaussian_favorable_g(params, n, t)?;
    let favorable_value = g * (d + t.ln()) / t;
    let unfavorable = [
        term(
            "b_bar (d xi_bar^2 + Sigma) / ((a_bar - 1) alpha n)",
            b * (d * xi + sigma) / ((a - 1.0) * alpha * n),
        ),
        term(
            "d log(2 a_bar alpha L n / b_bar + 1) / (2 alpha n)",
            d * (2.0 * a * alpha * l * n / b + 1.0).ln() / (2.0 * alpha * n),
        ),
        term(
            "2 ||mu*||^2 / (beta xi_bar^2 T)",
            2.0 * mu / (beta * xi * t),
        ),
    ];
    let unfavorable_value: f64 = unfavorable.iter().map(|t| t.value).sum();

    let regime = if sigma <= n / t {
        Regime::Favorable
    } else {
        Regime::Unfavorable
    };
    let aux = vec![
        term("favorable G", g),
        term("favorable G (d + log T) / T", favorable_value),
        term("unfavorable branch", unfavorable_value),
    ];
    // A negative branch value cannot bound a nonnegative excess; the
    // constant G is only meaningful where it is positive.
    let terms = if favorable_value >= 0.0 && favorable_value <= unfavorable_value {
        vec![term("G (d + log T) / T", favorable_value)]
    } else {
        unfavorable.to_vec()
    };
    Ok(BoundReport::from_terms(regime, terms, aux))
}

fn mixture_cv_terms(
    params: &BoundParams,
    k: f64,
    sigma_k: f64,
    tau_norm_sq: &[f64],
) -> Result<(Vec<BoundTerm>, Regime)> {
    let d = params.need_u(params.dim, "dim")?;
    let n = params.need_u(params.n, "n")?;
    let t = params.need_u(params.t, "t")?;
    let xi = params.need_f(params.xi_bar_sq, "xi_bar_sq")?;
    let b_bar = params.need_f(params.b_bar, "b_bar")?;
    let l = params.resolved_smoothness();
    let alpha = params.resolved_alpha();
    let beta = params.resolved_beta();
    if tau_norm_sq.len() != k as usize {
        return Err(Error::LengthMismatch(tau_norm_sq.len(), k as usize));
    }

    // Favorable exactly when Sigma_K <= n / T^2.
    let favorable = sigma_k <= n / (t * t);
    let b_k = if favorable { t } else { 1.0 };
    let mut terms = vec![term("CV_finite 4 log(2K) / (alpha n)", {
        4.0 * (2.0 * k).ln() / (alpha * n)
    })];
    if favorable {
        terms.push(term("K CV_gaussian 8 L d / T", k * 8.0 * l * d / t));
        terms.push(term("K CV_gaussian 4 / (alpha T)", k * 4.0 / (alpha * t)));
    } else {
        terms.push(term(
            "K CV_gaussian 2 d log(1 + 4 alpha L n) / (alpha n)",
            k * 2.0 * d * (1.0 + 4.0 * alpha * l * n).ln() / (alpha * n),
        ));
        terms.push(term(
            "K CV_gaussian 4 Sigma_K / (alpha n)",
            k * 4.0 * sigma_k / (alpha * n),
        ));
    }
    terms.push(term(
        "CV_meta 2 K log(2K) / (beta T)",
        2.0 * k * (2.0 * k).ln() / (beta * t),
    ));
    terms.push(term(
        "CV_meta sum ||tau_k||^2 / (beta T xi_bar^2)",
        tau_norm_sq.iter().sum::<f64>() / (beta * t * xi),
    ));
    terms.push(term(
        "CV_meta d sum log(1 + 4 b_k xi_bar^2 beta T / (alpha n)) / (beta T)",
        d * k * (1.0 + 4.0 * b_k * xi * beta * t / (alpha * n)).ln() / (beta * t),
    ));
    terms.push(term(
        "CV_meta 4 sum (log(b_k/b_bar) + (b_bar - b_k)/b_k) / (beta T)",
        4.0 * k * ((b_k / b_bar).ln() + (b_bar - b_k) / b_k) / (beta * t),
    ));
    Ok((
        terms,
        if favorable {
            Regime::Favorable
        } else {
            Regime::Unfavorable
        },
    ))
}

/// Known-K mixture meta rate:
/// `CV_finite + K CV_gaussian + CV_meta` with `b_k = T` in the favorable
/// regime (`Sigma_K <= n/T^2`) and `b_k = 1` otherwise.
pub fn mixture_meta_bound(params: &BoundParams) -> Result<BoundReport> {
    let k = params.need_u(params.components, "components")?;
    let t = params.need_u(params.t, "t")?;
    if k > t {
        return Err(Error::domain(format!("components {k} exceed task count {t}")));
    }
    let sigma_k = params.need_f(params.sigma_k, "sigma_k")?;
    let tau = params
        .tau_norm_sq
        .clone()
        .unwrap_or_else(|| vec![0.0; k as usize]);
    let (terms, regime) = mixture_cv_terms(params, k, sigma_k, &tau)?;
    Ok(BoundReport::from_terms(regime, terms, vec![]))
}

/// Unknown-K mixture meta rate: the infimum over the K grid of the known-K
/// bound, plus `2 log T / (beta T)` for selecting the component count.
pub fn mixture_unknown_k_bound(params: &BoundParams) -> Result<BoundReport> {
    let t = params.need_u(params.t, "t")?;
    let beta = params.resolved_beta();
    let grid = params
        .k_grid
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| Error::Empty("unknown-K bound needs `k_grid`"))?;
    let sigmas = params
        .sigma_k_grid
        .as_ref()
        .ok_or_else(|| Error::Empty("unknown-K bound needs `sigma_k_grid`"))?;
    if grid.len() != sigmas.len() {
        return Err(Error::LengthMismatch(grid.len(), sigmas.len()));
    }
    let mut best: Option<(Vec<BoundTerm>, Regime, f64, u64)> = None;
    for (&k, &sigma_k) in grid.iter().zip(sigmas) {
        if k == 0 || k > params.t.unwrap_or(0) {
            return Err(Error::domain(format!("grid entry K={k} outside [1, T]")));
        }
        let tau = params
            .tau_norm_sq
            .clone()
            .unwrap_or_else(|| vec![0.0; k as usize]);
        let tau = if tau.len() == k as usize {
            tau
        } else {
            vec![0.0; k as usize]
        };
        let (terms, regime) = mixture_cv_terms(params, k as f64, sigma_k, &tau)?;
        let value: f64 = terms.iter().map(|t| t.value).sum();
        let better = match &best {
            None => true,
            Some((_, _, v, _)) => value < *v,
        };
        if better {
            best = Some((terms, regime, value, k));
        }
    }
    let (mut terms, regime, _, k) = best.expect("nonempty grid");
    terms.push(term("2 log T / (beta T)", 2.0 * t.ln() / (beta * t)));
    let aux = vec![term("selected K", k as f64)];
    Ok(BoundReport::from_terms(regime, terms, aux))
}
