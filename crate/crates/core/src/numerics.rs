//! Special functions, stable aggregation and quadrature oracles.
//!
//! Everything here is pure. All probability mass elsewhere in the crate is
//! carried in log space, because exponents of the form `-alpha * n * risk`
//! routinely exceed the `f64` range.

use crate::error::{Error, Result};

/// `log sum_i exp(log_weights[i] + values[i])`, computed with the max-shift
/// trick. Weights need not be normalized.
pub fn log_sum_exp(log_weights: &[f64], values: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    if log_weights.len() != values.len() {
        return Err(Error::LengthMismatch(log_weights.len(), values.len()));
    }
    let mut max = f64::NEG_INFINITY;
    for (&lw, &v) in log_weights.iter().zip(values) {
        let s = lw + v;
        if s.is_nan() {
            return Err(Error::numeric("NaN term in log_sum_exp"));
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = log_weights
        .iter()
        .zip(values)
        .map(|(&lw, &v)| (lw + v - max).exp())
        .sum();
    Ok(max + sum.ln())
}

/// `log sum_i exp(terms[i])`.
pub fn log_sum_exp_terms(terms: &[f64]) -> Result<f64> {
    let zeros = vec![0.0; terms.len()];
    log_sum_exp(terms, &zeros)
}

// Lanczos approximation with g = 7 and the classic 9-coefficient set
// (Godfrey's values, as circulated with Numerical Recipes). Relative error
// is below 1e-13 over the positive axis.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(log_gamma_unchecked(x))
}

fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the Lanczos argument away from zero.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - log_gamma_unchecked(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function `psi(x) = d/dx log Gamma(x)` for `x > 0`.
///
/// Computed by shifting the argument above 10 with the recurrence
/// `psi(x) = psi(x + 1) - 1/x` and then applying the asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Bernoulli-number tail: -1/(12 x^2) + 1/(120 x^4) - 1/(252 x^6) + ...
    let tail = inv2
        * (-1.0 / 12.0
            + inv2
                * (1.0 / 120.0
                    + inv2 * (-1.0 / 252.0 + inv2 * (1.0 / 240.0 + inv2 * (-1.0 / 132.0)))));
    Ok(shift + x.ln() - 0.5 / x + tail)
}

/// Regularized lower incomplete gamma function `P(a, x)`.
///
/// Series expansion for `x < a + 1`, continued fraction otherwise.
pub fn reg_lower_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::domain(format!(
            "reg_lower_gamma requires a > 0, got {a}"
        )));
    }
    if x < 0.0 {
        return Err(Error::domain(format!(
            "reg_lower_gamma requires x >= 0, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let lg = log_gamma_unchecked(a);
    let log_prefix = a * x.ln() - x - lg;
    if x < a + 1.0 {
        // Lower series: P(a,x) = x^a e^-x / Gamma(a) * sum_k x^k / (a)_{k+1}.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut k = 1.0;
        for _ in 0..500 {
            term *= x / (a + k);
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
            k += 1.0;
        }
        Ok((log_prefix + sum.ln()).exp().min(1.0))
    } else {
        // Lentz continued fraction for Q(a,x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (log_prefix).exp() * h;
        Ok((1.0 - q).clamp(0.0, 1.0))
    }
}

/// CDF of the chi-square distribution with `k` degrees of freedom.
/// `k = 0` is the point mass at zero.
pub fn chi_square_cdf(k: usize, x: f64) -> Result<f64> {
    if x < 0.0 {
        return Ok(0.0);
    }
    if k == 0 {
        return Ok(1.0);
    }
    reg_lower_gamma(k as f64 / 2.0, x / 2.0)
}

/// One-dimensional trapezoidal grid.
#[derive(Clone, Copy, Debug)]
pub struct Quadrature1D {
    lower: f64,
    upper: f64,
    nodes: usize,
}

impl Quadrature1D {
    pub fn new(lower: f64, upper: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::domain(format!(
                "quadrature needs at least 2 nodes, got {nodes}"
            )));
        }
        if !(lower < upper) {
            return Err(Error::domain(format!(
                "quadrature needs lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            lower,
            upper,
            nodes,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Trapezoidal integral of `f` over the grid.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = (self.upper - self.lower) / (self.nodes - 1) as f64;
        let mut acc = 0.5 * (f(self.lower) + f(self.upper));
        for i in 1..self.nodes - 1 {
            acc += f(self.lower + h * i as f64);
        }
        acc * h
    }
}

/// Trapezoidal estimate of `KL(p || q) = int p log(p/q)` from log densities.
///
/// Both densities must be strictly positive on the grid and carry mass at
/// most ~1e-10 outside it; the discretization error is O(1/nodes^2).
pub fn kl_quadrature_oracle(
    log_density_p: impl Fn(f64) -> f64,
    log_density_q: impl Fn(f64) -> f64,
    grid: Quadrature1D,
) -> Result<f64> {
    let mut bad = false;
    let value = grid.integrate(|x| {
        let lp = log_density_p(x);
        let lq = log_density_q(x);
        let p = lp.exp();
        if p == 0.0 {
            return 0.0; // p log(p/q) -> 0 as p -> 0
        }
        let term = p * (lp - lq);
        if !term.is_finite() {
            bad = true;
            return 0.0;
        }
        term
    });
    if bad || !value.is_finite() {
        return Err(Error::numeric(
            "non-finite density evaluation in kl_quadrature_oracle",
        ));
    }
    Ok(value)
}

/// Sum with pairwise (cascade) splitting; deterministic and stable for the
/// long Monte-Carlo reductions.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    /// Two-pass mean and standard error of the mean.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain(
                "standard error needs at least 2 samples".to_owned(),
            ));
        }
        let n = values.len();
        let mean = pairwise_sum(values) / n as f64;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Ok(Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        })
    }
}
