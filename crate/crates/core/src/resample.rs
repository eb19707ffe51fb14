//! Log-weight normalisation, effective sample size and resampling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::{Error, Result};

/// Unnormalised log-weights of a particle population.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights(Vec<f64>);

/// Linear weights summing to one, plus `log(mean(exp(w)))` of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub weights: Vec<f64>,
    pub log_mean: f64,
}

impl LogWeights {
    pub fn new(w: Vec<f64>) -> Self {
        LogWeights(w)
    }

    pub fn uniform(n: usize) -> Self {
        LogWeights(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn normalize(&self) -> Result<Normalized> {
        normalize(&self.0)
    }
}

pub fn log_sum_exp(w: &[f64]) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return f64::NEG_INFINITY;
    }
    max + w.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Stabilised normalisation. NaN and `+inf` entries are rejected as
/// degenerate along with the all `-inf` case.
pub fn normalize(w: &[f64]) -> Result<Normalized> {
    if w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights);
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut weights: Vec<f64> = w.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= sum);
    let log_mean = max + sum.ln() - (w.len() as f64).ln();
    Ok(Normalized { weights, log_mean })
}

pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheme {
    Multinomial,
    Residual,
    #[default]
    Systematic,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Multinomial => "multinomial",
            Scheme::Residual => "residual",
            Scheme::Systematic => "systematic",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Scheme::Multinomial),
            "residual" => Ok(Scheme::Residual),
            "systematic" => Ok(Scheme::Systematic),
            other => Err(Error::Config(format!(
                "unknown resampling scheme `{other}`"
            ))),
        }
    }
}

/// Draws `n` ancestor indices from normalised `weights`.
///
/// Systematic and residual outputs come back grouped by ancestor; callers
/// that pair resampled populations index-by-index should shuffle them.
pub fn resample(weights: &[f64], n: usize, scheme: Scheme, rng: &mut dyn RngCore) -> Vec<usize> {
    match scheme {
        Scheme::Multinomial => multinomial(weights, n, rng),
        Scheme::Residual => residual(weights, n, rng),
        Scheme::Systematic => systematic(weights, n, rng),
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn pick(cum: &[f64], u: f64) -> usize {
    let total = *cum.last().unwrap();
    let target = u * total;
    cum.partition_point(|&c| c <= target).min(cum.len() - 1)
}

fn multinomial(weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let cum = cumulative(weights);
    (0..n).map(|_| pick(&cum, rng.random::<f64>())).collect()
}

fn residual(weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let copies = (n as f64 * w).floor() as usize;
        out.extend(std::iter::repeat_n(i, copies));
        rest.push(n as f64 * w - copies as f64);
    }
    // floor() rounding can overshoot by a copy when weights do not sum to
    // exactly one
    out.truncate(n);
    let remaining = n - out.len();
    if remaining > 0 {
        let cum = cumulative(&rest);
        if *cum.last().unwrap() > 0.0 {
            out.extend((0..remaining).map(|_| pick(&cum, rng.random::<f64>())));
        } else {
            out.extend(multinomial(weights, remaining, rng));
        }
    }
    out
}

fn systematic(weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let cum = cumulative(weights);
    let total = *cum.last().unwrap();
    let u0: f64 = rng.random();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for k in 0..n {
        let target = (u0 + k as f64) / n as f64 * total;
        while i + 1 < cum.len() && cum[i] <= target {
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Fisher-Yates shuffle, making a resampled population exchangeable.
pub fn shuffle(indices: &mut [usize], rng: &mut dyn RngCore) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}
