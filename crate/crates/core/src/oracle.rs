//! Ground truth by discretisation: the model is projected onto a uniform grid
//! of cells and the resulting finite HMM is solved exactly by scaled
//! forward-backward.
//!
//! Gaussian transitions are discretised by integrating the density over each
//! cell (Gauss-Legendre on an exponential recurrence), truncated to a
//! band of `TRANSITION_BAND` standard deviations and renormalised; the mass
//! leaving the grid is tracked as leakage from the exact tails.

use libm::erfc;

use crate::metrics::ReferenceCdf;
use crate::model::{Observations, StateSpaceModel};
use crate::{Error, Result};

pub const DEFAULT_ORACLE_BINS: usize = 2000;
pub const DEFAULT_LINEAR_RANGE: (f64, f64) = (-15.0, 15.0);
pub const DEFAULT_NONLINEAR_RANGE: (f64, f64) = (-40.0, 40.0);
/// Largest tolerated probability mass leaving the grid at any step.
pub const LEAKAGE_TOLERANCE: f64 = 1e-6;
/// Filtering probabilities below this fraction of the step maximum are
/// skipped when propagating.
pub const DEFAULT_PRUNE: f64 = 1e-30;
const TRANSITION_BAND: f64 = 12.0;
const MAX_EXTENSIONS: usize = 8;

fn lower_tail(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Gaussian mass of `[a, b]`, using whichever tail keeps precision.
fn gaussian_mass(mean: f64, sd: f64, a: f64, b: f64) -> f64 {
    let (za, zb) = ((a - mean) / sd, (b - mean) / sd);
    if za >= 0.0 {
        upper_tail(za) - upper_tail(zb)
    } else if zb <= 0.0 {
        lower_tail(zb) - lower_tail(za)
    } else {
        1.0 - lower_tail(za) - upper_tail(zb)
    }
}

/// `exp(-z^2/2)` at `z0 + k*step`, `k < count`, by a multiplicative
/// recurrence started at the lattice point nearest the mode so every value
/// decays monotonically outward and underflow is harmless.
fn gaussian_lattice(z0: f64, step: f64, count: usize) -> Vec<f64> {
    let mode = ((-z0 / step).round().max(0.0) as usize).min(count - 1);
    let mut phi = vec![0.0; count];
    let zm = z0 + mode as f64 * step;
    phi[mode] = (-0.5 * zm * zm).exp();
    let decay = (-step * step).exp();
    let mut ratio = (-(zm * step + 0.5 * step * step)).exp();
    for k in mode + 1..count {
        phi[k] = phi[k - 1] * ratio;
        ratio *= decay;
    }
    let mut ratio = (zm * step - 0.5 * step * step).exp();
    for k in (0..mode).rev() {
        phi[k] = phi[k + 1] * ratio;
        ratio *= decay;
    }
    phi
}

/// Masses of the `count` cells `[start + j*delta, start + (j+1)*delta)`
/// under N(mean, sd^2), by three-point Gauss-Legendre on each cell.
fn gaussian_cell_masses(mean: f64, sd: f64, start: f64, delta: f64, count: usize) -> Vec<f64> {
    let step = delta / sd;
    let centre = (start + 0.5 * delta - mean) / sd;
    let offset = 0.5 * step * (0.6f64).sqrt();
    let mid = gaussian_lattice(centre, step, count);
    let left = gaussian_lattice(centre - offset, step, count);
    let right = gaussian_lattice(centre + offset, step, count);
    let scale = step / (18.0 * (2.0 * std::f64::consts::PI).sqrt());
    (0..count)
        .map(|j| scale * (5.0 * left[j] + 8.0 * mid[j] + 5.0 * right[j]))
        .collect()
}

#[derive(Clone, Debug)]
enum Layout {
    /// Uniform cells `[lo + i*delta, lo + (i+1)*delta)`, states at centres.
    Cells { lo: f64, delta: f64 },
    /// The states of a finite-state model.
    Points,
}

/// A finite HMM obtained from a model and an observation sequence.
pub struct DiscreteHmm<'a> {
    model: &'a dyn StateSpaceModel,
    layout: Layout,
    grid: Vec<f64>,
    prior: Vec<f64>,
    prior_leakage: f64,
    log_emit: Vec<Vec<f64>>,
    /// Per-step transition matrices for finite-state models.
    dense: Option<Vec<Vec<Vec<f64>>>>,
    pub prune: f64,
}

/// One row of a discretised transition: probabilities of the cells
/// `first..first + probs.len()`, plus the mass that fell outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRow {
    pub first: usize,
    pub probs: Vec<f64>,
    pub leakage: f64,
}

pub fn discretize<'a>(
    model: &'a dyn StateSpaceModel,
    obs: &Observations,
    m: usize,
    range: (f64, f64),
) -> Result<DiscreteHmm<'a>> {
    obs.check_model(model)?;
    let log_emit_at = |grid: &[f64]| -> Vec<Vec<f64>> {
        obs.as_slice()
            .iter()
            .enumerate()
            .map(|(t, &y)| grid.iter().map(|&x| model.log_emission(t, x, y)).collect())
            .collect()
    };

    if let Some(states) = model.finite_states() {
        let grid = states.to_vec();
        let prior: Vec<f64> = grid.iter().map(|&x| model.log_prior(x).exp()).collect();
        let dense = (1..=model.horizon())
            .map(|t| {
                grid.iter()
                    .map(|&a| {
                        grid.iter()
                            .map(|&b| model.log_transition(t, a, b).exp())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        return Ok(DiscreteHmm {
            model,
            layout: Layout::Points,
            log_emit: log_emit_at(&grid),
            grid,
            prior,
            prior_leakage: 0.0,
            dense: Some(dense),
            prune: 0.0,
        });
    }

    let (lo, hi) = range;
    if m < 16 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "oracle grid needs m >= 16 and lo < hi (got m={m}, [{lo}, {hi}])"
        )));
    }
    let delta = (hi - lo) / m as f64;
    let grid: Vec<f64> = (0..m).map(|i| lo + (i as f64 + 0.5) * delta).collect();
    let (prior, prior_leakage) = match model.prior_gaussian() {
        Some(g) => {
            let p: Vec<f64> = (0..m)
                .map(|i| {
                    gaussian_mass(
                        g.mean,
                        g.sd,
                        lo + i as f64 * delta,
                        lo + (i + 1) as f64 * delta,
                    )
                })
                .collect();
            let leak = lower_tail((lo - g.mean) / g.sd) + upper_tail((hi - g.mean) / g.sd);
            (p, leak)
        }
        None => (
            grid.iter()
                .map(|&x| model.log_prior(x).exp() * delta)
                .collect(),
            0.0,
        ),
    };
    let total: f64 = prior.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "prior has no mass on the oracle grid".into(),
        ));
    }
    let prior = prior.iter().map(|p| p / total).collect();
    if prior_leakage > LEAKAGE_TOLERANCE {
        log::debug!(
            "oracle range [{lo}, {hi}] loses prior mass {prior_leakage:e}; consider widening it"
        );
    }
    Ok(DiscreteHmm {
        model,
        layout: Layout::Cells { lo, delta },
        log_emit: log_emit_at(&grid),
        grid,
        prior,
        prior_leakage,
        dense: None,
        prune: DEFAULT_PRUNE,
    })
}

impl DiscreteHmm<'_> {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn prior_leakage(&self) -> f64 {
        self.prior_leakage
    }

    pub fn horizon(&self) -> usize {
        self.log_emit.len() - 1
    }

    /// Discretised law of `X_t` given `X_{t-1}` in state `i`, renormalised
    /// to sum to one.
    pub fn transition_row(&self, t: usize, i: usize) -> TransitionRow {
        if let Some(dense) = &self.dense {
            return TransitionRow {
                first: 0,
                probs: dense[t - 1][i].clone(),
                leakage: 0.0,
            };
        }
        let Layout::Cells { lo, delta } = self.layout else {
            unreachable!()
        };
        let m = self.grid.len();
        let hi = lo + m as f64 * delta;
        let prev = self.grid[i];
        let (mut probs, first, leakage) = match self.model.transition_gaussian(t, prev) {
            Some(g) => {
                let reach = TRANSITION_BAND * g.sd;
                let a = (((g.mean - reach - lo) / delta).floor().max(0.0) as usize).min(m);
                let b = (((g.mean + reach - lo) / delta).ceil().max(0.0) as usize).min(m);
                let probs = if a < b {
                    gaussian_cell_masses(g.mean, g.sd, lo + a as f64 * delta, delta, b - a)
                } else {
                    Vec::new()
                };
                let leak = lower_tail((lo - g.mean) / g.sd) + upper_tail((hi - g.mean) / g.sd);
                (probs, a, leak.min(1.0))
            }
            None => {
                let probs = self
                    .grid
                    .iter()
                    .map(|&x| self.model.log_transition(t, prev, x).exp() * delta)
                    .collect();
                (probs, 0, 0.0)
            }
        };
        let total: f64 = probs.iter().sum();
        if total > 0.0 {
            probs.iter_mut().for_each(|p| *p /= total);
            TransitionRow {
                first,
                probs,
                leakage,
            }
        } else {
            // drift carried the whole row off the grid: park it on the nearest edge
            let mean = self
                .model
                .transition_gaussian(t, prev)
                .map_or(prev, |g| g.mean);
            let edge = if mean < lo { 0 } else { m - 1 };
            TransitionRow {
                first: edge,
                probs: vec![1.0],
                leakage: 1.0,
            }
        }
    }

    fn emission_scaled(&self, t: usize) -> (Vec<f64>, f64) {
        let le = &self.log_emit[t];
        let max = le.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return (vec![0.0; le.len()], max);
        }
        (le.iter().map(|l| (l - max).exp()).collect(), max)
    }

    fn kept_rows(&self, alpha: &[f64]) -> Vec<usize> {
        let max = alpha.iter().copied().fold(0.0, f64::max);
        let threshold = self.prune * max;
        (0..alpha.len())
            .filter(|&i| alpha[i] > 0.0 && alpha[i] >= threshold)
            .collect()
    }

    pub fn forward_backward(&self) -> Result<OracleSolution> {
        let horizon = self.horizon();
        let m = self.grid.len();
        let mut filtering: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
        let mut emissions = Vec::with_capacity(horizon + 1);
        let mut kept = Vec::with_capacity(horizon);
        let mut log_likelihood = 0.0;
        let mut max_leakage = self.prior_leakage;

        for t in 0..=horizon {
            let (e, e_max) = self.emission_scaled(t);
            let mut alpha = if t == 0 {
                self.prior.clone()
            } else {
                let prev = &filtering[t - 1];
                let rows = self.kept_rows(prev);
                let mut next = vec![0.0; m];
                let mut leak = 0.0;
                for &i in &rows {
                    let row = self.transition_row(t, i);
                    leak += prev[i] * row.leakage;
                    for (slot, p) in next[row.first..].iter_mut().zip(&row.probs) {
                        *slot += prev[i] * p;
                    }
                }
                max_leakage = max_leakage.max(leak);
                kept.push(rows);
                next
            };
            alpha.iter_mut().zip(&e).for_each(|(a, e)| *a *= e);
            let c: f64 = alpha.iter().sum();
            if !(c > 0.0) || !e_max.is_finite() {
                return Err(Error::ImpossibleObservation { step: t });
            }
            alpha.iter_mut().for_each(|a| *a /= c);
            log_likelihood += c.ln() + e_max;
            filtering.push(alpha);
            emissions.push((e, e_max));
        }
        if max_leakage > LEAKAGE_TOLERANCE {
            log::debug!("oracle grid leaks {max_leakage:e} of probability mass");
        }

        let mut smoothing = vec![Vec::new(); horizon + 1];
        smoothing[horizon] = filtering[horizon].clone();
        let mut beta = vec![1.0; m];
        let mut log_beta_scale = 0.0;
        for t in (1..=horizon).rev() {
            let (e, e_max) = &emissions[t];
            let eb: Vec<f64> = e.iter().zip(&beta).map(|(e, b)| e * b).collect();
            let mut prev_beta = vec![0.0; m];
            for &i in &kept[t - 1] {
                let row = self.transition_row(t, i);
                prev_beta[i] = row
                    .probs
                    .iter()
                    .zip(&eb[row.first..])
                    .map(|(p, v)| p * v)
                    .sum();
            }
            let scale = prev_beta.iter().copied().fold(0.0, f64::max);
            if !(scale > 0.0) {
                return Err(Error::ImpossibleObservation { step: t });
            }
            prev_beta.iter_mut().for_each(|b| *b /= scale);
            log_beta_scale += scale.ln() + e_max;
            beta = prev_beta;
            let mut s: Vec<f64> = filtering[t - 1]
                .iter()
                .zip(&beta)
                .map(|(a, b)| a * b)
                .collect();
            let total: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= total);
            smoothing[t - 1] = s;
        }
        let (e0, e0_max) = &emissions[0];
        let z0: f64 = self
            .prior
            .iter()
            .zip(e0)
            .zip(&beta)
            .map(|((p, e), b)| p * e * b)
            .sum();
        let backward_log_likelihood = z0.ln() + e0_max + log_beta_scale;

        let (smoothing_means, smoothing_vars) =
            smoothing.iter().map(|p| moments(&self.grid, p)).unzip();
        Ok(OracleSolution {
            grid: self.grid.clone(),
            layout: self.layout.clone(),
            filtering,
            smoothing,
            smoothing_means,
            smoothing_vars,
            log_likelihood,
            backward_log_likelihood,
            max_leakage,
        })
    }
}

fn moments(grid: &[f64], p: &[f64]) -> (f64, f64) {
    let mean: f64 = grid.iter().zip(p).map(|(x, p)| x * p).sum();
    let var = grid
        .iter()
        .zip(p)
        .map(|(x, p)| p * (x - mean) * (x - mean))
        .sum();
    (mean, var)
}

/// Exact solution of a discretised model.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    grid: Vec<f64>,
    layout: Layout,
    filtering: Vec<Vec<f64>>,
    smoothing: Vec<Vec<f64>>,
    smoothing_means: Vec<f64>,
    smoothing_vars: Vec<f64>,
    pub log_likelihood: f64,
    pub backward_log_likelihood: f64,
    /// Largest per-step probability mass lost off the grid.
    pub max_leakage: f64,
}

impl OracleSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> usize {
        self.smoothing.len() - 1
    }

    pub fn filtering(&self, t: usize) -> &[f64] {
        &self.filtering[t]
    }

    pub fn smoothing(&self, t: usize) -> &[f64] {
        &self.smoothing[t]
    }

    pub fn smoothing_means(&self) -> &[f64] {
        &self.smoothing_means
    }

    pub fn smoothing_vars(&self) -> &[f64] {
        &self.smoothing_vars
    }

    pub fn filtering_moments(&self) -> (Vec<f64>, Vec<f64>) {
        self.filtering
            .iter()
            .map(|p| moments(&self.grid, p))
            .unzip()
    }

    /// Range covered by the grid cells.
    pub fn range(&self) -> (f64, f64) {
        match self.layout {
            Layout::Cells { lo, delta } => (lo, lo + self.grid.len() as f64 * delta),
            Layout::Points => (self.grid[0], self.grid[self.grid.len() - 1]),
        }
    }

    fn pmf_cdf(&self, p: &[f64], x: f64) -> f64 {
        match self.layout {
            Layout::Cells { lo, delta } => {
                let pos = (x - lo) / delta;
                if pos <= 0.0 {
                    return 0.0;
                }
                let cell = pos.floor() as usize;
                if cell >= p.len() {
                    return 1.0;
                }
                let below: f64 = p[..cell].iter().sum();
                (below + p[cell] * (pos - cell as f64)).min(1.0)
            }
            Layout::Points => self
                .grid
                .iter()
                .zip(p)
                .filter(|(g, _)| **g <= x)
                .map(|(_, p)| p)
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// Smoothing CDF at step `t`, linear within cells.
    pub fn smoothing_cdf(&self, t: usize, x: f64) -> f64 {
        self.pmf_cdf(&self.smoothing[t], x)
    }

    pub fn filtering_cdf(&self, t: usize, x: f64) -> f64 {
        self.pmf_cdf(&self.filtering[t], x)
    }

    /// Tab-separated `t\tmean\tvar` rows of the smoothing marginals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\tmean\tvar\n");
        for (t, (m, v)) in self
            .smoothing_means
            .iter()
            .zip(&self.smoothing_vars)
            .enumerate()
        {
            out.push_str(&format!("{t}\t{m}\t{v}\n"));
        }
        out
    }
}

impl ReferenceCdf for OracleSolution {
    fn steps(&self) -> usize {
        self.smoothing.len()
    }

    fn cdf(&self, t: usize, x: f64) -> f64 {
        self.smoothing_cdf(t, x)
    }
}

/// Solves on `range`, widening it by half its width on each side until the
/// leakage is within tolerance.
pub fn solve_auto(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    m: usize,
    range: (f64, f64),
) -> Result<OracleSolution> {
    let (mut lo, mut hi) = range;
    let mut solution = discretize(model, obs, m, (lo, hi))?.forward_backward()?;
    for _ in 0..MAX_EXTENSIONS {
        if solution.max_leakage <= LEAKAGE_TOLERANCE || model.finite_states().is_some() {
            break;
        }
        let pad = 0.5 * (hi - lo);
        lo -= pad;
        hi += pad;
        log::info!(
            "extending oracle range to [{lo}, {hi}] (leakage {:e})",
            solution.max_leakage
        );
        solution = discretize(model, obs, m, (lo, hi))?.forward_backward()?;
    }
    if solution.max_leakage > LEAKAGE_TOLERANCE {
        log::warn!(
            "oracle grid on [{lo}, {hi}] still leaks {:e} of probability mass",
            solution.max_leakage
        );
    }
    Ok(solution)
}
