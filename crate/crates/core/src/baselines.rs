//! Reference smoothers: bootstrap particle filter with ancestral paths,
//! forward filtering backward smoothing (marginal reweighting), forward
//! filtering backward simulation, and the Kalman/RTS closed form.

use rand::{Rng, RngCore};

use crate::model::{Observations, StateSpaceModel};
use crate::resample::{self, LogWeights, Scheme};
use crate::tps::WeightedPath;
use crate::{Error, Result};

/// Particle filter output. `particles[t]` and `weights[t]` are the weighted
/// particles at step `t` before that step's resampling.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// `ancestors[t - 1][i]` indexes the step `t - 1` parent of particle `i`
    /// at step `t`.
    pub ancestors: Option<Vec<Vec<u32>>>,
    pub log_likelihood: f64,
}

impl FilterOutput {
    pub fn horizon(&self) -> usize {
        self.particles.len() - 1
    }

    pub fn num_particles(&self) -> usize {
        self.particles[0].len()
    }

    /// Self-normalised filtering means and variances.
    pub fn filtering_moments(&self) -> (Vec<f64>, Vec<f64>) {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| weighted_mean_var(x, w))
            .unzip()
    }

    /// Joint-smoothing paths obtained by tracing ancestors back from step `T`,
    /// weighted by the final filter weights.
    pub fn smoothed_paths(&self) -> Result<WeightedPath> {
        let ancestors = self
            .ancestors
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("filter was run without keeping paths".into()))?;
        let horizon = self.horizon();
        let n = self.num_particles();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut columns = vec![Vec::new(); horizon + 1];
        for t in (0..=horizon).rev() {
            columns[t] = idx.iter().map(|&i| self.particles[t][i]).collect();
            if t > 0 {
                idx.iter_mut()
                    .for_each(|i| *i = ancestors[t - 1][*i] as usize);
            }
        }
        let lw = self.weights[horizon].iter().map(|w| w.ln()).collect();
        WeightedPath::new(0, columns, LogWeights::new(lw))
    }

    /// Number of distinct step-`t` ancestors among the final particles.
    pub fn unique_ancestors(&self, t: usize) -> Result<usize> {
        let ancestors = self
            .ancestors
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("filter was run without keeping paths".into()))?;
        let n = self.num_particles();
        let mut alive = vec![true; n];
        for s in (t + 1..=self.horizon()).rev() {
            let mut parents = vec![false; n];
            for (i, &a) in ancestors[s - 1].iter().enumerate() {
                if alive[i] {
                    parents[a as usize] = true;
                }
            }
            alive = parents;
        }
        Ok(alive.iter().filter(|&&a| a).count())
    }
}

pub fn weighted_mean_var(x: &[f64], w: &[f64]) -> (f64, f64) {
    let mean: f64 = x.iter().zip(w).map(|(x, w)| x * w).sum();
    let var: f64 = x
        .iter()
        .zip(w)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum();
    (mean, var)
}

/// Bootstrap particle filter: transition proposal, emission weights,
/// resampling before every propagation.
pub fn bootstrap_pf(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    n: usize,
    keep_paths: bool,
    scheme: Scheme,
    rng: &mut dyn RngCore,
) -> Result<FilterOutput> {
    obs.check_model(model)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "particle filter needs at least 2 particles (got {n})"
        )));
    }
    let horizon = model.horizon();
    let mut particles = Vec::with_capacity(horizon + 1);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
    let mut ancestors = keep_paths.then(|| Vec::with_capacity(horizon));
    let mut log_likelihood = 0.0;

    let mut x: Vec<f64> = (0..n).map(|_| model.sample_prior(rng)).collect();
    for t in 0..=horizon {
        if t > 0 {
            let idx = resample::resample(&weights[t - 1], n, scheme, rng);
            let prev: &Vec<f64> = &particles[t - 1];
            x = idx
                .iter()
                .map(|&a| model.sample_transition(t, prev[a], rng))
                .collect();
            if let Some(anc) = ancestors.as_mut() {
                anc.push(idx.iter().map(|&a| a as u32).collect());
            }
        }
        let y = obs.get(t);
        let lw: Vec<f64> = x.iter().map(|&v| model.log_emission(t, v, y)).collect();
        let normalized =
            resample::normalize(&lw).map_err(|_| Error::DegenerateFilter { step: t })?;
        log_likelihood += normalized.log_mean;
        particles.push(std::mem::take(&mut x));
        weights.push(normalized.weights);
    }
    Ok(FilterOutput {
        particles,
        weights,
        ancestors,
        log_likelihood,
    })
}

/// Marginal smoothing weights for every filter particle, O(N^2) per step.
pub fn ffbsm(filter: &FilterOutput, model: &dyn StateSpaceModel) -> Result<Vec<Vec<f64>>> {
    let horizon = filter.horizon();
    let mut smooth = vec![Vec::new(); horizon + 1];
    smooth[horizon] = filter.weights[horizon].clone();
    for t in (0..horizon).rev() {
        let x_t = &filter.particles[t];
        let w_t = &filter.weights[t];
        let x_next = &filter.particles[t + 1];
        let s_next = &smooth[t + 1];
        let mut acc = vec![0.0; x_t.len()];
        let mut log_k = vec![0.0; x_t.len()];
        for (j, &xj) in x_next.iter().enumerate() {
            if s_next[j] == 0.0 {
                continue;
            }
            for (l, &xl) in x_t.iter().enumerate() {
                log_k[l] = model.log_transition(t + 1, xl, xj);
            }
            let max = log_k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateBackward { step: t });
            }
            let mut denom = 0.0;
            for (l, k) in log_k.iter_mut().enumerate() {
                *k = (*k - max).exp();
                denom += w_t[l] * *k;
            }
            if !(denom > 0.0) {
                return Err(Error::DegenerateBackward { step: t });
            }
            let scale = s_next[j] / denom;
            for (a, k) in acc.iter_mut().zip(&log_k) {
                *a += k * scale;
            }
        }
        let mut w: Vec<f64> = acc.iter().zip(w_t).map(|(a, w)| a * w).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateBackward { step: t });
        }
        w.iter_mut().for_each(|v| *v /= total);
        smooth[t] = w;
    }
    Ok(smooth)
}

/// Smoothing means and variances from FFBSm weights.
pub fn ffbsm_moments(filter: &FilterOutput, smooth: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    filter
        .particles
        .iter()
        .zip(smooth)
        .map(|(x, w)| weighted_mean_var(x, w))
        .unzip()
}

/// Backward simulation of `draws` equally weighted joint paths.
pub fn ffbsi(
    filter: &FilterOutput,
    model: &dyn StateSpaceModel,
    draws: usize,
    rng: &mut dyn RngCore,
) -> Result<WeightedPath> {
    let horizon = filter.horizon();
    let final_idx = resample::resample(&filter.weights[horizon], draws, Scheme::Multinomial, rng);
    let mut columns = vec![Vec::new(); horizon + 1];
    columns[horizon] = final_idx
        .iter()
        .map(|&i| filter.particles[horizon][i])
        .collect();
    let mut log_b = vec![0.0; filter.num_particles()];
    for t in (0..horizon).rev() {
        let x_t = &filter.particles[t];
        let w_t = &filter.weights[t];
        let mut column = Vec::with_capacity(draws);
        for &next in &columns[t + 1] {
            for (l, &xl) in x_t.iter().enumerate() {
                log_b[l] = if w_t[l] > 0.0 {
                    w_t[l].ln() + model.log_transition(t + 1, xl, next)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = log_b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(Error::DegenerateBackward { step: t });
            }
            let total: f64 = log_b.iter().map(|b| (b - max).exp()).sum();
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = x_t.len() - 1;
            for (l, b) in log_b.iter().enumerate() {
                let p = (b - max).exp();
                acc += p;
                if acc > target && p > 0.0 {
                    pick = l;
                    break;
                }
            }
            column.push(x_t[pick]);
        }
        columns[t] = column;
    }
    WeightedPath::new(0, columns, LogWeights::uniform(draws))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: f64,
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanOutput {
    pub predicted: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
    pub log_likelihood: f64,
}

pub fn kalman_filter(model: &dyn StateSpaceModel, obs: &Observations) -> Result<KalmanOutput> {
    obs.check_model(model)?;
    let p = model.linear_gaussian().ok_or_else(|| {
        Error::UnsupportedModel("Kalman filtering needs a linear Gaussian model".into())
    })?;
    let mut predicted = Vec::with_capacity(obs.len());
    let mut filtered = Vec::with_capacity(obs.len());
    let mut log_likelihood = 0.0;
    let mut prior = GaussianBelief {
        mean: p.m0,
        var: p.p0,
    };
    for (t, &y) in obs.as_slice().iter().enumerate() {
        if t > 0 {
            let last: &GaussianBelief = filtered.last().unwrap();
            prior = GaussianBelief {
                mean: p.a * last.mean,
                var: p.a * p.a * last.var + p.q,
            };
        }
        let s = p.c * p.c * prior.var + p.r;
        let innovation = y - p.c * prior.mean;
        log_likelihood += crate::model::Gaussian::new(0.0, s.sqrt()).log_pdf(innovation);
        let gain = prior.var * p.c / s;
        predicted.push(prior);
        filtered.push(GaussianBelief {
            mean: prior.mean + gain * innovation,
            var: (1.0 - gain * p.c) * prior.var,
        });
    }
    Ok(KalmanOutput {
        predicted,
        filtered,
        log_likelihood,
    })
}

/// Exact smoothing marginals of a linear Gaussian model.
pub fn rts_smoother(
    model: &dyn StateSpaceModel,
    obs: &Observations,
) -> Result<Vec<GaussianBelief>> {
    let kf = kalman_filter(model, obs)?;
    let a = model.linear_gaussian().unwrap().a;
    let mut smooth = kf.filtered.clone();
    for t in (0..smooth.len().saturating_sub(1)).rev() {
        let f = kf.filtered[t];
        let pred = kf.predicted[t + 1];
        let gain = f.var * a / pred.var;
        let next = smooth[t + 1];
        smooth[t] = GaussianBelief {
            mean: f.mean + gain * (next.mean - pred.mean),
            var: f.var + gain * gain * (next.var - pred.var),
        };
    }
    Ok(smooth)
}
