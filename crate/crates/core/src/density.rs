//! Evaluable, sampleable univariate densities built from weighted samples.
//!
//! These serve as leaf targets for the tree smoother: moment-matched normals,
//! weighted Gaussian KDEs, piecewise-constant grids evaluated from a KDE, and
//! two-grid mixtures that give filter and smoother estimates a common support.

use rand::{Rng, RngCore};

use crate::model::{std_normal_cdf, Gaussian, LN_SQRT_2PI};
use crate::{Error, Result};

/// Smallest variance a moment-matched normal may have.
pub const VAR_FLOOR: f64 = 1e-12;
/// Default number of grid bins.
pub const DEFAULT_GRID_BINS: usize = 512;
/// Kernel contributions further than this many bandwidths are dropped when
/// evaluating a KDE on a grid (relative size `exp(-32)`).
const KERNEL_REACH: f64 = 8.0;

pub trait UnivariateDensity {
    fn log_density(&self, x: f64) -> f64;
    fn sample(&self, rng: &mut dyn RngCore) -> f64;
    fn cdf(&self, x: f64) -> f64;
    /// Interval outside which the density is zero or negligible.
    fn support(&self) -> (f64, f64);
}

fn check_weighted(samples: &[f64], weights: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if samples.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: samples.len(),
            actual: weights.len(),
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    Ok(())
}

/// Weighted mean and population variance.
pub fn weighted_moments(samples: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mean = samples.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = samples
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    (mean, var)
}

/// Weighted quantile of the empirical distribution (lower inverse CDF).
fn weighted_quantile(sorted: &[(f64, f64)], total: f64, q: f64) -> f64 {
    let target = q * total;
    let mut acc = 0.0;
    for &(x, w) in sorted {
        acc += w;
        if acc >= target {
            return x;
        }
    }
    sorted.last().unwrap().0
}

fn sorted_pairs(samples: &[f64], weights: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalFit {
    pub mean: f64,
    pub var: f64,
}

impl NormalFit {
    fn gaussian(&self) -> Gaussian {
        Gaussian::new(self.mean, self.var.sqrt())
    }
}

pub fn fit_normal_weighted(samples: &[f64], weights: &[f64]) -> Result<NormalFit> {
    check_weighted(samples, weights)?;
    let (mean, var) = weighted_moments(samples, weights);
    if var < VAR_FLOOR {
        log::warn!(
            "degenerate samples for normal fit (variance {var:e}); flooring at {VAR_FLOOR:e}"
        );
        return Ok(NormalFit {
            mean,
            var: VAR_FLOOR,
        });
    }
    Ok(NormalFit { mean, var })
}

impl UnivariateDensity for NormalFit {
    fn log_density(&self, x: f64) -> f64 {
        self.gaussian().log_pdf(x)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        self.gaussian().sample(rng)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.gaussian().cdf(x)
    }

    fn support(&self) -> (f64, f64) {
        let sd = self.var.sqrt();
        (self.mean - 12.0 * sd, self.mean + 12.0 * sd)
    }
}

/// Weighted Silverman rule: `0.9 min(sd, IQR/1.34) n_eff^(-1/5)` with
/// `n_eff = 1 / sum(w^2)`.
pub fn silverman_bandwidth(samples: &[f64], weights: &[f64]) -> Result<f64> {
    check_weighted(samples, weights)?;
    let total: f64 = weights.iter().sum();
    let (_, var) = weighted_moments(samples, weights);
    let sd = var.sqrt();
    let pairs = sorted_pairs(samples, weights);
    let iqr = weighted_quantile(&pairs, total, 0.75) - weighted_quantile(&pairs, total, 0.25);
    let n_eff = total * total / weights.iter().map(|w| w * w).sum::<f64>();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(
            "bandwidth selection needs at least two distinct samples".into(),
        ));
    }
    Ok(0.9 * spread * n_eff.powf(-0.2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedKde {
    points: Vec<f64>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    bandwidth: f64,
}

pub fn kde_fit(samples: &[f64], weights: &[f64], bandwidth: Option<f64>) -> Result<WeightedKde> {
    check_weighted(samples, weights)?;
    let bandwidth = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive (got {h})"
            )))
        }
        None => silverman_bandwidth(samples, weights)?,
    };
    let total: f64 = weights.iter().sum();
    let pairs = sorted_pairs(samples, weights);
    let points: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let weights: Vec<f64> = pairs.iter().map(|p| p.1 / total).collect();
    let mut acc = 0.0;
    let cumulative = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    Ok(WeightedKde {
        points,
        weights,
        cumulative,
        bandwidth,
    })
}

impl WeightedKde {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self
            .points
            .partition_point(|&p| p < x - KERNEL_REACH * 1.5 * h);
        let hi = self
            .points
            .partition_point(|&p| p <= x + KERNEL_REACH * 1.5 * h);
        let s: f64 = self.points[lo..hi]
            .iter()
            .zip(&self.weights[lo..hi])
            .map(|(p, w)| {
                let z = (x - p) / h;
                w * (-0.5 * z * z).exp()
            })
            .sum();
        s / (h * LN_SQRT_2PI.exp())
    }
}

impl UnivariateDensity for WeightedKde {
    fn log_density(&self, x: f64) -> f64 {
        self.density(x).ln()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random();
        let i = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.points.len() - 1);
        Gaussian::new(self.points[i], self.bandwidth).sample(rng)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * std_normal_cdf((x - p) / self.bandwidth))
            .sum()
    }

    fn support(&self) -> (f64, f64) {
        let reach = 12.0 * self.bandwidth;
        (
            self.points[0] - reach,
            self.points[self.points.len() - 1] + reach,
        )
    }
}

/// Evaluates a weighted Gaussian KDE at the centres `x1 + i*delta`.
///
/// Each sample touches the centres within `KERNEL_REACH` bandwidths; kernel
/// values along that run are produced by a multiplicative recurrence, so the
/// cost is a few multiplications per (sample, centre) pair.
pub fn kde_on_grid(
    samples: &[f64],
    weights: &[f64],
    bandwidth: f64,
    x1: f64,
    delta: f64,
    bins: usize,
) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let h2 = bandwidth * bandwidth;
    let reach = (KERNEL_REACH * bandwidth / delta).ceil() as isize;
    let step_decay = (-delta * delta / h2).exp();
    let last = bins as isize - 1;
    let mut acc = vec![0.0; bins];
    for (&x, &w) in samples.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let k0 = (((x - x1) / delta).round() as isize).clamp(0, last);
        let d = x1 + k0 as f64 * delta - x;
        let k_start = (k0 - reach).max(0);
        let k_end = (k0 + reach).min(last);
        let peak = (-0.5 * d * d / h2).exp();
        acc[k0 as usize] += w * peak;

        let mut kern = peak;
        let mut ratio = (-(2.0 * d * delta + delta * delta) / (2.0 * h2)).exp();
        for slot in &mut acc[(k0 + 1) as usize..=k_end.max(k0) as usize] {
            kern *= ratio;
            ratio *= step_decay;
            *slot += w * kern;
        }
        let mut kern = peak;
        let mut ratio = (-(-2.0 * d * delta + delta * delta) / (2.0 * h2)).exp();
        for slot in acc[k_start as usize..k0 as usize].iter_mut().rev() {
            kern *= ratio;
            ratio *= step_decay;
            *slot += w * kern;
        }
    }
    let scale = 1.0 / (total * bandwidth * LN_SQRT_2PI.exp());
    acc.iter_mut().for_each(|v| *v *= scale);
    acc
}

/// Piecewise-constant density: `d[i]` on `[x1 + i*delta - delta/2, x1 + i*delta + delta/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    x1: f64,
    delta: f64,
    d: Vec<f64>,
    log_d: Vec<f64>,
    cumulative: Vec<f64>,
    renormalization: f64,
}

impl GridDensity {
    /// Builds the step function, rescaling `d` so that `delta * sum(d) = 1`.
    pub fn new(x1: f64, delta: f64, d: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0) || d.is_empty() {
            return Err(Error::InvalidArgument(
                "grid needs positive spacing and at least one bin".into(),
            ));
        }
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "grid densities must be finite and non-negative".into(),
            ));
        }
        let mass: f64 = d.iter().sum::<f64>() * delta;
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("grid has no mass".into()));
        }
        let d: Vec<f64> = d.iter().map(|v| v / mass).collect();
        let log_d = d.iter().map(|v| v.ln()).collect();
        let mut acc = 0.0;
        let cumulative = d
            .iter()
            .map(|v| {
                acc += v * delta;
                acc
            })
            .collect();
        Ok(GridDensity {
            x1,
            delta,
            d,
            log_d,
            cumulative,
            renormalization: 1.0 / mass,
        })
    }

    /// KDE of the weighted samples evaluated on `bins` centres spanning
    /// `[min - 3h, max + 3h]`, renormalised.
    pub fn from_samples(
        samples: &[f64],
        weights: &[f64],
        bins: usize,
        bandwidth: Option<f64>,
    ) -> Result<Self> {
        check_weighted(samples, weights)?;
        if bins < 8 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 8 bins (got {bins})"
            )));
        }
        let h = match bandwidth {
            Some(h) if h > 0.0 => h,
            Some(h) => {
                return Err(Error::InvalidArgument(format!(
                    "bandwidth must be positive (got {h})"
                )))
            }
            None => silverman_bandwidth(samples, weights)?,
        };
        let (min, max) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        let x1 = min - 3.0 * h;
        let delta = (max - min + 6.0 * h) / (bins - 1) as f64;
        let d = kde_on_grid(samples, weights, h, x1, delta, bins);
        GridDensity::new(x1, delta, d)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn densities(&self) -> &[f64] {
        &self.d
    }

    pub fn bins(&self) -> usize {
        self.d.len()
    }

    /// Factor applied to the raw densities to make them integrate to one.
    pub fn renormalization(&self) -> f64 {
        self.renormalization
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.d.len()).map(move |i| self.x1 + i as f64 * self.delta)
    }

    fn left_edge(&self) -> f64 {
        self.x1 - 0.5 * self.delta
    }

    fn bin_of(&self, x: f64) -> Option<usize> {
        let pos = ((x - self.left_edge()) / self.delta).floor();
        (pos >= 0.0 && pos < self.d.len() as f64).then_some(pos as usize)
    }

    pub fn density(&self, x: f64) -> f64 {
        self.bin_of(x).map_or(0.0, |i| self.d[i])
    }

    /// Tab-separated `center\tdensity` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("center\tdensity\n");
        for (c, d) in self.centers().zip(&self.d) {
            out.push_str(&format!("{c}\t{d}\n"));
        }
        out
    }
}

impl UnivariateDensity for GridDensity {
    fn log_density(&self, x: f64) -> f64 {
        self.bin_of(x).map_or(f64::NEG_INFINITY, |i| self.log_d[i])
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random();
        let total = *self.cumulative.last().unwrap();
        let i = self
            .cumulative
            .partition_point(|&c| c <= u * total)
            .min(self.d.len() - 1);
        let v: f64 = rng.random();
        self.left_edge() + (i as f64 + v) * self.delta
    }

    fn cdf(&self, x: f64) -> f64 {
        let pos = (x - self.left_edge()) / self.delta;
        if pos <= 0.0 {
            return 0.0;
        }
        let i = pos.floor() as usize;
        if i >= self.d.len() {
            return 1.0;
        }
        let below = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        below + self.d[i] * self.delta * (pos - i as f64)
    }

    fn support(&self) -> (f64, f64) {
        (
            self.left_edge(),
            self.left_edge() + self.d.len() as f64 * self.delta,
        )
    }
}

/// `alpha * primary + (1 - alpha) * secondary`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    alpha: f64,
    primary: GridDensity,
    secondary: GridDensity,
}

impl MixtureDensity {
    pub fn new(alpha: f64, primary: GridDensity, secondary: GridDensity) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mixture weight must lie in (0, 1) (got {alpha})"
            )));
        }
        Ok(MixtureDensity {
            alpha,
            primary,
            secondary,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn primary(&self) -> &GridDensity {
        &self.primary
    }

    pub fn secondary(&self) -> &GridDensity {
        &self.secondary
    }

    pub fn density(&self, x: f64) -> f64 {
        self.alpha * self.primary.density(x) + (1.0 - self.alpha) * self.secondary.density(x)
    }
}

/// Filter estimate mixed with a little of the smoother grid.
pub fn mixture_filter_estimate(
    grid_f: &GridDensity,
    grid_s: &GridDensity,
    alpha_f: f64,
) -> Result<MixtureDensity> {
    MixtureDensity::new(alpha_f, grid_f.clone(), grid_s.clone())
}

/// Smoother estimate mixed with a little of the filter grid.
pub fn mixture_smoother_estimate(
    grid_s: &GridDensity,
    grid_f: &GridDensity,
    alpha_s: f64,
) -> Result<MixtureDensity> {
    MixtureDensity::new(alpha_s, grid_s.clone(), grid_f.clone())
}

impl UnivariateDensity for MixtureDensity {
    fn log_density(&self, x: f64) -> f64 {
        self.density(x).ln()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        if rng.random::<f64>() < self.alpha {
            self.primary.sample(rng)
        } else {
            self.secondary.sample(rng)
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        self.alpha * self.primary.cdf(x) + (1.0 - self.alpha) * self.secondary.cdf(x)
    }

    fn support(&self) -> (f64, f64) {
        let (a, b) = (self.primary.support(), self.secondary.support());
        (a.0.min(b.0), a.1.max(b.1))
    }
}

/// Probability mass function on finitely many points (densities with
/// respect to counting measure), for finite-state models.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePmf {
    points: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscretePmf {
    pub fn new(points: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != probs.len() {
            return Err(Error::InvalidArgument(
                "pmf needs matching, non-empty points and probabilities".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument(
                "pmf probabilities must be non-negative with positive sum".into(),
            ));
        }
        let mut pairs: Vec<(f64, f64)> = points
            .into_iter()
            .zip(probs.into_iter().map(|p| p / total))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (points, probs) = pairs.into_iter().unzip();
        Ok(DiscretePmf { points, probs })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl UnivariateDensity for DiscretePmf {
    fn log_density(&self, x: f64) -> f64 {
        self.points
            .iter()
            .position(|&p| (p - x).abs() < 1e-9)
            .map_or(f64::NEG_INFINITY, |i| self.probs[i].ln())
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (x, p) in self.points.iter().zip(&self.probs) {
            acc += p;
            if u < acc && *p > 0.0 {
                return *x;
            }
        }
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap();
        self.points[last]
    }

    fn cdf(&self, x: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.probs)
            .filter(|(p, _)| **p <= x)
            .map(|(_, q)| q)
            .sum()
    }

    fn support(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DensityEstimate {
    Normal(NormalFit),
    Kde(WeightedKde),
    Grid(GridDensity),
    Mixture(MixtureDensity),
    Discrete(DiscretePmf),
}

impl DensityEstimate {
    fn inner(&self) -> &dyn UnivariateDensity {
        match self {
            DensityEstimate::Normal(d) => d,
            DensityEstimate::Kde(d) => d,
            DensityEstimate::Grid(d) => d,
            DensityEstimate::Mixture(d) => d,
            DensityEstimate::Discrete(d) => d,
        }
    }
}

impl UnivariateDensity for DensityEstimate {
    fn log_density(&self, x: f64) -> f64 {
        self.inner().log_density(x)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        self.inner().sample(rng)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.inner().cdf(x)
    }

    fn support(&self) -> (f64, f64) {
        self.inner().support()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DensityKind {
    Normal,
    Kde,
    #[default]
    Grid,
}

impl std::fmt::Display for DensityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DensityKind::Normal => "normal",
            DensityKind::Kde => "kde",
            DensityKind::Grid => "grid",
        })
    }
}

impl std::str::FromStr for DensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DensityKind::Normal),
            "kde" => Ok(DensityKind::Kde),
            "grid" => Ok(DensityKind::Grid),
            other => Err(Error::Config(format!("unknown density kind `{other}`"))),
        }
    }
}

/// Fits an estimate of the requested kind to weighted samples.
pub fn estimate(
    kind: DensityKind,
    samples: &[f64],
    weights: &[f64],
    bins: usize,
    bandwidth: Option<f64>,
) -> Result<DensityEstimate> {
    Ok(match kind {
        DensityKind::Normal => DensityEstimate::Normal(fit_normal_weighted(samples, weights)?),
        DensityKind::Kde => DensityEstimate::Kde(kde_fit(samples, weights, bandwidth)?),
        DensityKind::Grid => DensityEstimate::Grid(GridDensity::from_samples(
            samples, weights, bins, bandwidth,
        )?),
    })
}
