//! Plain `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is also how command-line overrides are
//! applied.

use std::fmt;
use std::str::FromStr;

use crate::density::{DensityKind, DEFAULT_GRID_BINS};
use crate::oracle::{DEFAULT_LINEAR_RANGE, DEFAULT_NONLINEAR_RANGE, DEFAULT_ORACLE_BINS};
use crate::resample::Scheme;
use crate::tps::Variant;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Nonlinear,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Nonlinear => "nonlinear",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "nonlinear" => Ok(ModelKind::Nonlinear),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Tps(Variant),
    Bpf,
    Ffbsm,
    Ffbsi,
    Rts,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Tps(v) => write!(f, "{v}"),
            Algorithm::Bpf => f.write_str("bpf"),
            Algorithm::Ffbsm => f.write_str("ffbsm"),
            Algorithm::Ffbsi => f.write_str("ffbsi"),
            Algorithm::Rts => f.write_str("rts"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpf" => Ok(Algorithm::Bpf),
            "ffbsm" => Ok(Algorithm::Ffbsm),
            "ffbsi" => Ok(Algorithm::Ffbsi),
            "rts" => Ok(Algorithm::Rts),
            other => other
                .parse::<Variant>()
                .map(Algorithm::Tps)
                .map_err(|_| Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub horizon: usize,
    pub tau: f64,
    pub sigma: f64,
    pub algorithm: Algorithm,
    /// Target sample size `N`.
    pub particles: usize,
    /// Filter sample size `n` feeding density estimates or backward passes;
    /// defaults to `N`.
    pub filter_particles: Option<usize>,
    /// Samples of the intermediate filter-target run feeding smoother
    /// estimates (`tps-es` only).
    pub nprime: Option<usize>,
    pub alpha_f: f64,
    pub alpha_s: f64,
    pub resampling: Scheme,
    pub density: DensityKind,
    pub grid_bins: usize,
    pub bandwidth: Option<f64>,
    pub oracle_bins: usize,
    pub oracle_range: Option<(f64, f64)>,
    pub replications: usize,
    pub seed: u64,
    pub obs_seed: u64,
    pub ess_threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Linear,
            horizon: 127,
            tau: 1.0,
            sigma: 1.0,
            algorithm: Algorithm::Tps(Variant::EstimatedFilter),
            particles: 1000,
            filter_particles: None,
            nprime: None,
            alpha_f: 0.95,
            alpha_s: 0.95,
            resampling: Scheme::Systematic,
            density: DensityKind::Grid,
            grid_bins: DEFAULT_GRID_BINS,
            bandwidth: None,
            oracle_bins: DEFAULT_ORACLE_BINS,
            oracle_range: None,
            replications: 20,
            seed: 1,
            obs_seed: 20_200_101,
            ess_threshold: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_range(value: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("invalid oracle_range `{value}`; expected `lo,hi`"));
    let (lo, hi) = value.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value == "NA" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Applies assignments without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = parse(key, value)?,
            "T" | "horizon" => self.horizon = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "algorithm" => self.algorithm = value.parse()?,
            "particles" | "N" => self.particles = parse(key, value)?,
            "filter_particles" | "n" => self.filter_particles = optional(key, value)?,
            "nprime" => self.nprime = optional(key, value)?,
            "alpha_f" => self.alpha_f = parse(key, value)?,
            "alpha_s" => self.alpha_s = parse(key, value)?,
            "resampling" => self.resampling = value.parse()?,
            "density" => self.density = value.parse()?,
            "grid_bins" => self.grid_bins = parse(key, value)?,
            "bandwidth" => self.bandwidth = optional(key, value)?,
            "oracle_bins" => self.oracle_bins = parse(key, value)?,
            "oracle_range" => self.oracle_range = Some(parse_range(value)?),
            "replications" | "M" => self.replications = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "obs_seed" => self.obs_seed = parse(key, value)?,
            "ess_threshold" => self.ess_threshold = optional(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.particles < 1 || self.replications < 1 || self.filter_particles == Some(0) {
            return fail("particles, filter_particles and replications must be at least 1".into());
        }
        let is_es = self.algorithm == Algorithm::Tps(Variant::EstimatedSmoother);
        match (is_es, self.nprime) {
            (true, None) => return fail("nprime is required for tps-es".into()),
            (false, Some(_)) => {
                return fail(format!(
                    "nprime only applies to tps-es, not {}",
                    self.algorithm
                ))
            }
            (true, Some(0)) => return fail("nprime must be at least 1".into()),
            _ => {}
        }
        if is_es && self.density != DensityKind::Grid {
            return fail("tps-es needs grid density estimates".into());
        }
        if self.model == ModelKind::Nonlinear && !(self.tau > 0.0 && self.sigma > 0.0) {
            return fail("tau and sigma must be positive".into());
        }
        if !(self.alpha_f > 0.0 && self.alpha_f < 1.0 && self.alpha_s > 0.0 && self.alpha_s < 1.0) {
            return fail("alpha_f and alpha_s must lie in (0, 1)".into());
        }
        if self.grid_bins < 8 || self.oracle_bins < 16 {
            return fail("grid_bins must be at least 8 and oracle_bins at least 16".into());
        }
        if let Some((lo, hi)) = self.oracle_range {
            if !(lo < hi) {
                return fail(format!("oracle_range needs lo < hi (got {lo},{hi})"));
            }
        }
        if matches!(self.bandwidth, Some(h) if !(h > 0.0)) {
            return fail("bandwidth must be positive".into());
        }
        if matches!(self.ess_threshold, Some(e) if !(e > 0.0 && e <= 1.0)) {
            return fail("ess_threshold must lie in (0, 1]".into());
        }
        if self.algorithm == Algorithm::Rts && self.model != ModelKind::Linear {
            return fail("rts only applies to the linear model".into());
        }
        if matches!(
            self.algorithm,
            Algorithm::Bpf | Algorithm::Ffbsm | Algorithm::Ffbsi
        ) && self.filter_particles.unwrap_or(self.particles) < 2
        {
            return fail("particle filters need at least 2 particles".into());
        }
        Ok(())
    }

    pub fn filter_size(&self) -> usize {
        self.filter_particles.unwrap_or(self.particles)
    }

    pub fn oracle_range(&self) -> (f64, f64) {
        self.oracle_range.unwrap_or(match self.model {
            ModelKind::Linear => DEFAULT_LINEAR_RANGE,
            ModelKind::Nonlinear => DEFAULT_NONLINEAR_RANGE,
        })
    }

    /// Name written to the `algorithm` column.
    pub fn label(&self) -> String {
        match (self.algorithm, self.density) {
            (Algorithm::Tps(Variant::EstimatedFilter), DensityKind::Normal) => "tps-n".into(),
            (Algorithm::Tps(Variant::EstimatedFilter), DensityKind::Grid) => "tps-efp".into(),
            (Algorithm::Tps(Variant::EstimatedFilter), DensityKind::Kde) => "tps-ef-kde".into(),
            (Algorithm::Tps(Variant::EstimatedSmoother), _) => "tps-esp".into(),
            (other, _) => other.to_string(),
        }
    }

    /// Renders every key, suitable for reparsing.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut lines = vec![
            format!("model = {}", self.model),
            format!("T = {}", self.horizon),
            format!("tau = {}", self.tau),
            format!("sigma = {}", self.sigma),
            format!("algorithm = {}", self.algorithm),
            format!("particles = {}", self.particles),
            format!(
                "filter_particles = {}",
                opt(self.filter_particles.map(|v| v.to_string()))
            ),
            format!("nprime = {}", opt(self.nprime.map(|v| v.to_string()))),
            format!("alpha_f = {}", self.alpha_f),
            format!("alpha_s = {}", self.alpha_s),
            format!("resampling = {}", self.resampling),
            format!("density = {}", self.density),
            format!("grid_bins = {}", self.grid_bins),
            format!("bandwidth = {}", opt(self.bandwidth.map(|v| v.to_string()))),
            format!("oracle_bins = {}", self.oracle_bins),
        ];
        if let Some((lo, hi)) = self.oracle_range {
            lines.push(format!("oracle_range = {lo},{hi}"));
        }
        lines.extend([
            format!("replications = {}", self.replications),
            format!("seed = {}", self.seed),
            format!("obs_seed = {}", self.obs_seed),
            format!(
                "ess_threshold = {}",
                opt(self.ess_threshold.map(|v| v.to_string()))
            ),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# nonlinear run\nmodel = nonlinear\nT=511\n\ntau = 5\nalgorithm = tps-es\nnprime = 20\nparticles = 10\nparticles = 12\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::Nonlinear);
        assert_eq!(
            (cfg.horizon, cfg.tau, cfg.particles, cfg.nprime),
            (511, 5.0, 12, Some(20))
        );
        assert_eq!(cfg.label(), "tps-esp");
        assert_eq!(cfg.oracle_range(), DEFAULT_NONLINEAR_RANGE);
    }

    #[test]
    fn nprime_required_iff_es() {
        assert!(ExperimentConfig::parse("algorithm = tps-es\n")
            .unwrap_err()
            .is_config());
        assert!(ExperimentConfig::parse("algorithm = tps-ef\nnprime = 5\n").is_err());
        assert!(
            ExperimentConfig::parse("algorithm = tps-es\nnprime = 5\ndensity = normal\n").is_err()
        );
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "particles = -1",
            "bogus = 1",
            "no equals sign",
            "model = cubic",
            "oracle_range = 3,1",
            "alpha_f = 1",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("oracle_range", "-20, 20").unwrap();
        cfg.set("bandwidth", "0.25").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
