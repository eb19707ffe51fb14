//! Running replications of a configured experiment and writing results.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{Algorithm, ExperimentConfig, ModelKind};
use crate::baselines::{
    bootstrap_pf, ffbsi, ffbsm, ffbsm_moments, rts_smoother, FilterOutput, GaussianBelief,
};
use crate::density::{
    estimate, mixture_filter_estimate, mixture_smoother_estimate, DensityEstimate, GridDensity,
};
use crate::metrics::{self, GaussianReference, MetricsReport, MetricsRow, ReferenceCdf};
use crate::model::{
    linear_gaussian_model, nonlinear_benchmark_model, simulate, Observations, StateSpaceModel,
};
use crate::oracle::{solve_auto, OracleSolution};
use crate::rng::{derive_seed, stream};
use crate::tps::{
    diagnostics_csv, local_leaf, tps_run, NodeDiagnostic, TargetFamily, TpsOptions, Variant,
    WeightedPath,
};
use crate::tree::build_tree;
use crate::{Error, Result};

/// Stream tags below a replication seed.
const FILTER_STREAM: u64 = 1;
const SMOOTHER_PRERUN_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;

pub fn build_model(config: &ExperimentConfig) -> Result<Box<dyn StateSpaceModel>> {
    Ok(match config.model {
        ModelKind::Linear => Box::new(linear_gaussian_model(config.horizon)),
        ModelKind::Nonlinear => Box::new(nonlinear_benchmark_model(
            config.horizon,
            config.tau,
            config.sigma,
        )?),
    })
}

/// Reference smoothing marginals.
#[derive(Clone, Debug)]
pub enum Truth {
    Gaussian(Vec<GaussianBelief>),
    Grid(OracleSolution),
}

impl Truth {
    pub fn means(&self) -> Vec<f64> {
        match self {
            Truth::Gaussian(b) => b.iter().map(|b| b.mean).collect(),
            Truth::Grid(s) => s.smoothing_means().to_vec(),
        }
    }

    pub fn vars(&self) -> Vec<f64> {
        match self {
            Truth::Gaussian(b) => b.iter().map(|b| b.var).collect(),
            Truth::Grid(s) => s.smoothing_vars().to_vec(),
        }
    }
}

impl ReferenceCdf for Truth {
    fn steps(&self) -> usize {
        match self {
            Truth::Gaussian(b) => b.len(),
            Truth::Grid(s) => s.steps(),
        }
    }

    fn cdf(&self, t: usize, x: f64) -> f64 {
        match self {
            Truth::Gaussian(b) => GaussianReference(b).cdf(t, x),
            Truth::Grid(s) => s.smoothing_cdf(t, x),
        }
    }
}

/// The fixed observation sequence of an experiment and its ground truth.
pub struct Problem {
    pub model: Box<dyn StateSpaceModel>,
    pub states: Vec<f64>,
    pub obs: Observations,
    pub truth: Truth,
}

impl Problem {
    /// Simulates from the observation seed and computes the truth: RTS for
    /// the linear model, the grid oracle otherwise.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let model = build_model(config)?;
        let (states, obs) = simulate(model.as_ref(), &mut stream(config.obs_seed, &[]));
        let truth = match config.model {
            ModelKind::Linear => Truth::Gaussian(rts_smoother(model.as_ref(), &obs)?),
            ModelKind::Nonlinear => Truth::Grid(solve_auto(
                model.as_ref(),
                &obs,
                config.oracle_bins,
                config.oracle_range(),
            )?),
        };
        Ok(Problem {
            model,
            states,
            obs,
            truth,
        })
    }

    /// True when `other` would simulate the same problem.
    pub fn matches(config: &ExperimentConfig, other: &ExperimentConfig) -> bool {
        let key = |c: &ExperimentConfig| {
            (
                c.model,
                c.horizon,
                c.tau.to_bits(),
                c.sigma.to_bits(),
                c.obs_seed,
                c.oracle_bins,
                c.oracle_range(),
            )
        };
        key(config) == key(other)
    }
}

pub fn replication_seed(config: &ExperimentConfig, replication: usize) -> u64 {
    derive_seed(config.seed, &[replication as u64])
}

/// Filter-based density estimates of every index, from a bootstrap filter's
/// weighted particles.
pub fn filter_estimates(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<DensityEstimate>> {
    let filter = bootstrap_pf(
        model,
        obs,
        config.filter_size(),
        false,
        config.resampling,
        &mut stream(seed, &[FILTER_STREAM]),
    )?;
    filter
        .particles
        .iter()
        .zip(&filter.weights)
        .map(|(x, w)| estimate(config.density, x, w, config.grid_bins, config.bandwidth))
        .collect()
}

fn grids(estimates: Vec<DensityEstimate>) -> Vec<GridDensity> {
    estimates
        .into_iter()
        .map(|e| match e {
            DensityEstimate::Grid(g) => g,
            _ => unreachable!("grid estimates requested"),
        })
        .collect()
}

/// Grid estimates of the weighted marginals of `paths`.
pub fn marginal_grids(paths: &WeightedPath, config: &ExperimentConfig) -> Result<Vec<GridDensity>> {
    let w = paths.normalized_weights()?;
    paths
        .columns()
        .iter()
        .map(|c| GridDensity::from_samples(c, &w, config.grid_bins, config.bandwidth))
        .collect()
}

/// Builds the leaf targets of the configured tree smoother for a replication.
///
/// `tps-es` runs a bootstrap filter of size `n`, a filter-target tree smoother
/// of size `nprime` on its grids, and mixes the resulting smoother grids with
/// the filter grids.
pub fn target_family(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<TargetFamily> {
    let Algorithm::Tps(variant) = config.algorithm else {
        return Err(Error::InvalidArgument(format!(
            "{} is not a tree smoother",
            config.algorithm
        )));
    };
    match variant {
        Variant::Local => Ok(TargetFamily::local()),
        Variant::EstimatedFilter => Ok(TargetFamily::estimated_filter(filter_estimates(
            model, obs, config, seed,
        )?)),
        Variant::EstimatedSmoother => {
            let filter = grids(filter_estimates(model, obs, config, seed)?);
            let prerun_family = TargetFamily::estimated_filter(
                filter.iter().cloned().map(DensityEstimate::Grid).collect(),
            );
            let prerun = tps_run(
                model,
                obs,
                &prerun_family,
                tps_options(config, config.nprime.unwrap()),
                derive_seed(seed, &[SMOOTHER_PRERUN_STREAM]),
            )?;
            let smoother = marginal_grids(&prerun.paths, config)?;
            let mut f_mix = Vec::with_capacity(filter.len());
            let mut s_mix = Vec::with_capacity(filter.len());
            for (gf, gs) in filter.iter().zip(&smoother) {
                f_mix.push(DensityEstimate::Mixture(mixture_filter_estimate(
                    gf,
                    gs,
                    config.alpha_f,
                )?));
                s_mix.push(DensityEstimate::Mixture(mixture_smoother_estimate(
                    gs,
                    gf,
                    config.alpha_s,
                )?));
            }
            Ok(TargetFamily::estimated_smoother(f_mix, s_mix))
        }
    }
}

fn tps_options(config: &ExperimentConfig, particles: usize) -> TpsOptions {
    let mut options = TpsOptions::new(particles);
    options.scheme = config.resampling;
    options.ess_threshold = config.ess_threshold;
    options
}

/// Smoothing estimate of one replication.
pub struct Estimate {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// Marginal samples and their weights per index.
    samples: Samples,
    pub diagnostics: Vec<NodeDiagnostic>,
    pub log_evidence: Option<f64>,
}

enum Samples {
    Paths(WeightedPath),
    Marginal(FilterOutput, Vec<Vec<f64>>),
    Exact,
}

impl Estimate {
    pub fn ks_sum(&self, truth: &Truth) -> Result<f64> {
        match &self.samples {
            Samples::Paths(p) => metrics::ks_sum(p.columns(), &p.normalized_weights()?, truth),
            Samples::Marginal(f, w) => metrics::ks_sum_per_step(&f.particles, w, truth),
            Samples::Exact => Ok(0.0),
        }
    }

    pub fn paths(&self) -> Option<&WeightedPath> {
        match &self.samples {
            Samples::Paths(p) => Some(p),
            _ => None,
        }
    }
}

/// Runs the configured algorithm once with replication seed `seed`.
pub fn estimate_smoothing(
    config: &ExperimentConfig,
    problem: &Problem,
    seed: u64,
) -> Result<Estimate> {
    let model = problem.model.as_ref();
    let obs = &problem.obs;
    let from_paths = |paths: WeightedPath, diagnostics, log_evidence| -> Result<Estimate> {
        let (means, vars) = paths.marginal_moments()?;
        Ok(Estimate {
            means,
            vars,
            samples: Samples::Paths(paths),
            diagnostics,
            log_evidence,
        })
    };
    match config.algorithm {
        Algorithm::Tps(_) => {
            let family = target_family(model, obs, config, seed)?;
            let out = tps_run(
                model,
                obs,
                &family,
                tps_options(config, config.particles),
                derive_seed(seed, &[TARGET_STREAM]),
            )?;
            from_paths(out.paths, out.diagnostics, Some(out.log_evidence))
        }
        Algorithm::Bpf => {
            let filter = bootstrap_pf(
                model,
                obs,
                config.particles,
                true,
                config.resampling,
                &mut stream(seed, &[FILTER_STREAM]),
            )?;
            let ll = filter.log_likelihood;
            from_paths(filter.smoothed_paths()?, Vec::new(), Some(ll))
        }
        Algorithm::Ffbsm => {
            let filter = bootstrap_pf(
                model,
                obs,
                config.filter_size(),
                false,
                config.resampling,
                &mut stream(seed, &[FILTER_STREAM]),
            )?;
            let weights = ffbsm(&filter, model)?;
            let (means, vars) = ffbsm_moments(&filter, &weights);
            let ll = filter.log_likelihood;
            Ok(Estimate {
                means,
                vars,
                samples: Samples::Marginal(filter, weights),
                diagnostics: Vec::new(),
                log_evidence: Some(ll),
            })
        }
        Algorithm::Ffbsi => {
            let filter = bootstrap_pf(
                model,
                obs,
                config.filter_size(),
                false,
                config.resampling,
                &mut stream(seed, &[FILTER_STREAM]),
            )?;
            let paths = ffbsi(
                &filter,
                model,
                config.particles,
                &mut stream(seed, &[TARGET_STREAM]),
            )?;
            from_paths(paths, Vec::new(), Some(filter.log_likelihood))
        }
        Algorithm::Rts => {
            let b = rts_smoother(model, obs)?;
            Ok(Estimate {
                means: b.iter().map(|b| b.mean).collect(),
                vars: b.iter().map(|b| b.var).collect(),
                samples: Samples::Exact,
                diagnostics: Vec::new(),
                log_evidence: None,
            })
        }
    }
}

pub struct ReplicationOutput {
    pub row: MetricsRow,
    pub diagnostics: Vec<NodeDiagnostic>,
}

pub fn run_replication(
    config: &ExperimentConfig,
    problem: &Problem,
    replication: usize,
) -> Result<ReplicationOutput> {
    let seed = replication_seed(config, replication);
    let started = Instant::now();
    let est = estimate_smoothing(config, problem, seed).map_err(|e| Error::Replication {
        replication,
        source: Box::new(e),
    })?;
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let msem = metrics::msem(&est.means, &problem.truth.means())?;
    let msev = match config.model {
        ModelKind::Linear => Some(metrics::msev(&est.vars, &problem.truth.vars())?),
        ModelKind::Nonlinear => None,
    };
    let ks_sum = est.ks_sum(&problem.truth)?;
    let uses_filter = matches!(
        config.algorithm,
        Algorithm::Ffbsm
            | Algorithm::Ffbsi
            | Algorithm::Tps(Variant::EstimatedFilter)
            | Algorithm::Tps(Variant::EstimatedSmoother)
    );
    let row = MetricsRow {
        replication,
        algorithm: config.label(),
        n_target: config.particles,
        n_filter: uses_filter.then(|| config.filter_size()),
        n_prime: config.nprime,
        msem,
        msev,
        ks_sum,
        runtime_ms,
        seed,
    };
    Ok(ReplicationOutput {
        row,
        diagnostics: est.diagnostics,
    })
}

/// Runs every replication against a prepared problem. Replications run in
/// parallel; rows come back in replication order. Also returns the first
/// replication's per-node diagnostics.
pub fn run_with_problem(
    config: &ExperimentConfig,
    problem: &Problem,
) -> Result<(MetricsReport, Vec<NodeDiagnostic>)> {
    config.validate()?;
    let outputs: Vec<ReplicationOutput> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, problem, r))
        .collect::<Result<_>>()?;
    let mut outputs = outputs.into_iter();
    let first = outputs.next().expect("at least one replication");
    let diagnostics = first.diagnostics;
    let rows = std::iter::once(first.row)
        .chain(outputs.map(|o| o.row))
        .collect();
    Ok((MetricsReport { rows }, diagnostics))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let problem = Problem::prepare(config)?;
    Ok(run_with_problem(config, &problem)?.0)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// CDFs of the oracle smoothing and filtering marginals and of the local
/// leaf target at index `t`, on 1001 points spanning all three supports.
pub fn dump_cdf_comparison(config: &ExperimentConfig, t: usize) -> Result<String> {
    if config.model != ModelKind::Nonlinear {
        return Err(Error::UnsupportedModel(
            "CDF comparison is defined for the nonlinear model only".into(),
        ));
    }
    if t > config.horizon {
        return Err(Error::InvalidArgument(format!(
            "index {t} is beyond the horizon {}",
            config.horizon
        )));
    }
    let problem = Problem::prepare(config)?;
    cdf_comparison_for(&problem, t)
}

pub fn cdf_comparison_for(problem: &Problem, t: usize) -> Result<String> {
    let Truth::Grid(oracle) = &problem.truth else {
        return Err(Error::UnsupportedModel(
            "CDF comparison needs a grid oracle".into(),
        ));
    };
    if t > oracle.horizon() {
        return Err(Error::InvalidArgument(format!(
            "index {t} is beyond the horizon {}",
            oracle.horizon()
        )));
    }
    let (leaf, _) = local_leaf(
        problem.model.as_ref(),
        &problem.obs,
        t,
        crate::tps::DEFAULT_LEAF_BINS,
    )?;
    let crate::tps::LocalLeaf::Grid(leaf_grid) = &leaf else {
        return Err(Error::UnsupportedModel(
            "CDF comparison needs continuous states".into(),
        ));
    };
    let grid = oracle.grid();
    let half = (grid[1] - grid[0]) / 2.0;
    let occupied = |p: &[f64]| {
        let first = p.iter().position(|&v| v > 1e-15).unwrap_or(0);
        let last = p.iter().rposition(|&v| v > 1e-15).unwrap_or(p.len() - 1);
        (grid[first] - half, grid[last] + half)
    };
    let (s_lo, s_hi) = occupied(oracle.smoothing(t));
    let (f_lo, f_hi) = occupied(oracle.filtering(t));
    let (l_lo, l_hi) = crate::density::UnivariateDensity::support(leaf_grid);
    let lo = s_lo.min(f_lo).min(l_lo);
    let hi = s_hi.max(f_hi).max(l_hi);
    let mut out =
        String::from("x\tcdf_smoothing_oracle\tcdf_filtering_oracle\tcdf_initial_sampling\n");
    for k in 0..=1000 {
        let x = if k == 1000 {
            hi
        } else {
            lo + (hi - lo) * k as f64 / 1000.0
        };
        out.push_str(&format!(
            "{x}\t{}\t{}\t{}\n",
            oracle.smoothing_cdf(t, x),
            oracle.filtering_cdf(t, x),
            leaf.cdf(x)
        ));
    }
    Ok(out)
}

/// Optional outputs of [`run_to_dir`].
#[derive(Clone, Debug, Default)]
pub struct RunRequest {
    pub diagnostics: bool,
    pub dump_tree: bool,
    pub dump_cdf: Option<usize>,
    pub dump_grid: Option<usize>,
    pub dump_oracle: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub diagnostics_csv: Option<PathBuf>,
    pub tree_txt: Option<PathBuf>,
    pub cdf_tsv: Option<PathBuf>,
    pub grid_tsv: Option<PathBuf>,
    pub oracle_tsv: Option<PathBuf>,
}

/// Runs the experiment and writes `metrics.csv` plus any requested dumps
/// into `out_dir`.
pub fn run_to_dir(
    config: &ExperimentConfig,
    out_dir: &Path,
    request: &RunRequest,
) -> Result<(MetricsReport, RunArtifacts)> {
    config.validate()?;
    if let Some(t) = request
        .dump_cdf
        .into_iter()
        .chain(request.dump_grid)
        .find(|&t| t > config.horizon)
    {
        return Err(Error::Config(format!(
            "dump index {t} is beyond the horizon {}",
            config.horizon
        )));
    }
    if request.dump_cdf.is_some() && config.model != ModelKind::Nonlinear {
        return Err(Error::Config("--dump-cdf needs the nonlinear model".into()));
    }
    let problem = Problem::prepare(config)?;
    let (report, diagnostics) = run_with_problem(config, &problem)?;
    let mut artifacts = RunArtifacts {
        metrics_csv: out_dir.join("metrics.csv"),
        ..Default::default()
    };
    write_atomic(&artifacts.metrics_csv, &report.to_csv())?;

    if request.diagnostics {
        let path = out_dir.join("diagnostics.csv");
        write_atomic(&path, &diagnostics_csv(&diagnostics))?;
        artifacts.diagnostics_csv = Some(path);
    }
    if request.dump_tree {
        let path = out_dir.join("tree.txt");
        write_atomic(&path, &build_tree(config.horizon).dump())?;
        artifacts.tree_txt = Some(path);
    }
    if let Some(t) = request.dump_cdf {
        let path = out_dir.join(format!("cdf_t{t}.tsv"));
        write_atomic(&path, &cdf_comparison_for(&problem, t)?)?;
        artifacts.cdf_tsv = Some(path);
    }
    if let Some(t) = request.dump_grid {
        let mut grid_config = config.clone();
        grid_config.density = crate::density::DensityKind::Grid;
        let est = filter_estimates(
            problem.model.as_ref(),
            &problem.obs,
            &grid_config,
            replication_seed(config, 0),
        )?;
        let path = out_dir.join(format!("grid_t{t}.tsv"));
        let DensityEstimate::Grid(g) = &est[t] else {
            unreachable!()
        };
        write_atomic(&path, &g.to_tsv())?;
        artifacts.grid_tsv = Some(path);
    }
    if request.dump_oracle {
        let path = out_dir.join("oracle.tsv");
        let text = match &problem.truth {
            Truth::Grid(s) => s.to_tsv(),
            Truth::Gaussian(b) => {
                let mut s = String::from("t\tmean\tvar\n");
                for (t, b) in b.iter().enumerate() {
                    s.push_str(&format!("{t}\t{}\t{}\n", b.mean, b.var));
                }
                s
            }
        };
        write_atomic(&path, &text)?;
        artifacts.oracle_tsv = Some(path);
    }
    Ok((report, artifacts))
}

/// Drops the `runtime_ms` column, for comparing runs.
pub fn strip_runtime(csv: &str) -> String {
    let column = metrics::CSV_HEADER
        .split(',')
        .position(|c| c == "runtime_ms")
        .unwrap();
    csv.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != column)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
