//! Tree-based particle smoothing.
//!
//! Every tree node `[j, l]` holds `N` particle paths for `x_{j:l}`. Leaves are
//! sampled from a per-index target; internal nodes pair the i-th left path
//! with the i-th right path, reweight, and resample. Three target families are
//! supported:
//!
//! * `L`: leaf `j` targets `p(y_j | x_j)` (times `p0(x_0)` at `j = 0`).
//! * `EF`: leaf `j` targets an estimate of the filtering marginal at `j`.
//! * `ES`: leaf `j` targets an estimate of the smoothing marginal at `j`.
//!
//! At the root the `EF` and `ES` intermediate targets still differ from the
//! joint smoothing density at the boundary indices, so the root merge carries
//! an extra correction that makes the final target exact for all families.

use std::fmt;
use std::str::FromStr;

use crate::density::{DensityEstimate, DiscretePmf, GridDensity, UnivariateDensity};
use crate::model::{Observations, StateSpaceModel};
use crate::resample::{self, log_sum_exp, LogWeights, Scheme};
use crate::rng::stream;
use crate::tree::{build_tree, NodeId, Tree};
use crate::{Error, Result};

/// Number of equally spaced bins used to discretise a local leaf target.
pub const DEFAULT_LEAF_BINS: usize = 1024;
const COARSE_POINTS: usize = 8001;
/// Log-density drop below the maximum that still counts as high density.
const LEAF_LOG_DROP: f64 = 40.0;
const LEAF_BOUNDARY_TOLERANCE: f64 = 1e-3;
/// Subtrees spanning fewer indices are evaluated on the calling thread.
const PARALLEL_MIN_SPAN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Local,
    EstimatedFilter,
    EstimatedSmoother,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Local => "tps-l",
            Variant::EstimatedFilter => "tps-ef",
            Variant::EstimatedSmoother => "tps-es",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tps-l" => Ok(Variant::Local),
            "tps-ef" => Ok(Variant::EstimatedFilter),
            "tps-es" => Ok(Variant::EstimatedSmoother),
            other => Err(Error::Config(format!(
                "unknown tree smoother variant `{other}`"
            ))),
        }
    }
}

/// Variant plus the per-index density estimates its leaves need.
#[derive(Clone, Debug)]
pub struct TargetFamily {
    variant: Variant,
    filter: Vec<DensityEstimate>,
    smoother: Vec<DensityEstimate>,
}

impl TargetFamily {
    pub fn local() -> Self {
        TargetFamily {
            variant: Variant::Local,
            filter: Vec::new(),
            smoother: Vec::new(),
        }
    }

    pub fn estimated_filter(filter: Vec<DensityEstimate>) -> Self {
        TargetFamily {
            variant: Variant::EstimatedFilter,
            filter,
            smoother: Vec::new(),
        }
    }

    /// The two sequences must share supports index by index for the merge
    /// ratios to stay finite; mixture estimates guarantee that.
    pub fn estimated_smoother(
        filter: Vec<DensityEstimate>,
        smoother: Vec<DensityEstimate>,
    ) -> Self {
        TargetFamily {
            variant: Variant::EstimatedSmoother,
            filter,
            smoother,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn filter(&self) -> &[DensityEstimate] {
        &self.filter
    }

    pub fn smoother(&self) -> &[DensityEstimate] {
        &self.smoother
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        let need = horizon + 1;
        let check = |v: &[DensityEstimate], what: &str| {
            if v.len() != need {
                return Err(Error::InvalidArgument(format!(
                    "{} needs {need} {what} estimates, got {}",
                    self.variant,
                    v.len()
                )));
            }
            Ok(())
        };
        match self.variant {
            Variant::Local => Ok(()),
            Variant::EstimatedFilter => check(&self.filter, "filtering"),
            Variant::EstimatedSmoother => {
                check(&self.filter, "filtering")?;
                check(&self.smoother, "smoothing")
            }
        }
    }
}

/// `N` particle paths over `[start, start + columns.len() - 1]`, stored one
/// column per time index.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPath {
    start: usize,
    columns: Vec<Vec<f64>>,
    log_weights: LogWeights,
}

impl WeightedPath {
    pub fn new(start: usize, columns: Vec<Vec<f64>>, log_weights: LogWeights) -> Result<Self> {
        let n = log_weights.len();
        if columns.is_empty() || n == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument(
                "path columns must be non-empty and match the weight count".into(),
            ));
        }
        Ok(WeightedPath {
            start,
            columns,
            log_weights,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.start + self.columns.len() - 1
    }

    pub fn num_particles(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_weights(&self) -> &LogWeights {
        &self.log_weights
    }

    /// Particle values of `X_t`.
    pub fn column(&self, t: usize) -> &[f64] {
        &self.columns[t - self.start]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn path(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        Ok(self.log_weights.normalize()?.weights)
    }

    /// Self-normalised means and variances of every index.
    pub fn marginal_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.normalized_weights()?;
        Ok(self
            .columns
            .iter()
            .map(|c| {
                let mean: f64 = c.iter().zip(&w).map(|(x, w)| x * w).sum();
                let var: f64 = c
                    .iter()
                    .zip(&w)
                    .map(|(x, w)| w * (x - mean) * (x - mean))
                    .sum();
                (mean, var)
            })
            .unzip())
    }

    fn gather(&self, indices: &[usize]) -> WeightedPath {
        let columns = self
            .columns
            .iter()
            .map(|c| indices.iter().map(|&i| c[i]).collect())
            .collect();
        WeightedPath {
            start: self.start,
            columns,
            log_weights: LogWeights::uniform(indices.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeDiagnostic {
    pub start: usize,
    pub end: usize,
    pub ess_before_resample: f64,
    pub killed: usize,
    pub resampled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TpsOptions {
    pub particles: usize,
    pub scheme: Scheme,
    /// Resample only when ESS falls below this fraction of `N`; `None`
    /// resamples at every merge.
    pub ess_threshold: Option<f64>,
    pub leaf_bins: usize,
}

impl TpsOptions {
    pub fn new(particles: usize) -> Self {
        TpsOptions {
            particles,
            scheme: Scheme::default(),
            ess_threshold: None,
            leaf_bins: DEFAULT_LEAF_BINS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TpsOutput {
    pub paths: WeightedPath,
    /// Estimate of `log p(y_{0:T})`.
    pub log_evidence: f64,
    /// One entry per tree node in post-order.
    pub diagnostics: Vec<NodeDiagnostic>,
}

/// Discretisation of a local leaf target.
#[derive(Clone, Debug)]
pub enum LocalLeaf {
    Grid(GridDensity),
    Discrete(DiscretePmf),
}

impl LocalLeaf {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        match self {
            LocalLeaf::Grid(g) => g.sample(rng),
            LocalLeaf::Discrete(p) => p.sample(rng),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            LocalLeaf::Grid(g) => g.cdf(x),
            LocalLeaf::Discrete(p) => p.cdf(x),
        }
    }
}

/// Unnormalised log-density of the local leaf target at index `j`.
pub fn local_leaf_log_density(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    j: usize,
    x: f64,
) -> f64 {
    let emit = model.log_emission(j, x, obs.get(j));
    if j == 0 {
        model.log_prior(x) + emit
    } else {
        emit
    }
}

/// Discretises the local leaf target at `j` and returns it with the log of
/// its normalising constant.
///
/// Continuous states are scanned over the model's search window to locate
/// the region within `LEAF_LOG_DROP` of the maximum, which is then split into
/// `bins` cells evaluated at their centres.
pub fn local_leaf(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    j: usize,
    bins: usize,
) -> Result<(LocalLeaf, f64)> {
    let f = |x: f64| local_leaf_log_density(model, obs, j, x);
    if let Some(states) = model.finite_states() {
        let logs: Vec<f64> = states.iter().map(|&s| f(s)).collect();
        let log_z = log_sum_exp(&logs);
        if log_z == f64::NEG_INFINITY {
            return Err(Error::ImpossibleObservation { step: j });
        }
        let probs = logs.iter().map(|l| (l - log_z).exp()).collect();
        return Ok((
            LocalLeaf::Discrete(DiscretePmf::new(states.to_vec(), probs)?),
            log_z,
        ));
    }

    let (mut lo, mut hi) = model.search_window();
    for _ in 0..4 {
        let step = (hi - lo) / (COARSE_POINTS - 1) as f64;
        let values: Vec<f64> = (0..COARSE_POINTS)
            .map(|i| f(lo + i as f64 * step))
            .collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::ImpossibleObservation { step: j });
        }
        let first = values
            .iter()
            .position(|&v| v >= max - LEAF_LOG_DROP)
            .unwrap();
        let last = values
            .iter()
            .rposition(|&v| v >= max - LEAF_LOG_DROP)
            .unwrap();
        let (a, b) = (first.saturating_sub(1), (last + 1).min(COARSE_POINTS - 1));
        let (new_lo, new_hi) = (lo + a as f64 * step, lo + b as f64 * step);
        let resolved = last - first >= 64;
        lo = new_lo;
        hi = new_hi;
        if resolved {
            break;
        }
    }

    let delta = (hi - lo) / bins as f64;
    let logs: Vec<f64> = (0..bins)
        .map(|i| f(lo + (i as f64 + 0.5) * delta))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let boundary = (raw[0] + raw[bins - 1]) / total;
    if boundary > LEAF_BOUNDARY_TOLERANCE {
        return Err(Error::LeafNotIntegrable {
            index: j,
            boundary_mass: boundary,
        });
    }
    let log_z = max + (total * delta).ln();
    let grid = GridDensity::new(lo + 0.5 * delta, delta, raw)?;
    Ok((LocalLeaf::Grid(grid), log_z))
}

/// Log-increment applied when the left child ending at `k - 1` meets the
/// right child starting at `k`.
pub fn merge_log_weight(
    family: &TargetFamily,
    model: &dyn StateSpaceModel,
    obs: &Observations,
    k: usize,
    x_left_last: f64,
    x_right_first: f64,
) -> f64 {
    let trans = model.log_transition(k, x_left_last, x_right_first);
    let value = match family.variant {
        Variant::Local => trans,
        Variant::EstimatedFilter => {
            let f_k = family.filter[k].log_density(x_right_first);
            if f_k == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            trans + model.log_emission(k, x_right_first, obs.get(k)) - f_k
        }
        Variant::EstimatedSmoother => {
            let s_prev = family.smoother[k - 1].log_density(x_left_last);
            let f_k = family.filter[k].log_density(x_right_first);
            if s_prev == f64::NEG_INFINITY || f_k == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            family.filter[k - 1].log_density(x_left_last) - s_prev - f_k
                + trans
                + model.log_emission(k, x_right_first, obs.get(k))
        }
    };
    if value.is_nan() {
        f64::NEG_INFINITY
    } else {
        value
    }
}

/// Extra root increment turning the root's intermediate target into the
/// joint smoothing density. Zero for the local family.
pub fn root_log_correction(
    family: &TargetFamily,
    model: &dyn StateSpaceModel,
    obs: &Observations,
    x_first: f64,
    x_last: f64,
) -> f64 {
    let horizon = obs.horizon();
    let value = match family.variant {
        Variant::Local => 0.0,
        Variant::EstimatedFilter | Variant::EstimatedSmoother => {
            let f0 = family.filter[0].log_density(x_first);
            if f0 == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut v = model.log_prior(x_first) + model.log_emission(0, x_first, obs.get(0)) - f0;
            if family.variant == Variant::EstimatedSmoother {
                let s_t = family.smoother[horizon].log_density(x_last);
                if s_t == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                v += family.filter[horizon].log_density(x_last) - s_t;
            }
            v
        }
    };
    if value.is_nan() {
        f64::NEG_INFINITY
    } else {
        value
    }
}

/// Draws `n` equally weighted leaf particles for index `j`, returning the log
/// normaliser of the leaf target (zero for normalised estimates).
pub fn leaf_sample(
    family: &TargetFamily,
    j: usize,
    model: &dyn StateSpaceModel,
    obs: &Observations,
    n: usize,
    leaf_bins: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<(WeightedPath, f64)> {
    let (values, log_z): (Vec<f64>, f64) = match family.variant {
        Variant::Local => {
            let (leaf, log_z) = local_leaf(model, obs, j, leaf_bins)?;
            ((0..n).map(|_| leaf.sample(rng)).collect(), log_z)
        }
        Variant::EstimatedFilter => ((0..n).map(|_| family.filter[j].sample(rng)).collect(), 0.0),
        Variant::EstimatedSmoother => (
            (0..n).map(|_| family.smoother[j].sample(rng)).collect(),
            0.0,
        ),
    };
    Ok((
        WeightedPath::new(j, vec![values], LogWeights::uniform(n))?,
        log_z,
    ))
}

struct Run<'a> {
    model: &'a dyn StateSpaceModel,
    obs: &'a Observations,
    family: &'a TargetFamily,
    options: TpsOptions,
    tree: Tree,
    seed: u64,
}

struct NodeResult {
    paths: WeightedPath,
    log_z: f64,
    diagnostics: Vec<NodeDiagnostic>,
}

impl Run<'_> {
    fn eval(&self, id: NodeId) -> Result<NodeResult> {
        let node = *self.tree.node(id);
        let mut rng = stream(self.seed, &[node.start as u64, node.end as u64]);
        let is_root = id == self.tree.root();
        let n = self.options.particles;

        let Some(split) = node.split else {
            let (paths, log_z) = leaf_sample(
                self.family,
                node.start,
                self.model,
                self.obs,
                n,
                self.options.leaf_bins,
                &mut rng,
            )?;
            if is_root && self.family.variant != Variant::Local {
                let x = paths.column(node.start);
                let inc: Vec<f64> = x
                    .iter()
                    .map(|&v| root_log_correction(self.family, self.model, self.obs, v, v))
                    .collect();
                return self.reweight(paths, log_z, inc, Vec::new(), &mut rng);
            }
            return Ok(NodeResult {
                paths,
                log_z,
                diagnostics: Vec::new(),
            });
        };

        let (left, right) = if node.span() >= PARALLEL_MIN_SPAN {
            rayon::join(|| self.eval(split.left), || self.eval(split.right))
        } else {
            (self.eval(split.left), self.eval(split.right))
        };
        let (left, right) = (left?, right?);
        let k = split.cut;
        let x_prev = left.paths.column(k - 1);
        let x_next = right.paths.column(k);
        let lw_l = left.paths.log_weights.as_slice();
        let lw_r = right.paths.log_weights.as_slice();
        let first = left.paths.column(node.start);
        let last = right.paths.column(node.end);
        let inc: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = lw_l[i]
                    + lw_r[i]
                    + merge_log_weight(self.family, self.model, self.obs, k, x_prev[i], x_next[i]);
                if is_root && v > f64::NEG_INFINITY {
                    v += root_log_correction(self.family, self.model, self.obs, first[i], last[i]);
                }
                v
            })
            .collect();

        let mut columns = left.paths.columns;
        columns.extend(right.paths.columns);
        let merged = WeightedPath {
            start: node.start,
            columns,
            log_weights: LogWeights::uniform(n),
        };
        let mut diagnostics = left.diagnostics;
        diagnostics.extend(right.diagnostics);
        self.reweight(merged, left.log_z + right.log_z, inc, diagnostics, &mut rng)
    }

    fn reweight(
        &self,
        paths: WeightedPath,
        log_z: f64,
        log_weights: Vec<f64>,
        mut diagnostics: Vec<NodeDiagnostic>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<NodeResult> {
        let (start, end) = (paths.start(), paths.end());
        let killed = log_weights
            .iter()
            .filter(|&&w| w == f64::NEG_INFINITY)
            .count();
        let normalized =
            resample::normalize(&log_weights).map_err(|_| Error::DegenerateMerge { start, end })?;
        let ess = resample::ess(&normalized.weights);
        let n = self.options.particles;
        let resampled = self
            .options
            .ess_threshold
            .is_none_or(|theta| ess < theta * n as f64);
        diagnostics.push(NodeDiagnostic {
            start,
            end,
            ess_before_resample: ess,
            killed,
            resampled,
        });
        let log_z = log_z + normalized.log_mean;
        let paths = if resampled {
            let mut idx = resample::resample(&normalized.weights, n, self.options.scheme, rng);
            resample::shuffle(&mut idx, rng);
            paths.gather(&idx)
        } else {
            let carried = log_weights
                .iter()
                .map(|w| w - normalized.log_mean)
                .collect();
            WeightedPath {
                log_weights: LogWeights::new(carried),
                ..paths
            }
        };
        Ok(NodeResult {
            paths,
            log_z,
            diagnostics,
        })
    }
}

/// Runs the tree smoother over `0..=T` with per-node random streams derived
/// from `seed`. The output does not depend on the rayon thread count.
pub fn tps_run(
    model: &dyn StateSpaceModel,
    obs: &Observations,
    family: &TargetFamily,
    options: TpsOptions,
    seed: u64,
) -> Result<TpsOutput> {
    obs.check_model(model)?;
    family.validate(model.horizon())?;
    if options.particles < 1 {
        return Err(Error::InvalidArgument(
            "tree smoother needs at least one particle".into(),
        ));
    }
    if options.leaf_bins < 16 {
        return Err(Error::InvalidArgument(
            "leaf grids need at least 16 bins".into(),
        ));
    }
    let run = Run {
        model,
        obs,
        family,
        options,
        tree: build_tree(model.horizon()),
        seed,
    };
    let out = run.eval(run.tree.root())?;
    Ok(TpsOutput {
        paths: out.paths,
        log_evidence: out.log_z,
        diagnostics: out.diagnostics,
    })
}

/// Renders diagnostics as CSV with header `node_j,node_l,ess_before_resample,killed_count`.
pub fn diagnostics_csv(diagnostics: &[NodeDiagnostic]) -> String {
    let mut out = String::from("node_j,node_l,ess_before_resample,killed_count\n");
    for d in diagnostics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            d.start, d.end, d.ess_before_resample, d.killed
        ));
    }
    out
}
