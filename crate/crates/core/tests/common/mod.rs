//! Shared fixtures: the two-state toy HMM and a brute-force enumeration of
//! its posterior over all state paths.
#![allow(dead_code)]

use treesmooth::baselines::{kalman_filter, rts_smoother, GaussianBelief};
use treesmooth::density::{DensityEstimate, DiscretePmf, NormalFit, UnivariateDensity};
use treesmooth::model::{
    linear_gaussian_model, log_joint, simulate, FiniteStateHmm, LinearGaussian, Observations,
    StateSpaceModel,
};
use treesmooth::rng::stream;
use treesmooth::tps::{
    local_leaf_log_density, merge_log_weight, root_log_correction, TargetFamily, Variant,
};
use treesmooth::tree::build_tree;

pub const TOY_STATES: [f64; 2] = [0.0, 1.0];

pub fn toy() -> (FiniteStateHmm, Observations) {
    let model = FiniteStateHmm::new(
        3,
        TOY_STATES.to_vec(),
        vec![0.6, 0.4],
        vec![vec![0.7, 0.3], vec![0.2, 0.8]],
        0.8,
    )
    .unwrap();
    (model, Observations::new(vec![0.1, 1.2, 0.9, -0.3]).unwrap())
}

pub struct Enumeration {
    /// `P(X_t = s | y_{0:T})`.
    pub smoothing: Vec<[f64; 2]>,
    /// `P(X_t = s | y_{0:t})`.
    pub filtering: Vec<[f64; 2]>,
    pub log_evidence: f64,
}

impl Enumeration {
    pub fn smoothing_mean(&self, t: usize) -> f64 {
        self.smoothing[t][1]
    }

    pub fn filter_leaves(&self) -> Vec<DensityEstimate> {
        self.filtering.iter().map(pmf).collect()
    }

    pub fn smoother_leaves(&self) -> Vec<DensityEstimate> {
        self.smoothing.iter().map(pmf).collect()
    }
}

fn pmf(p: &[f64; 2]) -> DensityEstimate {
    DensityEstimate::Discrete(DiscretePmf::new(TOY_STATES.to_vec(), p.to_vec()).unwrap())
}

/// Every path of length `len` over the two states, as state values.
fn all_paths(len: usize) -> Vec<Vec<f64>> {
    (0..1usize << len)
        .map(|code| (0..len).map(|t| TOY_STATES[(code >> t) & 1]).collect())
        .collect()
}

/// Log joint density of the first `len` states and observations.
fn log_prefix(model: &FiniteStateHmm, obs: &Observations, path: &[f64]) -> f64 {
    let mut v = model.log_prior(path[0]) + model.log_emission(0, path[0], obs.get(0));
    for t in 1..path.len() {
        v += model.log_transition(t, path[t - 1], path[t])
            + model.log_emission(t, path[t], obs.get(t));
    }
    v
}

pub fn enumerate(model: &FiniteStateHmm, obs: &Observations) -> Enumeration {
    let len = model.horizon() + 1;
    let mut filtering = Vec::with_capacity(len);
    for prefix in 1..=len {
        let mut mass = [0.0; 2];
        for path in all_paths(prefix) {
            mass[(path[prefix - 1] as usize).min(1)] += log_prefix(model, obs, &path).exp();
        }
        let total = mass[0] + mass[1];
        filtering.push([mass[0] / total, mass[1] / total]);
    }
    let mut smoothing = vec![[0.0; 2]; len];
    let mut total = 0.0;
    for path in all_paths(len) {
        let p = log_joint(model, obs, &path).exp();
        total += p;
        for (t, &x) in path.iter().enumerate() {
            smoothing[t][x as usize] += p;
        }
    }
    for row in &mut smoothing {
        row[0] /= total;
        row[1] /= total;
    }
    Enumeration {
        smoothing,
        filtering,
        log_evidence: total.ln(),
    }
}

/// Mean and standard error of a sample.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn normals(beliefs: &[GaussianBelief]) -> Vec<DensityEstimate> {
    beliefs
        .iter()
        .map(|b| {
            DensityEstimate::Normal(NormalFit {
                mean: b.mean,
                var: b.var,
            })
        })
        .collect()
}

pub fn linear_problem(horizon: usize, seed: u64) -> (LinearGaussian, Observations) {
    let model = linear_gaussian_model(horizon);
    let (_, obs) = simulate(&model, &mut stream(seed, &[]));
    (model, obs)
}

pub fn kalman_families(model: &LinearGaussian, obs: &Observations) -> Vec<TargetFamily> {
    let filter = normals(&kalman_filter(model, obs).unwrap().filtered);
    let smoother = normals(&rts_smoother(model, obs).unwrap());
    vec![
        TargetFamily::local(),
        TargetFamily::estimated_filter(filter.clone()),
        TargetFamily::estimated_smoother(filter, smoother),
    ]
}

/// Leaf proposal log-densities plus every merge and root increment the tree
/// applies to one full path.
pub fn tree_log_weight(
    family: &TargetFamily,
    model: &dyn StateSpaceModel,
    obs: &Observations,
    path: &[f64],
) -> f64 {
    let tree = build_tree(model.horizon());
    let mut total = root_log_correction(family, model, obs, path[0], path[path.len() - 1]);
    for node in tree.nodes() {
        match node.split {
            Some(split) => {
                total += merge_log_weight(
                    family,
                    model,
                    obs,
                    split.cut,
                    path[split.cut - 1],
                    path[split.cut],
                );
            }
            None => {
                let j = node.start;
                total += match family.variant() {
                    Variant::Local => local_leaf_log_density(model, obs, j, path[j]),
                    Variant::EstimatedFilter => family.filter()[j].log_density(path[j]),
                    Variant::EstimatedSmoother => family.smoother()[j].log_density(path[j]),
                };
            }
        }
    }
    total
}
