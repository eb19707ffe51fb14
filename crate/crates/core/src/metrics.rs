//! Evaluation statistics: mean squared errors of smoothing moments, weighted
//! Kolmogorov-Smirnov distances, and the KL gap of product proposals.

use crate::baselines::GaussianBelief;
use crate::model::Gaussian;
use crate::{Error, Result};

/// Reference marginal CDFs indexed by time step.
pub trait ReferenceCdf {
    fn steps(&self) -> usize;
    fn cdf(&self, t: usize, x: f64) -> f64;
}

/// Gaussian marginals, e.g. from the RTS smoother.
pub struct GaussianReference<'a>(pub &'a [GaussianBelief]);

impl ReferenceCdf for GaussianReference<'_> {
    fn steps(&self) -> usize {
        self.0.len()
    }

    fn cdf(&self, t: usize, x: f64) -> f64 {
        let b = self.0[t];
        Gaussian::new(b.mean, b.var.sqrt()).cdf(x)
    }
}

fn mean_squared_error(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: est.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument("empty moment sequence".into()));
    }
    Ok(est
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / est.len() as f64)
}

/// Mean squared error between estimated and true smoothing means.
pub fn msem(est_means: &[f64], truth_means: &[f64]) -> Result<f64> {
    mean_squared_error(est_means, truth_means)
}

/// Mean squared error between estimated and true smoothing variances.
pub fn msev(est_vars: &[f64], truth_vars: &[f64]) -> Result<f64> {
    mean_squared_error(est_vars, truth_vars)
}

/// `sup_x |F_N(x) - F(x)|` for the weighted empirical CDF `F_N`.
///
/// The supremum is attained at a jump, so both one-sided limits of `F_N` are
/// compared with `F` at every distinct sample point. Weights need not be
/// normalised.
pub fn ks_statistic(samples: &[f64], weights: &[f64], truth_cdf: impl Fn(f64) -> f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut pairs: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .zip(weights.iter().map(|w| w / total))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut d: f64 = 0.0;
    let mut below = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let x = pairs[i].0;
        let mut at = 0.0;
        while i < pairs.len() && pairs[i].0 == x {
            at += pairs[i].1;
            i += 1;
        }
        let above = (below + at).min(1.0);
        d = d
            .max((truth_cdf(x.next_down()) - below).abs())
            .max((above - truth_cdf(x)).abs());
        below = above;
    }
    d
}

/// Sum over steps of the KS distance between `columns[t]` (with shared
/// `weights`) and the reference CDF at `t`.
pub fn ks_sum(columns: &[Vec<f64>], weights: &[f64], reference: &dyn ReferenceCdf) -> Result<f64> {
    if columns.len() != reference.steps() {
        return Err(Error::LengthMismatch {
            expected: reference.steps(),
            actual: columns.len(),
        });
    }
    Ok(columns
        .iter()
        .enumerate()
        .map(|(t, c)| ks_statistic(c, weights, |x| reference.cdf(t, x)))
        .sum())
}

/// Like [`ks_sum`] with per-step weights, for marginal smoothers.
pub fn ks_sum_per_step(
    columns: &[Vec<f64>],
    weights: &[Vec<f64>],
    reference: &dyn ReferenceCdf,
) -> Result<f64> {
    if columns.len() != reference.steps() || weights.len() != columns.len() {
        return Err(Error::LengthMismatch {
            expected: reference.steps(),
            actual: columns.len(),
        });
    }
    Ok(columns
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(t, (c, w))| ks_statistic(c, w, |x| reference.cdf(t, x)))
        .sum())
}

fn kl(
    p: &[f64],
    q: &[f64],
    row: impl Fn(usize) -> usize,
    col: impl Fn(usize) -> usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for (idx, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(Error::InvalidProposal {
                    row: row(idx),
                    col: col(idx),
                });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// `KL(joint || a x b) - KL(joint || marg_a x marg_b)` for a joint pmf given
/// row-major (`joint[i][j]`, `i` indexing the first variable).
pub fn kl_product_gap(joint: &[Vec<f64>], prod_a: &[f64], prod_b: &[f64]) -> Result<f64> {
    let m_a = joint.len();
    let m_b = prod_b.len();
    if prod_a.len() != m_a || joint.iter().any(|r| r.len() != m_b) {
        return Err(Error::LengthMismatch {
            expected: m_a,
            actual: prod_a.len(),
        });
    }
    let marg_a: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let marg_b: Vec<f64> = (0..m_b).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    let proposal: Vec<f64> = (0..m_a * m_b)
        .map(|k| prod_a[k / m_b] * prod_b[k % m_b])
        .collect();
    let marginal: Vec<f64> = (0..m_a * m_b)
        .map(|k| marg_a[k / m_b] * marg_b[k % m_b])
        .collect();
    let row = |k: usize| k / m_b;
    let col = |k: usize| k % m_b;
    let with_proposal = kl(&flat, &proposal, row, col)?;
    let with_marginals = kl(&flat, &marginal, row, col)?;
    Ok(with_proposal - with_marginals)
}

/// One output row of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub replication: usize,
    pub algorithm: String,
    pub n_target: usize,
    pub n_filter: Option<usize>,
    pub n_prime: Option<usize>,
    pub msem: f64,
    pub msev: Option<f64>,
    pub ks_sum: f64,
    pub runtime_ms: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "replication,algorithm,N,n,nprime,msem,msev,ks_sum,runtime_ms,seed";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.replication,
            self.algorithm,
            self.n_target,
            opt(&self.n_filter),
            opt(&self.n_prime),
            self.msem,
            opt(&self.msev),
            self.ks_sum,
            self.runtime_ms,
            self.seed
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn mean_msem(&self) -> f64 {
        self.rows.iter().map(|r| r.msem).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_msev(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.rows.iter().map(|r| r.msev).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_ks(&self) -> f64 {
        self.rows.iter().map(|r| r.ks_sum).sum::<f64>() / self.rows.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::std_normal_cdf;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        let truth = [0.3, -1.0, 2.0];
        assert_eq!(msem(&truth, &truth).unwrap(), 0.0);
        let shifted: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
        assert!((msem(&shifted, &truth).unwrap() - 0.01).abs() < 1e-15);
        let shifted: Vec<f64> = truth.iter().map(|v| v + 0.2).collect();
        assert!((msev(&shifted, &truth).unwrap() - 0.04).abs() < 1e-15);
        assert!(matches!(
            msem(&[1.0], &truth),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[0.0], &[1.0], std_normal_cdf), 0.5);
        let step = |x: f64| if x >= 2.0 { 1.0 } else { 0.0 };
        assert_eq!(ks_statistic(&[2.0, 2.0], &[0.5, 0.5], step), 0.0);
        let mut rng = stream(6, &[]);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| Gaussian::new(0.0, 1.0).sample(&mut rng))
            .collect();
        assert!(ks_statistic(&xs, &vec![1.0; xs.len()], std_normal_cdf) < 0.025);
    }

    #[test]
    fn ks_matches_fine_grid_search() {
        let mut rng = stream(10, &[]);
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let xs: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * 8.0).round() / 4.0 - 1.0)
                .collect();
            let ws: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let total: f64 = ws.iter().sum();
            let ecdf = |x: f64| {
                xs.iter()
                    .zip(&ws)
                    .filter(|(s, _)| **s <= x)
                    .map(|(_, w)| w / total)
                    .sum::<f64>()
            };
            let f = |x: f64| std_normal_cdf(x / 0.7);
            let mut brute: f64 = 0.0;
            for &x in &xs {
                let left = ecdf(x - 1e-13);
                brute = brute.max((ecdf(x) - f(x)).abs()).max((left - f(x)).abs());
            }
            for i in 0..=20_000 {
                let x = -6.0 + i as f64 * 6e-4;
                brute = brute.max((ecdf(x) - f(x)).abs());
            }
            assert!((ks_statistic(&xs, &ws, f) - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_sum_bounds() {
        let beliefs = vec![
            GaussianBelief {
                mean: 0.0,
                var: 1.0
            };
            4
        ];
        let reference = GaussianReference(&beliefs);
        let far = vec![vec![100.0, 101.0]; 4];
        let s = ks_sum(&far, &[0.5, 0.5], &reference).unwrap();
        assert!((s - 4.0).abs() < 1e-12);
        assert!(ks_sum(&far[..3], &[0.5, 0.5], &reference).is_err());
    }

    #[test]
    fn kl_gap_examples() {
        let a = [0.2, 0.8];
        let b = [0.5, 0.3, 0.2];
        let joint: Vec<Vec<f64>> = a
            .iter()
            .map(|x| b.iter().map(|y| x * y).collect())
            .collect();
        assert!(kl_product_gap(&joint, &a, &b).unwrap().abs() < 1e-15);

        let (pa, pb) = ([0.4, 0.6], [0.1, 0.6, 0.3]);
        let kl1 =
            |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
        let expected = kl1(&a, &pa) + kl1(&b, &pb);
        assert!((kl_product_gap(&joint, &pa, &pb).unwrap() - expected).abs() < 1e-14);

        let err = kl_product_gap(&joint, &[1.0, 0.0], &b).unwrap_err();
        assert!(
            matches!(err, Error::InvalidProposal { row: 1, col: 0 }),
            "{err}"
        );
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            replication: 3,
            algorithm: "tps-es".into(),
            n_target: 100,
            n_filter: Some(50),
            n_prime: None,
            msem: 0.5,
            msev: None,
            ks_sum: 2.25,
            runtime_ms: 1.0,
            seed: 7,
        };
        assert_eq!(row.to_csv(), "3,tps-es,100,50,NA,0.5,NA,2.25,1,7");
        let report = MetricsReport { rows: vec![row] };
        assert_eq!(report.to_csv().lines().next().unwrap(), CSV_HEADER);
        assert_eq!(report.mean_msev(), None);
    }

    proptest! {
        #[test]
        fn mse_invariant_under_joint_permutation(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30),
            seed in 0u64..1000,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut perm: Vec<usize> = (0..a.len()).collect();
            crate::resample::shuffle(&mut perm, &mut stream(seed, &[]));
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
            prop_assert!((msem(&a, &b).unwrap() - msem(&pa, &pb).unwrap()).abs() < 1e-12);
        }
    }
}
