//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use treesmooth::baselines::{bootstrap_pf, ffbsi, ffbsm, ffbsm_moments, rts_smoother};
use treesmooth::density::{
    estimate, mixture_filter_estimate, mixture_smoother_estimate, DensityEstimate, DensityKind,
    DiscretePmf, GridDensity, UnivariateDensity,
};
use treesmooth::experiment::runner::target_family;
use treesmooth::experiment::{
    find_preset, run_to_dir, run_with_problem, strip_runtime, ExperimentConfig, Problem, RunRequest,
};
use treesmooth::metrics::{kl_product_gap, MetricsReport};
use treesmooth::model::{linear_gaussian_model, log_joint, simulate, std_normal_cdf};
use treesmooth::oracle::{discretize, DEFAULT_LINEAR_RANGE};
use treesmooth::resample::Scheme;
use treesmooth::rng::stream;
use treesmooth::tps::{tps_run, TargetFamily, TpsOptions};

use common::{enumerate, kalman_families, linear_problem, mean_se, toy, tree_log_weight};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn preset(name: &str, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut config = find_preset(name).unwrap();
    for (k, v) in overrides {
        config.set(k, v).unwrap();
    }
    config.validate().unwrap();
    config
}

/// A preset shrunk to horizon `t`, `m` replications and `n` particles in
/// every population it uses.
fn shrunk(name: &str, t: usize, m: usize, n: usize) -> ExperimentConfig {
    let mut config = find_preset(name).unwrap();
    config.horizon = t;
    config.replications = m;
    config.particles = n;
    config.filter_particles = config.filter_particles.map(|_| n);
    config.nprime = config.nprime.map(|_| n);
    config.validate().unwrap();
    config
}

/// Runs every config against one shared simulated problem.
fn run_all(configs: &[ExperimentConfig]) -> Vec<MetricsReport> {
    let problem = Problem::prepare(&configs[0]).unwrap();
    configs
        .iter()
        .map(|c| {
            assert!(Problem::matches(&configs[0], c));
            run_with_problem(c, &problem).unwrap().0
        })
        .collect()
}

fn linear_accuracy() -> Outcome {
    let report = &run_all(&[preset("table1-tpsn", &[("M", "20")])])[0];
    let (msem, msev) = (report.mean_msem(), report.mean_msev().unwrap());
    outcome(
        msem <= 0.003 && msev <= 0.004,
        format!("MSEm {msem:.5} (<= 0.003), MSEv {msev:.5} (<= 0.004)"),
    )
}

fn oracle_cross_validation() -> Outcome {
    let config = preset("table1-tpsn", &[]);
    let model = linear_gaussian_model(config.horizon);
    let (_, obs) = simulate(&model, &mut stream(config.obs_seed, &[]));
    let rts = rts_smoother(&model, &obs).unwrap();
    let solve = |m| {
        discretize(&model, &obs, m, DEFAULT_LINEAR_RANGE)
            .unwrap()
            .forward_backward()
            .unwrap()
    };
    let (coarse, fine) = (solve(2000), solve(4000));
    let vs_rts = rts
        .iter()
        .zip(coarse.smoothing_means())
        .map(|(b, m)| (b.mean - m).abs())
        .fold(0.0, f64::max);
    let refine = coarse
        .smoothing_means()
        .iter()
        .zip(fine.smoothing_means())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        vs_rts < 1e-3 && refine < 1e-3,
        format!(
            "max |oracle - RTS| {vs_rts:.2e} (< 1e-3), max refinement change {refine:.2e} (< 1e-3)"
        ),
    )
}

const TOY_REPS: u64 = 200;
const TOY_TPS_PARTICLES: usize = 10_000;
const TOY_BASELINE_PARTICLES: usize = 1_000;

/// Largest |z| of per-step replication means against the exact marginals.
fn max_z(estimates: &[Vec<f64>], exact: impl Fn(usize) -> f64) -> f64 {
    (0..estimates[0].len())
        .map(|t| {
            let column: Vec<f64> = estimates.iter().map(|e| e[t]).collect();
            let (mean, se) = mean_se(&column);
            (mean - exact(t)).abs() / se.max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn toy_families() -> Vec<TargetFamily> {
    let (model, obs) = toy();
    let exact = enumerate(&model, &obs);
    vec![
        TargetFamily::local(),
        TargetFamily::estimated_filter(exact.filter_leaves()),
        TargetFamily::estimated_smoother(exact.filter_leaves(), exact.smoother_leaves()),
    ]
}

fn small_instance_exactness() -> Outcome {
    let (model, obs) = toy();
    let exact = enumerate(&model, &obs);
    let mut parts = Vec::new();
    let mut pass = true;
    for family in toy_families() {
        let estimates: Vec<Vec<f64>> = (0..TOY_REPS)
            .map(|r| {
                let out =
                    tps_run(&model, &obs, &family, TpsOptions::new(TOY_TPS_PARTICLES), r).unwrap();
                out.paths.marginal_moments().unwrap().0
            })
            .collect();
        let z = max_z(&estimates, |t| exact.smoothing_mean(t));
        pass &= z <= 3.0;
        parts.push(format!("{} {z:.2}", family.variant()));
    }
    let (mut m_est, mut i_est) = (Vec::new(), Vec::new());
    for r in 0..TOY_REPS {
        let pf = bootstrap_pf(
            &model,
            &obs,
            TOY_BASELINE_PARTICLES,
            false,
            Scheme::Systematic,
            &mut stream(r, &[1]),
        )
        .unwrap();
        m_est.push(ffbsm_moments(&pf, &ffbsm(&pf, &model).unwrap()).0);
        let paths = ffbsi(&pf, &model, TOY_BASELINE_PARTICLES, &mut stream(r, &[2])).unwrap();
        i_est.push(paths.marginal_moments().unwrap().0);
    }
    for (name, est) in [("ffbsm", &m_est), ("ffbsi", &i_est)] {
        let z = max_z(est, |t| exact.smoothing_mean(t));
        pass &= z <= 3.0;
        parts.push(format!("{name} {z:.2}"));
    }
    outcome(
        pass,
        format!("max |z| per method (<= 3): {}", parts.join(", ")),
    )
}

fn ordering(winner: &MetricsReport, loser: &MetricsReport) -> (bool, String) {
    let ok = winner.mean_msem() < loser.mean_msem() && winner.mean_ks() < loser.mean_ks();
    let detail = format!(
        "MSEm {:.4} vs {:.4}, KS {:.2} vs {:.2}",
        winner.mean_msem(),
        loser.mean_msem(),
        winner.mean_ks(),
        loser.mean_ks()
    );
    (ok, detail)
}

fn nonlinear_ordering() -> Outcome {
    let reports = run_all(&[
        preset("table2-efp-51", &[("M", "20")]),
        preset("table2-bpf-51", &[("M", "20")]),
    ]);
    let (ok, detail) = ordering(&reports[0], &reports[1]);
    outcome(ok, format!("tps-efp(1e4) vs bpf(4e4): {detail}"))
}

fn local_fragility() -> Outcome {
    let reports = run_all(&[
        preset("table2-tpsl-15", &[("M", "20")]),
        preset("table2-efp-15", &[("M", "20")]),
    ]);
    let (local, efp) = (reports[0].mean_msem(), reports[1].mean_msem());
    let ratio = local / efp;
    outcome(
        ratio >= 10.0,
        format!("MSEm tps-l {local:.4} / tps-efp {efp:.4} = {ratio:.1} (>= 10)"),
    )
}

fn smoother_benefit() -> Outcome {
    let sizes = [("M", "20"), ("N", "10000"), ("n", "10000")];
    let mut esp_sizes = sizes.to_vec();
    esp_sizes.push(("nprime", "10000"));
    let reports = run_all(&[
        preset("table3-esp-equalN", &esp_sizes),
        preset("table3-efp", &sizes),
    ]);
    let (esp, efp) = (reports[0].mean_ks(), reports[1].mean_ks());
    outcome(
        esp < efp,
        format!("KS tps-esp {esp:.2} < tps-efp {efp:.2} at N=n=n'=1e4"),
    )
}

fn random_pmf(rng: &mut impl Rng, len: usize, zeros: bool) -> Vec<f64> {
    let mut p: Vec<f64> = (0..len)
        .map(|_| {
            if zeros && rng.random::<f64>() < 0.2 {
                0.0
            } else {
                rng.random::<f64>() + 1e-3
            }
        })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn product_gap() -> Outcome {
    let mut rng = stream(7, &[]);
    let (mut min_gap, mut max_exact) = (f64::INFINITY, 0.0f64);
    for case in 0..100 {
        let flat = random_pmf(&mut rng, 64, case % 2 == 1);
        let joint: Vec<Vec<f64>> = flat.chunks(8).map(|c| c.to_vec()).collect();
        let (qa, qb) = (
            random_pmf(&mut rng, 8, false),
            random_pmf(&mut rng, 8, false),
        );
        min_gap = min_gap.min(kl_product_gap(&joint, &qa, &qb).unwrap());
        let ma: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let mb: Vec<f64> = (0..8).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        max_exact = max_exact.max(kl_product_gap(&joint, &ma, &mb).unwrap().abs());
    }
    outcome(
        min_gap >= -1e-12 && max_exact <= 1e-12,
        format!("min gap {min_gap:.3e} (>= -1e-12), max |gap| at exact marginals {max_exact:.1e} (<= 1e-12)"),
    )
}

/// Integral of the density over its support, by three-point Gauss-Legendre
/// on every piece between consecutive breakpoints.
fn integral(d: &DensityEstimate, mut breaks: Vec<f64>, pieces_per_gap: usize) -> f64 {
    if let DensityEstimate::Discrete(p) = d {
        return p.probs().iter().sum();
    }
    let (lo, hi) = d.support();
    breaks.extend([lo, hi]);
    breaks.retain(|b| (lo..=hi).contains(b));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let nodes = [
        (-(0.6f64).sqrt(), 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        ((0.6f64).sqrt(), 5.0 / 9.0),
    ];
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let h = (w[1] - w[0]) / pieces_per_gap as f64;
        for k in 0..pieces_per_gap {
            let mid = w[0] + (k as f64 + 0.5) * h;
            total += nodes
                .iter()
                .map(|(x, wt)| wt * d.log_density(mid + 0.5 * h * x).exp())
                .sum::<f64>()
                * 0.5
                * h;
        }
    }
    total
}

fn grid_edges(g: &GridDensity) -> Vec<f64> {
    (0..=g.bins())
        .map(|i| g.x1() + (i as f64 - 0.5) * g.delta())
        .collect()
}

fn density_layer() -> Outcome {
    let mut rng = stream(8, &[]);
    let mut samples_a: Vec<f64> = (0..3000).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
    samples_a.extend((0..1000).map(|_| 6.0 + rng.random::<f64>()));
    let samples_b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() * 3.0 + 2.5).collect();
    let wa: Vec<f64> = (0..samples_a.len())
        .map(|_| rng.random::<f64>() + 0.1)
        .collect();
    let wb = vec![1.0; samples_b.len()];
    let grid_a = GridDensity::from_samples(&samples_a, &wa, 512, None).unwrap();
    let grid_b = GridDensity::from_samples(&samples_b, &wb, 300, None).unwrap();
    let mut worst = 0.0f64;
    for kind in [DensityKind::Normal, DensityKind::Kde] {
        let e = estimate(kind, &samples_a, &wa, 512, None).unwrap();
        worst = worst.max((integral(&e, Vec::new(), 200_000) - 1.0).abs());
    }
    let mix_f = mixture_filter_estimate(&grid_a, &grid_b, 0.95).unwrap();
    let mix_s = mixture_smoother_estimate(&grid_b, &grid_a, 0.95).unwrap();
    let mut edges = grid_edges(&grid_a);
    edges.extend(grid_edges(&grid_b));
    for e in [
        DensityEstimate::Grid(grid_a.clone()),
        DensityEstimate::Mixture(mix_f.clone()),
        DensityEstimate::Mixture(mix_s.clone()),
    ] {
        worst = worst.max((integral(&e, edges.clone(), 1) - 1.0).abs());
    }
    let pmf = DensityEstimate::Discrete(
        DiscretePmf::new(vec![2.0, -1.0, 0.5], vec![0.2, 0.5, 0.3]).unwrap(),
    );
    worst = worst.max((integral(&pmf, Vec::new(), 1) - 1.0).abs());

    // sampler histogram: per-bin z and the multinomial chi-square, both at 3 sigma
    let draws = 1_000_000usize;
    let mut counts = vec![0usize; grid_a.bins()];
    let left = grid_a.x1() - 0.5 * grid_a.delta();
    for _ in 0..draws {
        let x = grid_a.sample(&mut rng);
        counts[(((x - left) / grid_a.delta()).floor() as usize).min(grid_a.bins() - 1)] += 1;
    }
    let (mut chi2, mut cells, mut max_bin_z) = (0.0, 0usize, 0.0f64);
    for (c, d) in counts.iter().zip(grid_a.densities()) {
        let p = d * grid_a.delta();
        let expected = draws as f64 * p;
        if expected > 0.0 {
            chi2 += (*c as f64 - expected).powi(2) / expected;
            cells += 1;
            max_bin_z = max_bin_z.max((*c as f64 - expected).abs() / (expected * (1.0 - p)).sqrt());
        } else if *c > 0 {
            max_bin_z = f64::INFINITY;
        }
    }
    let dof = (cells - 1) as f64;
    let chi_z = (chi2 - dof) / (2.0 * dof).sqrt();
    // Bonferroni-adjusted per-bin bound: 3 sigma joint coverage over all bins
    let bin_bound = bonferroni_z(0.0027 / cells as f64);

    let mut violations = 0usize;
    let (lo, hi) = (grid_a.x1().min(grid_b.x1()) - 1.0, 12.0);
    for _ in 0..1_000_000 {
        let x = lo + rng.random::<f64>() * (hi - lo);
        if mix_f.log_density(x).is_finite() != mix_s.log_density(x).is_finite() {
            violations += 1;
        }
    }
    outcome(
        worst <= 1e-6 && chi_z <= 3.0 && max_bin_z <= bin_bound && violations == 0,
        format!(
            "max |integral - 1| {worst:.1e} (<= 1e-6), histogram chi2 z {chi_z:.2} (<= 3), max bin z {max_bin_z:.2} (<= {bin_bound:.2}), support violations {violations}/1e6"
        ),
    )
}

/// Two-sided standard normal quantile for tail probability `alpha`, by bisection.
fn bonferroni_z(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if 2.0 * (1.0 - std_normal_cdf(mid)) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn structural_invariants() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = stream(9, &[]);
    let (model, obs) = linear_problem(3, 11);
    for family in kalman_families(&model, &obs) {
        for _ in 0..100 {
            let path: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let diff =
                tree_log_weight(&family, &model, &obs, &path) - log_joint(&model, &obs, &path);
            worst = worst.max(diff.abs());
        }
    }
    // grid and mixture leaves from the harness, checked on paths inside their supports
    for name in ["table2-efp-11", "table3-esp-equalN"] {
        let config = shrunk(name, 3, 1, 2000);
        let problem = Problem::prepare(&config).unwrap();
        let family = target_family(problem.model.as_ref(), &problem.obs, &config, 5).unwrap();
        let out = tps_run(
            problem.model.as_ref(),
            &problem.obs,
            &family,
            TpsOptions::new(100),
            6,
        )
        .unwrap();
        let want0 = {
            let p = out.paths.path(0);
            tree_log_weight(&family, problem.model.as_ref(), &problem.obs, &p)
                - log_joint(problem.model.as_ref(), &problem.obs, &p)
        };
        for i in 0..out.paths.num_particles() {
            let p = out.paths.path(i);
            let diff = tree_log_weight(&family, problem.model.as_ref(), &problem.obs, &p)
                - log_joint(problem.model.as_ref(), &problem.obs, &p);
            worst = worst.max((diff - want0).abs());
        }
    }
    let (toy_model, toy_obs) = toy();
    let exact = enumerate(&toy_model, &toy_obs);
    let mut parts = Vec::new();
    let mut evidence_ok = true;
    for family in toy_families() {
        let ratios: Vec<f64> = (0..TOY_REPS)
            .map(|r| {
                let out = tps_run(
                    &toy_model,
                    &toy_obs,
                    &family,
                    TpsOptions::new(TOY_TPS_PARTICLES),
                    1000 + r,
                )
                .unwrap();
                (out.log_evidence - exact.log_evidence).exp()
            })
            .collect();
        let (mean, se) = mean_se(&ratios);
        let z = (mean - 1.0).abs() / se.max(1e-15);
        evidence_ok &= z <= 3.0 || (mean - 1.0).abs() < 1e-12;
        parts.push(format!("{} {z:.2}", family.variant()));
    }
    outcome(
        worst <= 1e-9 && evidence_ok,
        format!(
            "max cancellation error {worst:.1e} (<= 1e-9), evidence |z| (<= 3): {}",
            parts.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let names = [
        "table2-tpsl-11",
        "table2-efp-11",
        "table3-esp-equalN",
        "table2-bpf-11",
        "table2-ffbsm-11",
        "table2-ffbsi-11",
        "table1-tpsn",
    ];
    let mut mismatches = Vec::new();
    for name in names {
        let config = shrunk(name, 31, 3, 400);
        let csv = |threads: usize| {
            let dir = tempfile::tempdir().unwrap();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| run_to_dir(&config, dir.path(), &RunRequest::default()))
                .unwrap();
            std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
        };
        let (a, b, c) = (csv(1), csv(1), csv(3));
        if strip_runtime(&a) != strip_runtime(&b) || strip_runtime(&a) != strip_runtime(&c) {
            mismatches.push(name);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "{} configs x (1, 1, 3 threads); mismatches: {mismatches:?}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("linear-model accuracy (tps-n)", linear_accuracy),
        ("oracle cross-validation", oracle_cross_validation),
        ("small-instance exactness", small_instance_exactness),
        ("nonlinear ordering (tau=5, sigma=1)", nonlinear_ordering),
        ("local-target fragility (tau=1, sigma=5)", local_fragility),
        ("smoother-target benefit (tau=1, sigma=1)", smoother_benefit),
        ("product-proposal KL gap", product_gap),
        ("density layer", density_layer),
        ("structural invariants", structural_invariants),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            outcome(false, format!("panicked: {:?}", e.downcast_ref::<String>()))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        failures += usize::from(!result.pass);
        println!(
            "criterion {number:>2} {verdict}  {name}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
