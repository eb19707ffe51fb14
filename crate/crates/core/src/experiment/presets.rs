//! Named configurations for the benchmark tables, with the sample sizes that
//! roughly equalise running time across algorithms.

use super::config::ExperimentConfig;
use crate::{Error, Result};

pub struct Preset {
    pub name: String,
    pub description: String,
    settings: Vec<(&'static str, String)>,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        for (key, value) in &self.settings {
            config.set(key, value).expect("preset settings are valid");
        }
        config
    }
}

fn preset(name: String, description: String, settings: Vec<(&'static str, String)>) -> Preset {
    Preset {
        name,
        description,
        settings,
    }
}

fn sizes(
    algorithm: &str,
    n_target: usize,
    n_filter: Option<usize>,
    nprime: Option<usize>,
) -> Vec<(&'static str, String)> {
    let mut s = vec![
        ("algorithm", algorithm.to_string()),
        ("particles", n_target.to_string()),
    ];
    if let Some(n) = n_filter {
        s.push(("filter_particles", n.to_string()));
    }
    if let Some(n) = nprime {
        s.push(("nprime", n.to_string()));
    }
    s
}

const NONLINEAR_SETTINGS: [(&str, f64, f64); 3] =
    [("11", 1.0, 1.0), ("15", 1.0, 5.0), ("51", 5.0, 1.0)];

pub fn presets() -> Vec<Preset> {
    let mut out = Vec::new();
    let linear = |mut s: Vec<(&'static str, String)>| {
        s.splice(
            0..0,
            [("model", "linear".to_string()), ("T", "127".to_string())],
        );
        s
    };
    let table1 = [
        (
            "bpf",
            "bootstrap filter paths",
            sizes("bpf", 44_000, None, None),
        ),
        (
            "ffbsm",
            "forward filtering backward smoothing",
            sizes("ffbsm", 410, Some(410), None),
        ),
        (
            "ffbsi",
            "forward filtering backward simulation",
            sizes("ffbsi", 450, Some(450), None),
        ),
        ("tpsn", "tree smoother with moment-matched normal leaves", {
            let mut s = sizes("tps-ef", 10_000, Some(10_000), None);
            s.push(("density", "normal".into()));
            s
        }),
        (
            "tpsl",
            "tree smoother with local leaf targets",
            sizes("tps-l", 13_000, None, None),
        ),
    ];
    for (short, what, s) in table1 {
        out.push(preset(
            format!("table1-{short}"),
            format!("linear model, {what}"),
            linear(s),
        ));
    }

    for (suffix, tau, sigma) in NONLINEAR_SETTINGS {
        let nonlinear = |mut s: Vec<(&'static str, String)>| {
            s.splice(
                0..0,
                [
                    ("model", "nonlinear".to_string()),
                    ("T", "511".to_string()),
                    ("tau", tau.to_string()),
                    ("sigma", sigma.to_string()),
                ],
            );
            s
        };
        let table2 = [
            (
                "bpf",
                "bootstrap filter paths",
                sizes("bpf", 40_000, None, None),
            ),
            (
                "ffbsm",
                "forward filtering backward smoothing",
                sizes("ffbsm", 315, Some(315), None),
            ),
            (
                "ffbsi",
                "forward filtering backward simulation",
                sizes("ffbsi", 320, Some(320), None),
            ),
            (
                "efp",
                "tree smoother with filter grid leaves",
                sizes("tps-ef", 10_000, Some(10_000), None),
            ),
            (
                "tpsl",
                "tree smoother with local leaf targets",
                sizes("tps-l", 13_000, None, None),
            ),
        ];
        for (short, what, s) in table2 {
            out.push(preset(
                format!("table2-{short}-{suffix}"),
                format!("nonlinear model tau={tau} sigma={sigma}, {what}"),
                nonlinear(s),
            ));
        }
        let table3 = [
            (
                "efp",
                "tree smoother with filter grid leaves",
                sizes("tps-ef", 50_000, Some(50_000), None),
            ),
            (
                "esp-equalN",
                "smoother grid leaves, same N",
                sizes("tps-es", 50_000, Some(50_000), Some(50_000)),
            ),
            (
                "esp-matched",
                "smoother grid leaves, matched effort",
                sizes("tps-es", 18_000, Some(50_000), Some(25_000)),
            ),
        ];
        for (short, what, s) in table3 {
            let name = if suffix == "11" {
                format!("table3-{short}")
            } else {
                format!("table3-{short}-{suffix}")
            };
            out.push(preset(
                name,
                format!("nonlinear model tau={tau} sigma={sigma}, {what}"),
                nonlinear(s),
            ));
        }
    }
    out
}

pub fn find_preset(name: &str) -> Result<ExperimentConfig> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .map(|p| p.config())
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}` (see list-presets)")))
}

/// One line per preset: name, sample sizes and description.
pub fn list_presets() -> String {
    let mut out = String::new();
    for p in presets() {
        let c = p.config();
        let fmt = |v: Option<usize>| v.map_or("NA".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{:<24} N={} n={} nprime={}  {}\n",
            p.name,
            c.particles,
            fmt(c.filter_particles),
            fmt(c.nprime),
            p.description
        ));
    }
    out
}
