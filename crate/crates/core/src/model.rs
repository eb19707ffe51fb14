//! Hidden Markov model abstraction and the benchmark models.
//!
//! States are univariate reals. All densities are returned in log space.
//! Time indices run `0..=T`; `log_transition(t, prev, x)` is the density of
//! `X_t` given `X_{t-1} = prev`, so it is only meaningful for `t >= 1`.

use libm::erfc;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// `ln(sqrt(2 pi))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub fn new(mean: f64, sd: f64) -> Self {
        Gaussian { mean, sd }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - LN_SQRT_2PI - self.sd.ln()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        std_normal_cdf((x - self.mean) / self.sd)
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.sd * z
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Parameters of `X_t = a X_{t-1} + V_t`, `Y_t = c X_t + W_t` with
/// `V_t ~ N(0, q)`, `W_t ~ N(0, r)` and `X_0 ~ N(m0, p0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussianParams {
    pub a: f64,
    pub q: f64,
    pub c: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

pub trait StateSpaceModel: Send + Sync {
    /// Final time index `T`.
    fn horizon(&self) -> usize;

    fn log_prior(&self, x: f64) -> f64;
    fn sample_prior(&self, rng: &mut dyn RngCore) -> f64;

    fn log_transition(&self, t: usize, prev: f64, x: f64) -> f64;
    fn sample_transition(&self, t: usize, prev: f64, rng: &mut dyn RngCore) -> f64;

    fn log_emission(&self, t: usize, x: f64, y: f64) -> f64;
    fn sample_emission(&self, t: usize, x: f64, rng: &mut dyn RngCore) -> f64;

    /// Gaussian form of the prior, when it has one.
    fn prior_gaussian(&self) -> Option<Gaussian> {
        None
    }

    /// Gaussian form of `X_t | X_{t-1} = prev`, when it has one.
    fn transition_gaussian(&self, _t: usize, _prev: f64) -> Option<Gaussian> {
        None
    }

    /// The state values of a finite-state model; `None` for continuous states.
    fn finite_states(&self) -> Option<&[f64]> {
        None
    }

    fn linear_gaussian(&self) -> Option<LinearGaussianParams> {
        None
    }

    /// Window scanned when locating the high-density region of a leaf target.
    fn search_window(&self) -> (f64, f64) {
        (-200.0, 200.0)
    }
}

/// Observations `y_0..y_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations(Vec<f64>);

impl Observations {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InvalidArgument(
                "observation sequence is empty".into(),
            ));
        }
        if let Some(t) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observation y_{t} is not finite"
            )));
        }
        Ok(Observations(y))
    }

    pub fn horizon(&self) -> usize {
        self.0.len() - 1
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> f64 {
        self.0[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check_model(&self, model: &dyn StateSpaceModel) -> Result<()> {
        if self.len() != model.horizon() + 1 {
            return Err(Error::LengthMismatch {
                expected: model.horizon() + 1,
                actual: self.len(),
            });
        }
        Ok(())
    }
}

/// Log of the unnormalised joint smoothing density
/// `p0(x0) p(y0|x0) prod_t p(x_t|x_{t-1}) p(y_t|x_t)`.
pub fn log_joint(model: &dyn StateSpaceModel, obs: &Observations, path: &[f64]) -> f64 {
    let mut acc = model.log_prior(path[0]) + model.log_emission(0, path[0], obs.get(0));
    for t in 1..path.len() {
        acc += model.log_transition(t, path[t - 1], path[t])
            + model.log_emission(t, path[t], obs.get(t));
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian {
    horizon: usize,
    params: LinearGaussianParams,
}

impl LinearGaussian {
    pub fn new(horizon: usize, params: LinearGaussianParams) -> Result<Self> {
        let p = params;
        if !(p.q > 0.0 && p.r > 0.0 && p.p0 > 0.0) {
            return Err(Error::InvalidArgument(
                "linear Gaussian variances must be positive".into(),
            ));
        }
        Ok(LinearGaussian { horizon, params })
    }

    pub fn params(&self) -> LinearGaussianParams {
        self.params
    }
}

/// `X_0 ~ N(0,1)`, `X_t = 0.8 X_{t-1} + V_t`, `Y_t = X_t + W_t`, unit noise.
pub fn linear_gaussian_model(horizon: usize) -> LinearGaussian {
    LinearGaussian {
        horizon,
        params: LinearGaussianParams {
            a: 0.8,
            q: 1.0,
            c: 1.0,
            r: 1.0,
            m0: 0.0,
            p0: 1.0,
        },
    }
}

impl StateSpaceModel for LinearGaussian {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn log_prior(&self, x: f64) -> f64 {
        self.prior_gaussian().unwrap().log_pdf(x)
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> f64 {
        self.prior_gaussian().unwrap().sample(rng)
    }

    fn log_transition(&self, t: usize, prev: f64, x: f64) -> f64 {
        self.transition_gaussian(t, prev).unwrap().log_pdf(x)
    }

    fn sample_transition(&self, t: usize, prev: f64, rng: &mut dyn RngCore) -> f64 {
        self.transition_gaussian(t, prev).unwrap().sample(rng)
    }

    fn log_emission(&self, _t: usize, x: f64, y: f64) -> f64 {
        Gaussian::new(self.params.c * x, self.params.r.sqrt()).log_pdf(y)
    }

    fn sample_emission(&self, _t: usize, x: f64, rng: &mut dyn RngCore) -> f64 {
        Gaussian::new(self.params.c * x, self.params.r.sqrt()).sample(rng)
    }

    fn prior_gaussian(&self) -> Option<Gaussian> {
        Some(Gaussian::new(self.params.m0, self.params.p0.sqrt()))
    }

    fn transition_gaussian(&self, _t: usize, prev: f64) -> Option<Gaussian> {
        Some(Gaussian::new(self.params.a * prev, self.params.q.sqrt()))
    }

    fn linear_gaussian(&self) -> Option<LinearGaussianParams> {
        Some(self.params)
    }
}

/// The classic nonlinear growth model:
/// `X_t = X_{t-1}/2 + 25 X_{t-1}/(1+X_{t-1}^2) + 8 cos(1.2 t) + V_t`,
/// `Y_t = X_t^2/20 + W_t`, with `V_t ~ N(0, tau^2)`, `W_t ~ N(0, sigma^2)`
/// and `X_0 ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearBenchmark {
    horizon: usize,
    tau: f64,
    sigma: f64,
}

impl NonlinearBenchmark {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn drift(t: usize, prev: f64) -> f64 {
        0.5 * prev + 25.0 * prev / (1.0 + prev * prev) + 8.0 * (1.2 * t as f64).cos()
    }

    pub fn emission_mean(x: f64) -> f64 {
        x * x / 20.0
    }
}

pub fn nonlinear_benchmark_model(
    horizon: usize,
    tau: f64,
    sigma: f64,
) -> Result<NonlinearBenchmark> {
    if !(tau > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau and sigma must be positive (got tau={tau}, sigma={sigma})"
        )));
    }
    Ok(NonlinearBenchmark {
        horizon,
        tau,
        sigma,
    })
}

impl StateSpaceModel for NonlinearBenchmark {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn log_prior(&self, x: f64) -> f64 {
        Gaussian::new(0.0, 1.0).log_pdf(x)
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> f64 {
        Gaussian::new(0.0, 1.0).sample(rng)
    }

    fn log_transition(&self, t: usize, prev: f64, x: f64) -> f64 {
        Gaussian::new(Self::drift(t, prev), self.tau).log_pdf(x)
    }

    fn sample_transition(&self, t: usize, prev: f64, rng: &mut dyn RngCore) -> f64 {
        Gaussian::new(Self::drift(t, prev), self.tau).sample(rng)
    }

    fn log_emission(&self, _t: usize, x: f64, y: f64) -> f64 {
        Gaussian::new(Self::emission_mean(x), self.sigma).log_pdf(y)
    }

    fn sample_emission(&self, _t: usize, x: f64, rng: &mut dyn RngCore) -> f64 {
        Gaussian::new(Self::emission_mean(x), self.sigma).sample(rng)
    }

    fn prior_gaussian(&self) -> Option<Gaussian> {
        Some(Gaussian::new(0.0, 1.0))
    }

    fn transition_gaussian(&self, t: usize, prev: f64) -> Option<Gaussian> {
        Some(Gaussian::new(Self::drift(t, prev), self.tau))
    }
}

/// A homogeneous finite-state chain observed through `Y_t ~ N(state, sd^2)`.
/// State values double as the real-valued representation of the state.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteStateHmm {
    horizon: usize,
    states: Vec<f64>,
    prior: Vec<f64>,
    transition: Vec<Vec<f64>>,
    emission_sd: f64,
}

impl FiniteStateHmm {
    pub fn new(
        horizon: usize,
        states: Vec<f64>,
        prior: Vec<f64>,
        transition: Vec<Vec<f64>>,
        emission_sd: f64,
    ) -> Result<Self> {
        let m = states.len();
        let stochastic = |row: &[f64]| {
            row.len() == m
                && row.iter().all(|&p| p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12
        };
        if m == 0
            || !stochastic(&prior)
            || transition.len() != m
            || !transition.iter().all(|r| stochastic(r))
        {
            return Err(Error::InvalidArgument(
                "finite-state HMM needs a stochastic prior and transition matrix".into(),
            ));
        }
        if !(emission_sd > 0.0) {
            return Err(Error::InvalidArgument(
                "emission sd must be positive".into(),
            ));
        }
        Ok(FiniteStateHmm {
            horizon,
            states,
            prior,
            transition,
            emission_sd,
        })
    }

    pub fn state_index(&self, x: f64) -> Option<usize> {
        self.states.iter().position(|&s| (s - x).abs() < 1e-9)
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    fn draw(&self, probs: &[f64], rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in self.states.iter().zip(probs) {
            acc += p;
            if u < acc {
                return *s;
            }
        }
        *self.states.last().unwrap()
    }
}

impl StateSpaceModel for FiniteStateHmm {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn log_prior(&self, x: f64) -> f64 {
        self.state_index(x)
            .map_or(f64::NEG_INFINITY, |i| self.prior[i].ln())
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> f64 {
        self.draw(&self.prior, rng)
    }

    fn log_transition(&self, _t: usize, prev: f64, x: f64) -> f64 {
        match (self.state_index(prev), self.state_index(x)) {
            (Some(i), Some(k)) => self.transition[i][k].ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    fn sample_transition(&self, _t: usize, prev: f64, rng: &mut dyn RngCore) -> f64 {
        let i = self
            .state_index(prev)
            .expect("previous state is not a model state");
        self.draw(&self.transition[i], rng)
    }

    fn log_emission(&self, _t: usize, x: f64, y: f64) -> f64 {
        Gaussian::new(x, self.emission_sd).log_pdf(y)
    }

    fn sample_emission(&self, _t: usize, x: f64, rng: &mut dyn RngCore) -> f64 {
        Gaussian::new(x, self.emission_sd).sample(rng)
    }

    fn finite_states(&self) -> Option<&[f64]> {
        Some(&self.states)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimulateOptions {
    /// When false, states follow the transition mean exactly (`V_t = 0`).
    pub process_noise: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            process_noise: true,
        }
    }
}

/// Draws a state trajectory and observations of length `T+1`.
pub fn simulate(model: &dyn StateSpaceModel, rng: &mut dyn RngCore) -> (Vec<f64>, Observations) {
    simulate_with(model, rng, SimulateOptions::default()).expect("default simulation cannot fail")
}

pub fn simulate_with(
    model: &dyn StateSpaceModel,
    rng: &mut dyn RngCore,
    options: SimulateOptions,
) -> Result<(Vec<f64>, Observations)> {
    let horizon = model.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut obs = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let x = if options.process_noise {
            if t == 0 {
                model.sample_prior(rng)
            } else {
                model.sample_transition(t, states[t - 1], rng)
            }
        } else if t == 0 {
            model
                .prior_gaussian()
                .ok_or_else(|| {
                    Error::UnsupportedModel("noise-free simulation needs a Gaussian prior".into())
                })?
                .mean
        } else {
            model
                .transition_gaussian(t, states[t - 1])
                .ok_or_else(|| {
                    Error::UnsupportedModel(
                        "noise-free simulation needs Gaussian transitions".into(),
                    )
                })?
                .mean
        };
        states.push(x);
        obs.push(model.sample_emission(t, x, rng));
    }
    Ok((states, Observations::new(obs)?))
}
