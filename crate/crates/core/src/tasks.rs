//! Benchmark problems, all minimized.
//!
//! Synthetic functions are evaluated on raw coordinates. The two control
//! tasks re-implement the classic cart-pole and acrobot simulators and score
//! a small tanh MLP policy by its negated mean episode return.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::SearchBounds;

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn bounds(&self) -> &SearchBounds;
    fn dims(&self) -> usize {
        self.bounds().dims()
    }
    /// True when fitness depends on `generation` (rollout seeds).
    fn noisy(&self) -> bool;
    /// One fitness per candidate, in candidate order.
    fn evaluate_batch(&self, candidates: &[Vec<f64>], generation: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BbobFunction {
    Sphere,
    Rosenbrock,
    Discus,
    Rastrigin,
    Schwefel,
}

impl BbobFunction {
    pub const ALL: [BbobFunction; 5] = [Self::Sphere, Self::Rosenbrock, Self::Discus, Self::Rastrigin, Self::Schwefel];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Rosenbrock => "rosenbrock",
            Self::Discus => "discus",
            Self::Rastrigin => "rastrigin",
            Self::Schwefel => "schwefel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

pub fn bbob_evaluate(function: BbobFunction, x: &[f64]) -> Result<f64> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, value: x[i] });
    }
    if x.is_empty() {
        return Err(Error::Shape("objective needs at least one coordinate".into()));
    }
    let d = x.len() as f64;
    Ok(match function {
        BbobFunction::Sphere => x.iter().map(|v| v * v).sum(),
        BbobFunction::Rosenbrock => {
            x.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2)).sum()
        }
        BbobFunction::Discus => 1e6 * x[0] * x[0] + x[1..].iter().map(|v| v * v).sum::<f64>(),
        BbobFunction::Rastrigin => 10.0 * d + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>(),
        BbobFunction::Schwefel => 418.9829 * d - x.iter().map(|v| v * v.abs().sqrt().sin()).sum::<f64>(),
    })
}

/// A synthetic function, optionally with its optimum moved by a fixed-seed
/// shift drawn from `[-1, 1]^D`.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    function: BbobFunction,
    bounds: SearchBounds,
    shift: Option<Vec<f64>>,
    name: String,
}

impl SyntheticProblem {
    pub fn new(function: BbobFunction, bounds: SearchBounds) -> Self {
        Self { name: function.name().to_string(), function, bounds, shift: None }
    }

    pub fn with_shift(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shift = Some((0..self.bounds.dims()).map(|_| rng.random_range(-1.0..=1.0)).collect());
        self
    }

    pub fn shift(&self) -> Option<&[f64]> {
        self.shift.as_deref()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dims() {
            return Err(Error::Shape(format!("candidate has {} dims, problem has {}", x.len(), self.dims())));
        }
        match &self.shift {
            None => bbob_evaluate(self.function, x),
            Some(s) => {
                let moved: Vec<f64> = x.iter().zip(s).map(|(a, b)| a - b).collect();
                bbob_evaluate(self.function, &moved)
            }
        }
    }
}

impl Problem for SyntheticProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn bounds(&self) -> &SearchBounds {
        &self.bounds
    }

    fn noisy(&self) -> bool {
        false
    }

    fn evaluate_batch(&self, candidates: &[Vec<f64>], _generation: usize) -> Result<Vec<f64>> {
        candidates.iter().map(|x| self.evaluate(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpPolicySpec {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub action_count: usize,
}

impl MlpPolicySpec {
    pub fn param_count(&self) -> usize {
        (self.obs_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.action_count
    }

    /// Greedy action of the policy. Parameters are laid out as W1 (row-major,
    /// `hidden x obs`), b1, W2 (row-major, `actions x hidden`), b2.
    pub fn act(&self, params: &[f64], obs: &[f64]) -> Result<usize> {
        if params.len() != self.param_count() || obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "policy wants {} params and {} observations, got {} and {}",
                self.param_count(),
                self.obs_dim,
                params.len(),
                obs.len()
            )));
        }
        let (w1, rest) = params.split_at(self.hidden_dim * self.obs_dim);
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, b2) = rest.split_at(self.action_count * self.hidden_dim);
        let hidden: Vec<f64> = w1
            .chunks(self.obs_dim)
            .zip(b1)
            .map(|(row, b)| (row.iter().zip(obs).map(|(w, o)| w * o).sum::<f64>() + b).tanh())
            .collect();
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for (a, (row, b)) in w2.chunks(self.hidden_dim).zip(b2).enumerate() {
            let logit = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b;
            if logit > best_logit {
                best = a;
                best_logit = logit;
            }
        }
        Ok(best)
    }
}

/// A discrete-action episodic simulator.
pub trait Environment {
    const ACTIONS: usize;
    const OBS_DIM: usize;
    /// Initial state drawn from `seed`.
    fn from_seed(seed: u64) -> Self;
    fn observation(&self) -> Vec<f64>;
    /// Applies `action`; returns (reward, terminated).
    fn step(&mut self, action: usize) -> (f64, bool);
}

/// Cart-pole with Euler integration at 50 Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPole {
    /// x, x_dot, theta, theta_dot
    pub state: [f64; 4],
}

impl CartPole {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const TOTAL_MASS: f64 = Self::MASS_POLE + Self::MASS_CART;
    const LENGTH: f64 = 0.5;
    const POLEMASS_LENGTH: f64 = Self::MASS_POLE * Self::LENGTH;
    const FORCE: f64 = 10.0;
    const TAU: f64 = 0.02;
    const X_LIMIT: f64 = 2.4;

    fn theta_limit() -> f64 {
        12.0 * 2.0 * PI / 360.0
    }

    pub fn new(state: [f64; 4]) -> Self {
        Self { state }
    }
}

impl Environment for CartPole {
    const ACTIONS: usize = 2;
    const OBS_DIM: usize = 4;

    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(std::array::from_fn(|_| rng.random_range(-0.05..=0.05)))
    }

    fn observation(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> (f64, bool) {
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { Self::FORCE } else { -Self::FORCE };
        let (sintheta, costheta) = (theta.sin(), theta.cos());
        let temp = (force + Self::POLEMASS_LENGTH * (theta_dot * theta_dot) * sintheta) / Self::TOTAL_MASS;
        let thetaacc = (Self::GRAVITY * sintheta - costheta * temp)
            / (Self::LENGTH * (4.0 / 3.0 - Self::MASS_POLE * (costheta * costheta) / Self::TOTAL_MASS));
        let xacc = temp - Self::POLEMASS_LENGTH * thetaacc * costheta / Self::TOTAL_MASS;
        let x = x + Self::TAU * x_dot;
        let x_dot = x_dot + Self::TAU * xacc;
        let theta = theta + Self::TAU * theta_dot;
        let theta_dot = theta_dot + Self::TAU * thetaacc;
        self.state = [x, x_dot, theta, theta_dot];
        let limit = Self::theta_limit();
        let done = x < -Self::X_LIMIT || x > Self::X_LIMIT || theta < -limit || theta > limit;
        (1.0, done)
    }
}

/// Two-link acrobot ("book" dynamics), one RK4 step per 0.2 s action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acrobot {
    /// theta1, theta2, dtheta1, dtheta2
    pub state: [f64; 4],
}

impl Acrobot {
    const DT: f64 = 0.2;
    const MAX_VEL_1: f64 = 4.0 * PI;
    const MAX_VEL_2: f64 = 9.0 * PI;
    const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

    pub fn new(state: [f64; 4]) -> Self {
        Self { state }
    }

    fn derivs(s: [f64; 5]) -> [f64; 5] {
        let (m1, m2, l1, lc1, lc2, i1, i2, g) = (1.0, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 9.8);
        let [theta1, theta2, dtheta1, dtheta2, a] = s;
        let d1 = m1 * (lc1 * lc1) + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
        let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * pow2(dtheta2) * theta2.sin()
            - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
            + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
            + phi2;
        let ddtheta2 = (a + d2 / d1 * phi1 - m2 * l1 * lc2 * pow2(dtheta1) * theta2.sin() - phi2)
            / (m2 * (lc2 * lc2) + i2 - pow2(d2) / d1);
        let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
        [dtheta1, dtheta2, ddtheta1, ddtheta2, 0.0]
    }

    fn rk4(y0: [f64; 5], dt: f64) -> [f64; 5] {
        let dt2 = dt / 2.0;
        let shifted = |k: &[f64; 5], h: f64| std::array::from_fn(|i| y0[i] + h * k[i]);
        let k1 = Self::derivs(y0);
        let k2 = Self::derivs(shifted(&k1, dt2));
        let k3 = Self::derivs(shifted(&k2, dt2));
        let k4 = Self::derivs(shifted(&k3, dt));
        std::array::from_fn(|i| y0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    fn wrap(mut x: f64) -> f64 {
        let diff = 2.0 * PI;
        while x > PI {
            x -= diff;
        }
        while x < -PI {
            x += diff;
        }
        x
    }

    fn terminal(&self) -> bool {
        let [t1, t2, ..] = self.state;
        -t1.cos() - (t2 + t1).cos() > 1.0
    }
}

impl Environment for Acrobot {
    const ACTIONS: usize = 3;
    const OBS_DIM: usize = 6;

    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(std::array::from_fn(|_| rng.random_range(-0.1..=0.1)))
    }

    fn observation(&self) -> Vec<f64> {
        let [t1, t2, d1, d2] = self.state;
        vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2]
    }

    fn step(&mut self, action: usize) -> (f64, bool) {
        let [t1, t2, d1, d2] = self.state;
        let next = Self::rk4([t1, t2, d1, d2, Self::TORQUES[action]], Self::DT);
        self.state = [
            Self::wrap(next[0]),
            Self::wrap(next[1]),
            next[2].clamp(-Self::MAX_VEL_1, Self::MAX_VEL_1),
            next[3].clamp(-Self::MAX_VEL_2, Self::MAX_VEL_2),
        ];
        let done = self.terminal();
        (if done { 0.0 } else { -1.0 }, done)
    }
}

/// Square through libm `pow`, as the reference simulator computes it. It
/// differs from `x * x` in the last bit on a small share of inputs, and the
/// acrobot is chaotic enough to turn that into a different episode. The
/// exponent is opaque so the call is not folded into a multiply.
fn pow2(x: f64) -> f64 {
    x.powf(std::hint::black_box(2.0))
}

/// Runs `env` until termination or `max_steps`, choosing actions with
/// `policy`. Returns (total reward, steps taken).
pub fn run_episode<E: Environment>(
    env: &mut E,
    max_steps: usize,
    mut policy: impl FnMut(&E) -> Result<usize>,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    for t in 0..max_steps {
        let a = policy(env)?;
        if a >= E::ACTIONS {
            return Err(Error::Index { index: a, len: E::ACTIONS });
        }
        let (r, done) = env.step(a);
        total += r;
        if done {
            return Ok((total, t + 1));
        }
    }
    Ok((total, max_steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlTask {
    Cartpole,
    Acrobot,
}

impl ControlTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cartpole => "cartpole",
            Self::Acrobot => "acrobot",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::Cartpole, Self::Acrobot].into_iter().find(|t| t.name() == name)
    }

    /// CartPole 4-2-2 (16 params), Acrobot 6-3-3 (33 params).
    pub fn policy_spec(self) -> MlpPolicySpec {
        match self {
            Self::Cartpole => MlpPolicySpec { obs_dim: 4, hidden_dim: 2, action_count: 2 },
            Self::Acrobot => MlpPolicySpec { obs_dim: 6, hidden_dim: 3, action_count: 3 },
        }
    }

    /// Episode return of the greedy MLP policy from the seeded initial state.
    pub fn rollout(self, params: &[f64], seed: u64, max_steps: usize) -> Result<f64> {
        let spec = self.policy_spec();
        match self {
            Self::Cartpole => rollout_with::<CartPole>(spec, params, seed, max_steps),
            Self::Acrobot => rollout_with::<Acrobot>(spec, params, seed, max_steps),
        }
    }
}

fn rollout_with<E: Environment>(spec: MlpPolicySpec, params: &[f64], seed: u64, max_steps: usize) -> Result<f64> {
    let mut env = E::from_seed(seed);
    run_episode(&mut env, max_steps, |e| spec.act(params, &e.observation())).map(|(r, _)| r)
}

pub fn cartpole_rollout(params: &[f64], seed: u64, config: &RolloutConfig) -> Result<f64> {
    ControlTask::Cartpole.rollout(params, seed, config.max_steps)
}

pub fn acrobot_rollout(params: &[f64], seed: u64, config: &RolloutConfig) -> Result<f64> {
    ControlTask::Acrobot.rollout(params, seed, config.max_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub rollouts_per_eval: usize,
    pub max_steps: usize,
    pub base_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { rollouts_per_eval: 8, max_steps: 500, base_seed: 0 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts_per_eval == 0 || self.max_steps == 0 {
            return Err(Error::invalid("rollout config", "rollouts_per_eval and max_steps must be positive"));
        }
        Ok(())
    }

    /// Episode seeds for one generation; shared by every candidate in it.
    pub fn seeds(&self, generation: usize) -> impl Iterator<Item = u64> {
        let n = self.rollouts_per_eval as u64;
        let start = self.base_seed.wrapping_add((generation as u64).wrapping_mul(n));
        (0..n).map(move |r| start.wrapping_add(r))
    }
}

/// Negated mean return over the generation's rollout seeds.
pub fn policy_fitness(params: &[f64], task: ControlTask, config: &RolloutConfig, generation: usize) -> Result<f64> {
    let mut total = 0.0;
    for seed in config.seeds(generation) {
        total += task.rollout(params, seed, config.max_steps)?;
    }
    Ok(-total / config.rollouts_per_eval as f64)
}

#[derive(Debug, Clone)]
pub struct PolicyProblem {
    task: ControlTask,
    bounds: SearchBounds,
    config: RolloutConfig,
}

impl PolicyProblem {
    pub fn new(task: ControlTask, lower: f64, upper: f64, config: RolloutConfig) -> Result<Self> {
        config.validate()?;
        let bounds = SearchBounds::uniform(task.policy_spec().param_count(), lower, upper)?;
        Ok(Self { task, bounds, config })
    }

    pub fn task(&self) -> ControlTask {
        self.task
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }
}

impl Problem for PolicyProblem {
    fn name(&self) -> &str {
        self.task.name()
    }

    fn bounds(&self) -> &SearchBounds {
        &self.bounds
    }

    fn noisy(&self) -> bool {
        true
    }

    fn evaluate_batch(&self, candidates: &[Vec<f64>], generation: usize) -> Result<Vec<f64>> {
        candidates.par_iter().map(|x| policy_fitness(x, self.task, &self.config, generation)).collect()
    }
}

/// Declarative problem description as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// A synthetic function name or `cartpole` / `acrobot`.
    pub name: String,
    /// Search dimensions for synthetic functions; policy tasks ignore it.
    pub dims: usize,
    pub lower: f64,
    pub upper: f64,
    pub shift_seed: Option<u64>,
    pub rollout: RolloutConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { name: "sphere".into(), dims: 2, lower: -3.0, upper: 3.0, shift_seed: None, rollout: RolloutConfig::default() }
    }
}

impl TaskSpec {
    pub fn build(&self) -> Result<Box<dyn Problem>> {
        if let Some(f) = BbobFunction::from_name(&self.name) {
            let mut p = SyntheticProblem::new(f, SearchBounds::uniform(self.dims, self.lower, self.upper)?);
            if let Some(seed) = self.shift_seed {
                p = p.with_shift(seed);
            }
            return Ok(Box::new(p));
        }
        match ControlTask::from_name(&self.name) {
            Some(t) => Ok(Box::new(PolicyProblem::new(t, self.lower, self.upper, self.rollout)?)),
            None => Err(Error::Config(format!("unknown task `{}`", self.name))),
        }
    }

    /// Label used in logs and summaries, e.g. `sphere_d2`.
    pub fn label(&self) -> String {
        match ControlTask::from_name(&self.name) {
            Some(_) => self.name.clone(),
            None => format!("{}_d{}", self.name, self.dims),
        }
    }
}
