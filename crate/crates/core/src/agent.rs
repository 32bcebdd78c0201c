//! Actor-critic beam learner.
//!
//! The state is the current quantized phase vector and the action is the next
//! one. The actor proposes continuous phases (`π·tanh`), which are quantized
//! only when applied to the environment; the replay buffer keeps the raw action
//! for training so quantization never sits on a gradient path. Updates follow
//! DDPG: a critic regressed onto `r + γ·Q'(s', μ'(s'))`, an actor that ascends
//! the critic, and Polyak-averaged target networks.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::{wrap_phase, PhaseCodebook, PhaseVector};
use crate::channel::Scenario;
use crate::environment::{capped_db, full_metrics, to_db, Environment, Metrics, StepOutcome};
use crate::error::{Error, Result};
use crate::neuralnet::{mse_loss, Activation, AdamState, DenseNet};

/// How phases are presented to the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticEncoding {
    /// Raw state and action phases, `2M` inputs.
    #[default]
    Phase,
    /// `cos` and `sin` of every phase, `4M` inputs. The received power is a
    /// quadratic form in these, which the critic generalizes better.
    Trig,
}

impl CriticEncoding {
    pub fn width(self, antennas: usize) -> usize {
        match self {
            CriticEncoding::Phase => 2 * antennas,
            CriticEncoding::Trig => 4 * antennas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorCriticConfig {
    /// Hidden widths of the actor; `[16M, 16M]` when empty.
    pub actor_hidden: Vec<usize>,
    /// Hidden widths of the critic; `[32M, 16]` when empty.
    pub critic_hidden: Vec<usize>,
    pub critic_encoding: CriticEncoding,
    /// Initial standard deviation of the Gaussian phase noise (radians).
    pub explore_sigma: f64,
    /// Per-iteration multiplicative decay of the exploration noise.
    pub explore_decay: f64,
    pub explore_floor: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Gradient updates per environment interaction.
    pub updates_per_step: usize,
    pub seed: u64,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            actor_hidden: Vec::new(),
            critic_hidden: Vec::new(),
            critic_encoding: CriticEncoding::default(),
            explore_sigma: 0.5,
            explore_decay: 0.995,
            explore_floor: 0.3,
            replay_capacity: 4096,
            batch_size: 128,
            gamma: 0.5,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            updates_per_step: 1,
            seed: 0,
        }
    }
}

impl ActorCriticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = |name: &str, v: f64, problems: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name}: must be > 0, got {v}"));
            }
        };
        positive("explore_sigma", self.explore_sigma, &mut problems);
        positive("explore_decay", self.explore_decay, &mut problems);
        positive("explore_floor", self.explore_floor, &mut problems);
        positive("actor_lr", self.actor_lr, &mut problems);
        positive("critic_lr", self.critic_lr, &mut problems);
        if self.explore_decay > 1.0 {
            problems.push(format!(
                "explore_decay: must be <= 1, got {}",
                self.explore_decay
            ));
        }
        if self.updates_per_step == 0 {
            problems.push("updates_per_step: must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size: must be >= 2, got {}", self.batch_size));
        }
        if self.replay_capacity < self.batch_size {
            problems.push(format!(
                "replay_capacity: must be >= batch_size ({}), got {}",
                self.batch_size, self.replay_capacity
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            problems.push(format!("gamma: must be in [0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            problems.push(format!("tau: must be in (0, 1], got {}", self.tau));
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            problems.push("hidden layer widths must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn actor_widths(&self, antennas: usize) -> Vec<usize> {
        if self.actor_hidden.is_empty() {
            vec![16 * antennas, 16 * antennas]
        } else {
            self.actor_hidden.clone()
        }
    }

    pub fn critic_widths(&self, antennas: usize) -> Vec<usize> {
        if self.critic_hidden.is_empty() {
            vec![32 * antennas, 16]
        } else {
            self.critic_hidden.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: PhaseVector,
    /// Continuous actor output (plus exploration) that produced `action`.
    pub raw_action: PhaseVector,
    /// Quantized action actually applied; equals `next_state`.
    pub action: PhaseVector,
    pub reward: i8,
    pub next_state: PhaseVector,
    pub sinr: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub critic_loss: f64,
    /// Mean critic value of the actor's actions (the quantity it ascends).
    pub actor_objective: f64,
}

/// Where a step's reward came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSource {
    Real,
    Virtual,
}

impl StepSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepSource::Real => "real",
            StepSource::Virtual => "virtual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iter: usize,
    /// SINR estimate the agent was rewarded on (linear).
    pub sinr: f64,
    /// Ground truth of the applied beam, when a monitor scenario was supplied.
    pub metrics: Option<Metrics>,
    pub reward: i8,
    pub explore_sigma: f64,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub source: StepSource,
}

pub fn trajectory_header(k: usize) -> String {
    let mut h = crate::environment::step_log_header(k);
    h.push_str(",explore_sigma,critic_loss,actor_objective,source");
    h
}

pub fn write_trajectory_csv<W: std::io::Write>(
    mut out: W,
    k: usize,
    rows: &[TrajectoryRow],
) -> std::io::Result<()> {
    writeln!(out, "{}", trajectory_header(k))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut line = String::new();
        match &r.metrics {
            Some(m) => line.push_str(&crate::environment::step_log_row(
                r.iter, r.sinr, m, r.reward,
            )),
            None => {
                let _ = write!(line, "{},{}", r.iter, capped_db(to_db(r.sinr)));
                for _ in 0..k {
                    line.push(',');
                }
                let _ = write!(line, ",,,{}", r.reward);
            }
        }
        let _ = write!(
            line,
            ",{},{},{},{}",
            r.explore_sigma,
            opt(r.critic_loss),
            opt(r.actor_objective),
            r.source.as_str()
        );
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// State carried across iterations of one learning run, independent of which
/// environment answers the next step.
#[derive(Debug, Clone)]
pub struct LearningSession {
    pub state: PhaseVector,
    pub prev_sinr: f64,
    pub iteration: usize,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub raw_action: PhaseVector,
    pub action: PhaseVector,
    pub outcome: StepOutcome,
}

/// Running maximum of measured SINR.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BestBeam {
    pub beam: Option<PhaseVector>,
    pub sinr: f64,
}

impl BestBeam {
    pub fn offer(&mut self, beam: &PhaseVector, sinr: f64) -> bool {
        if self.beam.is_none() || sinr > self.sinr {
            self.beam = Some(beam.clone());
            self.sinr = sinr;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub best: PhaseVector,
    pub best_sinr: f64,
    pub trajectory: Vec<TrajectoryRow>,
    /// Best measured SINR after each iteration; non-decreasing.
    pub best_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: ActorCriticConfig,
    codebook: PhaseCodebook,
    antennas: usize,
    actor: DenseNet,
    critic: DenseNet,
    actor_target: DenseNet,
    critic_target: DenseNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    sigma: f64,
}

impl Agent {
    pub fn new(
        antennas: usize,
        codebook: PhaseCodebook,
        config: ActorCriticConfig,
    ) -> Result<Self> {
        config.validate()?;
        if antennas == 0 {
            return Err(Error::invalid("agent needs at least one antenna"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor = DenseNet::mlp(
            antennas,
            &config.actor_widths(antennas),
            antennas,
            true,
            Activation::ScaledTanh(PI),
            &mut rng,
        );
        let critic = DenseNet::mlp(
            config.critic_encoding.width(antennas),
            &config.critic_widths(antennas),
            1,
            true,
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            actor_opt: AdamState::for_net(&actor, config.actor_lr),
            critic_opt: AdamState::for_net(&critic, config.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(config.replay_capacity),
            sigma: config.explore_sigma,
            codebook,
            antennas,
            rng,
            config,
        })
    }

    pub fn config(&self) -> &ActorCriticConfig {
        &self.config
    }

    pub fn codebook(&self) -> &PhaseCodebook {
        &self.codebook
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn critic(&self) -> &DenseNet {
        &self.critic
    }

    pub fn actor_target(&self) -> &DenseNet {
        &self.actor_target
    }

    pub fn critic_target(&self) -> &DenseNet {
        &self.critic_target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn exploration_sigma(&self) -> f64 {
        self.sigma
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Uniform draw from `Ψ^M`.
    pub fn random_beam(&mut self) -> PhaseVector {
        let cb = &self.codebook;
        PhaseVector(
            (0..self.antennas)
                .map(|_| cb.value(self.rng.gen_range(0..cb.len())))
                .collect(),
        )
    }

    /// Returns `(raw, quantized)` actions for a state.
    pub fn act(
        &mut self,
        state: &PhaseVector,
        explore: bool,
    ) -> Result<(PhaseVector, PhaseVector)> {
        if state.len() != self.antennas {
            return Err(Error::invalid(format!(
                "state has {} phases for {} antennas",
                state.len(),
                self.antennas
            )));
        }
        let x = Array2::from_shape_vec((1, self.antennas), state.0.clone()).expect("row vector");
        let out = self.actor.forward(&x)?;
        let mut raw: Vec<f64> = out.iter().copied().collect();
        if explore {
            let noise = Normal::new(0.0, self.sigma).expect("positive sigma");
            for v in &mut raw {
                *v = wrap_phase(*v + noise.sample(&mut self.rng));
            }
        } else {
            for v in &mut raw {
                *v = wrap_phase(*v);
            }
        }
        let raw = PhaseVector(raw);
        let quantized = raw.quantize(&self.codebook);
        Ok((raw, quantized))
    }

    /// One critic and one actor update from a uniform minibatch, then soft
    /// target updates. `None` when the buffer is smaller than a batch.
    pub fn train_step(&mut self) -> Result<Option<TrainDiagnostics>> {
        let b = self.config.batch_size;
        if self.buffer.len() < b {
            return Ok(None);
        }
        let m = self.antennas;
        let batch = self.buffer.sample(b, &mut self.rng);
        let mut states = Array2::zeros((b, m));
        let mut raw_actions = Array2::zeros((b, m));
        let mut next_states = Array2::zeros((b, m));
        let mut rewards = Array2::zeros((b, 1));
        for (i, t) in batch.iter().enumerate() {
            for j in 0..m {
                states[[i, j]] = t.state.0[j];
                raw_actions[[i, j]] = t.raw_action.0[j];
                next_states[[i, j]] = t.next_state.0[j];
            }
            rewards[[i, 0]] = t.reward as f64;
        }

        let next_actions = self.actor_target.forward(&next_states)?;
        let next_q = self
            .critic_target
            .forward(&self.critic_input(&next_states, &next_actions))?;
        let targets = rewards + next_q * self.config.gamma;

        let q = self
            .critic
            .forward_train(&self.critic_input(&states, &raw_actions))?;
        let (critic_loss, dq) = mse_loss(&q, &targets)?;
        let (grads, _) = self.critic.backward(&dq)?;
        self.critic_opt.step(self.critic.params_mut(), &grads)?;

        let actions = self.actor.forward_train(&states)?;
        let policy_q = self
            .critic
            .forward_train(&self.critic_input(&states, &actions))?;
        let actor_objective = policy_q.mean().unwrap_or(0.0);
        let ascend = Array2::from_elem((b, 1), -1.0 / b as f64);
        let (_, d_input) = self.critic.backward(&ascend)?;
        let d_actions = self.action_gradient(&actions, &d_input);
        let (actor_grads, _) = self.actor.backward(&d_actions)?;
        self.actor_opt.step(self.actor.params_mut(), &actor_grads)?;

        self.actor_target
            .soft_update_from(&self.actor, self.config.tau)?;
        self.critic_target
            .soft_update_from(&self.critic, self.config.tau)?;
        Ok(Some(TrainDiagnostics {
            critic_loss,
            actor_objective,
        }))
    }

    /// Critic input rows for state and action phase rows.
    pub fn critic_input(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let m = self.antennas;
        let rows = states.nrows();
        match self.config.critic_encoding {
            CriticEncoding::Phase => {
                let mut x = Array2::zeros((rows, 2 * m));
                x.slice_mut(s![.., ..m]).assign(states);
                x.slice_mut(s![.., m..]).assign(actions);
                x
            }
            CriticEncoding::Trig => {
                let mut x = Array2::zeros((rows, 4 * m));
                x.slice_mut(s![.., ..m]).assign(&states.mapv(f64::cos));
                x.slice_mut(s![.., m..2 * m]).assign(&states.mapv(f64::sin));
                x.slice_mut(s![.., 2 * m..3 * m])
                    .assign(&actions.mapv(f64::cos));
                x.slice_mut(s![.., 3 * m..]).assign(&actions.mapv(f64::sin));
                x
            }
        }
    }

    /// Chains a gradient with respect to the critic input back to the action
    /// phases.
    fn action_gradient(&self, actions: &Array2<f64>, d_input: &Array2<f64>) -> Array2<f64> {
        let m = self.antennas;
        match self.config.critic_encoding {
            CriticEncoding::Phase => d_input.slice(s![.., m..]).to_owned(),
            CriticEncoding::Trig => {
                let d_cos = d_input.slice(s![.., 2 * m..3 * m]);
                let d_sin = d_input.slice(s![.., 3 * m..]);
                &d_sin * &actions.mapv(f64::cos) - &d_cos * &actions.mapv(f64::sin)
            }
        }
    }

    /// Worst relative error between the deterministic policy gradient of the
    /// mean critic value over `states` (critic → action → actor parameters)
    /// and its central-difference estimate. Both nets run in training mode.
    pub fn policy_gradient_check(&mut self, states: &Array2<f64>) -> Result<f64> {
        let b = states.nrows();
        if b == 0 || states.ncols() != self.antennas {
            return Err(Error::Shape(format!(
                "states are {}x{}, expected nx{}",
                b,
                states.ncols(),
                self.antennas
            )));
        }
        let objective = |agent: &Agent, actor: &DenseNet| -> Result<f64> {
            let actions = actor.clone().forward_train(states)?;
            let x = agent.critic_input(states, &actions);
            Ok(agent
                .critic
                .clone()
                .forward_train(&x)?
                .mean()
                .unwrap_or(0.0))
        };
        let actions = self.actor.forward_train(states)?;
        let x = self.critic_input(states, &actions);
        self.critic.forward_train(&x)?;
        let (_, d_input) = self
            .critic
            .backward(&Array2::from_elem((b, 1), 1.0 / b as f64))?;
        let d_actions = self.action_gradient(&actions, &d_input);
        let (grads, _) = self.actor.backward(&d_actions)?;

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (g, block) in grads.0.iter().enumerate() {
            for (i, &analytic) in block.iter().enumerate() {
                let mut plus = self.actor.clone();
                plus.params_mut()[g][i] += h;
                let mut minus = self.actor.clone();
                minus.params_mut()[g][i] -= h;
                let numeric = (objective(self, &plus)? - objective(self, &minus)?) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }

    /// Inference-mode critic values for state and action phase rows.
    pub fn q_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        self.critic.forward(&self.critic_input(states, actions))
    }

    /// Starts a run from a uniformly random beam, measured once so the first
    /// reward has a reference.
    pub fn begin<E: Environment + ?Sized>(&mut self, env: &mut E) -> Result<LearningSession> {
        self.check_env(env)?;
        let state = self.random_beam();
        let outcome = env.step(0.0, &state)?;
        Ok(LearningSession {
            state,
            prev_sinr: outcome.sinr,
            iteration: 0,
            trajectory: Vec::new(),
        })
    }

    fn check_env<E: Environment + ?Sized>(&self, env: &E) -> Result<()> {
        if env.antennas() != self.antennas || env.codebook() != &self.codebook {
            return Err(Error::invalid(
                "environment array or codebook does not match the agent",
            ));
        }
        Ok(())
    }

    /// act → step → store → train, once.
    pub fn iterate<E: Environment + ?Sized>(
        &mut self,
        session: &mut LearningSession,
        env: &mut E,
        monitor: Option<&Scenario>,
        source: StepSource,
    ) -> Result<StepRecord> {
        self.check_env(env)?;
        let (raw_action, action) = self.act(&session.state, true)?;
        let outcome = env.step(session.prev_sinr, &action)?;
        self.remember(Transition {
            state: session.state.clone(),
            raw_action: raw_action.clone(),
            action: action.clone(),
            reward: outcome.reward,
            next_state: outcome.next_state.clone(),
            sinr: outcome.sinr,
        });
        let mut diag = None;
        for _ in 0..self.config.updates_per_step {
            diag = self.train_step()?;
        }
        session.iteration += 1;
        session.trajectory.push(TrajectoryRow {
            iter: session.iteration,
            sinr: outcome.sinr,
            metrics: monitor.map(|s| full_metrics(s, &action.to_combiner())),
            reward: outcome.reward,
            explore_sigma: self.sigma,
            critic_loss: diag.map(|d| d.critic_loss),
            actor_objective: diag.map(|d| d.actor_objective),
            source,
        });
        session.state = outcome.next_state.clone();
        session.prev_sinr = outcome.sinr;
        self.sigma = (self.sigma * self.config.explore_decay).max(self.config.explore_floor);
        Ok(StepRecord {
            raw_action,
            action,
            outcome,
        })
    }
}

/// Runs `iterations` act/step/store/train cycles against one environment and
/// reports the best measured beam. `monitor` only feeds the ground-truth
/// columns of the trajectory log.
pub fn learn<E: Environment + ?Sized>(
    agent: &mut Agent,
    env: &mut E,
    iterations: usize,
    monitor: Option<&Scenario>,
) -> Result<LearnOutcome> {
    if iterations == 0 {
        return Err(Error::invalid("learning needs at least one iteration"));
    }
    let mut session = agent.begin(env)?;
    let mut best = BestBeam::default();
    let mut best_history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let rec = agent.iterate(&mut session, env, monitor, StepSource::Real)?;
        best.offer(&rec.action, rec.outcome.sinr);
        best_history.push(best.sinr);
    }
    Ok(LearnOutcome {
        best: best.beam.expect("at least one iteration"),
        best_sinr: best.sinr,
        trajectory: session.trajectory,
        best_history,
    })
}
