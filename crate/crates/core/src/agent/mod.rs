//! DDPG agent: replay memory, exploration noise, losses and target tracking.
//!
//! Loss evaluation and weight updates are separate calls. In synchronized
//! training every replica computes gradients on its own batch, the trainer
//! sums them, and each replica applies the same sum through
//! [`DdpgAgent::apply_updates`].

mod checkpoint;
mod noise;
mod replay;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::neural::{polyak_update, AdamConfig, AdamState, Mlp, MlpGradients, MlpSpec, NeuralError, OutputActivation};

pub use checkpoint::{load_agent, save_agent, AgentCheckpointMeta, AGENT_MAGIC};
pub use noise::{OuNoise, OuParams};
pub use replay::{Batch, ReplayBuffer, Transition};

pub const ACTION_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("replay buffer holds {size} transitions, {needed} needed")]
    NotReady { size: usize, needed: usize },
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("agent checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpgConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub noise: OuParams,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            gamma: 0.99,
            tau: 0.01,
            batch_size: 128,
            buffer_capacity: 50_000,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            noise: OuParams::default(),
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if !(0.9..1.0).contains(&self.gamma) {
            return bad(format!("discount {} outside [0.9, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("Polyak factor {} outside (0, 1]", self.tau));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad(format!(
                "batch size {} must be positive and at most the buffer capacity {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?}", self.hidden));
        }
        self.noise.validate()
    }

    pub fn actor_spec(&self, state_dim: usize) -> MlpSpec {
        MlpSpec::new(state_dim, self.hidden.clone(), ACTION_DIM, OutputActivation::Tanh)
    }

    pub fn critic_spec(&self, state_dim: usize) -> MlpSpec {
        MlpSpec::new(state_dim + ACTION_DIM, self.hidden.clone(), 1, OutputActivation::Identity)
    }
}

/// Stage of [`DdpgAgent::apply_updates_observed`] that has just completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePhase {
    Critic,
    Actor,
    Targets,
}

/// SplitMix64 finalizer; derives independent stream seeds from one seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ACTOR_TAG: u64 = 1;
const CRITIC_TAG: u64 = 2;
const NOISE_TAG: u64 = 3;
const SAMPLE_TAG: u64 = 4;

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    pub noise: OuNoise,
    config: DdpgConfig,
    state_dim: usize,
}

impl DdpgAgent {
    /// Weights depend on `seed` only; the noise and batch-sampling streams
    /// additionally depend on `stream`, so replicas built from one seed with
    /// different streams share weights but explore differently.
    pub fn new(state_dim: usize, config: DdpgConfig, seed: u64, stream: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let actor = Mlp::init(config.actor_spec(state_dim), derive_seed(seed, ACTOR_TAG))?;
        let critic = Mlp::init(config.critic_spec(state_dim), derive_seed(seed, CRITIC_TAG))?;
        Ok(Self::from_networks(state_dim, config, actor, critic, seed, stream))
    }

    pub(crate) fn from_networks(
        state_dim: usize,
        config: DdpgConfig,
        actor: Mlp,
        critic: Mlp,
        seed: u64,
        stream: u64,
    ) -> Self {
        let actor_opt = AdamState::new(&actor, AdamConfig::with_lr(config.actor_lr));
        let critic_opt = AdamState::new(&critic, AdamConfig::with_lr(config.critic_lr));
        let stream_seed = derive_seed(seed, stream.wrapping_add(1 << 32));
        Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            buffer: ReplayBuffer::new(config.buffer_capacity, derive_seed(stream_seed, SAMPLE_TAG)),
            noise: OuNoise::new(config.noise, derive_seed(stream_seed, NOISE_TAG)),
            config,
            state_dim,
        }
    }

    /// Replaces the noise and sampling streams, keeping weights.
    pub fn reseed_streams(&mut self, seed: u64, stream: u64) {
        let stream_seed = derive_seed(seed, stream.wrapping_add(1 << 32));
        self.buffer.reseed(derive_seed(stream_seed, SAMPLE_TAG));
        self.noise = OuNoise::new(self.config.noise, derive_seed(stream_seed, NOISE_TAG));
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Whether enough transitions are stored to draw a batch.
    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.config.batch_size
    }

    /// Actor output, plus clamped OU noise when exploring. The noise stream
    /// only advances when `explore` is set.
    pub fn select_action(&mut self, state: &[f64], explore: bool) -> Result<[f64; ACTION_DIM], AgentError> {
        let mut a = self.act(state)?;
        if explore {
            let n = self.noise.sample();
            for (ai, ni) in a.iter_mut().zip(n) {
                *ai = (*ai + ni).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    /// Deterministic policy output; touches no agent state.
    pub fn act(&self, state: &[f64]) -> Result<[f64; ACTION_DIM], AgentError> {
        if state.len() != self.state_dim {
            return Err(AgentError::DimensionMismatch {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        let (out, _) = self.actor.forward_one(state)?;
        Ok([out[0], out[1], out[2]])
    }

    pub fn store(&mut self, t: Transition) -> Result<(), AgentError> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(AgentError::DimensionMismatch {
                expected: self.state_dim,
                got: t.state.len().max(t.next_state.len()),
            });
        }
        self.buffer.push(t);
        Ok(())
    }

    pub fn sample_batch(&mut self) -> Result<Batch, AgentError> {
        self.buffer.sample(self.config.batch_size)
    }

    /// `Q_B = r + γ·Q′(s′, μ′(s′))·(1 − d)` using the target networks.
    pub fn bellman_targets(&self, batch: &Batch) -> Result<Array1<f64>, AgentError> {
        let next_actions = self.actor_target.predict(batch.next_states.view())?;
        let q_next = self
            .critic_target
            .predict(concat_state_action(batch.next_states.view(), next_actions.view()).view())?;
        let gamma = self.config.gamma;
        Ok(ndarray::Zip::from(&batch.rewards)
            .and(q_next.column(0))
            .and(&batch.dones)
            .map_collect(|&r, &q, &d| r + gamma * q * (1.0 - d)))
    }

    /// Mean squared Bellman error and its critic gradient. Targets are
    /// treated as constants.
    pub fn critic_update(&self, batch: &Batch) -> Result<(f64, MlpGradients), AgentError> {
        let targets = self.bellman_targets(batch)?;
        self.critic_loss_with_targets(batch, &targets)
    }

    pub fn critic_loss_with_targets(&self, batch: &Batch, targets: &Array1<f64>) -> Result<(f64, MlpGradients), AgentError> {
        let n = batch.len() as f64;
        let input = concat_state_action(batch.states.view(), batch.actions.view());
        let cache = self.critic.forward(input.view())?;
        let q = cache.output().column(0);
        let err = targets - &q;
        let loss = err.dot(&err) / n;
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss("critic"));
        }
        let dq = (err * (-2.0 / n)).insert_axis(Axis(1));
        let (grads, _) = self.critic.backward(&cache, dq.view(), true)?;
        Ok((loss, grads.expect("parameter gradients requested")))
    }

    /// `−mean Q(s, μ(s))` and its actor gradient through the frozen critic.
    pub fn policy_update(&self, batch: &Batch) -> Result<(f64, MlpGradients), AgentError> {
        let n = batch.len() as f64;
        let actor_cache = self.actor.forward(batch.states.view())?;
        let input = concat_state_action(batch.states.view(), actor_cache.output().view());
        let critic_cache = self.critic.forward(input.view())?;
        let loss = -critic_cache.output().sum() / n;
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss("policy"));
        }
        let dq = Array2::from_elem((batch.len(), 1), -1.0 / n);
        let (_, d_input) = self.critic.backward(&critic_cache, dq.view(), false)?;
        let d_action = d_input.slice(s![.., self.state_dim..]);
        let (grads, _) = self.actor.backward(&actor_cache, d_action, true)?;
        Ok((loss, grads.expect("parameter gradients requested")))
    }

    /// ADAM on the critic, ADAM on the actor, then one Polyak step of both
    /// targets.
    pub fn apply_updates(&mut self, critic_grads: &MlpGradients, actor_grads: &MlpGradients) -> Result<(), AgentError> {
        self.apply_updates_observed(critic_grads, actor_grads, |_| {})
    }

    pub fn apply_updates_observed(
        &mut self,
        critic_grads: &MlpGradients,
        actor_grads: &MlpGradients,
        mut observer: impl FnMut(UpdatePhase),
    ) -> Result<(), AgentError> {
        self.critic_opt.step(&mut self.critic, critic_grads)?;
        observer(UpdatePhase::Critic);
        self.actor_opt.step(&mut self.actor, actor_grads)?;
        observer(UpdatePhase::Actor);
        self.update_targets()?;
        observer(UpdatePhase::Targets);
        Ok(())
    }

    pub fn update_targets(&mut self) -> Result<(), AgentError> {
        polyak_update(&mut self.critic_target, &self.critic, self.config.tau)?;
        polyak_update(&mut self.actor_target, &self.actor, self.config.tau)?;
        Ok(())
    }

    /// One local (unsynchronized) training step.
    pub fn train_step(&mut self) -> Result<(f64, f64), AgentError> {
        let batch = self.sample_batch()?;
        let (critic_loss, cg) = self.critic_update(&batch)?;
        let (policy_loss, ag) = self.policy_update(&batch)?;
        self.apply_updates(&cg, &ag)?;
        Ok((critic_loss, policy_loss))
    }
}

/// Row-wise `[state | action]` critic input.
pub fn concat_state_action(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[states, actions]).expect("matching batch sizes")
}
