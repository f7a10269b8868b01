//! Synchronized data-parallel DDPG.
//!
//! Every worker owns an environment, a replay buffer and an agent replica.
//! At each synchronization point the replicas compute gradients on their own
//! batches, the gradients are reduced in worker order, and every replica
//! applies the same reduced update, so weights never drift apart.

mod consistency;
mod reduce;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::agent::{derive_seed, load_agent, save_agent, AgentCheckpointMeta, AgentError, Batch, DdpgAgent, DdpgConfig, Transition};
use crate::environment::{state_dim, Action, EnvError, Environment};
use crate::goaldb::{sample_goals, DeformationDb, GoalDbError};
use crate::neural::{MlpGradients, ParamSet};
use crate::softbody::Vec3;

pub use consistency::{replica_consistency_check, ConsistencyReport, Divergence};
pub use reduce::{allreduce_sum, fsum, Summation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    GoalDb(#[from] GoalDbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite reduced gradient at update {0}")]
    NonFiniteGradient(usize),
    #[error("gradient shapes differ between workers")]
    ShapeMismatch,
    #[error("learning curve: {0}")]
    Curve(String),
}

/// How worker gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub workers: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub seed: u64,
    pub updates_per_step: usize,
    pub reduction: Reduction,
    pub summation: Summation,
    pub agent: DdpgConfig,
    /// Write a checkpoint every this many episodes (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Train on a database built for a different environment.
    pub allow_fingerprint_mismatch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            workers: 32,
            episodes: 63,
            steps_per_episode: 300,
            seed: 0,
            updates_per_step: 1,
            reduction: Reduction::Sum,
            summation: Summation::Ordered,
            agent: DdpgConfig::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            allow_fingerprint_mismatch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.workers == 0 || self.steps_per_episode == 0 {
            return Err(TrainError::InvalidConfig("workers and steps_per_episode must be at least 1".into()));
        }
        self.agent.validate()?;
        Ok(())
    }

    /// Transitions a full run logs: `W × episodes × steps`.
    pub fn total_transitions(&self) -> usize {
        self.workers * self.episodes * self.steps_per_episode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Cumulative reward of each worker, in worker order.
    pub worker_rewards: Vec<f64>,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    /// Mean over workers of the final mean selected-node distance.
    pub mean_final_distance: f64,
    /// Workers whose final state is within the distance threshold.
    pub done_count: usize,
    pub steps: usize,
    pub updates: usize,
    pub mean_critic_loss: f64,
    pub mean_policy_loss: f64,
}

pub const LEARNING_CURVE_HEADER: &str = "episode,mean_reward,min_reward,max_reward,mean_final_distance,done_count";

pub fn write_learning_curve<W: Write>(mut out: W, curve: &[EpisodeStats]) -> Result<(), TrainError> {
    writeln!(out, "{LEARNING_CURVE_HEADER}")?;
    for s in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.episode, s.mean_reward, s.min_reward, s.max_reward, s.mean_final_distance, s.done_count
        )?;
    }
    Ok(())
}

/// One parsed learning-curve row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    pub mean_final_distance: f64,
    pub done_count: usize,
}

pub fn read_learning_curve<R: BufRead>(input: R) -> Result<Vec<CurveRow>, TrainError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != LEARNING_CURVE_HEADER {
        return Err(TrainError::Curve(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || TrainError::Curve(format!("row {}: '{line}'", i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(CurveRow {
            episode: f[0].parse().map_err(|_| bad())?,
            mean_reward: num(f[1])?,
            min_reward: num(f[2])?,
            max_reward: num(f[3])?,
            mean_final_distance: num(f[4])?,
            done_count: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Critic and actor gradients of one worker's batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerGradients {
    pub critic: MlpGradients,
    pub actor: MlpGradients,
    pub critic_loss: f64,
    pub policy_loss: f64,
}

pub fn worker_gradients(agent: &DdpgAgent, batch: &Batch) -> Result<WorkerGradients, AgentError> {
    let (critic_loss, critic) = agent.critic_update(batch)?;
    let (policy_loss, actor) = agent.policy_update(batch)?;
    Ok(WorkerGradients {
        critic,
        actor,
        critic_loss,
        policy_loss,
    })
}

/// Gradients of every replica on its batch, reduced in worker order.
pub fn reduced_gradients(
    replicas: &[DdpgAgent],
    batches: &[Batch],
    reduction: Reduction,
    summation: Summation,
) -> Result<(WorkerGradients, Vec<WorkerGradients>), TrainError> {
    assert_eq!(replicas.len(), batches.len(), "one batch per replica");
    let per_worker: Vec<WorkerGradients> = replicas
        .par_iter()
        .zip(batches.par_iter())
        .map(|(a, b)| worker_gradients(a, b))
        .collect::<Result<_, _>>()?;
    let critic: Vec<&MlpGradients> = per_worker.iter().map(|g| &g.critic).collect();
    let actor: Vec<&MlpGradients> = per_worker.iter().map(|g| &g.actor).collect();
    let mut critic = allreduce_sum(&critic, summation)?;
    let mut actor = allreduce_sum(&actor, summation)?;
    if reduction == Reduction::Mean {
        let w = 1.0 / replicas.len() as f64;
        critic.scale(w);
        actor.scale(w);
    }
    let n = per_worker.len() as f64;
    let reduced = WorkerGradients {
        critic,
        actor,
        critic_loss: per_worker.iter().map(|g| g.critic_loss).sum::<f64>() / n,
        policy_loss: per_worker.iter().map(|g| g.policy_loss).sum::<f64>() / n,
    };
    Ok((reduced, per_worker))
}

/// One synchronized update: local gradients, reduction, identical apply on
/// every replica. Returns the mean critic and policy losses.
pub fn synchronized_update(
    replicas: &mut [DdpgAgent],
    batches: &[Batch],
    reduction: Reduction,
    summation: Summation,
    update_index: usize,
) -> Result<(f64, f64), TrainError> {
    let (reduced, _) = reduced_gradients(replicas, batches, reduction, summation)?;
    if !reduced.critic.all_finite() || !reduced.actor.all_finite() {
        return Err(TrainError::NonFiniteGradient(update_index));
    }
    replicas
        .par_iter_mut()
        .try_for_each(|a| a.apply_updates(&reduced.critic, &reduced.actor))?;
    Ok((reduced.critic_loss, reduced.policy_loss))
}

const GOAL_TAG: u64 = 0x6f61_6c73;

/// Goals for one episode: `W` distinct records, seeded by (seed, episode).
pub fn episode_goals(db: &DeformationDb, workers: usize, seed: u64, episode: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let picks = sample_goals(db, workers, derive_seed(derive_seed(seed, GOAL_TAG), episode as u64), true)?;
    Ok(picks.into_iter().map(|r| r.targets.clone()).collect())
}

struct Worker {
    env: Environment,
    cumulative_reward: f64,
    last_distance: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    workers: Vec<Worker>,
    replicas: Vec<DdpgAgent>,
    db: DeformationDb,
    fingerprint: String,
    episode: usize,
    updates: usize,
    transitions: usize,
    curve: Vec<EpisodeStats>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpisodeStats>,
    pub transitions: usize,
    pub updates: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh replicas, all initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig, env: &Environment, db: DeformationDb) -> Result<Self, TrainError> {
        cfg.validate()?;
        let dim = state_dim(env.config().m());
        let replicas = (0..cfg.workers)
            .map(|w| DdpgAgent::new(dim, cfg.agent.clone(), cfg.seed, w as u64))
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(cfg, env, db, replicas, 0)
    }

    /// Continues from an agent checkpoint. Replay buffers start empty.
    pub fn resume(cfg: TrainConfig, env: &Environment, db: DeformationDb, checkpoint: &Path) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut input = std::io::BufReader::new(std::fs::File::open(checkpoint)?);
        let (agent, meta) = load_agent(&mut input)?;
        if agent.state_dim() != state_dim(env.config().m()) {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint state dimension {} does not match the environment",
                agent.state_dim()
            )));
        }
        let fp = env.fingerprint();
        if meta.fingerprint != fp && !cfg.allow_fingerprint_mismatch {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint fingerprint {} does not match environment fingerprint {fp}",
                meta.fingerprint
            )));
        }
        let replicas = (0..cfg.workers)
            .map(|w| {
                let mut a = agent.clone();
                a.reseed_streams(cfg.seed ^ meta.episode as u64, w as u64);
                a
            })
            .collect();
        Self::assemble(cfg, env, db, replicas, meta.episode)
    }

    fn assemble(cfg: TrainConfig, env: &Environment, db: DeformationDb, replicas: Vec<DdpgAgent>, episode: usize) -> Result<Self, TrainError> {
        let fingerprint = env.fingerprint();
        if db.fingerprint != fingerprint {
            if cfg.allow_fingerprint_mismatch {
                log::warn!("goal database fingerprint {} differs from environment {fingerprint}", db.fingerprint);
            } else {
                db.check_fingerprint(&fingerprint)?;
            }
        }
        if db.m() != env.config().m() {
            return Err(TrainError::InvalidConfig(format!(
                "database has m={} but the environment selects {} nodes",
                db.m(),
                env.config().m()
            )));
        }
        if db.len() < cfg.workers {
            return Err(GoalDbError::TooFew {
                requested: cfg.workers,
                available: db.len(),
            }
            .into());
        }
        let mut template = env.clone();
        template.config_mut().terminate_on_done = false;
        template.config_mut().max_episode_steps = cfg.steps_per_episode;
        let workers = (0..cfg.workers)
            .map(|_| Worker {
                env: template.clone(),
                cumulative_reward: 0.0,
                last_distance: 0.0,
            })
            .collect();
        Ok(Self {
            cfg,
            workers,
            replicas,
            db,
            fingerprint,
            episode,
            updates: 0,
            transitions: 0,
            curve: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn replicas(&self) -> &[DdpgAgent] {
        &self.replicas
    }

    /// Replica 0; all replicas hold identical weights.
    pub fn agent(&self) -> &DdpgAgent {
        &self.replicas[0]
    }

    pub fn curve(&self) -> &[EpisodeStats] {
        &self.curve
    }

    pub fn episodes_completed(&self) -> usize {
        self.episode
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Runs one episode on every worker with a synchronized update after
    /// each transition once all buffers can supply a batch.
    pub fn run_episode(&mut self) -> Result<EpisodeStats, TrainError> {
        let goals = episode_goals(&self.db, self.cfg.workers, self.cfg.seed, self.episode)?;
        for ((w, agent), goal) in self.workers.iter_mut().zip(&mut self.replicas).zip(&goals) {
            let reinit = w.env.config().reinitialize;
            w.env.reset(goal, reinit)?;
            agent.noise.reset();
            w.cumulative_reward = 0.0;
            w.last_distance = w.env.mean_distance();
        }
        let threshold = self.workers[0].env.config().distance_threshold;
        let (mut critic_loss, mut policy_loss, mut episode_updates) = (0.0, 0.0, 0usize);
        let mut steps = 0;
        for _ in 0..self.cfg.steps_per_episode {
            let outcomes: Vec<Result<(), (usize, EnvError)>> = self
                .workers
                .par_iter_mut()
                .zip(self.replicas.par_iter_mut())
                .enumerate()
                .map(|(i, (w, agent))| collect_transition(w, agent).map_err(|e| (i, e)))
                .collect();
            if let Some((i, e)) = outcomes.into_iter().find_map(Result::err) {
                log::error!("episode {}: worker {i} aborted the episode: {e}", self.episode);
                self.workers[i].env.restore_pristine();
                break;
            }
            steps += 1;
            self.transitions += self.cfg.workers;
            if self.replicas.iter().all(DdpgAgent::ready) {
                for _ in 0..self.cfg.updates_per_step {
                    let batches = self
                        .replicas
                        .iter_mut()
                        .map(DdpgAgent::sample_batch)
                        .collect::<Result<Vec<_>, _>>()?;
                    let (cl, pl) = synchronized_update(
                        &mut self.replicas,
                        &batches,
                        self.cfg.reduction,
                        self.cfg.summation,
                        self.updates,
                    )?;
                    critic_loss += cl;
                    policy_loss += pl;
                    episode_updates += 1;
                    self.updates += 1;
                }
            }
        }
        let rewards: Vec<f64> = self.workers.iter().map(|w| w.cumulative_reward).collect();
        let w = rewards.len() as f64;
        let per_update = |x: f64| if episode_updates > 0 { x / episode_updates as f64 } else { f64::NAN };
        let stats = EpisodeStats {
            episode: self.episode,
            mean_reward: rewards.iter().sum::<f64>() / w,
            min_reward: rewards.iter().copied().fold(f64::INFINITY, f64::min),
            max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_final_distance: self.workers.iter().map(|w| w.last_distance).sum::<f64>() / w,
            done_count: self.workers.iter().filter(|w| w.last_distance < threshold).count(),
            worker_rewards: rewards,
            steps,
            updates: episode_updates,
            mean_critic_loss: per_update(critic_loss),
            mean_policy_loss: per_update(policy_loss),
        };
        log::info!(
            "episode {}: mean reward {:.4}, final distance {:.4} m, done {}/{}, critic loss {:.3e}",
            stats.episode,
            stats.mean_reward,
            stats.mean_final_distance,
            stats.done_count,
            self.cfg.workers,
            stats.mean_critic_loss
        );
        self.episode += 1;
        self.curve.push(stats.clone());
        Ok(stats)
    }

    /// Runs the configured number of episodes (counting any already done
    /// before a resume), writing periodic and final checkpoints.
    pub fn run(&mut self, mut on_episode: impl FnMut(&EpisodeStats)) -> Result<TrainOutcome, TrainError> {
        while self.episode < self.cfg.episodes {
            let stats = self.run_episode()?;
            on_episode(&stats);
            if self.cfg.checkpoint_every > 0 && self.episode % self.cfg.checkpoint_every == 0 && self.episode < self.cfg.episodes {
                if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                    self.save_checkpoint(&dir.join(format!("checkpoint_ep{:04}.ddpg", self.episode)))?;
                }
            }
        }
        let final_checkpoint = match self.cfg.checkpoint_dir.clone() {
            Some(dir) => {
                let path = dir.join("final.ddpg");
                self.save_checkpoint(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(TrainOutcome {
            curve: self.curve.clone(),
            transitions: self.transitions,
            updates: self.updates,
            final_checkpoint,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let meta = AgentCheckpointMeta {
            fingerprint: self.fingerprint.clone(),
            episode: self.episode,
            seed: self.cfg.seed,
        };
        save_agent(&mut out, self.agent(), &meta)?;
        out.flush()?;
        log::info!("checkpoint written to {}", path.display());
        Ok(())
    }
}

fn collect_transition(w: &mut Worker, agent: &mut DdpgAgent) -> Result<(), EnvError> {
    let state = w.env.observation().to_vec();
    let a = agent.select_action(&state, true).expect("state dimension checked at construction");
    let result = w.env.step(&Action::clamped(Vec3::new(a[0], a[1], a[2])))?;
    w.cumulative_reward += result.reward;
    w.last_distance = result.info.mean_distance;
    agent
        .store(Transition {
            state,
            action: a,
            reward: result.reward,
            next_state: result.observation.to_vec(),
            done: result.done,
        })
        .expect("state dimension checked at construction");
    Ok(())
}
