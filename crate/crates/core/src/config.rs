//! Run configuration in a flat `section.key = value` text format.
//!
//! Every tunable of the pipeline has a key. Unknown keys are errors, missing
//! keys keep their defaults, `#` starts a comment. [`RunConfig::to_text`]
//! writes every key in a fixed order, and its SHA-256 is the config hash
//! recorded in run manifests.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::DdpgConfig;
use crate::environment::{select_default_nodes, settle_initial_state, BoxPreset, EnvConfig, EnvError, Environment, WorkspaceBox};
use crate::eval::EvalConfig;
use crate::goaldb::{preset_grid, SettleOptions};
use crate::softbody::{build_bar_mesh, BarGeometry, MaterialParams, SimError, Vec3, DEFAULT_GRAVITY};
use crate::trainer::{Reduction, Summation, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    /// Number of selected nodes, used when `node_ids` is empty.
    pub m: usize,
    /// Explicit selected node indices; empty means automatic selection.
    pub node_ids: Vec<usize>,
    pub substeps: usize,
    pub distance_threshold: f64,
    pub max_episode_steps: usize,
    pub workspace: BoxPreset,
    pub reinitialize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbSection {
    pub workspace: BoxPreset,
    /// Lattice counts; `None` uses the preset grid of the chosen box.
    pub grid: Option<[usize; 3]>,
    pub settle: SettleOptions,
}

impl DbSection {
    pub fn grid(&self) -> [usize; 3] {
        self.grid.unwrap_or_else(|| preset_grid(self.workspace))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: BarGeometry,
    pub material: MaterialParams,
    pub gravity: Vec3,
    pub env: EnvSection,
    pub db: DbSection,
    pub agent: DdpgConfig,
    /// Training loop settings; the seed and agent fields are taken from
    /// the top level when building a [`TrainConfig`].
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            geometry: BarGeometry::default(),
            material: MaterialParams::default(),
            gravity: Vec3::from(DEFAULT_GRAVITY),
            env: EnvSection {
                m: 2,
                node_ids: Vec::new(),
                substeps: 20,
                distance_threshold: 0.05,
                max_episode_steps: train.steps_per_episode,
                workspace: BoxPreset::Small,
                reinitialize: true,
            },
            db: DbSection {
                workspace: BoxPreset::Small,
                grid: None,
                settle: SettleOptions::default(),
            },
            agent: DdpgConfig::default(),
            train,
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: format!("'{v}': {e}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3], ConfigError>
where
    T::Err: std::fmt::Display,
{
    let xs: Vec<T> = parse_list(key, v)?;
    <[T; 3]>::try_from(xs).map_err(|_| ConfigError::Value {
        key: key.to_string(),
        msg: format!("'{v}': expected three comma-separated values"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            msg: format!("'{v}' is not a boolean"),
        }),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_reduction(v: &str) -> Result<Reduction, String> {
    match v {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("unknown reduction '{v}' (expected sum or mean)")),
    }
}

pub fn parse_summation(v: &str) -> Result<Summation, String> {
    match v {
        "ordered" => Ok(Summation::Ordered),
        "exact" => Ok(Summation::Exact),
        _ => Err(format!("unknown summation '{v}' (expected ordered or exact)")),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key = value, found '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::Value { .. } | ConfigError::UnknownKey(_) => ConfigError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; also used for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "geometry.length" => self.geometry.length = parse(k, v)?,
            "geometry.cross_section" => self.geometry.cross_section = parse(k, v)?,
            "geometry.cells" => self.geometry.cells = parse_triple(k, v)?,
            "geometry.split" => self.geometry.split = parse(k, v)?,
            "material.young_modulus" => self.material.young_modulus = parse(k, v)?,
            "material.poisson_ratio" => self.material.poisson_ratio = parse(k, v)?,
            "material.total_mass" => self.material.total_mass = parse(k, v)?,
            "material.damping_ratio" => self.material.damping_ratio = parse(k, v)?,
            "material.friction_coeff" => self.material.friction_coeff = parse(k, v)?,
            "material.sim_dt" => self.material.sim_dt = parse(k, v)?,
            "physics.gravity" => self.gravity = Vec3::from(parse_triple::<f64>(k, v)?),
            "env.m" => self.env.m = parse(k, v)?,
            "env.node_ids" => self.env.node_ids = parse_list(k, v)?,
            "env.substeps" => self.env.substeps = parse(k, v)?,
            "env.distance_threshold" => self.env.distance_threshold = parse(k, v)?,
            "env.max_episode_steps" => self.env.max_episode_steps = parse(k, v)?,
            "env.box" => self.env.workspace = parse(k, v)?,
            "env.reinitialize" => self.env.reinitialize = parse_bool(k, v)?,
            "db.box" => self.db.workspace = parse(k, v)?,
            "db.grid" => {
                self.db.grid = if v == "preset" { None } else { Some(parse_triple(k, v)?) };
            }
            "db.settle_max_steps" => self.db.settle.max_steps = parse(k, v)?,
            "db.settle_vel_tol" => self.db.settle.vel_tol = parse(k, v)?,
            "agent.hidden" => self.agent.hidden = parse_list(k, v)?,
            "agent.gamma" => self.agent.gamma = parse(k, v)?,
            "agent.tau" => self.agent.tau = parse(k, v)?,
            "agent.batch_size" => self.agent.batch_size = parse(k, v)?,
            "agent.buffer_capacity" => self.agent.buffer_capacity = parse(k, v)?,
            "agent.actor_lr" => self.agent.actor_lr = parse(k, v)?,
            "agent.critic_lr" => self.agent.critic_lr = parse(k, v)?,
            "agent.ou_theta" => self.agent.noise.theta = parse(k, v)?,
            "agent.ou_sigma" => self.agent.noise.sigma = parse(k, v)?,
            "agent.ou_mu" => self.agent.noise.mu = parse(k, v)?,
            "agent.ou_dt" => self.agent.noise.dt = parse(k, v)?,
            "train.workers" => self.train.workers = parse(k, v)?,
            "train.episodes" => self.train.episodes = parse(k, v)?,
            "train.steps_per_episode" => self.train.steps_per_episode = parse(k, v)?,
            "train.updates_per_step" => self.train.updates_per_step = parse(k, v)?,
            "train.reduction" => {
                self.train.reduction = parse_reduction(v).map_err(|msg| ConfigError::Value { key: k.into(), msg })?
            }
            "train.summation" => {
                self.train.summation = parse_summation(v).map_err(|msg| ConfigError::Value { key: k.into(), msg })?
            }
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "eval.episodes" => self.eval.episodes = parse(k, v)?,
            "eval.max_steps" => self.eval.max_steps = parse(k, v)?,
            "eval.threshold" => self.eval.threshold = parse(k, v)?,
            "eval.reinitialize" => self.eval.reinitialize = parse_bool(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, floats in shortest
    /// round-trip form.
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let m = &self.material;
        let e = &self.env;
        let a = &self.agent;
        let t = &self.train;
        let v = &self.eval;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("geometry.length", g.length.to_string()),
            ("geometry.cross_section", g.cross_section.to_string()),
            ("geometry.cells", join(&g.cells)),
            ("geometry.split", g.split.to_string()),
            ("material.young_modulus", m.young_modulus.to_string()),
            ("material.poisson_ratio", m.poisson_ratio.to_string()),
            ("material.total_mass", m.total_mass.to_string()),
            ("material.damping_ratio", m.damping_ratio.to_string()),
            ("material.friction_coeff", m.friction_coeff.to_string()),
            ("material.sim_dt", m.sim_dt.to_string()),
            ("physics.gravity", join(self.gravity.as_slice())),
            ("env.m", e.m.to_string()),
            ("env.node_ids", join(&e.node_ids)),
            ("env.substeps", e.substeps.to_string()),
            ("env.distance_threshold", e.distance_threshold.to_string()),
            ("env.max_episode_steps", e.max_episode_steps.to_string()),
            ("env.box", e.workspace.name().to_string()),
            ("env.reinitialize", e.reinitialize.to_string()),
            ("db.box", self.db.workspace.name().to_string()),
            ("db.grid", self.db.grid.map_or("preset".to_string(), |g| join(&g))),
            ("db.settle_max_steps", self.db.settle.max_steps.to_string()),
            ("db.settle_vel_tol", self.db.settle.vel_tol.to_string()),
            ("agent.hidden", join(&a.hidden)),
            ("agent.gamma", a.gamma.to_string()),
            ("agent.tau", a.tau.to_string()),
            ("agent.batch_size", a.batch_size.to_string()),
            ("agent.buffer_capacity", a.buffer_capacity.to_string()),
            ("agent.actor_lr", a.actor_lr.to_string()),
            ("agent.critic_lr", a.critic_lr.to_string()),
            ("agent.ou_theta", a.noise.theta.to_string()),
            ("agent.ou_sigma", a.noise.sigma.to_string()),
            ("agent.ou_mu", a.noise.mu.to_string()),
            ("agent.ou_dt", a.noise.dt.to_string()),
            ("train.workers", t.workers.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.steps_per_episode", t.steps_per_episode.to_string()),
            ("train.updates_per_step", t.updates_per_step.to_string()),
            (
                "train.reduction",
                match t.reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .to_string(),
            ),
            (
                "train.summation",
                match t.summation {
                    Summation::Ordered => "ordered",
                    Summation::Exact => "exact",
                }
                .to_string(),
            ),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("eval.episodes", v.episodes.to_string()),
            ("eval.max_steps", v.max_steps.to_string()),
            ("eval.threshold", v.threshold.to_string()),
            ("eval.reinitialize", v.reinitialize.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Bar mesh settled under gravity with the tip at its anchor.
    pub fn build_mesh(&self) -> Result<crate::softbody::TetMesh, ConfigError> {
        let mesh = build_bar_mesh(&self.geometry, &self.material, self.gravity)?;
        Ok(settle_initial_state(mesh)?)
    }

    pub fn build_environment(&self) -> Result<Environment, ConfigError> {
        let mesh = self.build_mesh()?;
        let ids = if self.env.node_ids.is_empty() {
            select_default_nodes(&mesh, self.env.m)?
        } else {
            self.env.node_ids.clone()
        };
        let tip = mesh.grasp_anchor();
        let mut cfg = EnvConfig::training(ids, tip);
        cfg.substeps = self.env.substeps;
        cfg.control_dt = self.env.substeps as f64 * self.material.sim_dt;
        cfg.distance_threshold = self.env.distance_threshold;
        cfg.max_episode_steps = self.env.max_episode_steps;
        cfg.workspace = WorkspaceBox::preset(self.env.workspace, tip);
        cfg.reinitialize = self.env.reinitialize;
        Ok(Environment::new(mesh, cfg)?)
    }

    /// Workspace box of the given preset around the environment's initial tip.
    pub fn db_box(&self, env: &Environment, preset: BoxPreset) -> WorkspaceBox {
        WorkspaceBox::preset(preset, env.pristine_mesh().grasp_anchor())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            agent: self.agent.clone(),
            ..self.train.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            ..self.eval.clone()
        }
    }
}
