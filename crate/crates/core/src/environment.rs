//! Goal-conditioned episodic environment on top of the soft-bar simulator.
//!
//! The agent commands a Cartesian tip velocity in `[-1, 1]³` m/s. Each
//! control step integrates it over `control_dt`, clamps the resulting target
//! to the workspace box, and moves the tip linearly to it across `substeps`
//! physics steps. The state is
//! `(tip position, tip velocity, current selected nodes, goal nodes)` and the
//! reward is minus the mean Euclidean distance between current and goal
//! selected nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::softbody::{self, settle, GripperTip, NodeRole, SettleReport, SimError, TetMesh, Vec3};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("goal has {got} coordinates, expected {expected}")]
    GoalMismatch { expected: usize, got: usize },
    #[error("vectors of length {0} and {1} cannot be compared node by node")]
    LengthMismatch(usize, usize),
    #[error("episode is finished; call reset first")]
    EpisodeFinished,
    #[error("action component {0} outside [-1, 1]")]
    InvalidAction(f64),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} selected nodes but only {available} candidates exist")]
    SelectionTooLarge { requested: usize, available: usize },
    #[error("trajectory parse error: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box the gripper tip is confined to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceBox {
    pub center: Vec3,
    /// Full side lengths along x, y, z.
    pub extents: Vec3,
}

/// Box size presets of the deformation databases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxPreset {
    Small,
    Large,
}

impl BoxPreset {
    pub fn extents(self) -> Vec3 {
        match self {
            BoxPreset::Small => Vec3::new(0.15, 0.5, 0.25),
            BoxPreset::Large => Vec3::new(0.2, 0.8, 0.3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxPreset::Small => "small",
            BoxPreset::Large => "large",
        }
    }
}

impl std::str::FromStr for BoxPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(BoxPreset::Small),
            "large" => Ok(BoxPreset::Large),
            other => Err(format!("unknown box preset '{other}' (expected small or large)")),
        }
    }
}

impl WorkspaceBox {
    pub fn new(center: Vec3, extents: Vec3) -> Result<Self, EnvError> {
        if !extents.iter().all(|&e| e > 0.0) {
            return Err(EnvError::InvalidConfig("box extents must be positive".into()));
        }
        Ok(Self { center, extents })
    }

    pub fn preset(preset: BoxPreset, center: Vec3) -> Self {
        Self {
            center,
            extents: preset.extents(),
        }
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.extents * 0.5
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.extents * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        let (lo, hi) = (self.min(), self.max());
        Vec3::from_fn(|i, _| p[i].clamp(lo[i], hi[i]))
    }
}

/// Tip velocity command, each component in `[-1, 1]` m/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub tip_velocity: Vec3,
}

impl Action {
    pub fn new(v: Vec3) -> Result<Self, EnvError> {
        if let Some(&c) = v.iter().find(|c| !(c.abs() <= 1.0)) {
            return Err(EnvError::InvalidAction(c));
        }
        Ok(Self { tip_velocity: v })
    }

    /// Clamps each component into `[-1, 1]`.
    pub fn clamped(v: Vec3) -> Self {
        Self {
            tip_velocity: v.map(|c| if c.is_nan() { 0.0 } else { c.clamp(-1.0, 1.0) }),
        }
    }

    pub fn zero() -> Self {
        Self {
            tip_velocity: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tip_pos: Vec3,
    pub tip_vel: Vec3,
    /// Current selected-node positions, `3m` entries.
    pub current: Vec<f64>,
    /// Goal selected-node positions, `3m` entries.
    pub goal: Vec<f64>,
}

impl Observation {
    /// Flattened state vector `(X, Y, Z, Vx, Vy, Vz, P_c, P_d)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + self.current.len() + self.goal.len());
        v.extend(self.tip_pos.iter());
        v.extend(self.tip_vel.iter());
        v.extend_from_slice(&self.current);
        v.extend_from_slice(&self.goal);
        v
    }

    pub fn dim(&self) -> usize {
        6 + self.current.len() + self.goal.len()
    }
}

/// State dimension for `m` selected nodes.
pub fn state_dim(m: usize) -> usize {
    6 + 6 * m
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub mean_distance: f64,
    pub node_distances: Vec<f64>,
    /// Whether the box clamp changed the commanded tip target.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub selected_node_ids: Vec<usize>,
    pub control_dt: f64,
    pub substeps: usize,
    pub distance_threshold: f64,
    pub max_episode_steps: usize,
    pub workspace: WorkspaceBox,
    pub reinitialize: bool,
    /// End the episode as soon as `done` fires (testing); training episodes
    /// run their full length.
    pub terminate_on_done: bool,
}

impl EnvConfig {
    /// Training defaults: 20 substeps of 0.003 s, 0.05 m threshold, 300-step
    /// episodes, small box centred on the initial tip position.
    pub fn training(selected_node_ids: Vec<usize>, tip_start: Vec3) -> Self {
        Self {
            selected_node_ids,
            control_dt: 20.0 * 0.003,
            substeps: 20,
            distance_threshold: 0.05,
            max_episode_steps: 300,
            workspace: WorkspaceBox::preset(BoxPreset::Small, tip_start),
            reinitialize: true,
            terminate_on_done: false,
        }
    }

    pub fn validate(&self, sim_dt: f64) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.substeps == 0 {
            return bad("substeps must be >= 1".into());
        }
        if (self.control_dt - self.substeps as f64 * sim_dt).abs() > 1e-9 * self.control_dt {
            return bad(format!(
                "control_dt {} != substeps {} x sim_dt {}",
                self.control_dt, self.substeps, sim_dt
            ));
        }
        if !(self.distance_threshold > 0.0) {
            return bad("distance_threshold must be > 0".into());
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be >= 1".into());
        }
        if self.selected_node_ids.is_empty() {
            return bad("at least one selected node is required".into());
        }
        WorkspaceBox::new(self.workspace.center, self.workspace.extents)?;
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.selected_node_ids.len()
    }
}

/// Negative mean Euclidean distance between node triples of `current` and
/// `goal`. Always `<= 0`.
pub fn reward(current: &[f64], goal: &[f64]) -> Result<f64, EnvError> {
    Ok(-node_distances(current, goal)?.iter().sum::<f64>() / (current.len() / 3) as f64)
}

pub fn node_distances(current: &[f64], goal: &[f64]) -> Result<Vec<f64>, EnvError> {
    if current.len() != goal.len() || current.len() % 3 != 0 || current.is_empty() {
        return Err(EnvError::LengthMismatch(current.len(), goal.len()));
    }
    Ok(current
        .chunks_exact(3)
        .zip(goal.chunks_exact(3))
        .map(|(c, g)| ((c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2) + (c[2] - g[2]).powi(2)).sqrt())
        .collect())
}

/// Picks `m` free surface nodes evenly spaced along the bar axis.
///
/// Target axial stations are `L·k/(m+1)`; at each station the surface node
/// closest to the line through the middle of the `+x` side face wins, ties
/// broken by index.
pub fn select_default_nodes(mesh: &TetMesh, m: usize) -> Result<Vec<usize>, EnvError> {
    let surface = surface_nodes(mesh);
    let candidates: Vec<usize> = surface
        .into_iter()
        .filter(|&i| mesh.roles[i] == NodeRole::Free)
        .collect();
    if m == 0 || m > candidates.len() {
        return Err(EnvError::SelectionTooLarge {
            requested: m,
            available: candidates.len(),
        });
    }
    let base: Vec3 = mesh.pinned_pos.iter().sum::<Vec3>() / mesh.pinned.len().max(1) as f64;
    let top = mesh.grasp_anchor();
    let axis_len = (top - base).norm();
    let axis = (top - base) / axis_len;
    // Reference line: middle of the face with the largest coordinate along
    // the first lateral direction.
    let lateral = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let lateral = (lateral - axis * axis.dot(&lateral)).normalize();
    let reach = candidates
        .iter()
        .map(|&i| (mesh.node_pos[i] - base).dot(&lateral))
        .fold(f64::NEG_INFINITY, f64::max);
    let reference = |p: &Vec3| -> f64 {
        let r = p - base;
        let radial = r - axis * r.dot(&axis);
        (radial - lateral * reach).norm()
    };

    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for k in 1..=m {
        let station = axis_len * k as f64 / (m + 1) as f64;
        let best = candidates
            .iter()
            .copied()
            .filter(|i| !chosen.contains(i))
            .min_by(|&a, &b| {
                let key = |i: usize| {
                    let p = mesh.node_pos[i];
                    let d = ((p - base).dot(&axis) - station).abs();
                    // quantize so nodes on the same layer compare equal
                    ((d * 1e9).round() as i64, (reference(&p) * 1e9).round() as i64, i)
                };
                key(a).cmp(&key(b))
            })
            .expect("candidate count checked above");
        chosen.push(best);
    }
    Ok(chosen)
}

/// Nodes lying on boundary faces (faces owned by exactly one tetrahedron).
pub fn surface_nodes(mesh: &TetMesh) -> BTreeSet<usize> {
    let mut faces: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for t in &mesh.tets {
        for skip in 0..4 {
            let mut f = [0usize; 3];
            let mut n = 0;
            for (k, &v) in t.iter().enumerate() {
                if k != skip {
                    f[n] = v;
                    n += 1;
                }
            }
            f.sort_unstable();
            *faces.entry(f).or_insert(0) += 1;
        }
    }
    faces
        .into_iter()
        .filter(|(_, count)| *count == 1)
        .flat_map(|(f, _)| f)
        .collect()
}

/// Builds the pristine initial state: the mesh settled under gravity with
/// the tip at its anchor.
pub fn settle_initial_state(mut mesh: TetMesh) -> Result<TetMesh, SimError> {
    let tip = GripperTip::at(mesh.grasp_anchor());
    if mesh.gravity.norm() > 0.0 {
        let dt = mesh.material.sim_dt;
        softbody::step(&mut mesh, &tip, dt)?;
        settle(&mut mesh, &tip, 50_000, 1e-10)?;
    }
    Ok(mesh)
}

/// One environment instance; exclusively owns its mesh.
#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    mesh: TetMesh,
    tip: GripperTip,
    pristine: TetMesh,
    pristine_tip: GripperTip,
    goal: Vec<f64>,
    steps: usize,
    finished: bool,
}

impl Environment {
    /// `initial` is the pristine state every reinitializing reset restores.
    pub fn new(initial: TetMesh, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate(initial.material.sim_dt)?;
        if let Some(&bad) = config.selected_node_ids.iter().find(|&&i| i >= initial.node_count()) {
            return Err(EnvError::InvalidConfig(format!("selected node {bad} out of range")));
        }
        let tip = GripperTip::at(initial.grasp_anchor());
        if !config.workspace.contains(&tip.position) {
            return Err(EnvError::InvalidConfig("initial tip lies outside the workspace box".into()));
        }
        let goal = selected_positions(&initial, &config.selected_node_ids);
        Ok(Self {
            config,
            mesh: initial.clone(),
            tip,
            pristine: initial,
            pristine_tip: tip,
            goal,
            steps: 0,
            finished: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut EnvConfig {
        &mut self.config
    }

    pub fn mesh(&self) -> &TetMesh {
        &self.mesh
    }

    pub fn pristine_mesh(&self) -> &TetMesh {
        &self.pristine
    }

    pub fn tip(&self) -> &GripperTip {
        &self.tip
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn current_nodes(&self) -> Vec<f64> {
        selected_positions(&self.mesh, &self.config.selected_node_ids)
    }

    pub fn observation(&self) -> Observation {
        Observation {
            tip_pos: self.tip.position,
            tip_vel: self.tip.velocity,
            current: self.current_nodes(),
            goal: self.goal.clone(),
        }
    }

    pub fn mean_distance(&self) -> f64 {
        -reward(&self.current_nodes(), &self.goal).expect("goal length checked on reset")
    }

    /// Starts an episode towards `goal`. Without reinitialization the mesh
    /// and tip stay exactly where the previous episode left them.
    pub fn reset(&mut self, goal: &[f64], reinitialize: bool) -> Result<Observation, EnvError> {
        let expected = 3 * self.config.m();
        if goal.len() != expected {
            return Err(EnvError::GoalMismatch {
                expected,
                got: goal.len(),
            });
        }
        if reinitialize {
            self.restore_pristine();
        }
        self.goal = goal.to_vec();
        self.steps = 0;
        self.finished = false;
        Ok(self.observation())
    }

    pub fn restore_pristine(&mut self) {
        self.mesh.clone_from(&self.pristine);
        self.tip = self.pristine_tip;
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        Action::new(action.tip_velocity)?;
        let clamped = match self.move_tip(action.tip_velocity) {
            Ok(c) => c,
            Err(e) => {
                self.finished = true;
                return Err(e);
            }
        };
        self.steps += 1;
        let observation = self.observation();
        let node_distances = node_distances(&observation.current, &observation.goal)?;
        let mean_distance = node_distances.iter().sum::<f64>() / node_distances.len() as f64;
        let done = mean_distance < self.config.distance_threshold;
        if self.steps >= self.config.max_episode_steps || (done && self.config.terminate_on_done) {
            self.finished = true;
        }
        Ok(StepResult {
            observation,
            reward: -mean_distance,
            done,
            info: StepInfo {
                mean_distance,
                node_distances,
                clamped,
            },
        })
    }

    /// Integrates a tip velocity over one control step, clamps the target to
    /// the workspace and runs the physics substeps. Returns whether the
    /// clamp altered the target.
    pub fn move_tip(&mut self, velocity: Vec3) -> Result<bool, EnvError> {
        let dt = self.config.control_dt;
        let start = self.tip.position;
        let wanted = start + velocity * dt;
        let target = self.config.workspace.clamp(&wanted);
        let clamped = target != wanted;
        let tip_vel = (target - start) / dt;
        let n = self.config.substeps;
        let sim_dt = self.mesh.material.sim_dt;
        for k in 1..=n {
            let position = if k == n {
                target
            } else {
                start + (target - start) * (k as f64 / n as f64)
            };
            let tip = GripperTip {
                position,
                velocity: tip_vel,
            };
            softbody::step(&mut self.mesh, &tip, sim_dt)?;
        }
        self.tip = GripperTip {
            position: target,
            velocity: tip_vel,
        };
        Ok(clamped)
    }

    /// Holds the tip still and lets the object come to rest.
    pub fn settle(&mut self, max_steps: usize, vel_tol: f64) -> Result<SettleReport, EnvError> {
        self.tip.velocity = Vec3::zeros();
        Ok(settle(&mut self.mesh, &self.tip, max_steps, vel_tol)?)
    }

    /// Hash of everything that determines which shapes are reachable: the
    /// pristine mesh, material, gravity, control timing and node selection.
    /// Workspace, threshold and episode length are excluded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_bits().to_le_bytes());
        let m = &self.pristine;
        for p in &m.node_pos {
            p.iter().for_each(|&c| put(c));
        }
        let mat = &m.material;
        for v in [
            mat.young_modulus,
            mat.poisson_ratio,
            mat.total_mass,
            mat.damping_ratio,
            mat.friction_coeff,
            mat.sim_dt,
            self.config.control_dt,
        ] {
            put(v);
        }
        m.gravity.iter().for_each(|&c| put(c));
        let mut put_idx = |v: usize| h.update((v as u64).to_le_bytes());
        for t in &m.tets {
            t.iter().for_each(|&i| put_idx(i));
        }
        put_idx(usize::MAX);
        m.pinned.iter().for_each(|&i| put_idx(i));
        put_idx(usize::MAX);
        m.grasped.iter().for_each(|&i| put_idx(i));
        put_idx(usize::MAX);
        put_idx(self.config.substeps);
        self.config.selected_node_ids.iter().for_each(|&i| put_idx(i));
        hex::encode(&h.finalize()[..16])
    }
}

pub fn selected_positions(mesh: &TetMesh, ids: &[usize]) -> Vec<f64> {
    ids.iter().flat_map(|&i| mesh.node_pos[i].iter().copied()).collect()
}

/// One control step of a logged trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: usize,
    pub tip: Vec3,
    pub action: Vec3,
    pub reward: f64,
    pub done: bool,
    pub goal: Vec<f64>,
    pub current: Vec<f64>,
}

pub fn trajectory_header(m: usize) -> String {
    let mut h = String::from("episode,step,tip_x,tip_y,tip_z,action_vx,action_vy,action_vz,reward,done");
    for prefix in ["goal", "cur"] {
        for i in 0..m {
            for axis in ["x", "y", "z"] {
                let _ = write!(h, ",{prefix}{i}_{axis}");
            }
        }
    }
    h
}

pub fn write_trajectory_csv<W: Write>(mut out: W, m: usize, rows: &[TrajectoryRow]) -> Result<(), EnvError> {
    writeln!(out, "{}", trajectory_header(m))?;
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.step,
            r.tip.x,
            r.tip.y,
            r.tip.z,
            r.action.x,
            r.action.y,
            r.action.z,
            r.reward,
            u8::from(r.done)
        );
        for v in r.goal.iter().chain(&r.current) {
            let _ = write!(line, ",{v}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<(usize, Vec<TrajectoryRow>), EnvError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| EnvError::Trajectory("empty file".into()))??;
    let columns = header.split(',').count();
    if columns < 10 || (columns - 10) % 6 != 0 {
        return Err(EnvError::Trajectory(format!("unexpected header '{header}'")));
    }
    let m = (columns - 10) / 6;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != columns {
            return Err(EnvError::Trajectory(format!("line {}: {} fields, expected {columns}", lineno + 2, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| EnvError::Trajectory(format!("line {}: {e}", lineno + 2)));
        let int = |s: &str| s.parse::<usize>().map_err(|e| EnvError::Trajectory(format!("line {}: {e}", lineno + 2)));
        let vals: Vec<f64> = f[10..].iter().map(|s| num(s)).collect::<Result<_, _>>()?;
        rows.push(TrajectoryRow {
            episode: int(f[0])?,
            step: int(f[1])?,
            tip: Vec3::new(num(f[2])?, num(f[3])?, num(f[4])?),
            action: Vec3::new(num(f[5])?, num(f[6])?, num(f[7])?),
            reward: num(f[8])?,
            done: int(f[9])? == 1,
            goal: vals[..3 * m].to_vec(),
            current: vals[3 * m..].to_vec(),
        });
    }
    Ok((m, rows))
}
