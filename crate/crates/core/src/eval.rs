//! Testing protocol: deterministic policy, goals drawn with replacement,
//! fixed step budget, done percentage and error statistics.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{derive_seed, AgentError, DdpgAgent};
use crate::environment::{state_dim, Action, EnvError, Environment, TrajectoryRow};
use crate::goaldb::{sample_goals, DeformationDb, GoalDbError};
use crate::softbody::Vec3;

pub const EVAL_REPORT_VERSION: &str = "evalreport v1";
pub const EPISODE_CSV_HEADER: &str = "episode,goal_id,steps_taken,done,final_error_m";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    GoalDb(#[from] GoalDbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid evaluation configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} fingerprint {found} does not match environment fingerprint {expected}")]
    Fingerprint { what: &'static str, expected: String, found: String },
    #[error("per-episode CSV: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub threshold: f64,
    pub reinitialize: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            max_steps: 30,
            threshold: 0.05,
            reinitialize: true,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes == 0 || self.max_steps == 0 || !(self.threshold > 0.0) {
            return Err(EvalError::InvalidConfig(format!(
                "episodes {} and max_steps {} must be at least 1, threshold {} positive",
                self.episodes, self.max_steps, self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub goal_id: usize,
    pub steps_taken: usize,
    pub done: bool,
    /// Mean selected-node distance when the episode ended (m).
    pub final_error: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub format: String,
    pub episodes: usize,
    pub max_steps: usize,
    pub threshold_m: f64,
    pub reinitialize: bool,
    pub seed: u64,
    pub done_pct: f64,
    pub mean_error_m: f64,
    pub std_error_m: f64,
    pub best_error_m: f64,
    pub diverged: usize,
    pub db_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<EpisodeRecord>,
}

/// Aggregate metrics over all episodes, failures included.
/// Returns `(done_pct, mean, population σ, best)`.
pub fn metrics(records: &[EpisodeRecord]) -> (f64, f64, f64, f64) {
    let n = records.len() as f64;
    let done = records.iter().filter(|r| r.done).count() as f64;
    let mean = records.iter().map(|r| r.final_error).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.final_error - mean).powi(2)).sum::<f64>() / n;
    let best = records.iter().map(|r| r.final_error).fold(f64::INFINITY, f64::min);
    (100.0 * done / n, mean, var.sqrt(), best)
}

fn run_episode(
    env: &mut Environment,
    agent: &DdpgAgent,
    goal: &[f64],
    reinitialize: bool,
    mut trace: Option<(usize, &mut Vec<TrajectoryRow>)>,
) -> Result<(usize, bool, f64, bool), EvalError> {
    env.reset(goal, reinitialize)?;
    let threshold = env.config().distance_threshold;
    let mut error = env.mean_distance();
    if error < threshold {
        return Ok((0, true, error, false));
    }
    let mut steps = 0;
    while !env.is_finished() {
        let a = agent.act(&env.observation().to_vec())?;
        let action = Action::clamped(Vec3::new(a[0], a[1], a[2]));
        match env.step(&action) {
            Ok(r) => {
                steps += 1;
                if let Some((episode, rows)) = trace.as_mut() {
                    rows.push(TrajectoryRow {
                        episode: *episode,
                        step: steps,
                        tip: r.observation.tip_pos,
                        action: action.tip_velocity,
                        reward: r.reward,
                        done: r.done,
                        goal: r.observation.goal.clone(),
                        current: r.observation.current.clone(),
                    });
                }
                error = r.info.mean_distance;
                if r.done {
                    return Ok((steps, true, error, false));
                }
            }
            Err(EnvError::Sim(e)) => {
                log::warn!("evaluation episode diverged after {steps} steps: {e}");
                env.restore_pristine();
                return Ok((steps, false, error, true));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((steps, false, error, false))
}

/// Runs the protocol. With reinitialization, episodes are independent and
/// run in parallel; without it each episode starts from the previous final
/// shape and they run in order.
pub fn evaluate(agent: &DdpgAgent, env: &Environment, db: &DeformationDb, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    evaluate_traced(agent, env, db, cfg, 0).map(|(report, _)| report)
}

/// [`evaluate`] that also logs every control step of the first
/// `trace_episodes` episodes.
pub fn evaluate_traced(
    agent: &DdpgAgent,
    env: &Environment,
    db: &DeformationDb,
    cfg: &EvalConfig,
    trace_episodes: usize,
) -> Result<(EvalReport, Vec<TrajectoryRow>), EvalError> {
    cfg.validate()?;
    if agent.state_dim() != state_dim(env.config().m()) || db.m() != env.config().m() {
        return Err(EvalError::InvalidConfig("agent, environment and database disagree on m".into()));
    }
    let mut template = env.clone();
    {
        let c = template.config_mut();
        c.max_episode_steps = cfg.max_steps;
        c.distance_threshold = cfg.threshold;
        c.terminate_on_done = true;
        c.reinitialize = cfg.reinitialize;
        c.workspace = db.workspace;
    }
    template.restore_pristine();
    let goal_of = |episode: usize| -> Result<_, EvalError> {
        Ok(sample_goals(db, 1, derive_seed(cfg.seed, episode as u64), false)?[0])
    };
    let one = |e: &mut Environment, i: usize| -> Result<(EpisodeRecord, Vec<TrajectoryRow>), EvalError> {
        let g = goal_of(i)?;
        let mut rows = Vec::new();
        let trace = (i < trace_episodes).then_some((i, &mut rows));
        let (steps_taken, done, final_error, diverged) = run_episode(e, agent, &g.targets, cfg.reinitialize, trace)?;
        let record = EpisodeRecord {
            episode: i,
            goal_id: g.id,
            steps_taken,
            done,
            final_error,
            diverged,
        };
        Ok((record, rows))
    };
    let results: Vec<(EpisodeRecord, Vec<TrajectoryRow>)> = if cfg.reinitialize {
        (0..cfg.episodes)
            .into_par_iter()
            .map_init(|| template.clone(), |e, i| one(e, i))
            .collect::<Result<_, EvalError>>()?
    } else {
        let mut e = template;
        (0..cfg.episodes).map(|i| one(&mut e, i)).collect::<Result<_, EvalError>>()?
    };
    let mut records = Vec::with_capacity(results.len());
    let mut trace = Vec::new();
    for (r, rows) in results {
        records.push(r);
        trace.extend(rows);
    }
    let (done_pct, mean, std, best) = metrics(&records);
    let report = EvalReport {
        summary: EvalSummary {
            format: EVAL_REPORT_VERSION.to_string(),
            episodes: cfg.episodes,
            max_steps: cfg.max_steps,
            threshold_m: cfg.threshold,
            reinitialize: cfg.reinitialize,
            seed: cfg.seed,
            done_pct,
            mean_error_m: mean,
            std_error_m: std,
            best_error_m: best,
            diverged: records.iter().filter(|r| r.diverged).count(),
            db_fingerprint: db.fingerprint.clone(),
        },
        records,
    };
    Ok((report, trace))
}

/// One replayed control step: every mesh node position after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFrame {
    pub episode: usize,
    pub step: usize,
    pub nodes: Vec<Vec3>,
}

/// Re-runs a logged trajectory action by action. Episodes restart from the
/// pristine state when `reinitialize` is set, otherwise they chain. Returns
/// the frames and the largest deviation (m) between logged and replayed
/// selected-node positions.
pub fn replay_trajectory(env: &Environment, rows: &[TrajectoryRow], reinitialize: bool) -> Result<(Vec<ReplayFrame>, f64), EvalError> {
    let mut env = env.clone();
    env.config_mut().terminate_on_done = false;
    env.config_mut().max_episode_steps = usize::MAX;
    env.restore_pristine();
    let mut frames = Vec::with_capacity(rows.len());
    let mut deviation = 0.0f64;
    let mut current_episode = None;
    for row in rows {
        if current_episode != Some(row.episode) {
            env.reset(&row.goal, reinitialize)?;
            current_episode = Some(row.episode);
        }
        let r = env.step(&Action::new(row.action)?)?;
        for (a, b) in r.observation.current.chunks(3).zip(row.current.chunks(3)) {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            deviation = deviation.max(d);
        }
        frames.push(ReplayFrame {
            episode: row.episode,
            step: row.step,
            nodes: env.mesh().node_pos.clone(),
        });
    }
    Ok((frames, deviation))
}

pub fn write_replay_frames<W: Write>(mut out: W, frames: &[ReplayFrame]) -> Result<(), EvalError> {
    writeln!(out, "episode,step,node,x,y,z")?;
    for f in frames {
        for (i, p) in f.nodes.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},{}", f.episode, f.step, i, p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

/// Fingerprint gate used before evaluating a loaded checkpoint and database.
pub fn check_compatibility(env: &Environment, db: &DeformationDb, agent_fingerprint: &str) -> Result<(), EvalError> {
    let expected = env.fingerprint();
    for (what, found) in [("database", db.fingerprint.as_str()), ("checkpoint", agent_fingerprint)] {
        if found != expected {
            return Err(EvalError::Fingerprint {
                what,
                expected: expected.clone(),
                found: found.to_string(),
            });
        }
    }
    Ok(())
}

pub fn write_episode_csv<W: Write>(mut out: W, records: &[EpisodeRecord]) -> Result<(), EvalError> {
    writeln!(out, "{EPISODE_CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.episode, r.goal_id, r.steps_taken, u8::from(r.done), r.final_error)?;
    }
    Ok(())
}

pub fn read_episode_csv<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>, EvalError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != EPISODE_CSV_HEADER {
        return Err(EvalError::Csv(format!("unexpected header '{header}'")));
    }
    lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            let bad = || EvalError::Csv(format!("bad row '{line}'"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EpisodeRecord {
                episode: f[0].parse().map_err(|_| bad())?,
                goal_id: f[1].parse().map_err(|_| bad())?,
                steps_taken: f[2].parse().map_err(|_| bad())?,
                done: match f[3] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                },
                final_error: f[4].parse().map_err(|_| bad())?,
                diverged: false,
            })
        })
        .collect()
}

/// Table plus a JSON summary line.
pub fn render_report(report: &EvalReport) -> String {
    let s = &report.summary;
    format!(
        "{EVAL_REPORT_VERSION}\n\
         {:<12} {:<7} {:>8} {:>8} {:>24} {:>10}\n\
         {:<12} {:<7} {:>8} {:>8.1} {:>24} {:>10.5}\n\
         {}\n",
        "threshold_m",
        "reinit",
        "episodes",
        "done_%",
        "mean_error_m ± sigma",
        "best_m",
        s.threshold_m,
        if s.reinitialize { "yes" } else { "no" },
        s.episodes,
        s.done_pct,
        format!("{:.5} ± {:.5}", s.mean_error_m, s.std_error_m),
        s.best_error_m,
        serde_json::to_string(s).expect("summary serializes"),
    )
}

/// Extracts the summary from a rendered report.
pub fn parse_report_summary(text: &str) -> Result<EvalSummary, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_REPORT_VERSION) {
        return Err(EvalError::Csv("not an evaluation report".into()));
    }
    let json = lines
        .find(|l| l.starts_with('{'))
        .ok_or_else(|| EvalError::Csv("missing summary".into()))?;
    serde_json::from_str(json).map_err(|e| EvalError::Csv(e.to_string()))
}
