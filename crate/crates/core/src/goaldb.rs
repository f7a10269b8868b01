//! Deformation goals recorded by sweeping the gripper tip over a lattice in
//! a workspace box.
//!
//! File layout:
//!
//! ```text
//! goaldb v1 m=<m> box=<cx cy cz ex ey ez> fingerprint=<hex> count=<n>
//! nodes <id> <id> ...
//! <id> <tip x> <tip y> <tip z> <3m target coordinates>
//! ```

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::environment::{BoxPreset, EnvError, Environment, WorkspaceBox};
use crate::softbody::Vec3;

pub const GOALDB_MAGIC: &str = "goaldb v1";

#[derive(Debug, Error)]
pub enum GoalDbError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported database version '{0}'")]
    Version(String),
    #[error("database fingerprint {found} does not match environment fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("requested {requested} goals but the database holds {available}")]
    TooFew { requested: usize, available: usize },
    #[error("invalid grid {0:?}: counts must be at least 1")]
    InvalidGrid([usize; 3]),
    #[error("initial tip {0:?} lies outside the generating box")]
    Unreachable([f64; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalRecord {
    pub id: usize,
    pub tip_pos: Vec3,
    /// Settled selected-node positions `P_d`, xyz per node.
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDb {
    pub workspace: WorkspaceBox,
    pub selected_node_ids: Vec<usize>,
    pub fingerprint: String,
    pub records: Vec<GoalRecord>,
}

impl DeformationDb {
    pub fn m(&self) -> usize {
        self.selected_node_ids.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Errors unless the database was produced by an identical environment.
    pub fn check_fingerprint(&self, expected: &str) -> Result<(), GoalDbError> {
        if self.fingerprint != expected {
            return Err(GoalDbError::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Lattice counts whose product approximates the reference database sizes
/// (930 and 2651).
pub fn preset_grid(preset: BoxPreset) -> [usize; 3] {
    match preset {
        BoxPreset::Small => [5, 31, 6],
        BoxPreset::Large => [6, 26, 17],
    }
}

/// Cell-centred lattice over the box in boustrophedon order: x varies
/// fastest and reverses direction on alternate rows, y likewise on
/// alternate layers.
pub fn lattice_points(workspace: &WorkspaceBox, grid: [usize; 3]) -> Result<Vec<Vec3>, GoalDbError> {
    if grid.contains(&0) {
        return Err(GoalDbError::InvalidGrid(grid));
    }
    let min = workspace.min();
    let coord = |axis: usize, i: usize| min[axis] + workspace.extents[axis] * (i as f64 + 0.5) / grid[axis] as f64;
    let mut pts = Vec::with_capacity(grid.iter().product());
    let mut row = 0usize;
    for k in 0..grid[2] {
        for jj in 0..grid[1] {
            let j = if k % 2 == 0 { jj } else { grid[1] - 1 - jj };
            for ii in 0..grid[0] {
                let i = if row % 2 == 0 { ii } else { grid[0] - 1 - ii };
                pts.push(Vec3::new(coord(0, i), coord(1, j), coord(2, k)));
            }
            row += 1;
        }
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleOptions {
    pub max_steps: usize,
    /// Max free-node speed (m/s) accepted as settled.
    pub vel_tol: f64,
}

impl Default for SettleOptions {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            vel_tol: 1e-6,
        }
    }
}

/// Moves the tip in a straight line to `target` at constant velocity with
/// every component within the unit action bound.
pub fn drive_tip_to(env: &mut Environment, target: Vec3) -> Result<(), EnvError> {
    let dt = env.config().control_dt;
    let delta = target - env.tip().position;
    let span = delta.amax() / dt;
    if span == 0.0 {
        return Ok(());
    }
    let n = span.ceil().max(1.0) as usize;
    let velocity = delta / (n as f64 * dt);
    for _ in 0..n {
        env.move_tip(velocity)?;
    }
    Ok(())
}

/// From the pristine state, drives the tip to `target` and settles. Returns
/// the reached tip position and the selected-node positions, or `None` when
/// settling did not converge.
pub fn realize_goal(env: &mut Environment, target: Vec3, opts: SettleOptions) -> Result<Option<(Vec3, Vec<f64>)>, EnvError> {
    env.restore_pristine();
    drive_tip_to(env, target)?;
    let report = env.settle(opts.max_steps, opts.vel_tol)?;
    if !report.converged() {
        return Ok(None);
    }
    Ok(Some((env.tip().position, env.current_nodes())))
}

/// Re-derives a record's settled shape from its tip position, inside the
/// database's workspace box.
pub fn replay_record(env: &Environment, db: &DeformationDb, record: &GoalRecord, opts: SettleOptions) -> Result<Option<Vec<f64>>, EnvError> {
    let mut e = env.clone();
    e.config_mut().workspace = db.workspace;
    Ok(realize_goal(&mut e, record.tip_pos, opts)?.map(|(_, nodes)| nodes))
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub db: DeformationDb,
    pub attempted: usize,
    /// Lattice index and reason for every skipped point.
    pub skipped: Vec<(usize, String)>,
}

/// Sweeps the lattice, one private environment per rayon task. Records are
/// emitted in lattice order whatever the thread count.
pub fn generate_db(
    env: &Environment,
    workspace: WorkspaceBox,
    grid: [usize; 3],
    opts: SettleOptions,
) -> Result<GenerateReport, GoalDbError> {
    let points = lattice_points(&workspace, grid)?;
    let start = env.pristine_mesh().grasp_anchor();
    if !workspace.contains(&start) {
        return Err(GoalDbError::Unreachable([start.x, start.y, start.z]));
    }
    let mut template = env.clone();
    template.config_mut().workspace = workspace;
    template.restore_pristine();

    let outcomes: Vec<Result<Option<(Vec3, Vec<f64>)>, EnvError>> = points
        .par_iter()
        .map_init(|| template.clone(), |e, &p| realize_goal(e, p, opts))
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Some((tip_pos, targets))) => records.push(GoalRecord {
                id: records.len(),
                tip_pos,
                targets,
            }),
            Ok(None) => {
                log::warn!("lattice point {i}: settling did not converge, skipped");
                skipped.push((i, "settling did not converge".to_string()));
            }
            Err(e) => {
                log::warn!("lattice point {i}: {e}, skipped");
                skipped.push((i, e.to_string()));
            }
        }
    }
    log::info!("goal database: {} records from {} lattice points", records.len(), points.len());
    Ok(GenerateReport {
        db: DeformationDb {
            workspace,
            selected_node_ids: env.config().selected_node_ids.clone(),
            fingerprint: env.fingerprint(),
            records,
        },
        attempted: points.len(),
        skipped,
    })
}

pub fn save_db<W: Write>(out: &mut W, db: &DeformationDb) -> Result<(), GoalDbError> {
    let c = db.workspace.center;
    let e = db.workspace.extents;
    writeln!(
        out,
        "{GOALDB_MAGIC} m={} box={} {} {} {} {} {} fingerprint={} count={}",
        db.m(),
        c.x,
        c.y,
        c.z,
        e.x,
        e.y,
        e.z,
        db.fingerprint,
        db.len()
    )?;
    let ids: Vec<String> = db.selected_node_ids.iter().map(|i| i.to_string()).collect();
    writeln!(out, "nodes {}", ids.join(" "))?;
    let mut line = String::new();
    for r in &db.records {
        line.clear();
        use std::fmt::Write as _;
        write!(line, "{} {} {} {}", r.id, r.tip_pos.x, r.tip_pos.y, r.tip_pos.z).expect("string write");
        for v in &r.targets {
            write!(line, " {v}").expect("string write");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// How [`load_db`] treats a fingerprint that differs from the expected one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FingerprintPolicy {
    /// Mismatch is an error.
    Strict,
    /// Mismatch is logged and the database is returned anyway.
    Warn,
}

pub fn load_db<R: BufRead>(input: R, expected_fingerprint: Option<&str>, policy: FingerprintPolicy) -> Result<DeformationDb, GoalDbError> {
    let mut lines = input.lines().enumerate();
    let fmt = |line: usize, msg: &str| GoalDbError::Format {
        line: line + 1,
        msg: msg.to_string(),
    };
    let (_, header) = lines.next().ok_or_else(|| fmt(0, "empty file"))?;
    let header = header?;
    let rest = header
        .strip_prefix(GOALDB_MAGIC)
        .ok_or_else(|| GoalDbError::Version(header.split_whitespace().take(2).collect::<Vec<_>>().join(" ")))?;
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    let (mut m, mut bx, mut fingerprint, mut count) = (None, None, None, None);
    let mut t = 0;
    while t < tokens.len() {
        let (key, value) = tokens[t].split_once('=').ok_or_else(|| fmt(0, "malformed header"))?;
        match key {
            "m" => m = Some(value.parse::<usize>().map_err(|_| fmt(0, "bad m"))?),
            "box" => {
                let vals: Vec<f64> = std::iter::once(value)
                    .chain(tokens.get(t + 1..t + 6).ok_or_else(|| fmt(0, "short box"))?.iter().copied())
                    .map(|v| v.parse().map_err(|_| fmt(0, "bad box value")))
                    .collect::<Result<_, _>>()?;
                t += 5;
                bx = Some(WorkspaceBox::new(
                    Vec3::new(vals[0], vals[1], vals[2]),
                    Vec3::new(vals[3], vals[4], vals[5]),
                )?);
            }
            "fingerprint" => fingerprint = Some(value.to_string()),
            "count" => count = Some(value.parse::<usize>().map_err(|_| fmt(0, "bad count"))?),
            _ => return Err(fmt(0, &format!("unknown header key '{key}'"))),
        }
        t += 1;
    }
    let m = m.ok_or_else(|| fmt(0, "missing m"))?;
    let workspace = bx.ok_or_else(|| fmt(0, "missing box"))?;
    let fingerprint = fingerprint.ok_or_else(|| fmt(0, "missing fingerprint"))?;
    let count = count.ok_or_else(|| fmt(0, "missing count"))?;

    let (_, nodes_line) = lines.next().ok_or_else(|| fmt(1, "missing nodes line"))?;
    let nodes_line = nodes_line?;
    let selected_node_ids: Vec<usize> = nodes_line
        .strip_prefix("nodes")
        .ok_or_else(|| fmt(1, "expected nodes line"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| fmt(1, "bad node id")))
        .collect::<Result<_, _>>()?;
    if selected_node_ids.len() != m {
        return Err(fmt(1, "node count differs from m"));
    }

    let mut records = Vec::with_capacity(count);
    for (ln, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 4 + 3 * m {
            return Err(fmt(ln, &format!("expected {} fields, found {}", 4 + 3 * m, vals.len())));
        }
        let id = vals[0].parse().map_err(|_| fmt(ln, "bad id"))?;
        let nums: Vec<f64> = vals[1..]
            .iter()
            .map(|v| v.parse().map_err(|_| fmt(ln, "bad number")))
            .collect::<Result<_, _>>()?;
        records.push(GoalRecord {
            id,
            tip_pos: Vec3::new(nums[0], nums[1], nums[2]),
            targets: nums[3..].to_vec(),
        });
    }
    if records.len() != count {
        return Err(fmt(0, &format!("header count {count} but {} records", records.len())));
    }
    let db = DeformationDb {
        workspace,
        selected_node_ids,
        fingerprint,
        records,
    };
    if let Some(expected) = expected_fingerprint {
        if let Err(e) = db.check_fingerprint(expected) {
            match policy {
                FingerprintPolicy::Strict => return Err(e),
                FingerprintPolicy::Warn => log::warn!("{e}"),
            }
        }
    }
    Ok(db)
}

pub fn save_db_file(path: &std::path::Path, db: &DeformationDb) -> Result<(), GoalDbError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_db(&mut out, db)?;
    out.flush()?;
    Ok(())
}

pub fn load_db_file(path: &std::path::Path, expected_fingerprint: Option<&str>, policy: FingerprintPolicy) -> Result<DeformationDb, GoalDbError> {
    load_db(std::io::BufReader::new(std::fs::File::open(path)?), expected_fingerprint, policy)
}

/// `k` seeded uniform draws. Without replacement the result is a uniformly
/// random ordered subset.
pub fn sample_goals(db: &DeformationDb, k: usize, seed: u64, without_replacement: bool) -> Result<Vec<&GoalRecord>, GoalDbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_goals_with(db, k, &mut rng, without_replacement)
}

pub fn sample_goals_with<'a, R: Rng>(db: &'a DeformationDb, k: usize, rng: &mut R, without_replacement: bool) -> Result<Vec<&'a GoalRecord>, GoalDbError> {
    let n = db.len();
    if n == 0 || (without_replacement && k > n) {
        return Err(GoalDbError::TooFew { requested: k, available: n });
    }
    Ok(if without_replacement {
        index::sample(rng, n, k).into_iter().map(|i| &db.records[i]).collect()
    } else {
        (0..k).map(|_| &db.records[rng.random_range(0..n)]).collect()
    })
}
