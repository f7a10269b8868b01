use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use dlo_core::agent::{load_agent, AGENT_MAGIC};
use dlo_core::config::{parse_reduction, parse_summation, RunConfig};
use dlo_core::environment::{read_trajectory_csv, write_trajectory_csv, BoxPreset};
use dlo_core::eval::{
    check_compatibility, evaluate_traced, render_report, replay_trajectory, write_episode_csv, write_replay_frames, EPISODE_CSV_HEADER,
    EVAL_REPORT_VERSION,
};
use dlo_core::goaldb::{generate_db, load_db_file, save_db_file, FingerprintPolicy, GOALDB_MAGIC};
use dlo_core::neural::checkpoint::MLP_MAGIC;
use dlo_core::softbody::dump::{write_mesh_dump, MESH_DUMP_VERSION};
use dlo_core::trainer::{write_learning_curve, Trainer, LEARNING_CURVE_HEADER};

type BoxError = Box<dyn std::error::Error>;

#[derive(Parser, Debug)]
#[command(name = "dlo", version, about = "Soft-bar shape control: goal databases, synchronized DDPG training, evaluation")]
struct Cli {
    /// Key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` configuration overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a deformation-goal database over a workspace box.
    GenDb {
        /// Box preset.
        #[arg(long = "box", value_parser = ["small", "large"])]
        workspace: Option<String>,
        /// Lattice counts along x,y,z.
        #[arg(long, value_name = "NX,NY,NZ")]
        grid: Option<String>,
        #[arg(long, default_value = "goals.db")]
        out: PathBuf,
    },
    /// Train the synchronized DDPG agent.
    Train {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Steps per episode.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        updates_per_step: Option<usize>,
        /// `sum` or `mean`.
        #[arg(long)]
        reduction: Option<String>,
        /// `ordered` or `exact`.
        #[arg(long)]
        summation: Option<String>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from an agent checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        allow_fingerprint_mismatch: bool,
        #[arg(long, default_value = "train_out")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a goal database.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Chain episodes from the previous final shape.
        #[arg(long)]
        no_reinit: bool,
        /// Log per-step trajectories of the first N episodes.
        #[arg(long, default_value_t = 0)]
        trace: usize,
        #[arg(long, default_value = "eval_out")]
        out_dir: PathBuf,
    },
    /// Write the mesh as a versioned text dump.
    ExportMesh {
        /// Dump the unsettled rest mesh instead of the settled initial state.
        #[arg(long)]
        rest: bool,
        #[arg(long, default_value = "mesh.txt")]
        out: PathBuf,
    },
    /// Re-run a logged trajectory and dump per-step node positions.
    Replay {
        #[arg(long)]
        trajectory: PathBuf,
        /// Chain episodes instead of restarting each from the initial state.
        #[arg(long)]
        no_reinit: bool,
        #[arg(long, default_value = "replay.csv")]
        out: PathBuf,
    },
}

fn artifact_versions() -> Value {
    json!({
        "crate": env!("CARGO_PKG_VERSION"),
        "goaldb": GOALDB_MAGIC,
        "agent_checkpoint": AGENT_MAGIC,
        "mlp": MLP_MAGIC,
        "eval_report": EVAL_REPORT_VERSION,
        "episode_csv": EPISODE_CSV_HEADER,
        "learning_curve": LEARNING_CURVE_HEADER,
        "mesh_dump": MESH_DUMP_VERSION,
    })
}

fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, extra: Value) -> Result<(), BoxError> {
    let manifest = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": artifact_versions(),
        "config": cfg.to_text(),
        "outputs": extra,
    });
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn manifest_path_for(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, BoxError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_config(cli: &Cli) -> Result<RunConfig, BoxError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got '{o}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), BoxError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenDb { workspace, grid, out } => {
            if let Some(b) = workspace {
                cfg.db.workspace = b.parse::<BoxPreset>()?;
            }
            if let Some(g) = grid {
                cfg.set("db.grid", &g)?;
            }
            let env = cfg.build_environment()?;
            let bx = cfg.db_box(&env, cfg.db.workspace);
            log::info!(
                "generating {} box database: extents {:?} m, grid {:?}",
                cfg.db.workspace.name(),
                bx.extents.as_slice(),
                cfg.db.grid()
            );
            let report = generate_db(&env, bx, cfg.db.grid(), cfg.db.settle)?;
            save_db_file(&out, &report.db)?;
            println!(
                "{} records ({} lattice points, {} skipped) -> {}",
                report.db.len(),
                report.attempted,
                report.skipped.len(),
                out.display()
            );
            write_manifest(
                &manifest_path_for(&out),
                "gen-db",
                &cfg,
                json!({
                    "database": out,
                    "box": cfg.db.workspace.name(),
                    "extents_m": bx.extents.as_slice(),
                    "center_m": bx.center.as_slice(),
                    "grid": cfg.db.grid(),
                    "records": report.db.len(),
                    "skipped": report.skipped.len(),
                    "fingerprint": report.db.fingerprint,
                }),
            )?;
        }
        Command::Train {
            db,
            workers,
            episodes,
            steps,
            updates_per_step,
            reduction,
            summation,
            checkpoint_every,
            resume,
            allow_fingerprint_mismatch,
            out_dir,
        } => {
            if let Some(w) = workers {
                cfg.train.workers = w;
            }
            if let Some(e) = episodes {
                cfg.train.episodes = e;
            }
            if let Some(s) = steps {
                cfg.train.steps_per_episode = s;
            }
            if let Some(u) = updates_per_step {
                cfg.train.updates_per_step = u;
            }
            if let Some(r) = reduction {
                cfg.train.reduction = parse_reduction(&r)?;
            }
            if let Some(s) = summation {
                cfg.train.summation = parse_summation(&s)?;
            }
            if let Some(k) = checkpoint_every {
                cfg.train.checkpoint_every = k;
            }
            cfg.env.max_episode_steps = cfg.train.steps_per_episode;
            let env = cfg.build_environment()?;
            let policy = if allow_fingerprint_mismatch {
                FingerprintPolicy::Warn
            } else {
                FingerprintPolicy::Strict
            };
            let goals = load_db_file(&db, Some(&env.fingerprint()), policy).map_err(|e| format!("{}: {e}", db.display()))?;
            let mut tc = cfg.train_config();
            tc.checkpoint_dir = Some(out_dir.clone());
            tc.allow_fingerprint_mismatch = allow_fingerprint_mismatch;
            std::fs::create_dir_all(&out_dir)?;
            let mut trainer = match &resume {
                Some(ckpt) => Trainer::resume(tc, &env, goals, ckpt)?,
                None => Trainer::new(tc, &env, goals)?,
            };
            let outcome = trainer.run(|s| {
                log::info!(
                    "episode {:>4}  reward {:>10.4}  final distance {:.4} m  done {}/{}",
                    s.episode,
                    s.mean_reward,
                    s.mean_final_distance,
                    s.done_count,
                    s.worker_rewards.len()
                );
            })?;
            let curve_path = out_dir.join("learning_curve.csv");
            let mut out = create(&curve_path)?;
            write_learning_curve(&mut out, &outcome.curve)?;
            out.flush()?;
            println!(
                "{} episodes, {} transitions, {} updates -> {}",
                outcome.curve.len(),
                outcome.transitions,
                outcome.updates,
                out_dir.display()
            );
            write_manifest(
                &out_dir.join("manifest.json"),
                "train",
                &cfg,
                json!({
                    "database": db,
                    "resumed_from": resume,
                    "learning_curve": curve_path,
                    "checkpoint": outcome.final_checkpoint,
                    "transitions": outcome.transitions,
                    "updates": outcome.updates,
                    "fingerprint": env.fingerprint(),
                }),
            )?;
        }
        Command::Eval {
            checkpoint,
            db,
            episodes,
            max_steps,
            threshold,
            no_reinit,
            trace,
            out_dir,
        } => {
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(m) = max_steps {
                cfg.eval.max_steps = m;
            }
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            if no_reinit {
                cfg.eval.reinitialize = false;
            }
            let env = cfg.build_environment()?;
            let goals = load_db_file(&db, None, FingerprintPolicy::Warn).map_err(|e| format!("{}: {e}", db.display()))?;
            let (agent, meta) = load_agent(&mut BufReader::new(
                File::open(&checkpoint).map_err(|e| format!("{}: {e}", checkpoint.display()))?,
            ))?;
            check_compatibility(&env, &goals, &meta.fingerprint)?;
            let (report, rows) = evaluate_traced(&agent, &env, &goals, &cfg.eval_config(), trace)?;
            std::fs::create_dir_all(&out_dir)?;
            let text = render_report(&report);
            std::fs::write(out_dir.join("report.txt"), &text)?;
            let mut out = create(&out_dir.join("episodes.csv"))?;
            write_episode_csv(&mut out, &report.records)?;
            out.flush()?;
            if trace > 0 {
                let mut out = create(&out_dir.join("trajectory.csv"))?;
                write_trajectory_csv(&mut out, env.config().m(), &rows)?;
                out.flush()?;
            }
            print!("{text}");
            write_manifest(
                &out_dir.join("manifest.json"),
                "eval",
                &cfg,
                json!({
                    "checkpoint": checkpoint,
                    "database": db,
                    "report": out_dir.join("report.txt"),
                    "episodes_csv": out_dir.join("episodes.csv"),
                    "threshold_m": report.summary.threshold_m,
                    "reinitialize": report.summary.reinitialize,
                    "done_pct": report.summary.done_pct,
                }),
            )?;
        }
        Command::ExportMesh { rest, out } => {
            let mesh = if rest {
                dlo_core::softbody::build_bar_mesh(&cfg.geometry, &cfg.material, cfg.gravity)?
            } else {
                cfg.build_mesh()?
            };
            std::fs::write(&out, write_mesh_dump(&mesh))?;
            println!(
                "{} nodes, {} tetrahedra, {} edges -> {}",
                mesh.node_count(),
                mesh.tets.len(),
                mesh.edges.len(),
                out.display()
            );
            write_manifest(
                &manifest_path_for(&out),
                "export-mesh",
                &cfg,
                json!({ "mesh": out, "settled": !rest, "nodes": mesh.node_count(), "tets": mesh.tets.len() }),
            )?;
        }
        Command::Replay { trajectory, no_reinit, out } => {
            let (m, rows) = read_trajectory_csv(BufReader::new(
                File::open(&trajectory).map_err(|e| format!("{}: {e}", trajectory.display()))?,
            ))?;
            let env = cfg.build_environment()?;
            if m != env.config().m() {
                return Err(format!("trajectory has m={m}, environment selects {} nodes", env.config().m()).into());
            }
            let (frames, deviation) = replay_trajectory(&env, &rows, !no_reinit)?;
            let mut w = create(&out)?;
            write_replay_frames(&mut w, &frames)?;
            w.flush()?;
            println!("{} steps replayed, max deviation {deviation:e} m -> {}", frames.len(), out.display());
            write_manifest(
                &manifest_path_for(&out),
                "replay",
                &cfg,
                json!({ "trajectory": trajectory, "frames": out, "steps": frames.len(), "max_deviation_m": deviation }),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}
