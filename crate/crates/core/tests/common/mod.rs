#![allow(dead_code)]

use std::sync::OnceLock;

use dlo_core::environment::{select_default_nodes, settle_initial_state, BoxPreset, EnvConfig, Environment, WorkspaceBox};
use dlo_core::goaldb::{generate_db, DeformationDb, SettleOptions};
use dlo_core::softbody::{build_bar_mesh, BarGeometry, MaterialParams, TetMesh, Vec3, DEFAULT_GRAVITY};

/// Default bar settled under gravity, built once per test binary.
pub fn settled_bar() -> TetMesh {
    static MESH: OnceLock<TetMesh> = OnceLock::new();
    MESH.get_or_init(|| {
        let mesh = build_bar_mesh(&BarGeometry::default(), &MaterialParams::default(), Vec3::from(DEFAULT_GRAVITY)).unwrap();
        settle_initial_state(mesh).unwrap()
    })
    .clone()
}

pub fn bar_env(m: usize) -> Environment {
    let mesh = settled_bar();
    let ids = select_default_nodes(&mesh, m).unwrap();
    let cfg = EnvConfig::training(ids, mesh.grasp_anchor());
    Environment::new(mesh, cfg).unwrap()
}

pub fn preset_box(env: &Environment, preset: BoxPreset) -> WorkspaceBox {
    WorkspaceBox::preset(preset, env.pristine_mesh().grasp_anchor())
}

pub fn db(env: &Environment, preset: BoxPreset, grid: [usize; 3]) -> DeformationDb {
    let report = generate_db(env, preset_box(env, preset), grid, SettleOptions::default()).unwrap();
    assert!(report.skipped.is_empty(), "skipped lattice points: {:?}", report.skipped);
    report.db
}
