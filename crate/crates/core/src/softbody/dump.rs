//! Text dump of a mesh state for offline plotting.
//!
//! ```text
//! tetmesh v1 <n_nodes> <n_tets> <n_edges>
//! x y z vx vy vz            (n_nodes lines)
//! a b c d                   (n_tets lines)
//! a b rest_length           (n_edges lines)
//! pinned i j k ...
//! grasped i j k ...
//! ```

use std::fmt::Write as _;

use super::{TetMesh, Vec3};

pub const MESH_DUMP_VERSION: &str = "tetmesh v1";

pub fn write_mesh_dump(mesh: &TetMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MESH_DUMP_VERSION} {} {} {}",
        mesh.node_count(),
        mesh.tets.len(),
        mesh.edges.len()
    );
    for (p, v) in mesh.node_pos.iter().zip(&mesh.node_vel) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, v.x, v.y, v.z);
    }
    for t in &mesh.tets {
        let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    for e in &mesh.edges {
        let _ = writeln!(out, "{} {} {}", e.a, e.b, e.rest_length);
    }
    let join = |ids: &[usize]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "pinned {}", join(&mesh.pinned));
    let _ = writeln!(out, "grasped {}", join(&mesh.grasped));
    out
}

/// Parsed contents of a mesh dump.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDump {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub edges: Vec<(usize, usize, f64)>,
    pub pinned: Vec<usize>,
    pub grasped: Vec<usize>,
}

pub fn parse_mesh_dump(text: &str) -> Result<MeshDump, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty mesh dump")?;
    let rest = header
        .strip_prefix(MESH_DUMP_VERSION)
        .ok_or_else(|| format!("unsupported mesh dump header '{header}'"))?;
    let counts: Vec<usize> = rest
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let [nn, nt, ne] = counts[..] else {
        return Err(format!("bad header counts in '{header}'"));
    };
    let floats = |line: Option<&str>, n: usize| -> Result<Vec<f64>, String> {
        let line = line.ok_or("truncated mesh dump")?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        if vals.len() != n {
            return Err(format!("expected {n} values, got line '{line}'"));
        }
        Ok(vals)
    };
    let mut dump = MeshDump {
        positions: Vec::with_capacity(nn),
        velocities: Vec::with_capacity(nn),
        tets: Vec::with_capacity(nt),
        edges: Vec::with_capacity(ne),
        pinned: Vec::new(),
        grasped: Vec::new(),
    };
    for _ in 0..nn {
        let v = floats(lines.next(), 6)?;
        dump.positions.push(Vec3::new(v[0], v[1], v[2]));
        dump.velocities.push(Vec3::new(v[3], v[4], v[5]));
    }
    for _ in 0..nt {
        let v = floats(lines.next(), 4)?;
        dump.tets.push([v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize]);
    }
    for _ in 0..ne {
        let v = floats(lines.next(), 3)?;
        dump.edges.push((v[0] as usize, v[1] as usize, v[2]));
    }
    let mut ids = |prefix: &str| -> Result<Vec<usize>, String> {
        let line = lines.next().ok_or("truncated mesh dump")?;
        let body = line
            .strip_prefix(prefix)
            .ok_or_else(|| format!("expected '{prefix}' line, got '{line}'"))?;
        body.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| e.to_string()))
            .collect()
    };
    dump.pinned = ids("pinned")?;
    dump.grasped = ids("grasped")?;
    Ok(dump)
}
