//! Tetrahedral soft-bar model.
//!
//! The bar is a box subdivided into hexahedral cells, each split into
//! tetrahedra. The bottom face is pinned to the ground and the top face is
//! rigidly attached to a gripper tip. Elasticity is an edge-spring network
//! over the tetrahedral links plus a per-tetrahedron volume-preservation
//! term; see [`energy`] for the potential and [`integrator`] for the time
//! stepping.

pub mod dump;
pub mod energy;
pub mod integrator;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use thiserror::Error;

pub use energy::{elastic_energy, internal_forces, internal_forces_with, mechanical_energy, Stiffness};
pub use integrator::{settle, step, SettleReport, SettleStop};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("invalid mesh geometry: {0}")]
    InvalidGeometry(String),
    #[error("degenerate tetrahedron {tet} (rest volume {volume:e})")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("simulation diverged at node {node}")]
    Diverged { node: usize },
    #[error("step dt {got} does not match material sim_dt {expected}")]
    TimestepMismatch { got: f64, expected: f64 },
}

/// Mechanical parameters of the soft object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    /// Young's modulus (Pa).
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    /// Total mass of the object (kg), lumped uniformly on the nodes.
    pub total_mass: f64,
    pub damping_ratio: f64,
    /// Stored for completeness; no sliding contact is simulated.
    pub friction_coeff: f64,
    /// Physics timestep (s).
    pub sim_dt: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            young_modulus: 2.5e6,
            poisson_ratio: 0.3,
            total_mass: 0.2,
            damping_ratio: 0.01,
            friction_coeff: 0.5,
            sim_dt: 0.003,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidMaterial(msg.to_string()));
        if !(self.young_modulus > 0.0) {
            return bad("young_modulus must be > 0");
        }
        if !(0.0..0.5).contains(&self.poisson_ratio) {
            return bad("poisson_ratio must lie in [0, 0.5)");
        }
        if !(self.total_mass > 0.0) {
            return bad("total_mass must be > 0");
        }
        if !(self.damping_ratio >= 0.0) {
            return bad("damping_ratio must be >= 0");
        }
        if !(self.sim_dt > 0.0) {
            return bad("sim_dt must be > 0");
        }
        Ok(())
    }
}

/// How each hexahedral cell is cut into tetrahedra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellSplit {
    /// One central tetrahedron plus four corner tetrahedra, with the
    /// orientation alternating by cell parity so shared faces conform.
    #[default]
    Five,
    /// Six tetrahedra around the cell's main diagonal.
    Six,
}

impl std::str::FromStr for CellSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "5" | "five" => Ok(CellSplit::Five),
            "6" | "six" => Ok(CellSplit::Six),
            other => Err(format!("unknown cell split '{other}' (expected 5 or 6)")),
        }
    }
}

impl std::fmt::Display for CellSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellSplit::Five => write!(f, "5"),
            CellSplit::Six => write!(f, "6"),
        }
    }
}

/// Geometry of a box-shaped bar standing on the xy-plane along +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarGeometry {
    /// Length along z (m).
    pub length: f64,
    /// Side of the square cross-section (m).
    pub cross_section: f64,
    /// Cells along x, y, z.
    pub cells: [usize; 3],
    pub split: CellSplit,
}

impl Default for BarGeometry {
    fn default() -> Self {
        Self {
            length: 1.0,
            cross_section: 0.05,
            cells: [2, 2, 12],
            split: CellSplit::Five,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
}

/// Gripper tip rigidly holding the grasped face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperTip {
    pub position: Vec3,
    pub velocity: Vec3,
}

impl GripperTip {
    pub fn at(position: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Free,
    Pinned,
    Grasped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub node_pos: Vec<Vec3>,
    pub node_vel: Vec<Vec3>,
    pub node_mass: Vec<f64>,
    pub tets: Vec<[usize; 4]>,
    pub edges: Vec<Edge>,
    pub tet_rest_volume: Vec<f64>,
    pub pinned: Vec<usize>,
    pub grasped: Vec<usize>,
    /// Rest positions of the pinned nodes.
    pub pinned_pos: Vec<Vec3>,
    /// Offsets of the grasped nodes from the tip, fixed at construction.
    pub grasp_offsets: Vec<Vec3>,
    pub roles: Vec<NodeRole>,
    pub material: MaterialParams,
    pub stiffness: Stiffness,
    pub gravity: Vec3,
    /// Grid layout the mesh was built from, when it came from [`build_bar_mesh`].
    pub geometry: Option<BarGeometry>,
}

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

impl TetMesh {
    /// Assembles a mesh from raw topology and validates it.
    ///
    /// `grasp_anchor` is the tip position the grasped nodes are attached to.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        node_pos: Vec<Vec3>,
        mut tets: Vec<[usize; 4]>,
        pinned: Vec<usize>,
        grasped: Vec<usize>,
        grasp_anchor: Vec3,
        material: MaterialParams,
        gravity: Vec3,
    ) -> Result<Self, SimError> {
        material.validate()?;
        let n = node_pos.len();
        if n == 0 {
            return Err(SimError::InvalidGeometry("mesh has no nodes".into()));
        }
        let mut roles = vec![NodeRole::Free; n];
        for &p in &pinned {
            if p >= n {
                return Err(SimError::InvalidGeometry(format!("pinned index {p} out of range")));
            }
            roles[p] = NodeRole::Pinned;
        }
        for &g in &grasped {
            if g >= n {
                return Err(SimError::InvalidGeometry(format!("grasped index {g} out of range")));
            }
            if roles[g] == NodeRole::Pinned {
                return Err(SimError::InvalidGeometry(format!("node {g} is both pinned and grasped")));
            }
            roles[g] = NodeRole::Grasped;
        }

        let mut tet_rest_volume = Vec::with_capacity(tets.len());
        let mut edge_set = BTreeSet::new();
        for (t, tet) in tets.iter_mut().enumerate() {
            if tet.iter().any(|&i| i >= n) {
                return Err(SimError::InvalidGeometry(format!("tet {t} references a missing node")));
            }
            let mut vol = energy::tet_volume(&node_pos, tet);
            if vol < 0.0 {
                tet.swap(2, 3);
                vol = -vol;
            }
            let scale = tet
                .iter()
                .skip(1)
                .map(|&i| (node_pos[i] - node_pos[tet[0]]).norm())
                .fold(0.0, f64::max);
            if !(vol > 1e-12 * scale.powi(3)) {
                return Err(SimError::DegenerateTet { tet: t, volume: vol });
            }
            tet_rest_volume.push(vol);
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let (a, b) = (tet[i].min(tet[j]), tet[i].max(tet[j]));
                    edge_set.insert((a, b));
                }
            }
        }
        let edges: Vec<Edge> = edge_set
            .into_iter()
            .map(|(a, b)| Edge {
                a,
                b,
                rest_length: (node_pos[a] - node_pos[b]).norm(),
            })
            .collect();
        if let Some(e) = edges.iter().find(|e| !(e.rest_length > 0.0)) {
            return Err(SimError::InvalidGeometry(format!(
                "edge ({}, {}) has zero rest length",
                e.a, e.b
            )));
        }

        let node_mass = vec![material.total_mass / n as f64; n];
        let pinned_pos = pinned.iter().map(|&i| node_pos[i]).collect();
        let grasp_offsets = grasped.iter().map(|&i| node_pos[i] - grasp_anchor).collect();
        let stiffness = Stiffness::derive(&material, &edges, &tet_rest_volume, &node_mass);

        Ok(Self {
            node_vel: vec![Vec3::zeros(); n],
            node_pos,
            node_mass,
            tets,
            edges,
            tet_rest_volume,
            pinned,
            grasped,
            pinned_pos,
            grasp_offsets,
            roles,
            material,
            stiffness,
            gravity,
            geometry: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_pos.len()
    }

    pub fn free_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == NodeRole::Free)
            .map(|(i, _)| i)
    }

    /// Centroid of the grasped face, i.e. where the tip sits initially.
    pub fn grasp_anchor(&self) -> Vec3 {
        let sum: Vec3 = self
            .grasped
            .iter()
            .zip(&self.grasp_offsets)
            .map(|(&i, off)| self.node_pos[i] - off)
            .sum();
        sum / self.grasped.len().max(1) as f64
    }

    pub fn total_volume(&self) -> f64 {
        self.tet_rest_volume.iter().sum()
    }

    /// Largest speed among free nodes.
    pub fn max_free_speed(&self) -> f64 {
        self.free_nodes()
            .map(|i| self.node_vel[i].norm())
            .fold(0.0, f64::max)
    }

    /// Moves the grasped nodes onto the tip and zeroes pinned velocities.
    pub fn apply_constraints(&mut self, tip: &GripperTip) {
        for (k, &g) in self.grasped.iter().enumerate() {
            self.node_pos[g] = tip.position + self.grasp_offsets[k];
            self.node_vel[g] = tip.velocity;
        }
        for (k, &p) in self.pinned.iter().enumerate() {
            self.node_pos[p] = self.pinned_pos[k];
            self.node_vel[p] = Vec3::zeros();
        }
    }
}

/// Node index on the `(nx+1) × (ny+1) × (nz+1)` lattice.
pub fn lattice_index(cells: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    let [nx, ny, _] = cells;
    (k * (ny + 1) + j) * (nx + 1) + i
}

/// Tetrahedra of one cell as corner bit masks (`dx | dy << 1 | dz << 2`).
fn cell_tets(split: CellSplit, parity_odd: bool) -> Vec<[u8; 4]> {
    match split {
        CellSplit::Five => {
            if !parity_odd {
                vec![
                    [0b000, 0b011, 0b101, 0b110],
                    [0b001, 0b000, 0b011, 0b101],
                    [0b010, 0b000, 0b011, 0b110],
                    [0b100, 0b000, 0b101, 0b110],
                    [0b111, 0b011, 0b101, 0b110],
                ]
            } else {
                vec![
                    [0b001, 0b010, 0b100, 0b111],
                    [0b000, 0b001, 0b010, 0b100],
                    [0b011, 0b001, 0b010, 0b111],
                    [0b101, 0b001, 0b100, 0b111],
                    [0b110, 0b010, 0b100, 0b111],
                ]
            }
        }
        CellSplit::Six => {
            let axes = [0b001u8, 0b010, 0b100];
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            perms
                .iter()
                .map(|p| {
                    let a = axes[p[0]];
                    let b = a | axes[p[1]];
                    [0b000, a, b, 0b111]
                })
                .collect()
        }
    }
}

/// Builds the bar mesh: bottom face pinned, top face grasped, mass lumped
/// uniformly on the nodes.
pub fn build_bar_mesh(
    geometry: &BarGeometry,
    material: &MaterialParams,
    gravity: Vec3,
) -> Result<TetMesh, SimError> {
    let [nx, ny, nz] = geometry.cells;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(SimError::InvalidGeometry("every axis needs at least one cell".into()));
    }
    if !(geometry.length > 0.0 && geometry.cross_section > 0.0) {
        return Err(SimError::InvalidGeometry("bar dimensions must be positive".into()));
    }
    let w = geometry.cross_section;
    let mut node_pos = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                node_pos.push(Vec3::new(
                    -0.5 * w + w * i as f64 / nx as f64,
                    -0.5 * w + w * j as f64 / ny as f64,
                    geometry.length * k as f64 / nz as f64,
                ));
            }
        }
    }
    let cells = geometry.cells;
    let mut tets = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let odd = (i + j + k) % 2 == 1;
                for corners in cell_tets(geometry.split, odd) {
                    tets.push(corners.map(|c| {
                        let (dx, dy, dz) = ((c & 1) as usize, ((c >> 1) & 1) as usize, ((c >> 2) & 1) as usize);
                        lattice_index(cells, i + dx, j + dy, k + dz)
                    }));
                }
            }
        }
    }
    let face = |k: usize| -> Vec<usize> {
        (0..=ny)
            .flat_map(|j| (0..=nx).map(move |i| (i, j)))
            .map(|(i, j)| lattice_index(cells, i, j, k))
            .collect()
    };
    let anchor = Vec3::new(0.0, 0.0, geometry.length);
    let mut mesh = TetMesh::from_parts(node_pos, tets, face(0), face(nz), anchor, *material, gravity)?;
    mesh.geometry = Some(*geometry);
    Ok(mesh)
}
