//! Elastic potential of the edge-spring + volume-preservation model.
//!
//! ```text
//! E = Σ_edges ½ k_e (‖x_a − x_b‖ − L_e)²  +  Σ_tets ½ k_v (V_t − V_t⁰)² / V_t⁰
//! ```
//!
//! with `k_e = E·V_total / (L_e² · n_edges)` (so a uniform strain ε stores
//! `½ E ε² V_total`) and `k_v = E / (3(1 − 2ν))`, the bulk modulus.

use super::{Edge, TetMesh, Vec3};

/// Spring constants derived from the material and the rest mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Stiffness {
    /// Per-edge spring constant (N/m), aligned with `TetMesh::edges`.
    pub edge_k: Vec<f64>,
    /// Volumetric stiffness (Pa).
    pub volume_k: f64,
    /// Per-node viscous damping coefficient (N·s/m).
    pub damping_c: f64,
}

impl Stiffness {
    pub fn derive(
        material: &super::MaterialParams,
        edges: &[Edge],
        tet_rest_volume: &[f64],
        node_mass: &[f64],
    ) -> Self {
        let e = material.young_modulus;
        let total_volume: f64 = tet_rest_volume.iter().sum();
        let n_edges = edges.len().max(1) as f64;
        let edge_k: Vec<f64> = edges
            .iter()
            .map(|edge| e * total_volume / (edge.rest_length * edge.rest_length * n_edges))
            .collect();
        let volume_k = e / (3.0 * (1.0 - 2.0 * material.poisson_ratio));
        let k_mean = edge_k.iter().sum::<f64>() / n_edges;
        let m_node = node_mass.iter().sum::<f64>() / node_mass.len().max(1) as f64;
        let damping_c = 2.0 * material.damping_ratio * (k_mean * m_node).sqrt();
        Self {
            edge_k,
            volume_k,
            damping_c,
        }
    }

    /// Same constants with damping switched off.
    pub fn undamped(&self) -> Self {
        Self {
            damping_c: 0.0,
            ..self.clone()
        }
    }
}

pub(crate) fn tet_volume(pos: &[Vec3], tet: &[usize; 4]) -> f64 {
    let [a, b, c, d] = *tet;
    let (e1, e2, e3) = (pos[b] - pos[a], pos[c] - pos[a], pos[d] - pos[a]);
    e1.dot(&e2.cross(&e3)) / 6.0
}

/// Gradient of the signed volume with respect to each of the four vertices.
pub(crate) fn tet_volume_gradient(pos: &[Vec3], tet: &[usize; 4]) -> [Vec3; 4] {
    let [a, b, c, d] = *tet;
    let (e1, e2, e3) = (pos[b] - pos[a], pos[c] - pos[a], pos[d] - pos[a]);
    let gb = e2.cross(&e3) / 6.0;
    let gc = e3.cross(&e1) / 6.0;
    let gd = e1.cross(&e2) / 6.0;
    [-(gb + gc + gd), gb, gc, gd]
}

/// Total elastic energy (J) of the current configuration.
pub fn elastic_energy(mesh: &TetMesh, stiffness: &Stiffness) -> f64 {
    let springs: f64 = mesh
        .edges
        .iter()
        .zip(&stiffness.edge_k)
        .map(|(e, k)| {
            let stretch = (mesh.node_pos[e.a] - mesh.node_pos[e.b]).norm() - e.rest_length;
            0.5 * k * stretch * stretch
        })
        .sum();
    let volumes: f64 = mesh
        .tets
        .iter()
        .zip(&mesh.tet_rest_volume)
        .map(|(t, &v0)| {
            let dv = tet_volume(&mesh.node_pos, t) - v0;
            0.5 * stiffness.volume_k * dv * dv / v0
        })
        .sum();
    springs + volumes
}

/// Accumulates `−∇E` into `out` (one entry per node).
pub(crate) fn add_elastic_forces(mesh: &TetMesh, stiffness: &Stiffness, out: &mut [Vec3]) {
    let pos = &mesh.node_pos;
    for (e, k) in mesh.edges.iter().zip(&stiffness.edge_k) {
        let d = pos[e.a] - pos[e.b];
        let len = d.norm();
        // f_a = −k (l − L) d/l
        let f = d * (-k * (len - e.rest_length) / len);
        out[e.a] += f;
        out[e.b] -= f;
    }
    for (t, &v0) in mesh.tets.iter().zip(&mesh.tet_rest_volume) {
        let dv = tet_volume(pos, t) - v0;
        let scale = -stiffness.volume_k * dv / v0;
        let grads = tet_volume_gradient(pos, t);
        for (node, g) in t.iter().zip(grads) {
            out[*node] += g * scale;
        }
    }
}

/// Internal force on every node: `−∂E/∂x − c·v`.
///
/// Forces are reported for pinned and grasped nodes as well; the
/// integrator never applies them.
pub fn internal_forces(mesh: &TetMesh) -> Vec<Vec3> {
    internal_forces_with(mesh, &mesh.stiffness)
}

pub fn internal_forces_with(mesh: &TetMesh, stiffness: &Stiffness) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = mesh
        .node_vel
        .iter()
        .map(|v| v * -stiffness.damping_c)
        .collect();
    add_elastic_forces(mesh, stiffness, &mut out);
    out
}

/// Kinetic + elastic + gravitational energy of the free nodes (J).
///
/// Pinned and grasped nodes are excluded from the kinetic and gravity
/// terms; with a stationary tip they contribute constants.
pub fn mechanical_energy(mesh: &TetMesh) -> f64 {
    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for i in mesh.free_nodes() {
        kinetic += 0.5 * mesh.node_mass[i] * mesh.node_vel[i].norm_squared();
        potential -= mesh.node_mass[i] * mesh.gravity.dot(&mesh.node_pos[i]);
    }
    kinetic + potential + elastic_energy(mesh, &mesh.stiffness)
}
