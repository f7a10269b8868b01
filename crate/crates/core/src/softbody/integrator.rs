//! Time stepping of the soft bar.
//!
//! Each step is a linearized backward-Euler update of the free nodes:
//!
//! ```text
//! (M + h·C + h²·H) Δv = h·(F(x) − C·v − H·w),   w = (h·v on free nodes, Δx on grasped nodes)
//! v ← v + Δv
//! x ← x + h·v
//! ```
//!
//! where `H` is a positive semi-definite approximation of the elastic
//! Hessian (compressive spring terms clamped, Gauss–Newton volume term).
//! The system is banded once free nodes are numbered in lattice order and
//! is solved with a banded Cholesky factorization.

use super::energy::{add_elastic_forces, tet_volume_gradient};
use super::{GripperTip, NodeRole, SimError, TetMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettleStop {
    /// Max free-node speed dropped below the tolerance.
    Converged,
    /// Step budget exhausted first.
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleReport {
    pub steps: usize,
    pub stop: SettleStop,
    pub max_speed: f64,
}

impl SettleReport {
    pub fn converged(&self) -> bool {
        self.stop == SettleStop::Converged
    }
}

/// Symmetric positive-definite matrix stored as its lower band.
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds to the symmetric entry (i, j); only the lower triangle is stored.
    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(r, c);
        self.data[k] += v;
    }

    /// In-place Cholesky factorization; returns the failing row on a
    /// non-positive pivot.
    fn factor(&mut self) -> Result<(), usize> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo_i = i.saturating_sub(self.bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(self.bw));
                let (ri, rj) = (i * w + self.bw - i, j * w + self.bw - j);
                let dot: f64 = self.data[ri + lo..ri + j]
                    .iter()
                    .zip(&self.data[rj + lo..rj + j])
                    .map(|(a, b)| a * b)
                    .sum();
                let s = self.data[ri + j] - dot;
                if i == j {
                    if !(s > 0.0) {
                        return Err(i);
                    }
                    self.data[ri + j] = s.sqrt();
                } else {
                    self.data[ri + j] = s / self.data[rj + j];
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let ri = i * w + self.bw - i;
            let dot: f64 = self.data[ri + lo..ri + i].iter().zip(&b[lo..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - dot) / self.data[ri + i];
        }
        for i in (0..self.n).rev() {
            let ri = i * w + self.bw - i;
            b[i] /= self.data[ri + i];
            let xi = b[i];
            let lo = i.saturating_sub(self.bw);
            for (k, x) in (lo..i).zip(&mut b[lo..i]) {
                *x -= self.data[ri + k] * xi;
            }
        }
    }
}

/// PSD spring Hessian block `k[α I + (1 − α) n nᵀ]`, `α = max(0, 1 − L/l)`.
#[inline]
fn spring_block(d: &Vec3, k: f64, rest: f64) -> [[f64; 3]; 3] {
    let len = d.norm();
    let n = d / len;
    let alpha = (1.0 - rest / len).max(0.0);
    let mut b = [[0.0; 3]; 3];
    for (r, row) in b.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let id = if r == c { 1.0 } else { 0.0 };
            *v = k * (alpha * id + (1.0 - alpha) * n[r] * n[c]);
        }
    }
    b
}

#[inline]
fn mat_vec(b: &[[f64; 3]; 3], v: &Vec3) -> Vec3 {
    Vec3::new(
        b[0][0] * v.x + b[0][1] * v.y + b[0][2] * v.z,
        b[1][0] * v.x + b[1][1] * v.y + b[1][2] * v.z,
        b[2][0] * v.x + b[2][1] * v.y + b[2][2] * v.z,
    )
}

/// Advances the mesh by one physics step with the tip at its end-of-step
/// state.
pub fn step(mesh: &mut TetMesh, tip: &GripperTip, dt: f64) -> Result<(), SimError> {
    let expected = mesh.material.sim_dt;
    if (dt - expected).abs() > 1e-12 * expected {
        return Err(SimError::TimestepMismatch { got: dt, expected });
    }
    let h = dt;
    let n = mesh.node_count();
    let c = mesh.stiffness.damping_c;

    // Compact numbering of free nodes in index order.
    let mut dof = vec![usize::MAX; n];
    let mut free = Vec::with_capacity(n);
    for (i, role) in mesh.roles.iter().enumerate() {
        if *role == NodeRole::Free {
            dof[i] = free.len();
            free.push(i);
        }
    }
    let nf = free.len();

    // Displacement driving the linearized force change.
    let mut w = vec![Vec3::zeros(); n];
    for &i in &free {
        w[i] = mesh.node_vel[i] * h;
    }
    for (k, &g) in mesh.grasped.iter().enumerate() {
        w[g] = tip.position + mesh.grasp_offsets[k] - mesh.node_pos[g];
    }

    let mut force = vec![Vec3::zeros(); n];
    add_elastic_forces(mesh, &mesh.stiffness, &mut force);
    for &i in &free {
        force[i] += mesh.gravity * mesh.node_mass[i] - mesh.node_vel[i] * c;
    }
    if let Some(i) = free.iter().copied().find(|&i| !force[i].iter().all(|v| v.is_finite())) {
        return Err(SimError::Diverged { node: i });
    }

    let mut half_band = 0usize;
    for e in &mesh.edges {
        if dof[e.a] != usize::MAX && dof[e.b] != usize::MAX {
            half_band = half_band.max(dof[e.a].abs_diff(dof[e.b]));
        }
    }
    let mut a = BandMatrix::zeros(3 * nf, 3 * half_band + 2);
    for (k, &i) in free.iter().enumerate() {
        let diag = mesh.node_mass[i] + h * c;
        for r in 0..3 {
            a.add(3 * k + r, 3 * k + r, diag);
        }
    }

    let h2 = h * h;
    let pos = &mesh.node_pos;
    let mut hw = vec![Vec3::zeros(); n];
    for (e, &k) in mesh.edges.iter().zip(&mesh.stiffness.edge_k) {
        let block = spring_block(&(pos[e.a] - pos[e.b]), k, e.rest_length);
        let f = mat_vec(&block, &(w[e.a] - w[e.b]));
        hw[e.a] += f;
        hw[e.b] -= f;
        let (da, db) = (dof[e.a], dof[e.b]);
        for r in 0..3 {
            for s in 0..3 {
                let v = h2 * block[r][s];
                if da != usize::MAX && r >= s {
                    a.add(3 * da + r, 3 * da + s, v);
                }
                if db != usize::MAX && r >= s {
                    a.add(3 * db + r, 3 * db + s, v);
                }
                if da != usize::MAX && db != usize::MAX {
                    a.add(3 * da + r, 3 * db + s, -v);
                }
            }
        }
    }
    let kv = mesh.stiffness.volume_k;
    for (t, &v0) in mesh.tets.iter().zip(&mesh.tet_rest_volume) {
        let g = tet_volume_gradient(pos, t);
        let s = kv / v0;
        let gw: f64 = t.iter().zip(&g).map(|(&node, gi)| gi.dot(&w[node])).sum();
        for (&node, gi) in t.iter().zip(&g) {
            hw[node] += gi * (s * gw);
        }
        for (p, &ni) in t.iter().enumerate() {
            let di = dof[ni];
            if di == usize::MAX {
                continue;
            }
            for (q, &nj) in t.iter().enumerate() {
                let dj = dof[nj];
                if dj == usize::MAX || dj > di {
                    continue;
                }
                for r in 0..3 {
                    for col in 0..3 {
                        if di == dj && col > r {
                            continue;
                        }
                        a.add(3 * di + r, 3 * dj + col, h2 * s * g[p][r] * g[q][col]);
                    }
                }
            }
        }
    }

    let mut rhs = vec![0.0; 3 * nf];
    for (k, &i) in free.iter().enumerate() {
        let r = (force[i] - hw[i]) * h;
        rhs[3 * k..3 * k + 3].copy_from_slice(r.as_slice());
    }
    if let Err(row) = a.factor() {
        return Err(SimError::Diverged { node: free[row / 3] });
    }
    a.solve(&mut rhs);

    for (k, &i) in free.iter().enumerate() {
        let dv = Vec3::new(rhs[3 * k], rhs[3 * k + 1], rhs[3 * k + 2]);
        let v = mesh.node_vel[i] + dv;
        let x = mesh.node_pos[i] + v * h;
        if !(x.iter().all(|c| c.is_finite()) && v.iter().all(|c| c.is_finite())) {
            return Err(SimError::Diverged { node: i });
        }
        mesh.node_vel[i] = v;
        mesh.node_pos[i] = x;
    }
    mesh.apply_constraints(tip);
    Ok(())
}

/// Steps with a stationary tip until every free node is slower than
/// `vel_tol` or `max_steps` steps have run.
pub fn settle(
    mesh: &mut TetMesh,
    tip: &GripperTip,
    max_steps: usize,
    vel_tol: f64,
) -> Result<SettleReport, SimError> {
    let still = GripperTip::at(tip.position);
    let dt = mesh.material.sim_dt;
    let mut steps = 0;
    loop {
        let max_speed = mesh.max_free_speed();
        if max_speed < vel_tol {
            return Ok(SettleReport {
                steps,
                stop: SettleStop::Converged,
                max_speed,
            });
        }
        if steps >= max_steps {
            return Ok(SettleReport {
                steps,
                stop: SettleStop::MaxSteps,
                max_speed,
            });
        }
        step(mesh, &still, dt)?;
        steps += 1;
    }
}
