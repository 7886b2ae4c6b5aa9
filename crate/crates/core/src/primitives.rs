//! Motion-primitive graph over velocity states.
//!
//! Edges are minimum-jerk quintics in the plane with zero boundary
//! accelerations. Vertices are chosen greedily to shrink the dispersion of a
//! velocity sample set under the symmetric-max pairwise trajectory cost, and
//! edges are translated across the lattice at plan time.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of samples used for velocity-bound and swept-cell checks.
pub const PATH_SAMPLES: usize = 20;

/// Degree-5 polynomial, `c[0] + c[1] t + ... + c[5] t^5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quintic {
    pub c: [f64; 6],
}

impl Quintic {
    pub const ZERO: Quintic = Quintic { c: [0.0; 6] };

    pub fn eval(&self, t: f64) -> f64 {
        self.c.iter().rev().fold(0.0, |acc, &ci| acc * t + ci)
    }

    /// `order`-th derivative at `t`.
    pub fn derivative(&self, order: usize, t: f64) -> f64 {
        let mut acc = 0.0;
        for k in (order..6).rev() {
            let mut f = 1.0;
            for j in 0..order {
                f *= (k - j) as f64;
            }
            acc = acc * t + f * self.c[k];
        }
        acc
    }

    /// `integral_0^T (x'''(t))^2 dt` in closed form.
    pub fn jerk_sq_integral(&self, duration: f64) -> f64 {
        let j0 = 6.0 * self.c[3];
        let j1 = 24.0 * self.c[4];
        let j2 = 60.0 * self.c[5];
        let t = duration;
        let t2 = t * t;
        let t3 = t2 * t;
        j0 * j0 * t
            + j0 * j1 * t2
            + (j1 * j1 + 2.0 * j0 * j2) * t3 / 3.0
            + j1 * j2 * t2 * t2 / 2.0
            + j2 * j2 * t3 * t2 / 5.0
    }
}

/// Rest-acceleration quintic from `(p0, v0)` to `(p1, v1)` over `duration`.
pub fn solve_min_jerk_axis(p0: f64, v0: f64, p1: f64, v1: f64, duration: f64) -> Result<Quintic> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "primitive duration must be positive, got {duration}"
        )));
    }
    let t = duration;
    let h = p1 - p0 - v0 * t;
    let g = (v1 - v0) * t;
    // scaled unknowns a = c3 T^3, b = c4 T^4, c = c5 T^5
    let a = 10.0 * h - 4.0 * g;
    let b = 7.0 * g - 15.0 * h;
    let c = 6.0 * h - 3.0 * g;
    Ok(Quintic {
        c: [p0, v0, 0.0, a / t.powi(3), b / t.powi(4), c / t.powi(5)],
    })
}

pub fn solve_min_jerk(
    p0: [f64; 2],
    v0: [f64; 2],
    p1: [f64; 2],
    v1: [f64; 2],
    duration: f64,
) -> Result<[Quintic; 2]> {
    Ok([
        solve_min_jerk_axis(p0[0], v0[0], p1[0], v1[0], duration)?,
        solve_min_jerk_axis(p0[1], v0[1], p1[1], v1[1], duration)?,
    ])
}

/// Squared-jerk energy plus `rho` times duration.
pub fn primitive_cost(coeffs: &[Quintic; 2], duration: f64, rho: f64) -> f64 {
    coeffs[0].jerk_sq_integral(duration) + coeffs[1].jerk_sq_integral(duration) + rho * duration
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub vel: [f64; 2],
}

impl NodeState {
    pub fn new(vx: f64, vy: f64) -> Self {
        Self { vel: [vx, vy] }
    }

    pub fn speed_inf(&self) -> f64 {
        self.vel[0].abs().max(self.vel[1].abs())
    }
}

fn check_durations(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("duration grid is empty".into()));
    }
    Ok(())
}

/// Cheapest min-jerk cost from `a` to `b` over the candidate durations.
pub fn pairwise_cost(a: &FullState, b: &FullState, t_grid: &[f64], rho: f64) -> Result<f64> {
    check_durations(t_grid)?;
    let mut best = f64::INFINITY;
    for &t in t_grid {
        let q = solve_min_jerk(a.pos, a.vel, b.pos, b.vel, t)?;
        best = best.min(primitive_cost(&q, t, rho));
    }
    Ok(best)
}

/// Trajectory cost between two velocity states with position factored out:
/// the end position is taken as the mean-velocity displacement
/// `(va + vb) T / 2`, so equal states cost only `rho T`. With this embedding
/// the cost is symmetric in its arguments.
pub fn velocity_cost(a: &NodeState, b: &NodeState, t_grid: &[f64], rho: f64) -> Result<f64> {
    check_durations(t_grid)?;
    let mut best = f64::INFINITY;
    for &t in t_grid {
        let end = [
            0.5 * (a.vel[0] + b.vel[0]) * t,
            0.5 * (a.vel[1] + b.vel[1]) * t,
        ];
        let q = solve_min_jerk([0.0; 2], a.vel, end, b.vel, t)?;
        best = best.min(primitive_cost(&q, t, rho));
    }
    Ok(best)
}

/// `max_x min_v max(J(x, v), J(v, x))` for an arbitrary pairwise cost.
pub fn dispersion_by<S, F>(vertices: &[S], samples: &[S], cost: F) -> Result<f64>
where
    F: Fn(&S, &S) -> f64,
{
    if vertices.is_empty() || samples.is_empty() {
        return Err(Error::InvalidArgument(
            "dispersion needs at least one vertex and one sample".into(),
        ));
    }
    let mut worst = f64::NEG_INFINITY;
    for x in samples {
        let nearest = vertices
            .iter()
            .map(|v| cost(x, v).max(cost(v, x)))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    Ok(worst)
}

pub fn dispersion(
    vertices: &[NodeState],
    samples: &[NodeState],
    t_grid: &[f64],
    rho: f64,
) -> Result<f64> {
    check_durations(t_grid)?;
    dispersion_by(vertices, samples, |a, b| {
        velocity_cost(a, b, t_grid, rho).expect("durations checked")
    })
}

/// Greedy dispersion reduction. Returns candidate indices in pick order.
///
/// The first pick minimizes single-vertex dispersion; each later pick gives
/// the lowest resulting dispersion. The worst-case objective ties often, so
/// ties are broken by the lower sum of nearest-vertex costs over the samples,
/// then by the lowest candidate index.
pub fn select_vertices_by<S, F>(
    candidates: &[S],
    samples: &[S],
    n: usize,
    cost: F,
) -> Result<Vec<usize>>
where
    F: Fn(&S, &S) -> f64,
{
    if n > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} vertices from {} candidates",
            candidates.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("sample set is empty".into()));
    }
    // sym[c][s] = max(J(s, c), J(c, s))
    let sym: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| samples.iter().map(|s| cost(s, c).max(cost(c, s))).collect())
        .collect();
    let mut nearest = vec![f64::INFINITY; samples.len()];
    let mut chosen = Vec::with_capacity(n);
    let mut used = vec![false; candidates.len()];
    for _ in 0..n {
        let mut best: Option<(usize, f64, f64)> = None;
        for (ci, row) in sym.iter().enumerate() {
            if used[ci] {
                continue;
            }
            let (d, total) = nearest.iter().zip(row).fold(
                (f64::NEG_INFINITY, 0.0),
                |(d, total), (&a, &b)| {
                    let m = a.min(b);
                    (d.max(m), total + m)
                },
            );
            if best.is_none_or(|(_, bd, bt)| d < bd || (d == bd && total < bt)) {
                best = Some((ci, d, total));
            }
        }
        let (ci, _, _) = best.expect("n <= candidate count");
        used[ci] = true;
        chosen.push(ci);
        for (a, &b) in nearest.iter_mut().zip(&sym[ci]) {
            *a = a.min(b);
        }
    }
    Ok(chosen)
}

pub fn select_vertices(
    candidates: &[NodeState],
    samples: &[NodeState],
    n: usize,
    t_grid: &[f64],
    rho: f64,
) -> Result<Vec<NodeState>> {
    check_durations(t_grid)?;
    let idx = select_vertices_by(candidates, samples, n, |a, b| {
        velocity_cost(a, b, t_grid, rho).expect("durations checked")
    })?;
    Ok(idx.into_iter().map(|i| candidates[i]).collect())
}

/// `n x n` velocity states evenly spaced over `[-v_max, v_max]^2`, row-major
/// in `vy` then `vx`.
pub fn velocity_grid(n: usize, v_max: f64) -> Vec<NodeState> {
    if n == 1 {
        return vec![NodeState::new(0.0, 0.0)];
    }
    let step = 2.0 * v_max / (n - 1) as f64;
    let axis: Vec<f64> = (0..n).map(|i| -v_max + step * i as f64).collect();
    axis.iter()
        .flat_map(|&vy| axis.iter().map(move |&vx| NodeState::new(vx, vy)))
        .collect()
}

/// The 8-connected unit offsets scaled by `stride`.
pub fn default_displacements(stride: i32) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            if dx != 0 || dy != 0 {
                out.push((dx * stride, dy * stride));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    /// Position in meters as a function of time, per axis.
    pub coeffs: [Quintic; 2],
    pub duration: f64,
    pub start_node: usize,
    pub end_node: usize,
    /// End offset in cells.
    pub displacement: (i32, i32),
    pub cell_size: f64,
    pub cost: f64,
}

impl Primitive {
    pub fn position(&self, t: f64) -> [f64; 2] {
        [self.coeffs[0].eval(t), self.coeffs[1].eval(t)]
    }

    pub fn velocity(&self, t: f64) -> [f64; 2] {
        [
            self.coeffs[0].derivative(1, t),
            self.coeffs[1].derivative(1, t),
        ]
    }

    pub fn acceleration(&self, t: f64) -> [f64; 2] {
        [
            self.coeffs[0].derivative(2, t),
            self.coeffs[1].derivative(2, t),
        ]
    }

    /// Times `T i / (n - 1)` for `i in 0..n`.
    pub fn sample_times(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let denom = (n.max(2) - 1) as f64;
        (0..n).map(move |i| self.duration * i as f64 / denom)
    }

    /// Shifts the constant position term by a whole number of cells.
    pub fn translate(&self, offset: (i32, i32)) -> Primitive {
        let mut out = self.clone();
        out.coeffs[0].c[0] += offset.0 as f64 * self.cell_size;
        out.coeffs[1].c[0] += offset.1 as f64 * self.cell_size;
        out
    }

    /// Cell offset (relative to the primitive's start cell) of the point at `t`.
    pub fn cell_offset_at(&self, t: f64) -> (i64, i64) {
        let p = self.position(t);
        (
            (p[0] / self.cell_size).round() as i64,
            (p[1] / self.cell_size).round() as i64,
        )
    }

    /// Distinct cell offsets visited at `PATH_SAMPLES` evenly spaced times,
    /// in first-visit order.
    pub fn swept_offsets(&self) -> Vec<(i64, i64)> {
        let mut out: Vec<(i64, i64)> = Vec::with_capacity(PATH_SAMPLES);
        for t in self.sample_times(PATH_SAMPLES) {
            let c = self.cell_offset_at(t);
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Offsets at `k` evenly spaced sensing times `T i / k`, `i = 1..=k`.
    pub fn sense_offsets(&self, k: usize) -> Vec<(i64, i64)> {
        (1..=k)
            .map(|i| self.cell_offset_at(self.duration * i as f64 / k as f64))
            .collect()
    }

    pub fn max_speed_inf(&self) -> f64 {
        self.sample_times(PATH_SAMPLES)
            .map(|t| {
                let v = self.velocity(t);
                v[0].abs().max(v[1].abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Parameters of the offline graph construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub n_nodes: usize,
    /// Candidate velocities form a `candidate_grid^2` lattice.
    pub candidate_grid: usize,
    /// Dispersion samples form a `sample_grid^2` lattice.
    pub sample_grid: usize,
    pub v_max: f64,
    pub stride: i32,
    pub durations: Vec<f64>,
    pub rho: f64,
    pub cell_size: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            n_nodes: 5,
            candidate_grid: 5,
            sample_grid: 9,
            v_max: 2.0,
            stride: 3,
            durations: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            rho: 10.0,
            cell_size: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGraph {
    pub nodes: Vec<NodeState>,
    pub edges: Vec<Vec<Primitive>>,
    pub stride: u32,
    pub v_max: f64,
    pub cell_size: f64,
}

const GRAPH_MAGIC: &[u8; 4] = b"IPPG";
const GRAPH_VERSION: u32 = 1;

impl PrimitiveGraph {
    /// Vertex selection followed by edge construction.
    pub fn generate(params: &GraphParams) -> Result<Self> {
        let candidates = velocity_grid(params.candidate_grid, params.v_max);
        let samples = velocity_grid(params.sample_grid, params.v_max);
        let nodes = select_vertices(
            &candidates,
            &samples,
            params.n_nodes,
            &params.durations,
            params.rho,
        )?;
        build_graph(
            &nodes,
            &default_displacements(params.stride),
            params.stride.unsigned_abs(),
            params.cell_size,
            &params.durations,
            params.rho,
            params.v_max,
        )
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn max_out_degree(&self) -> usize {
        self.edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Node whose velocity is closest to zero (lowest index on ties).
    pub fn rest_node(&self) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.vel[0].hypot(n.vel[1]);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn min_edge_cost(&self) -> f64 {
        self.edges
            .iter()
            .flatten()
            .map(|e| e.cost)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean_edge_cost(&self) -> f64 {
        let n = self.edge_count();
        self.edges.iter().flatten().map(|e| e.cost).sum::<f64>() / n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != self.nodes.len() {
            return Err(Error::Format(format!(
                "{} nodes but {} edge lists",
                self.nodes.len(),
                self.edges.len()
            )));
        }
        for (u, list) in self.edges.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::IsolatedNode { node: u });
            }
            for e in list {
                if e.start_node != u || e.end_node >= self.nodes.len() || !(e.cost > 0.0) {
                    return Err(Error::Format(format!(
                        "inconsistent edge {u}->{} (cost {})",
                        e.end_node, e.cost
                    )));
                }
            }
        }
        Ok(())
    }

    /// Versioned little-endian binary encoding.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&GRAPH_VERSION.to_le_bytes())?;
        w.write_all(&(self.nodes.len() as u32).to_le_bytes())?;
        w.write_all(&(self.edge_count() as u32).to_le_bytes())?;
        w.write_all(&self.stride.to_le_bytes())?;
        w.write_all(&self.v_max.to_le_bytes())?;
        w.write_all(&self.cell_size.to_le_bytes())?;
        for n in &self.nodes {
            w.write_all(&n.vel[0].to_le_bytes())?;
            w.write_all(&n.vel[1].to_le_bytes())?;
        }
        for e in self.edges.iter().flatten() {
            w.write_all(&(e.start_node as u32).to_le_bytes())?;
            w.write_all(&(e.end_node as u32).to_le_bytes())?;
            w.write_all(&e.displacement.0.to_le_bytes())?;
            w.write_all(&e.displacement.1.to_le_bytes())?;
            w.write_all(&e.duration.to_le_bytes())?;
            w.write_all(&e.cost.to_le_bytes())?;
            for q in &e.coeffs {
                for c in &q.c {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::Format("not a primitive graph file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!(
                "unsupported graph version {version}"
            )));
        }
        let n_nodes = read_u32(&mut r)? as usize;
        let n_edges = read_u32(&mut r)? as usize;
        let stride = read_u32(&mut r)?;
        let v_max = read_f64(&mut r)?;
        let cell_size = read_f64(&mut r)?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let vx = read_f64(&mut r)?;
            let vy = read_f64(&mut r)?;
            nodes.push(NodeState::new(vx, vy));
        }
        let mut edges: Vec<Vec<Primitive>> = vec![Vec::new(); n_nodes];
        for _ in 0..n_edges {
            let start_node = read_u32(&mut r)? as usize;
            let end_node = read_u32(&mut r)? as usize;
            let dx = read_u32(&mut r)? as i32;
            let dy = read_u32(&mut r)? as i32;
            let duration = read_f64(&mut r)?;
            let cost = read_f64(&mut r)?;
            let mut coeffs = [Quintic::ZERO; 2];
            for q in coeffs.iter_mut() {
                for c in q.c.iter_mut() {
                    *c = read_f64(&mut r)?;
                }
            }
            if start_node >= n_nodes {
                return Err(Error::Format(format!("edge start {start_node} out of range")));
            }
            edges[start_node].push(Primitive {
                coeffs,
                duration,
                start_node,
                end_node,
                displacement: (dx, dy),
                cell_size,
                cost,
            });
        }
        let g = Self {
            nodes,
            edges,
            stride,
            v_max,
            cell_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// One row per edge for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "start,edge,end,dx,dy,duration,cost,cx0,cx1,cx2,cx3,cx4,cx5,cy0,cy1,cy2,cy3,cy4,cy5\n",
        );
        for (u, list) in self.edges.iter().enumerate() {
            for (k, e) in list.iter().enumerate() {
                let mut row = vec![
                    u.to_string(),
                    k.to_string(),
                    e.end_node.to_string(),
                    e.displacement.0.to_string(),
                    e.displacement.1.to_string(),
                    e.duration.to_string(),
                    e.cost.to_string(),
                ];
                row.extend(e.coeffs.iter().flat_map(|q| q.c.iter().map(|c| c.to_string())));
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// All `u -> w` edges over each displacement, keeping for each the cheapest
/// duration whose sampled velocity stays within `v_max`. Edge lists are
/// ordered by `(w, displacement)`.
pub fn build_graph(
    nodes: &[NodeState],
    displacements: &[(i32, i32)],
    stride: u32,
    cell_size: f64,
    t_grid: &[f64],
    rho: f64,
    v_max: f64,
) -> Result<PrimitiveGraph> {
    check_durations(t_grid)?;
    if displacements.is_empty() {
        return Err(Error::InvalidArgument("displacement set is empty".into()));
    }
    if displacements.contains(&(0, 0)) {
        return Err(Error::InvalidArgument(
            "zero displacement is not a primitive".into(),
        ));
    }
    if let Some(n) = nodes.iter().find(|n| n.speed_inf() > v_max) {
        return Err(Error::InvalidArgument(format!(
            "node velocity {:?} exceeds v_max {v_max}",
            n.vel
        )));
    }
    let bound = v_max * (1.0 + 1e-12);
    let mut edges = Vec::with_capacity(nodes.len());
    for (u, nu) in nodes.iter().enumerate() {
        let mut list = Vec::new();
        for (w, nw) in nodes.iter().enumerate() {
            for &d in displacements {
                let end = [d.0 as f64 * cell_size, d.1 as f64 * cell_size];
                let mut best: Option<Primitive> = None;
                for &t in t_grid {
                    let coeffs = solve_min_jerk([0.0; 2], nu.vel, end, nw.vel, t)?;
                    let prim = Primitive {
                        coeffs,
                        duration: t,
                        start_node: u,
                        end_node: w,
                        displacement: d,
                        cell_size,
                        cost: primitive_cost(&coeffs, t, rho),
                    };
                    if prim.max_speed_inf() > bound {
                        continue;
                    }
                    if best.as_ref().is_none_or(|b| prim.cost < b.cost) {
                        best = Some(prim);
                    }
                }
                list.extend(best);
            }
        }
        if list.is_empty() {
            return Err(Error::IsolatedNode { node: u });
        }
        edges.push(list);
    }
    let g = PrimitiveGraph {
        nodes: nodes.to_vec(),
        edges,
        stride,
        v_max,
        cell_size,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense Gaussian elimination with partial pivoting.
    fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    /// Independent 6x6 boundary-value system for one axis.
    fn quintic_oracle(p0: f64, v0: f64, p1: f64, v1: f64, t: f64) -> Vec<f64> {
        let row = |order: usize, at: f64| -> Vec<f64> {
            (0..6)
                .map(|k| {
                    if k < order {
                        0.0
                    } else {
                        let f: f64 = (0..order).map(|j| (k - j) as f64).product();
                        f * at.powi((k - order) as i32)
                    }
                })
                .collect()
        };
        let a = vec![
            row(0, 0.0),
            row(1, 0.0),
            row(2, 0.0),
            row(0, t),
            row(1, t),
            row(2, t),
        ];
        solve_dense(a, vec![p0, v0, 0.0, p1, v1, 0.0])
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + h * i as f64);
        }
        s * h / 3.0
    }

    #[test]
    fn rest_to_rest_unit_step() {
        let q = solve_min_jerk_axis(0.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let expected = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0];
        for (a, b) in q.c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q.eval(0.5) - 0.5).abs() < 1e-12);
        let oracle = quintic_oracle(0.0, 0.0, 1.0, 0.0, 1.0);
        for (a, b) in q.c.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_and_constant_velocity_solutions() {
        let q = solve_min_jerk_axis(0.0, 0.0, 0.0, 0.0, 2.0).unwrap();
        assert_eq!(q, Quintic::ZERO);

        let c = 1.7;
        let t = 1.5;
        let q = solve_min_jerk_axis(0.0, c, c * t, c, t).unwrap();
        assert!((q.c[1] - c).abs() < 1e-12);
        for k in [2, 3, 4, 5] {
            assert!(q.c[k].abs() < 1e-12);
        }
        assert!(q.jerk_sq_integral(t) < 1e-20);
    }

    #[test]
    fn nonpositive_duration_rejected() {
        assert!(solve_min_jerk_axis(0.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(solve_min_jerk_axis(0.0, 0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn cost_examples() {
        assert_eq!(primitive_cost(&[Quintic::ZERO; 2], 1.0, 1.0), 1.0);
        let cv = solve_min_jerk([0.0; 2], [1.0, 0.5], [2.0, 1.0], [1.0, 0.5], 2.0).unwrap();
        assert!((primitive_cost(&cv, 2.0, 1.0) - 2.0).abs() < 1e-12);
        let step = solve_min_jerk([0.0; 2], [0.0; 2], [1.0, 0.0], [0.0; 2], 1.0).unwrap();
        assert!((primitive_cost(&step, 1.0, 0.0) - 720.0).abs() < 1e-9);
        // independent quadrature of (60 - 360 t + 360 t^2)^2
        let quad = simpson(|t| (60.0 - 360.0 * t + 360.0 * t * t).powi(2), 0.0, 1.0, 1000);
        assert!((quad - 720.0).abs() < 1e-6);
    }

    #[test]
    fn pairwise_cost_examples() {
        let a = FullState {
            pos: [1.0, 2.0],
            vel: [0.0, 0.0],
        };
        assert_eq!(pairwise_cost(&a, &a, &[0.5, 1.0, 2.0], 3.0).unwrap(), 1.5);
        let b = FullState {
            pos: [2.0, 2.0],
            vel: [0.0, 0.0],
        };
        assert!((pairwise_cost(&a, &b, &[1.0], 0.0).unwrap() - 720.0).abs() < 1e-9);
        let wide = pairwise_cost(&a, &b, &[0.5, 1.0, 2.0], 10.0).unwrap();
        assert!(wide <= pairwise_cost(&a, &b, &[1.0], 10.0).unwrap());
        assert!(pairwise_cost(&a, &b, &[], 1.0).is_err());
    }

    #[test]
    fn velocity_cost_is_symmetric_and_zero_on_diagonal() {
        let grid = velocity_grid(5, 2.0);
        let tg = [0.5, 1.0, 1.5, 2.0];
        for a in &grid {
            assert_eq!(velocity_cost(a, a, &tg, 10.0).unwrap(), 5.0);
            for b in &grid {
                let ab = velocity_cost(a, b, &tg, 10.0).unwrap();
                let ba = velocity_cost(b, a, &tg, 10.0).unwrap();
                assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            }
        }
    }

    #[test]
    fn dispersion_examples() {
        let tg = [0.5, 1.0];
        let v = velocity_grid(3, 1.0);
        assert_eq!(dispersion(&v, &v, &tg, 4.0).unwrap(), 2.0);
        assert!(dispersion(&[], &v, &tg, 4.0).is_err());
        assert!(dispersion(&v, &[], &tg, 4.0).is_err());

        // hand 3x2 table, asymmetric: J[x][v] and J[v][x]
        let cost = |a: &usize, b: &usize| -> f64 {
            const T: [[f64; 5]; 5] = [
                [0.0, 0.0, 0.0, 4.0, 1.0],
                [0.0, 0.0, 0.0, 2.0, 7.0],
                [0.0, 0.0, 0.0, 3.0, 3.0],
                [5.0, 1.0, 2.0, 0.0, 0.0],
                [2.0, 6.0, 1.0, 0.0, 0.0],
            ];
            T[*a][*b]
        };
        // samples 0,1,2 ; vertices 3,4
        // sample 0: max(4,5)=5 vs max(1,2)=2 -> 2
        // sample 1: max(2,1)=2 vs max(7,6)=7 -> 2
        // sample 2: max(3,2)=3 vs max(3,1)=3 -> 3
        let d = dispersion_by(&[3usize, 4], &[0usize, 1, 2], cost).unwrap();
        assert_eq!(d, 3.0);
        let single = dispersion_by(&[4usize], &[0usize, 1, 2], cost).unwrap();
        assert_eq!(single, 7.0);
    }

    fn scalar_cost(a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }

    #[test]
    fn greedy_selection_examples() {
        let cands = [0.0, 1.0, 2.0, 3.0, 4.0];
        let samples: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let first = select_vertices_by(&cands, &samples, 1, scalar_cost).unwrap();
        assert_eq!(first, vec![2]);
        let all = select_vertices_by(&cands, &samples, 5, scalar_cost).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert!(select_vertices_by(&cands, &samples, 6, scalar_cost).is_err());
    }

    #[test]
    fn duplicate_candidate_is_picked_after_improving_ones() {
        // candidates on a line with a duplicate of the centre point
        let cands = [4.0, 0.0, 8.0, 4.0];
        let samples: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let picks = select_vertices_by(&cands, &samples, 4, scalar_cost).unwrap();
        assert_eq!(picks[0], 0);
        assert_eq!(*picks.last().unwrap(), 3);
    }

    #[test]
    fn graph_edge_counts() {
        let tg = [1.0, 2.0, 4.0];
        let g = build_graph(
            &[NodeState::new(0.0, 0.0)],
            &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            1,
            1.0,
            &tg,
            1.0,
            10.0,
        )
        .unwrap();
        assert_eq!(g.edges[0].len(), 4);

        let nodes = [
            NodeState::new(0.0, 0.0),
            NodeState::new(1.0, 0.0),
            NodeState::new(0.0, -1.0),
        ];
        let g = build_graph(&nodes, &default_displacements(1), 1, 1.0, &tg, 1.0, 100.0).unwrap();
        for list in &g.edges {
            assert_eq!(list.len(), 24);
        }
        g.validate().unwrap();
    }

    #[test]
    fn velocity_bound_filters_edges() {
        let nodes = [NodeState::new(0.0, 0.0)];
        let disp = [(1, 0), (4, 0)];
        // rest-to-rest peak speed is 1.875 d / T; at T = 2: 0.94 and 3.75
        let g = build_graph(&nodes, &disp, 1, 1.0, &[2.0], 1.0, 2.0).unwrap();
        assert_eq!(g.edges[0].len(), 1);
        assert_eq!(g.edges[0][0].displacement, (1, 0));

        let q = solve_min_jerk([0.0; 2], [0.0; 2], [4.0, 0.0], [0.0; 2], 2.0).unwrap();
        let peak = (0..=1000)
            .map(|i| q[0].derivative(1, 2.0 * i as f64 / 1000.0))
            .fold(0.0, f64::max);
        assert!((peak - 3.75).abs() < 1e-6);

        let err = build_graph(&nodes, &[(4, 0)], 1, 1.0, &[2.0], 1.0, 2.0).unwrap_err();
        assert!(matches!(err, Error::IsolatedNode { node: 0 }));
        assert!(build_graph(&nodes, &[(0, 0)], 1, 1.0, &[2.0], 1.0, 2.0).is_err());
        assert!(build_graph(&nodes, &[], 1, 1.0, &[2.0], 1.0, 2.0).is_err());
    }

    #[test]
    fn default_graph_is_well_formed() {
        let g = PrimitiveGraph::generate(&GraphParams::default()).unwrap();
        assert_eq!(g.node_count(), 5);
        g.validate().unwrap();
        let rest = g.rest_node();
        assert_eq!(g.nodes[rest].vel, [0.0, 0.0]);
        for e in g.edges.iter().flatten() {
            assert!(e.max_speed_inf() <= 2.0 + 1e-9);
            let end = e.position(e.duration);
            assert!((end[0] - e.displacement.0 as f64).abs() < 1e-9);
            assert!((end[1] - e.displacement.1 as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_binary_round_trip() {
        let g = PrimitiveGraph::generate(&GraphParams::default()).unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"IPPG");
        let back = PrimitiveGraph::read_binary(&buf[..]).unwrap();
        assert_eq!(back, g);
        let mut again = Vec::new();
        back.write_binary(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(PrimitiveGraph::read_binary(&b"nope"[..]).is_err());
        assert_eq!(g.to_csv().lines().count(), g.edge_count() + 1);
    }

    #[test]
    fn translate_examples() {
        let g = PrimitiveGraph::generate(&GraphParams::default()).unwrap();
        let p = &g.edges[0][0];
        assert_eq!(&p.translate((0, 0)), p);
        let back = p.translate((5, -3)).translate((-5, 3));
        assert_eq!(&back, p);
        let moved = p.translate((2, 7));
        assert_eq!(moved.coeffs[0].c[1..], p.coeffs[0].c[1..]);
        assert_eq!(moved.cost, p.cost);
        assert_eq!(
            primitive_cost(&moved.coeffs, moved.duration, 10.0),
            primitive_cost(&p.coeffs, p.duration, 10.0)
        );
    }

    fn residuals(q: &[Quintic; 2], p0: [f64; 2], v0: [f64; 2], p1: [f64; 2], v1: [f64; 2], t: f64) -> f64 {
        let mut worst = 0.0f64;
        for ax in 0..2 {
            let r = [
                q[ax].eval(0.0) - p0[ax],
                q[ax].derivative(1, 0.0) - v0[ax],
                q[ax].derivative(2, 0.0),
                q[ax].eval(t) - p1[ax],
                q[ax].derivative(1, t) - v1[ax],
                q[ax].derivative(2, t),
            ];
            worst = r.iter().fold(worst, |m, v| m.max(v.abs()));
        }
        worst
    }

    proptest! {
        #[test]
        fn boundary_conditions_hold(
            p0 in prop::array::uniform2(-5.0f64..5.0),
            v0 in prop::array::uniform2(-2.0f64..2.0),
            p1 in prop::array::uniform2(-5.0f64..5.0),
            v1 in prop::array::uniform2(-2.0f64..2.0),
            t in 0.3f64..3.0,
        ) {
            let q = solve_min_jerk(p0, v0, p1, v1, t).unwrap();
            prop_assert!(residuals(&q, p0, v0, p1, v1, t) < 1e-9);
        }

        #[test]
        fn matches_linear_system_oracle(
            p0 in -5.0f64..5.0, v0 in -2.0f64..2.0,
            p1 in -5.0f64..5.0, v1 in -2.0f64..2.0, t in 0.3f64..3.0,
        ) {
            let q = solve_min_jerk_axis(p0, v0, p1, v1, t).unwrap();
            let oracle = quintic_oracle(p0, v0, p1, v1, t);
            for (a, b) in q.c.iter().zip(oracle) {
                prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
            }
        }

        #[test]
        fn jerk_integral_matches_simpson(
            p1 in prop::array::uniform2(-5.0f64..5.0),
            v0 in prop::array::uniform2(-2.0f64..2.0),
            v1 in prop::array::uniform2(-2.0f64..2.0),
            t in 0.3f64..3.0,
        ) {
            let q = solve_min_jerk([0.0; 2], v0, p1, v1, t).unwrap();
            let closed = primitive_cost(&q, t, 0.0);
            let numeric = simpson(
                |s| q[0].derivative(3, s).powi(2) + q[1].derivative(3, s).powi(2),
                0.0, t, 1000,
            );
            prop_assert!((closed - numeric).abs() <= 1e-6 * closed.max(1e-12));
        }

        #[test]
        fn translation_preserves_cost(dx in -50i32..50, dy in -50i32..50, k in 0usize..8) {
            let g = build_graph(
                &[NodeState::new(0.0, 0.0), NodeState::new(1.0, 1.0)],
                &default_displacements(2), 2, 1.0, &[1.0, 2.0], 10.0, 5.0,
            ).unwrap();
            let p = &g.edges[1][k];
            let moved = p.translate((dx, dy));
            prop_assert_eq!(moved.cost, p.cost);
            prop_assert_eq!(
                primitive_cost(&moved.coeffs, moved.duration, 10.0),
                primitive_cost(&p.coeffs, p.duration, 10.0)
            );
        }
    }
}
