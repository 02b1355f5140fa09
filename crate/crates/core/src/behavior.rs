//! Dynamic geometric graphs over the agents of a scene, their centrality
//! measures, and the derived behavior likelihood (BLE) and intensity (BIE)
//! estimates.
//!
//! Per frame, agents are nodes and an undirected edge joins two agents whose
//! Euclidean distance `d` satisfies `0 < d <= r`. The adjacency matrix stores
//! `d` on edges. From each frame's graph:
//!
//! * degree is the running total of neighbor counts over frames,
//! * closeness is `(|N| - 1) / sum(d)` over the node's neighbors,
//! * eigenvector centrality is `sum(d) / lambda`, `lambda` being the largest
//!   eigenvalue of the adjacency matrix.
//!
//! BLE is the absolute backward difference of the centrality triple over
//! `dt`; BIE is the absolute backward difference of BLE over `dt`.

use std::collections::HashSet;
use std::io::{self, Write};

use crate::geometry::CartPoint;
use crate::CoreError;

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;

/// Graph of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGeometricGraph {
    node_ids: Vec<u64>,
    threshold_r: f64,
    /// Row-major `n x n`.
    adjacency: Vec<f64>,
}

impl DynamicGeometricGraph {
    pub fn build(positions: &[CartPoint], ids: &[u64], r: f64) -> Result<Self, CoreError> {
        let present: Vec<Option<CartPoint>> = positions.iter().copied().map(Some).collect();
        Self::build_with_presence(&present, ids, r)
    }

    /// Absent agents (`None`) stay in the node set without any edges.
    pub fn build_with_presence(
        positions: &[Option<CartPoint>],
        ids: &[u64],
        r: f64,
    ) -> Result<Self, CoreError> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(CoreError::InvalidInput(format!("graph threshold r={r} must be finite and >= 0")));
        }
        if positions.len() != ids.len() {
            return Err(CoreError::InvalidInput(format!(
                "{} positions for {} ids",
                positions.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !seen.insert(id) {
                return Err(CoreError::DuplicateId(id));
            }
        }
        let n = ids.len();
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            let Some(pi) = positions[i] else { continue };
            for j in (i + 1)..n {
                let Some(pj) = positions[j] else { continue };
                let d = pi.distance(pj);
                if d > 0.0 && d <= r {
                    adjacency[i * n + j] = d;
                    adjacency[j * n + i] = d;
                }
            }
        }
        Ok(Self {
            node_ids: ids.to_vec(),
            threshold_r: r,
            adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn threshold(&self) -> f64 {
        self.threshold_r
    }

    pub fn adjacency(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.len() + j]
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.node_ids.iter().position(|&x| x == id)
    }

    fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.adjacency[i * n..(i + 1) * n]
    }

    pub fn neighbor_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&d| d > 0.0).count()
    }

    pub fn distance_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&d| d > 0.0).count() / 2
    }

    /// `(|N| - 1) / sum(d)`, or 0 for an isolated node.
    pub fn closeness(&self, i: usize) -> f64 {
        let k = self.neighbor_count(i);
        let total = self.distance_sum(i);
        if k == 0 || total == 0.0 {
            0.0
        } else {
            (k as f64 - 1.0) / total
        }
    }

    /// Largest adjacency eigenvalue; 1 for a graph without edges.
    pub fn largest_eigenvalue(&self) -> Result<f64, CoreError> {
        let n = self.len();
        let mut component = vec![usize::MAX; n];
        let mut best: Option<f64> = None;
        for start in 0..n {
            if component[start] != usize::MAX || self.neighbor_count(start) == 0 {
                continue;
            }
            // Collect the connected component reachable from `start`.
            let mut members = vec![start];
            component[start] = start;
            let mut cursor = 0;
            while cursor < members.len() {
                let u = members[cursor];
                cursor += 1;
                for v in 0..n {
                    if component[v] == usize::MAX && self.adjacency(u, v) > 0.0 {
                        component[v] = start;
                        members.push(v);
                    }
                }
            }
            members.sort_unstable();
            let m = members.len();
            let mut sub = vec![0.0; m * m];
            for (a, &u) in members.iter().enumerate() {
                for (b, &v) in members.iter().enumerate() {
                    sub[a * m + b] = self.adjacency(u, v);
                }
            }
            let lambda = power_iteration(&sub, m)?;
            best = Some(best.map_or(lambda, |b: f64| b.max(lambda)));
        }
        Ok(best.unwrap_or(1.0))
    }

    /// `sum(d) / lambda` for node `i`, given the graph's largest eigenvalue.
    pub fn eigenvector_with(&self, i: usize, lambda: f64) -> f64 {
        self.distance_sum(i) / lambda
    }

    pub fn eigenvector_centrality(&self, i: usize) -> Result<f64, CoreError> {
        Ok(self.eigenvector_with(i, self.largest_eigenvalue()?))
    }
}

/// Dominant eigenvalue of a symmetric nonnegative irreducible matrix.
///
/// Iterates on `A + cI` with `c` half the largest row sum; the shift separates
/// the Perron root from `-lambda` on bipartite graphs. Starts from all ones.
fn power_iteration(a: &[f64], n: usize) -> Result<f64, CoreError> {
    let max_row = (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(0.0, f64::max);
    let shift = 0.5 * max_row;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERATIONS {
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            y[i] = shift * x[i] + row.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
        }
        let rayleigh: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
        residual = x
            .iter()
            .zip(&y)
            .map(|(p, q)| (q - rayleigh * p).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= POWER_TOLERANCE * rayleigh.abs().max(1.0) {
            return Ok(rayleigh - shift);
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    Err(CoreError::NonConvergence {
        iterations: POWER_MAX_ITERATIONS,
        residual,
    })
}

/// Cumulative degree of `id` across an ordered sequence of frame graphs.
/// Frames where the node is absent add nothing.
pub fn degree_centrality(graphs: &[DynamicGeometricGraph], id: u64) -> Vec<f64> {
    let mut total = 0.0;
    graphs
        .iter()
        .map(|g| {
            if let Some(i) = g.index_of(id) {
                total += g.neighbor_count(i) as f64;
            }
            total
        })
        .collect()
}

pub fn closeness_centrality(graph: &DynamicGeometricGraph, i: usize) -> f64 {
    graph.closeness(i)
}

pub fn eigenvector_centrality(graph: &DynamicGeometricGraph, i: usize) -> Result<f64, CoreError> {
    graph.eigenvector_centrality(i)
}

/// Per-agent, per-frame `[degree, closeness, eigenvector]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralitySeries {
    pub agent_ids: Vec<u64>,
    pub frames: usize,
    /// Agent-major.
    pub values: Vec<[f64; 3]>,
}

impl CentralitySeries {
    pub fn from_graphs(graphs: &[DynamicGeometricGraph], ids: &[u64]) -> Result<Self, CoreError> {
        let frames = graphs.len();
        let mut values = vec![[0.0; 3]; ids.len() * frames];
        let lambdas = graphs
            .iter()
            .map(DynamicGeometricGraph::largest_eigenvalue)
            .collect::<Result<Vec<_>, _>>()?;
        for (a, &id) in ids.iter().enumerate() {
            let degree = degree_centrality(graphs, id);
            for (t, g) in graphs.iter().enumerate() {
                let v = &mut values[a * frames + t];
                v[0] = degree[t];
                if let Some(i) = g.index_of(id) {
                    v[1] = g.closeness(i);
                    v[2] = g.eigenvector_with(i, lambdas[t]);
                }
            }
        }
        Ok(Self {
            agent_ids: ids.to_vec(),
            frames,
            values,
        })
    }

    pub fn agent(&self, a: usize) -> &[[f64; 3]] {
        &self.values[a * self.frames..(a + 1) * self.frames]
    }
}

fn check_dt(dt: f64) -> Result<(), CoreError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(CoreError::InvalidInput(format!("dt={dt} must be positive")))
    }
}

fn abs_backward_difference(series: &[[f64; 3]], dt: f64, warmup: usize) -> Vec<[f64; 3]> {
    (0..series.len())
        .map(|t| {
            if t < warmup {
                [0.0; 3]
            } else {
                let (cur, prev) = (series[t], series[t - 1]);
                [
                    ((cur[0] - prev[0]) / dt).abs(),
                    ((cur[1] - prev[1]) / dt).abs(),
                    ((cur[2] - prev[2]) / dt).abs(),
                ]
            }
        })
        .collect()
}

/// Behavior likelihood estimate; frame 0 is 0.
pub fn ble(series: &[[f64; 3]], dt: f64) -> Result<Vec<[f64; 3]>, CoreError> {
    check_dt(dt)?;
    Ok(abs_backward_difference(series, dt, 1))
}

/// Behavior intensity estimate from a BLE series; frames 0 and 1 are 0.
pub fn bie(ble_series: &[[f64; 3]], dt: f64) -> Result<Vec<[f64; 3]>, CoreError> {
    check_dt(dt)?;
    Ok(abs_backward_difference(ble_series, dt, 2))
}

/// Per-agent, per-frame `[BLE; BIE]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSeries {
    pub agent_ids: Vec<u64>,
    pub frames: usize,
    /// Agent-major.
    pub features: Vec<[f64; 6]>,
}

impl BehaviorSeries {
    /// `(n_agents, frames, 6)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.agent_ids.len(), self.frames, 6)
    }

    pub fn agent(&self, a: usize) -> &[[f64; 6]] {
        &self.features[a * self.frames..(a + 1) * self.frames]
    }

    pub fn is_all_zero(&self) -> bool {
        self.features.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "agent_id,frame,ble_degree,ble_closeness,ble_eigenvector,bie_degree,bie_closeness,bie_eigenvector"
        )?;
        for (a, id) in self.agent_ids.iter().enumerate() {
            for (t, f) in self.agent(a).iter().enumerate() {
                write!(out, "{id},{t}")?;
                for v in f {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Behavior features of every agent over aligned frames.
///
/// `tracks[a][t]` is agent `a`'s position at frame `t`, `None` when it is not
/// observed. At least three frames are required.
pub fn behavior_features(
    ids: &[u64],
    tracks: &[Vec<Option<CartPoint>>],
    r: f64,
    dt: f64,
) -> Result<BehaviorSeries, CoreError> {
    check_dt(dt)?;
    if ids.len() != tracks.len() {
        return Err(CoreError::InvalidInput(format!(
            "{} ids for {} tracks",
            ids.len(),
            tracks.len()
        )));
    }
    let frames = tracks.first().map_or(0, Vec::len);
    if tracks.iter().any(|t| t.len() != frames) {
        return Err(CoreError::InvalidInput("tracks are not frame-aligned".into()));
    }
    if frames < 3 {
        return Err(CoreError::InvalidInput(format!(
            "behavior features need at least 3 frames, got {frames}"
        )));
    }
    let graphs = (0..frames)
        .map(|t| {
            let positions: Vec<Option<CartPoint>> = tracks.iter().map(|tr| tr[t]).collect();
            DynamicGeometricGraph::build_with_presence(&positions, ids, r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let centrality = CentralitySeries::from_graphs(&graphs, ids)?;
    let mut features = Vec::with_capacity(ids.len() * frames);
    for a in 0..ids.len() {
        let likelihood = ble(centrality.agent(a), dt)?;
        let intensity = bie(&likelihood, dt)?;
        for (l, i) in likelihood.iter().zip(&intensity) {
            features.push([l[0], l[1], l[2], i[0], i[1], i[2]]);
        }
    }
    Ok(BehaviorSeries {
        agent_ids: ids.to_vec(),
        frames,
        features,
    })
}
