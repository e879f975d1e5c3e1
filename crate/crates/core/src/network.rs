//! Network description, validation, spatial discretization, and the
//! incidence-derived matrix set.
//!
//! A network file (`schema: "linepack-net/1"`) lists physical nodes and
//! pipes. Pipes are split into segments of roughly a target length; the
//! induced intermediate nodes carry no compressor and no injection. All
//! quantities are SI: densities kg/m^3, flux kg/(m^2 s), mass flow kg/s.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{half, s, Scalar};

pub const NETWORK_SCHEMA: &str = "linepack-net/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Source,
    Load,
    Junction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    /// Compressor ratio on the outflow side; 1 = no compressor.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Positive = supply, negative = load.
    #[serde(default)]
    pub injection_kg_s: f64,
    pub kind: NodeKind,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipeSpec {
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub diameter_m: f64,
    /// Darcy friction factor.
    pub lambda: f64,
    pub wave_speed_m_s: f64,
    /// Override for combined parallel lines; defaults to pi D^2 / 4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_m2: Option<f64>,
}

impl PipeSpec {
    pub fn area(&self) -> f64 {
        self.area_m2
            .unwrap_or(std::f64::consts::PI * self.diameter_m * self.diameter_m / 4.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub schema: String,
    pub nodes: Vec<NodeSpec>,
    pub pipes: Vec<PipeSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        if spec.schema != NETWORK_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema `{NETWORK_SCHEMA}`, found `{}`",
                spec.schema
            )));
        }
        Ok(spec)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Validated physical network, prior to discretization.
#[derive(Debug, Clone)]
pub struct ValidatedNetwork {
    pub spec: NetworkSpec,
    pub node_index: HashMap<String, usize>,
    pub connected: bool,
    /// Connected tree structure (n = m + 1).
    pub is_tree: bool,
}

/// Validate ids, endpoints, parameter ranges, and connectivity.
pub fn build_network(spec: NetworkSpec) -> Result<ValidatedNetwork> {
    let mut node_index = HashMap::new();
    for (i, node) in spec.nodes.iter().enumerate() {
        if node_index.insert(node.id.clone(), i).is_some() {
            return Err(Error::DuplicateNodeId(node.id.clone()));
        }
        if !(node.alpha > 0.0) {
            return Err(Error::NonPositiveParameter(format!(
                "alpha at node `{}`",
                node.id
            )));
        }
    }
    for pipe in &spec.pipes {
        for end in [&pipe.from, &pipe.to] {
            if !node_index.contains_key(end) {
                return Err(Error::DanglingEndpoint(end.clone()));
            }
        }
        if pipe.from == pipe.to {
            return Err(Error::Schema(format!(
                "pipe `{}` -> `{}` is a self-loop",
                pipe.from, pipe.to
            )));
        }
        for (name, v) in [
            ("length_m", pipe.length_m),
            ("diameter_m", pipe.diameter_m),
            ("lambda", pipe.lambda),
            ("wave_speed_m_s", pipe.wave_speed_m_s),
            ("area_m2", pipe.area()),
        ] {
            if !(v > 0.0) {
                return Err(Error::NonPositiveParameter(format!(
                    "{name} on pipe `{}` -> `{}`",
                    pipe.from, pipe.to
                )));
            }
        }
    }
    // connectivity via union-find-free BFS
    let n = spec.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for pipe in &spec.pipes {
        let a = node_index[&pipe.from];
        let b = node_index[&pipe.to];
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    if n > 0 {
        seen[0] = true;
    }
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    let connected = seen.iter().all(|&x| x);
    if !connected {
        return Err(Error::Disconnected);
    }
    let is_tree = connected && spec.pipes.len() + 1 == n;
    Ok(ValidatedNetwork {
        spec,
        node_index,
        connected,
        is_tree,
    })
}

/// Where a refined node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    Physical(usize),
    /// `index`-th interior node (1-based from the pipe's `from` end).
    Intermediate { pipe: usize, index: usize },
}

/// The refined graph after segmenting each pipe into equal pieces.
#[derive(Debug, Clone)]
pub struct DiscretizedNetwork<T: Scalar> {
    /// Refined node count (physical + intermediate).
    pub n: usize,
    /// Segment count.
    pub m: usize,
    pub n_physical: usize,
    /// Segment start node (the segment leaves this node).
    pub seg_start: Vec<usize>,
    /// Segment end node (the segment enters this node).
    pub seg_end: Vec<usize>,
    /// Per-segment length l, diameter D, friction lambda, wave speed a, area A.
    pub seg_len: Vec<T>,
    pub seg_diam: Vec<T>,
    pub seg_lambda: Vec<T>,
    pub seg_wave: Vec<T>,
    pub seg_area: Vec<T>,
    /// Base compressor ratios per refined node (1 on intermediates).
    pub alpha: DVector<T>,
    /// Injections per refined node, kg/s (0 on intermediates).
    pub injection: DVector<T>,
    pub node_ids: Vec<String>,
    pub node_origin: Vec<NodeOrigin>,
    /// Segment indices of each physical pipe, ordered from its `from` end.
    pub pipe_segments: Vec<Vec<usize>>,
    pub is_tree: bool,
}

/// Split every pipe into `N = ceil(L / target_l)` equal segments.
pub fn discretize<T: Scalar>(net: &ValidatedNetwork, target_l: f64) -> Result<DiscretizedNetwork<T>> {
    if !(target_l > 0.0) {
        return Err(Error::NonPositiveParameter("target_l".into()));
    }
    let n_physical = net.spec.nodes.len();
    let mut node_ids: Vec<String> = net.spec.nodes.iter().map(|nd| nd.id.clone()).collect();
    let mut node_origin: Vec<NodeOrigin> = (0..n_physical).map(NodeOrigin::Physical).collect();
    let mut alpha: Vec<T> = net.spec.nodes.iter().map(|nd| s(nd.alpha)).collect();
    let mut injection: Vec<T> = net.spec.nodes.iter().map(|nd| s(nd.injection_kg_s)).collect();

    let mut seg_start = Vec::new();
    let mut seg_end = Vec::new();
    let mut seg_len = Vec::new();
    let mut seg_diam = Vec::new();
    let mut seg_lambda = Vec::new();
    let mut seg_wave = Vec::new();
    let mut seg_area = Vec::new();
    let mut pipe_segments = Vec::new();

    for (p, pipe) in net.spec.pipes.iter().enumerate() {
        let count = (pipe.length_m / target_l).ceil().max(1.0) as usize;
        let l = pipe.length_m / count as f64;
        let mut prev = net.node_index[&pipe.from];
        let mut segs = Vec::with_capacity(count);
        for k in 0..count {
            let next = if k + 1 == count {
                net.node_index[&pipe.to]
            } else {
                let idx = node_ids.len();
                node_ids.push(format!("{}-{}#{}", pipe.from, pipe.to, k + 1));
                node_origin.push(NodeOrigin::Intermediate { pipe: p, index: k + 1 });
                alpha.push(T::one());
                injection.push(T::zero());
                idx
            };
            segs.push(seg_start.len());
            seg_start.push(prev);
            seg_end.push(next);
            seg_len.push(s(l));
            seg_diam.push(s(pipe.diameter_m));
            seg_lambda.push(s(pipe.lambda));
            seg_wave.push(s(pipe.wave_speed_m_s));
            seg_area.push(s(pipe.area()));
            prev = next;
        }
        pipe_segments.push(segs);
    }

    let n = node_ids.len();
    let m = seg_start.len();
    Ok(DiscretizedNetwork {
        n,
        m,
        n_physical,
        seg_start,
        seg_end,
        seg_len,
        seg_diam,
        seg_lambda,
        seg_wave,
        seg_area,
        alpha: DVector::from_vec(alpha),
        injection: DVector::from_vec(injection),
        node_ids,
        node_origin,
        pipe_segments,
        is_tree: net.is_tree,
    })
}

impl<T: Scalar> DiscretizedNetwork<T> {
    /// State dimension n + 2m.
    pub fn state_dim(&self) -> usize {
        self.n + 2 * self.m
    }

    pub fn node_by_id(&self, id: &str) -> Result<usize> {
        self.node_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Refined-graph degree of a node.
    pub fn degree(&self, node: usize) -> usize {
        self.seg_start.iter().filter(|&&u| u == node).count()
            + self.seg_end.iter().filter(|&&v| v == node).count()
    }

    /// Segments adjacent to a node, with `true` when the segment leaves it.
    pub fn adjacent_segments(&self, node: usize) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        for j in 0..self.m {
            if self.seg_start[j] == node {
                out.push((j, true));
            }
            if self.seg_end[j] == node {
                out.push((j, false));
            }
        }
        out
    }

    /// Signed incidence matrix E (m x n): +1 where the segment leaves the
    /// node, -1 where it enters.
    pub fn incidence(&self) -> DMatrix<T> {
        let mut e = DMatrix::zeros(self.m, self.n);
        for j in 0..self.m {
            e[(j, self.seg_start[j])] = T::one();
            e[(j, self.seg_end[j])] = -T::one();
        }
        e
    }
}

/// Incidence-derived matrices used for mass-matrix assembly and the rank
/// analyses. The simulation hot paths work segment-wise and do not touch
/// these.
#[derive(Debug, Clone)]
pub struct MatrixSet<T: Scalar> {
    /// n x m area-scaled entry/exit matrices of the conservation law.
    pub k0: DMatrix<T>,
    pub kl: DMatrix<T>,
    /// Unscaled counterparts: K0bar = (|E|^T + E^T)/2, Klbar = (E^T - |E|^T)/2.
    pub k0bar: DMatrix<T>,
    pub klbar: DMatrix<T>,
    /// Gamma1 = diag{l/2} (K0bar^T diag{alpha} - Klbar^T), m x n.
    pub gamma1: DMatrix<T>,
    /// Diagonal of Gamma2 = diag{l/2}.
    pub gamma2: DVector<T>,
    /// Gamma3 = diag{a}^2 (Klbar^T + K0bar^T diag{alpha}), m x n.
    pub gamma3: DMatrix<T>,
    /// Diagonal of Gamma4 = diag{l lambda / (4 D)}.
    pub gamma4: DVector<T>,
    /// Gamma5 = K0bar^T diag{alpha} - Klbar^T, m x n.
    pub gamma5: DMatrix<T>,
}

/// Assemble the matrix set from the refined network at its base compressor
/// ratios.
pub fn build_matrices<T: Scalar>(dnet: &DiscretizedNetwork<T>) -> MatrixSet<T> {
    build_matrices_with_alpha(dnet, &dnet.alpha)
}

/// Same as [`build_matrices`] but at explicit compressor ratios.
pub fn build_matrices_with_alpha<T: Scalar>(
    dnet: &DiscretizedNetwork<T>,
    alpha: &DVector<T>,
) -> MatrixSet<T> {
    let (n, m) = (dnet.n, dnet.m);
    let mut k0 = DMatrix::zeros(n, m);
    let mut kl = DMatrix::zeros(n, m);
    let mut k0bar = DMatrix::zeros(n, m);
    let mut klbar = DMatrix::zeros(n, m);
    let mut gamma1 = DMatrix::zeros(m, n);
    let mut gamma3 = DMatrix::zeros(m, n);
    let mut gamma5 = DMatrix::zeros(m, n);
    let mut gamma2 = DVector::zeros(m);
    let mut gamma4 = DVector::zeros(m);
    for j in 0..m {
        let (u, v) = (dnet.seg_start[j], dnet.seg_end[j]);
        let area = dnet.seg_area[j];
        k0[(u, j)] = area;
        kl[(v, j)] = -area;
        k0bar[(u, j)] = T::one();
        klbar[(v, j)] = -T::one();
        let hl = dnet.seg_len[j] * half();
        let a2 = dnet.seg_wave[j] * dnet.seg_wave[j];
        gamma1[(j, u)] = hl * alpha[u];
        gamma1[(j, v)] = hl;
        gamma3[(j, u)] = a2 * alpha[u];
        gamma3[(j, v)] = -a2;
        gamma5[(j, u)] = alpha[u];
        gamma5[(j, v)] = T::one();
        gamma2[j] = hl;
        gamma4[j] = dnet.seg_len[j] * dnet.seg_lambda[j] / (s::<T>(4.0) * dnet.seg_diam[j]);
    }
    MatrixSet {
        k0,
        kl,
        k0bar,
        klbar,
        gamma1,
        gamma2,
        gamma3,
        gamma4,
        gamma5,
    }
}
