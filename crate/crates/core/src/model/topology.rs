use crate::network::{EdgeId, NodeIdx, RoadNetwork};

use super::ModelError;

/// Array-indexed adjacency tables derived from a labeled network.
#[derive(Debug, Clone)]
pub struct Topology {
    k: usize,
    /// Targets of each node's out-edges, in edge-id order.
    neighbors: Vec<Vec<usize>>,
    out: Vec<Vec<(EdgeId, NodeIdx)>>,
    /// `step[node * k + direction]`: the edge and target reached.
    step: Vec<Option<(EdgeId, NodeIdx)>>,
    max_degree: usize,
    headings: Vec<f64>,
}

impl Topology {
    pub fn new(net: &RoadNetwork) -> Result<Self, ModelError> {
        let k = net.k().ok_or_else(|| ModelError::Config("network has no direction labels".into()))?;
        if !net.is_labeled() {
            return Err(ModelError::Config("network has unlabeled edges".into()));
        }
        let n = net.node_count();
        let mut neighbors = Vec::with_capacity(n);
        let mut out_edges = Vec::with_capacity(n);
        let mut step = vec![None; n * k];
        for node in 0..n {
            let out = net.out_edge_ids(NodeIdx(node));
            neighbors.push(out.iter().map(|&e| net.edge(e).target.0).collect());
            out_edges.push(out.iter().map(|&e| (e, net.edge(e).target)).collect());
            for &e in out {
                let rec = net.edge(e);
                let d = rec.direction.expect("labeled");
                step[node * k + d] = Some((e, rec.target));
            }
        }
        let headings = net.edges().iter().map(|e| e.heading.unwrap_or(0.0)).collect();
        Ok(Self { k, max_degree: net.max_out_degree(), neighbors, out: out_edges, step, headings })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn neighbors(&self, node: NodeIdx) -> &[usize] {
        &self.neighbors[node.0]
    }

    pub fn step(&self, node: NodeIdx, direction: usize) -> Option<(EdgeId, NodeIdx)> {
        if direction >= self.k {
            return None;
        }
        self.step.get(node.0 * self.k + direction).copied().flatten()
    }

    /// Out-edges of `node` with their targets, in edge-id order.
    pub fn out_edges(&self, node: NodeIdx) -> &[(EdgeId, NodeIdx)] {
        &self.out[node.0]
    }

    /// The lowest-id edge from `node` to `target`.
    pub fn edge_to(&self, node: NodeIdx, target: usize) -> Option<(EdgeId, NodeIdx)> {
        self.out[node.0].iter().copied().find(|&(_, t)| t.0 == target)
    }

    pub fn heading(&self, e: EdgeId) -> f64 {
        self.headings[e.0]
    }
}
