//! Directed road graph: intersection nodes, road segments, headings and
//! adjacency queries.
//!
//! Node ids are arbitrary unique integers taken from the input file; inside
//! the crate every node is addressed by its dense position ([`NodeIdx`]) so
//! that model parameter tables can be indexed directly. Edge ids must be the
//! dense range `0..|E|`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Dense index of a node in [`RoadNetwork::nodes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIdx(pub usize);

/// Dense edge id, equal to the edge's position in [`RoadNetwork::edges`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub usize);

impl fmt::Display for NodeIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: u64, msg: String },
    #[error("{file}:{line}: duplicate node id {id}")]
    DuplicateNode { file: String, line: u64, id: u64 },
    #[error("{file}:{line}: duplicate edge id {id}")]
    DuplicateEdge { file: String, line: u64, id: usize },
    #[error("{file}:{line}: edge {edge} references missing node {node}")]
    DanglingEndpoint { file: String, line: u64, edge: usize, node: u64 },
    #[error("{file}:{line}: edge id {id} out of the dense range 0..{count}")]
    SparseEdgeId { file: String, line: u64, id: usize, count: usize },
    #[error("{file}:{line}: node {id} has coordinates outside lat [-90, 90] / lon [-180, 180]")]
    BadCoordinate { file: String, line: u64, id: u64 },
    #[error("edge {0} has zero length (source and target coordinates are identical)")]
    ZeroLength(EdgeId),
    #[error("unknown node id {0}")]
    UnknownNode(u64),
    #[error("unknown node index {0}")]
    UnknownNodeIdx(NodeIdx),
    #[error("unknown edge id {0}")]
    UnknownEdge(EdgeId),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
}

/// A directed road segment. `heading`, `interval` and `direction` stay
/// `None` until the corresponding labeling pass has run.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub id: EdgeId,
    pub source: NodeIdx,
    pub target: NodeIdx,
    pub heading: Option<f64>,
    pub interval: Option<usize>,
    pub direction: Option<usize>,
}

impl EdgeRecord {
    pub fn new(id: EdgeId, source: NodeIdx, target: NodeIdx) -> Self {
        Self { id, source, target, heading: None, interval: None, direction: None }
    }
}

/// Immutable once built; share freely across threads.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    node_lookup: HashMap<u64, NodeIdx>,
    out_adjacency: Vec<Vec<EdgeId>>,
    in_adjacency: Vec<Vec<EdgeId>>,
    /// Number of direction intervals, set by `assign_intervals`.
    pub(crate) k: Option<usize>,
}

#[derive(Deserialize)]
struct NodeRow {
    id: u64,
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct EdgeRow {
    id: usize,
    source: u64,
    target: u64,
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(rdr)
}

fn csv_err(file: &str, err: csv::Error) -> NetworkError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    NetworkError::Malformed { file: file.to_string(), line, msg: err.to_string() }
}

/// Deserializes every row, pairing it with its 1-based line number.
fn read_rows<T: serde::de::DeserializeOwned, R: Read>(rdr: R, file: &str) -> Result<Vec<(u64, T)>, NetworkError> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec.deserialize(Some(&headers)).map_err(|e| NetworkError::Malformed {
            file: file.to_string(),
            line,
            msg: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

impl RoadNetwork {
    /// Builds a network from in-memory records. `edges[i].id` must equal `i`.
    pub fn from_records(nodes: Vec<NodeRecord>, edges: Vec<EdgeRecord>) -> Result<Self, NetworkError> {
        let mut node_lookup = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !valid_coordinate(n.lat, n.lon) {
                return Err(NetworkError::BadCoordinate { file: "<memory>".into(), line: 0, id: n.id });
            }
            if node_lookup.insert(n.id, NodeIdx(i)).is_some() {
                return Err(NetworkError::DuplicateNode { file: "<memory>".into(), line: 0, id: n.id });
            }
        }
        let mut out_adjacency = vec![Vec::new(); nodes.len()];
        let mut in_adjacency = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            if e.id.0 != i {
                return Err(NetworkError::SparseEdgeId {
                    file: "<memory>".into(),
                    line: 0,
                    id: e.id.0,
                    count: edges.len(),
                });
            }
            for end in [e.source, e.target] {
                if end.0 >= nodes.len() {
                    return Err(NetworkError::DanglingEndpoint {
                        file: "<memory>".into(),
                        line: 0,
                        edge: i,
                        node: end.0 as u64,
                    });
                }
            }
            out_adjacency[e.source.0].push(e.id);
            in_adjacency[e.target.0].push(e.id);
        }
        Ok(Self { nodes, edges, node_lookup, out_adjacency, in_adjacency, k: None })
    }

    pub fn load(nodes_file: impl AsRef<Path>, edges_file: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let open = |p: &Path| {
            std::fs::File::open(p).map_err(|source| NetworkError::Io { path: p.display().to_string(), source })
        };
        let (np, ep) = (nodes_file.as_ref(), edges_file.as_ref());
        Self::from_readers(
            open(np)?,
            &np.display().to_string(),
            open(ep)?,
            &ep.display().to_string(),
        )
    }

    /// Parses the `id,lat,lon` and `id,source,target` CSV formats.
    pub fn from_readers<N: Read, E: Read>(
        nodes: N,
        nodes_name: &str,
        edges: E,
        edges_name: &str,
    ) -> Result<Self, NetworkError> {
        let mut node_recs = Vec::new();
        let mut node_lookup = HashMap::new();
        for (line, row) in read_rows::<NodeRow, _>(nodes, nodes_name)? {
            if !valid_coordinate(row.lat, row.lon) {
                return Err(NetworkError::BadCoordinate { file: nodes_name.into(), line, id: row.id });
            }
            if node_lookup.insert(row.id, NodeIdx(node_recs.len())).is_some() {
                return Err(NetworkError::DuplicateNode { file: nodes_name.into(), line, id: row.id });
            }
            node_recs.push(NodeRecord { id: row.id, lat: row.lat, lon: row.lon });
        }

        let rows = read_rows::<EdgeRow, _>(edges, edges_name)?;
        let count = rows.len();
        let mut slots: Vec<Option<EdgeRecord>> = vec![None; count];
        for (line, row) in rows {
            if row.id >= count {
                return Err(NetworkError::SparseEdgeId { file: edges_name.into(), line, id: row.id, count });
            }
            if slots[row.id].is_some() {
                return Err(NetworkError::DuplicateEdge { file: edges_name.into(), line, id: row.id });
            }
            let resolve = |node: u64| {
                node_lookup.get(&node).copied().ok_or(NetworkError::DanglingEndpoint {
                    file: edges_name.into(),
                    line,
                    edge: row.id,
                    node,
                })
            };
            let source = resolve(row.source)?;
            let target = resolve(row.target)?;
            slots[row.id] = Some(EdgeRecord::new(EdgeId(row.id), source, target));
        }
        // Every slot is filled: ids are unique and all below `count`.
        let edge_recs = slots.into_iter().map(|e| e.expect("dense edge ids")).collect();
        Self::from_records(node_recs, edge_recs)
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, n: NodeIdx) -> &NodeRecord {
        &self.nodes[n.0]
    }

    pub fn edge(&self, e: EdgeId) -> &EdgeRecord {
        &self.edges[e.0]
    }

    pub fn try_edge(&self, e: EdgeId) -> Result<&EdgeRecord, NetworkError> {
        self.edges.get(e.0).ok_or(NetworkError::UnknownEdge(e))
    }

    /// Resolves an external node id to its dense index.
    pub fn node_index(&self, id: u64) -> Result<NodeIdx, NetworkError> {
        self.node_lookup.get(&id).copied().ok_or(NetworkError::UnknownNode(id))
    }

    /// Number of direction intervals, once assigned.
    pub fn k(&self) -> Option<usize> {
        self.k
    }

    /// Edge ids leaving `n`, ascending.
    pub fn out_edge_ids(&self, n: NodeIdx) -> &[EdgeId] {
        &self.out_adjacency[n.0]
    }

    pub fn in_edge_ids(&self, n: NodeIdx) -> &[EdgeId] {
        &self.in_adjacency[n.0]
    }

    /// Edges with source `n`, in ascending edge-id order.
    pub fn out_edges(&self, n: NodeIdx) -> Result<Vec<&EdgeRecord>, NetworkError> {
        let ids = self.out_adjacency.get(n.0).ok_or(NetworkError::UnknownNodeIdx(n))?;
        Ok(ids.iter().map(|&e| &self.edges[e.0]).collect())
    }

    pub fn out_degree(&self, n: NodeIdx) -> usize {
        self.out_adjacency[n.0].len()
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// First edge from `from` to `to`, if the two nodes are adjacent.
    pub fn edge_between(&self, from: NodeIdx, to: NodeIdx) -> Option<EdgeId> {
        self.out_adjacency[from.0].iter().copied().find(|&e| self.edges[e.0].target == to)
    }

    /// Fills in every edge heading from its endpoint coordinates.
    pub fn compute_headings(mut self) -> Result<Self, NetworkError> {
        for e in &mut self.edges {
            let s = &self.nodes[e.source.0];
            let t = &self.nodes[e.target.0];
            if s.lat == t.lat && s.lon == t.lon {
                return Err(NetworkError::ZeroLength(e.id));
            }
            e.heading = Some(initial_bearing(s.lat, s.lon, t.lat, t.lon));
        }
        Ok(self)
    }

    pub(crate) fn edges_mut(&mut self) -> &mut [EdgeRecord] {
        &mut self.edges
    }

    /// Counts nodes per out-degree; index `d` holds the number of nodes with
    /// out-degree `d`.
    pub fn degree_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.max_out_degree() + 1];
        for adj in &self.out_adjacency {
            hist[adj.len()] += 1;
        }
        hist
    }
}

fn valid_coordinate(lat: f64, lon: f64) -> bool {
    (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

/// Great-circle initial bearing from the first point to the second, in
/// degrees clockwise from north, normalized to `[0, 360)`.
pub fn initial_bearing(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dlambda = (lon2 - lon1).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if deg >= 360.0 {
        0.0
    } else {
        deg
    }
}

/// Smallest angle between two headings, in `[0, 180]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Writes the `id,lat,lon` nodes file.
pub fn write_nodes<W: Write>(mut w: W, net: &RoadNetwork) -> std::io::Result<()> {
    writeln!(w, "id,lat,lon")?;
    for n in net.nodes() {
        writeln!(w, "{},{},{}", n.id, n.lat, n.lon)?;
    }
    Ok(())
}

/// Writes the `id,source,target` edges file with external node ids.
pub fn write_edges<W: Write>(mut w: W, net: &RoadNetwork) -> std::io::Result<()> {
    writeln!(w, "id,source,target")?;
    for e in net.edges() {
        writeln!(w, "{},{},{}", e.id, net.node(e.source).id, net.node(e.target).id)?;
    }
    Ok(())
}
