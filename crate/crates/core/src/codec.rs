//! Direction-based trajectory representation.
//!
//! Each edge heading is binned into one of `K` equal intervals. Within a
//! source node, colliding intervals are resolved so that `(source,
//! direction)` identifies exactly one outgoing edge, which lets an edge
//! sequence be replaced by a start node plus a sequence of direction labels.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::network::{circular_distance, EdgeId, NodeIdx, RoadNetwork};

pub const TIME_SLOTS: usize = 168;
pub const WEATHER_KINDS: usize = 5;
pub const DEFAULT_K: usize = 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("number of direction intervals must be at least 2, got {0}")]
    TooFewIntervals(usize),
    #[error("edge {0} has no heading; compute headings first")]
    MissingHeading(EdgeId),
    #[error("network has no direction labels; assign intervals and resolve conflicts first")]
    Unlabeled,
    #[error("node {node} has out-degree {degree} which exceeds K = {k}")]
    OutDegreeExceedsK { node: u64, degree: usize, k: usize },
    #[error("edges {prev} and {next} at positions {position}/{} are not connected", position + 1)]
    Disconnected { position: usize, prev: EdgeId, next: EdgeId },
    #[error("unknown edge id {0}")]
    UnknownEdge(EdgeId),
    #[error("unknown node index {0}")]
    UnknownNode(NodeIdx),
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decoding stopped because no edge leaves the current node with the
/// requested label. `partial` holds the edges decoded before `step`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid direction {direction} at step {step} (node {node})")]
pub struct InvalidDirection {
    pub step: usize,
    pub node: NodeIdx,
    pub direction: usize,
    pub partial: Vec<EdgeId>,
}

/// Categorical context attached to a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContextFeatures {
    /// Hour of week, `0..168`.
    pub time_slot: usize,
    /// `0..5`: sunny, cloudy, light rain, rain, heavy rain.
    pub weather: usize,
    pub driver_id: usize,
}

impl ContextFeatures {
    pub fn new(time_slot: usize, weather: usize, driver_id: usize) -> Option<Self> {
        (time_slot < TIME_SLOTS && weather < WEATHER_KINDS).then_some(Self { time_slot, weather, driver_id })
    }
}

/// `nodes = [n_0, ..., n_L]`, `directions = [r_1, ..., r_L]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTrajectory {
    pub nodes: Vec<NodeIdx>,
    pub directions: Vec<usize>,
    pub context: ContextFeatures,
}

impl EncodedTrajectory {
    /// Number of edges.
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Token `i` pairs the node reached by edge `i` with that edge's label.
    pub fn token(&self, i: usize) -> (NodeIdx, usize) {
        (self.nodes[i + 1], self.directions[i])
    }
}

/// One revised edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Revision {
    pub edge: EdgeId,
    pub source: NodeIdx,
    pub heading: f64,
    pub interval: usize,
    pub direction: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RevisionReport {
    pub revisions: Vec<Revision>,
    pub total_edges: usize,
}

impl RevisionReport {
    /// Fraction of edges whose label differs from their raw interval.
    pub fn rate(&self) -> f64 {
        if self.total_edges == 0 {
            0.0
        } else {
            self.revisions.len() as f64 / self.total_edges as f64
        }
    }
}

pub fn interval_width(k: usize) -> f64 {
    360.0 / k as f64
}

pub fn interval_center(interval: usize, k: usize) -> f64 {
    (interval as f64 + 0.5) * interval_width(k)
}

/// `floor(heading / (360 / K))`, clamped into range against rounding.
pub fn interval_of(heading: f64, k: usize) -> usize {
    ((heading / interval_width(k)).floor() as usize).min(k - 1)
}

/// `true` when `to` lies clockwise of `from` within a half turn.
fn is_clockwise(from: f64, to: f64) -> bool {
    let off = (to - from).rem_euclid(360.0);
    off > 0.0 && off <= 180.0
}

/// Orders candidates by circular distance, then prefers the clockwise side.
fn closeness(dist_a: f64, cw_a: bool, dist_b: f64, cw_b: bool) -> Ordering {
    dist_a.total_cmp(&dist_b).then(cw_b.cmp(&cw_a))
}

/// Sets `interval` and an initial `direction = interval` on every edge.
pub fn assign_intervals(mut net: RoadNetwork, k: usize) -> Result<RoadNetwork, CodecError> {
    if k < 2 {
        return Err(CodecError::TooFewIntervals(k));
    }
    for e in net.edges_mut() {
        let heading = e.heading.ok_or(CodecError::MissingHeading(e.id))?;
        let interval = interval_of(heading, k);
        e.interval = Some(interval);
        e.direction = Some(interval);
    }
    net.k = Some(k);
    Ok(net)
}

/// Makes direction labels unique per source node.
///
/// Within a group of edges sharing an interval, the edge closest to the
/// interval center keeps it. The others, nearest-to-center first, each take
/// the free interval whose center is closest to their heading. Groups are
/// processed in ascending interval order; every tie prefers the clockwise
/// side, then the lower id.
pub fn resolve_conflicts(mut net: RoadNetwork) -> Result<(RoadNetwork, RevisionReport), CodecError> {
    let k = net.k().ok_or(CodecError::Unlabeled)?;
    let mut revisions = Vec::new();
    for n in 0..net.node_count() {
        let node = NodeIdx(n);
        let out: Vec<EdgeId> = net.out_edge_ids(node).to_vec();
        if out.len() > k {
            return Err(CodecError::OutDegreeExceedsK { node: net.node(node).id, degree: out.len(), k });
        }
        let mut groups: Vec<Vec<(EdgeId, f64)>> = vec![Vec::new(); k];
        for &e in &out {
            let rec = net.edge(e);
            let interval = rec.interval.ok_or(CodecError::Unlabeled)?;
            let heading = rec.heading.ok_or(CodecError::MissingHeading(e))?;
            groups[interval].push((e, heading));
        }
        let mut taken: Vec<bool> = groups.iter().map(|g| !g.is_empty()).collect();
        for (interval, group) in groups.iter_mut().enumerate() {
            if group.len() < 2 {
                continue;
            }
            let center = interval_center(interval, k);
            group.sort_by(|a, b| {
                closeness(
                    circular_distance(a.1, center),
                    is_clockwise(center, a.1),
                    circular_distance(b.1, center),
                    is_clockwise(center, b.1),
                )
                .then(a.0.cmp(&b.0))
            });
            for &(edge, heading) in &group[1..] {
                let new = (0..k)
                    .filter(|&c| !taken[c])
                    .min_by(|&a, &b| {
                        let (ca, cb) = (interval_center(a, k), interval_center(b, k));
                        closeness(
                            circular_distance(heading, ca),
                            is_clockwise(heading, ca),
                            circular_distance(heading, cb),
                            is_clockwise(heading, cb),
                        )
                        .then(a.cmp(&b))
                    })
                    .expect("out-degree <= K leaves a free interval");
                taken[new] = true;
                net.edges_mut()[edge.0].direction = Some(new);
                revisions.push(Revision { edge, source: node, heading, interval, direction: new });
            }
        }
    }
    revisions.sort_by_key(|r| r.edge);
    let total_edges = net.edge_count();
    Ok((net, RevisionReport { revisions, total_edges }))
}

/// Headings, intervals and conflict resolution in one pass.
pub fn label_network(net: RoadNetwork, k: usize) -> Result<(RoadNetwork, RevisionReport), crate::Error> {
    let net = net.compute_headings()?;
    let net = assign_intervals(net, k)?;
    Ok(resolve_conflicts(net)?)
}

impl RoadNetwork {
    /// The unique edge leaving `node` with label `direction`.
    pub fn edge_for(&self, node: NodeIdx, direction: usize) -> Option<EdgeId> {
        self.out_edge_ids(node).iter().copied().find(|&e| self.edge(e).direction == Some(direction))
    }

    /// Labels of the edges leaving `node`, in edge-id order.
    pub fn directions_at(&self, node: NodeIdx) -> impl Iterator<Item = usize> + '_ {
        self.out_edge_ids(node).iter().filter_map(|&e| self.edge(e).direction)
    }

    pub fn is_labeled(&self) -> bool {
        self.k().is_some() && self.edges().iter().all(|e| e.direction.is_some())
    }
}

/// Replaces a connected edge sequence by its node and direction sequences.
pub fn encode(net: &RoadNetwork, edges: &[EdgeId], context: ContextFeatures) -> Result<EncodedTrajectory, CodecError> {
    if !net.is_labeled() {
        return Err(CodecError::Unlabeled);
    }
    let mut nodes = Vec::with_capacity(edges.len() + 1);
    let mut directions = Vec::with_capacity(edges.len());
    for (i, &e) in edges.iter().enumerate() {
        let rec = net.try_edge(e).map_err(|_| CodecError::UnknownEdge(e))?;
        if i == 0 {
            nodes.push(rec.source);
        } else if nodes[i] != rec.source {
            return Err(CodecError::Disconnected { position: i - 1, prev: edges[i - 1], next: e });
        }
        nodes.push(rec.target);
        directions.push(rec.direction.ok_or(CodecError::Unlabeled)?);
    }
    Ok(EncodedTrajectory { nodes, directions, context })
}

/// Walks `directions` from `start`, resolving each `(node, label)` pair to
/// its unique edge.
pub fn decode(net: &RoadNetwork, start: NodeIdx, directions: &[usize]) -> Result<Vec<EdgeId>, InvalidDirection> {
    let mut node = start;
    let mut out = Vec::with_capacity(directions.len());
    for (step, &direction) in directions.iter().enumerate() {
        let found = (node.0 < net.node_count()).then(|| net.edge_for(node, direction)).flatten();
        match found {
            Some(e) => {
                node = net.edge(e).target;
                out.push(e);
            }
            None => return Err(InvalidDirection { step, node, direction, partial: out }),
        }
    }
    Ok(out)
}

/// A map-matched trajectory as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryRecord {
    pub id: String,
    pub context: ContextFeatures,
    pub edges: Vec<EdgeId>,
}

const TRAJ_HEADER: &str = "traj_id,time_slot,weather,driver_id,edges";

fn join_ids<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, it) in items.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{it}");
    }
    s
}

/// Reads `traj_id,time_slot,weather,driver_id,edge edge ...` lines. A
/// leading header line is skipped when present.
pub fn read_trajectories<R: Read>(rdr: R, file: &str) -> Result<Vec<TrajectoryRecord>, CodecError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(rdr).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CodecError::Io { path: file.to_string(), source })?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("traj_id")) {
            continue;
        }
        let bad = |msg: String| CodecError::Malformed { file: file.to_string(), line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("invalid {what} {s:?}")));
        let time_slot = num(fields[1], "time_slot")?;
        let weather = num(fields[2], "weather")?;
        let driver_id = num(fields[3], "driver_id")?;
        let context = ContextFeatures::new(time_slot, weather, driver_id)
            .ok_or_else(|| bad(format!("context out of range ({time_slot}, {weather})")))?;
        let edges = fields[4]
            .split_whitespace()
            .map(|s| num(s, "edge id").map(EdgeId))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TrajectoryRecord { id: fields[0].trim().to_string(), context, edges });
    }
    Ok(out)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, CodecError> {
    let p = path.as_ref();
    let f = std::fs::File::open(p).map_err(|source| CodecError::Io { path: p.display().to_string(), source })?;
    read_trajectories(f, &p.display().to_string())
}

pub fn write_trajectories<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    writeln!(w, "{TRAJ_HEADER}")?;
    for r in records {
        let c = r.context;
        writeln!(w, "{},{},{},{},{}", r.id, c.time_slot, c.weather, c.driver_id, join_ids(r.edges.iter()))?;
    }
    Ok(())
}

/// Writes encoded trajectories as `traj_id,time_slot,weather,driver_id,nodes,directions`,
/// with nodes given by their external ids.
pub fn write_encoded<W: Write>(
    mut w: W,
    net: &RoadNetwork,
    items: &[(String, EncodedTrajectory)],
) -> std::io::Result<()> {
    writeln!(w, "traj_id,time_slot,weather,driver_id,nodes,directions")?;
    for (id, t) in items {
        let c = t.context;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            id,
            c.time_slot,
            c.weather,
            c.driver_id,
            join_ids(t.nodes.iter().map(|&n| net.node(n).id)),
            join_ids(t.directions.iter())
        )?;
    }
    Ok(())
}

/// Writes a labeled network as `id,source,target,heading,interval,direction`.
pub fn write_labeled_edges<W: Write>(mut w: W, net: &RoadNetwork) -> std::io::Result<()> {
    writeln!(w, "id,source,target,heading,interval,direction")?;
    for e in net.edges() {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.id,
            net.node(e.source).id,
            net.node(e.target).id,
            e.heading.map(|h| format!("{h:.6}")).unwrap_or_default(),
            opt(e.interval),
            opt(e.direction)
        )?;
    }
    Ok(())
}

/// Space-separated edge ids, the last field of a trajectory row.
pub fn format_edges(edges: &[EdgeId]) -> String {
    join_ids(edges.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{EdgeRecord, NodeRecord};

    /// A star: node 0 at the origin, one spoke per heading, each spoke's
    /// target placed along that heading at the equator.
    fn star(headings: &[f64]) -> RoadNetwork {
        let mut nodes = vec![NodeRecord { id: 0, lat: 0.0, lon: 0.0 }];
        let mut edges = Vec::new();
        for (i, h) in headings.iter().enumerate() {
            let r = h.to_radians();
            nodes.push(NodeRecord { id: i as u64 + 1, lat: 0.01 * r.cos(), lon: 0.01 * r.sin() });
            edges.push(EdgeRecord::new(EdgeId(i), NodeIdx(0), NodeIdx(i + 1)));
        }
        RoadNetwork::from_records(nodes, edges).unwrap()
    }

    fn with_headings(net: RoadNetwork, headings: &[f64]) -> RoadNetwork {
        let mut net = net;
        for (e, h) in net.edges_mut().iter_mut().zip(headings) {
            e.heading = Some(*h);
        }
        net
    }

    #[test]
    fn interval_examples() {
        assert_eq!(interval_of(50.0, 8), 1);
        assert_eq!(interval_of(0.0, 8), 0);
        assert_eq!(interval_of(359.9, 8), 7);
        assert_eq!(interval_of(45.0, 8), 1);
        assert!(matches!(assign_intervals(star(&[10.0]), 1), Err(CodecError::TooFewIntervals(1))));
    }

    #[test]
    fn assign_requires_headings() {
        assert!(matches!(assign_intervals(star(&[10.0]), 8), Err(CodecError::MissingHeading(_))));
    }

    #[test]
    fn close_pair_is_split() {
        let net = with_headings(star(&[40.0, 44.0]), &[40.0, 44.0]);
        let (net, report) = resolve_conflicts(assign_intervals(net, 8).unwrap()).unwrap();
        assert_eq!(net.edge(EdgeId(0)).direction, Some(0));
        assert_eq!(net.edge(EdgeId(1)).direction, Some(1));
        assert_eq!(report.revisions.len(), 1);
        assert_eq!(report.revisions[0].edge, EdgeId(1));
        assert_eq!((report.revisions[0].interval, report.revisions[0].direction), (0, 1));
        assert!((report.rate() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distinct_intervals_untouched() {
        let h = [10.0, 100.0, 190.0, 280.0];
        let (net, report) = resolve_conflicts(assign_intervals(with_headings(star(&h), &h), 8).unwrap()).unwrap();
        assert!(report.revisions.is_empty());
        let dirs: Vec<_> = net.edges().iter().map(|e| e.direction.unwrap()).collect();
        assert_eq!(dirs, vec![0, 2, 4, 6]);
    }

    #[test]
    fn too_many_out_edges() {
        let h: Vec<f64> = (0..9).map(|i| i as f64 * 40.0).collect();
        let net = assign_intervals(with_headings(star(&h), &h), 8).unwrap();
        assert!(matches!(resolve_conflicts(net), Err(CodecError::OutDegreeExceedsK { node: 0, degree: 9, k: 8 })));
    }

    #[test]
    fn equidistant_tie_goes_clockwise() {
        // 10 and 35 are both 12.5 from the center of interval 0 (22.5): the
        // clockwise one (35) keeps it, and 10 goes to the nearest free center.
        let h = [10.0, 35.0];
        let (net, _) = resolve_conflicts(assign_intervals(with_headings(star(&h), &h), 8).unwrap()).unwrap();
        assert_eq!(net.edge(EdgeId(1)).direction, Some(0));
        assert_eq!(net.edge(EdgeId(0)).direction, Some(7));

        // Two edges on the center of interval 0: the lower id keeps it, and
        // the other is 45 degrees from both free neighbours 7 and 1, so the
        // clockwise one (1) wins.
        let h = [22.5, 22.5];
        let (net, _) = resolve_conflicts(assign_intervals(with_headings(star(&h), &h), 8).unwrap()).unwrap();
        assert_eq!(net.edge(EdgeId(0)).direction, Some(0));
        assert_eq!(net.edge(EdgeId(1)).direction, Some(1));
    }

    #[test]
    fn wraparound_uses_circular_distance() {
        // 2 and 8 share interval 0; 8 is closer to 22.5 and keeps it, 2 moves
        // to interval 7 (center 337.5 is 24.5 away) instead of interval 1.
        let h = [2.0, 8.0];
        let (net, _) = resolve_conflicts(assign_intervals(with_headings(star(&h), &h), 8).unwrap()).unwrap();
        assert_eq!(net.edge(EdgeId(1)).direction, Some(0));
        assert_eq!(net.edge(EdgeId(0)).direction, Some(7));
    }

    fn labeled_line() -> RoadNetwork {
        // 0 -> 1 -> 2 -> 3 -> 4 heading north, plus 1 -> 5 heading east.
        let mut nodes: Vec<NodeRecord> =
            (0..5).map(|i| NodeRecord { id: i, lat: 0.01 * i as f64, lon: 0.0 }).collect();
        nodes.push(NodeRecord { id: 5, lat: 0.01, lon: 0.01 });
        let edges = vec![
            EdgeRecord::new(EdgeId(0), NodeIdx(0), NodeIdx(1)),
            EdgeRecord::new(EdgeId(1), NodeIdx(1), NodeIdx(2)),
            EdgeRecord::new(EdgeId(2), NodeIdx(2), NodeIdx(3)),
            EdgeRecord::new(EdgeId(3), NodeIdx(3), NodeIdx(4)),
            EdgeRecord::new(EdgeId(4), NodeIdx(1), NodeIdx(5)),
        ];
        label_network(RoadNetwork::from_records(nodes, edges).unwrap(), 8).unwrap().0
    }

    #[test]
    fn encode_single_and_path() {
        let net = labeled_line();
        let one = encode(&net, &[EdgeId(4)], ContextFeatures::default()).unwrap();
        assert_eq!(one.nodes, vec![NodeIdx(1), NodeIdx(5)]);
        assert_eq!(one.directions, vec![net.edge(EdgeId(4)).direction.unwrap()]);
        let path = [EdgeId(0), EdgeId(1), EdgeId(2), EdgeId(3)];
        let t = encode(&net, &path, ContextFeatures::default()).unwrap();
        assert_eq!(t.nodes.len(), 5);
        assert_eq!(t.directions, vec![0; 4]);
        assert_eq!(decode(&net, t.nodes[0], &t.directions).unwrap(), path);
    }

    #[test]
    fn encode_rejects_breaks() {
        let net = labeled_line();
        let err = encode(&net, &[EdgeId(0), EdgeId(2)], ContextFeatures::default()).unwrap_err();
        assert!(matches!(err, CodecError::Disconnected { position: 0, .. }));
    }

    #[test]
    fn decode_edge_cases() {
        let net = labeled_line();
        assert_eq!(decode(&net, NodeIdx(0), &[]).unwrap(), vec![]);
        let err = decode(&net, NodeIdx(4), &[0]).unwrap_err();
        assert_eq!(err.step, 0);
        assert!(err.partial.is_empty());
        let err = decode(&net, NodeIdx(0), &[0, 0, 3]).unwrap_err();
        assert_eq!((err.step, err.partial.clone()), (2, vec![EdgeId(0), EdgeId(1)]));
    }

    #[test]
    fn trajectory_file_roundtrip_and_errors() {
        let recs = vec![TrajectoryRecord {
            id: "a".into(),
            context: ContextFeatures::new(3, 1, 7).unwrap(),
            edges: vec![EdgeId(0), EdgeId(1)],
        }];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "traj_id,time_slot,weather,driver_id,edges\na,3,1,7,0 1\n");
        assert_eq!(read_trajectories(buf.as_slice(), "t").unwrap(), recs);
        let err = read_trajectories("x,200,0,0,1 2\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CodecError::Malformed { line: 1, .. }));
        let err = read_trajectories("h\nx,1,0,0,1 q\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CodecError::Malformed { line: 1, .. }), "{err}");
    }
}
