//! Synthetic road networks and trajectory corpora with known routing
//! rules.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{ContextFeatures, TrajectoryRecord, TIME_SLOTS};
use crate::network::{circular_distance, EdgeId, EdgeRecord, NetworkError, NodeIdx, NodeRecord, RoadNetwork};

/// Latitude/longitude of node 0.
pub const ORIGIN: (f64, f64) = (31.2, 121.4);
/// Lattice step in degrees, roughly 500 m.
pub const SPACING: f64 = 0.005;
const MAX_NETWORK_ATTEMPTS: usize = 20;
const MAX_WALK_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("could not generate a connected network in {0} attempts")]
    Disconnected(usize),
    #[error("trajectory {0}: every walk hit a dead end")]
    Trapped(usize),
    #[error("network must be direction-labeled before generating a corpus")]
    Unlabeled,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthTopology {
    Grid { width: usize, height: usize },
    /// Jittered lattice; `heading_jitter` is the typical heading
    /// perturbation in degrees.
    Irregular { nodes: usize, avg_degree: f64, heading_jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoutingRule {
    Uniform,
    /// With probability `p`, continue with the smallest heading change.
    StraightBiased(f64),
    /// The next direction is a fixed function of the previous two.
    SecondOrder { rule_seed: u64 },
}

impl fmt::Display for RoutingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingRule::Uniform => f.write_str("uniform"),
            RoutingRule::StraightBiased(p) => write!(f, "straight:{p}"),
            RoutingRule::SecondOrder { rule_seed } => write!(f, "second-order:{rule_seed}"),
        }
    }
}

impl FromStr for RoutingRule {
    type Err = SynthError;

    /// `uniform`, `straight:P` or `second-order:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SynthError::Spec(format!("unknown routing rule `{s}`"));
        let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        match (name, arg) {
            ("uniform", None) => Ok(RoutingRule::Uniform),
            ("straight", Some(p)) => Ok(RoutingRule::StraightBiased(p.parse().map_err(|_| bad())?)),
            ("second-order", Some(seed)) => {
                Ok(RoutingRule::SecondOrder { rule_seed: seed.parse().map_err(|_| bad())? })
            }
            _ => Err(bad()),
        }
    }
}

impl FromStr for SynthTopology {
    type Err = SynthError;

    /// `grid:W,H` or `irregular:N,DEGREE,JITTER`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SynthError::Spec(format!("unknown topology `{s}`"));
        let (name, args) = s.split_once(':').ok_or_else(bad)?;
        let args: Vec<&str> = args.split(',').map(str::trim).collect();
        match (name, args.as_slice()) {
            ("grid", [w, h]) => Ok(SynthTopology::Grid {
                width: w.parse().map_err(|_| bad())?,
                height: h.parse().map_err(|_| bad())?,
            }),
            ("irregular", [n, d, j]) => Ok(SynthTopology::Irregular {
                nodes: n.parse().map_err(|_| bad())?,
                avg_degree: d.parse().map_err(|_| bad())?,
                heading_jitter: j.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub topology: SynthTopology,
    pub rule: RoutingRule,
    pub n_trajectories: usize,
    /// Edges per trajectory.
    pub traj_length: usize,
    pub drivers: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let spec = |m: &str| Err(SynthError::Spec(m.into()));
        match self.topology {
            SynthTopology::Grid { width, height } if width == 0 || height == 0 || width * height < 2 => {
                return spec("grid needs at least two nodes")
            }
            SynthTopology::Irregular { nodes, avg_degree, heading_jitter } => {
                if nodes < 2 {
                    return spec("irregular network needs at least two nodes");
                }
                if !(avg_degree > 0.0 && avg_degree <= 8.0) {
                    return spec("average degree must be in (0, 8]");
                }
                if !(0.0..45.0).contains(&heading_jitter) {
                    return spec("heading jitter must be in [0, 45)");
                }
            }
            _ => {}
        }
        if let RoutingRule::StraightBiased(p) = self.rule {
            if !(0.0..=1.0).contains(&p) {
                return spec("straight bias must be in [0, 1]");
            }
        }
        if self.traj_length == 0 || self.drivers == 0 {
            return spec("trajectory length and driver count must be positive");
        }
        Ok(())
    }
}

/// Unlabeled network for the spec's topology. Every road is emitted in
/// both directions.
pub fn gen_network(spec: &SynthSpec) -> Result<RoadNetwork> {
    spec.validate()?;
    match spec.topology {
        SynthTopology::Grid { width, height } => grid(width, height),
        SynthTopology::Irregular { nodes, avg_degree, heading_jitter } => {
            for attempt in 0..MAX_NETWORK_ATTEMPTS {
                let net = irregular(nodes, avg_degree, heading_jitter, spec.seed.wrapping_add(attempt as u64))?;
                if strongly_connected(&net) {
                    return Ok(net);
                }
            }
            Err(SynthError::Disconnected(MAX_NETWORK_ATTEMPTS))
        }
    }
}

fn lattice_node(i: usize, row: usize, col: usize) -> NodeRecord {
    NodeRecord { id: i as u64, lat: ORIGIN.0 + row as f64 * SPACING, lon: ORIGIN.1 + col as f64 * SPACING }
}

fn from_links(nodes: Vec<NodeRecord>, links: &[(usize, usize)]) -> Result<RoadNetwork> {
    let edges = links
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .enumerate()
        .map(|(i, (s, t))| EdgeRecord::new(EdgeId(i), NodeIdx(s), NodeIdx(t)))
        .collect();
    Ok(RoadNetwork::from_records(nodes, edges)?.compute_headings()?)
}

/// `width x height` lattice, node `y * width + x`, rows going north.
pub fn grid(width: usize, height: usize) -> Result<RoadNetwork> {
    let nodes = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).enumerate();
    let nodes = nodes.map(|(i, (y, x))| lattice_node(i, y, x)).collect();
    let mut links = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let n = y * width + x;
            if x + 1 < width {
                links.push((n, n + 1));
            }
            if y + 1 < height {
                links.push((n, n + width));
            }
        }
    }
    from_links(nodes, &links)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn irregular(n: usize, avg_degree: f64, jitter: f64, seed: u64) -> Result<RoadNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    // A lateral offset of s * tan(j) turns a lattice step by about j degrees.
    let amp = SPACING * jitter.to_radians().tan() / 2.0;
    let nodes: Vec<NodeRecord> = (0..n)
        .map(|i| {
            let mut node = lattice_node(i, i / side, i % side);
            if amp > 0.0 {
                node.lat += rng.gen_range(-amp..=amp);
                node.lon += rng.gen_range(-amp..=amp);
            }
            node
        })
        .collect();

    let mut candidates = Vec::new();
    for i in 0..n {
        let (r, c) = (i / side, i % side);
        let right = (c + 1 < side).then_some(i + 1);
        let up = Some(i + side);
        let up_right = (c + 1 < side).then_some(i + side + 1);
        let up_left = (c > 0).then(|| i + side - 1);
        for j in [right, up, up_right, up_left].into_iter().flatten() {
            if j < n && (j / side == r || j / side == r + 1) {
                candidates.push((i, j));
            }
        }
    }
    candidates.shuffle(&mut rng);

    let target = ((n as f64 * avg_degree / 2.0).round() as usize).max(n - 1);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut chosen = vec![false; candidates.len()];
    let mut links = Vec::new();
    for (k, &(a, b)) in candidates.iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            chosen[k] = true;
            links.push((a, b));
        }
    }
    for (k, &link) in candidates.iter().enumerate() {
        if links.len() >= target {
            break;
        }
        if !chosen[k] {
            links.push(link);
        }
    }
    links.sort_unstable();
    from_links(nodes, &links)
}

/// Every node reaches every other along directed edges.
pub fn strongly_connected(net: &RoadNetwork) -> bool {
    let n = net.node_count();
    if n == 0 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            let ids = if forward { net.out_edge_ids(NodeIdx(u)) } else { net.in_edge_ids(NodeIdx(u)) };
            for &e in ids {
                let rec = net.edge(e);
                let v = if forward { rec.target.0 } else { rec.source.0 };
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Ranked direction preferences for every pair of previous labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderRule {
    k: usize,
    rankings: Vec<Vec<usize>>,
}

impl SecondOrderRule {
    pub fn new(k: usize, rule_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rule_seed);
        let rankings = (0..k * k)
            .map(|_| {
                let mut p: Vec<usize> = (0..k).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Self { k, rankings }
    }

    pub fn ranking(&self, before: usize, last: usize) -> &[usize] {
        &self.rankings[before * self.k + last]
    }

    /// The edge chosen at `node` after moves labeled `before`, `last`.
    pub fn next(&self, net: &RoadNetwork, node: NodeIdx, before: usize, last: usize) -> Option<EdgeId> {
        self.ranking(before, last).iter().find_map(|&d| net.edge_for(node, d))
    }
}

enum Walker {
    Uniform,
    Straight(f64),
    Second(SecondOrderRule),
}

impl Walker {
    fn step(&self, net: &RoadNetwork, path: &[EdgeId], rng: &mut ChaCha8Rng) -> Option<EdgeId> {
        let node = net.edge(*path.last()?).target;
        let out = net.out_edge_ids(node);
        if out.is_empty() {
            return None;
        }
        let random = |rng: &mut ChaCha8Rng| out[rng.gen_range(0..out.len())];
        match self {
            Walker::Uniform => Some(random(rng)),
            Walker::Straight(p) => {
                if rng.gen::<f64>() < *p {
                    crate::metrics::straight_ahead(net, *path.last()?)
                } else {
                    Some(random(rng))
                }
            }
            Walker::Second(rule) if path.len() >= 2 => {
                let dir = |e: EdgeId| net.edge(e).direction.unwrap_or(0);
                rule.next(net, node, dir(path[path.len() - 2]), dir(path[path.len() - 1]))
            }
            Walker::Second(_) => Some(random(rng)),
        }
    }
}

/// Random walks of `traj_length` edges following the routing rule. The
/// network must be labeled. Trajectory `i` uses its own random stream, so
/// each one is reproducible on its own.
pub fn gen_corpus(net: &RoadNetwork, spec: &SynthSpec) -> Result<Vec<TrajectoryRecord>> {
    spec.validate()?;
    if !net.is_labeled() {
        return Err(SynthError::Unlabeled);
    }
    let k = net.k().ok_or(SynthError::Unlabeled)?;
    let walker = match spec.rule {
        RoutingRule::Uniform => Walker::Uniform,
        RoutingRule::StraightBiased(p) => Walker::Straight(p),
        RoutingRule::SecondOrder { rule_seed } => Walker::Second(SecondOrderRule::new(k, rule_seed)),
    };
    let starts: Vec<usize> = (0..net.node_count()).filter(|&n| net.out_degree(NodeIdx(n)) > 0).collect();
    if starts.is_empty() {
        return Err(SynthError::Trapped(0));
    }
    let n = spec.n_trajectories;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let context = ContextFeatures {
                time_slot: rng.gen_range(0..TIME_SLOTS),
                weather: 0,
                driver_id: i * spec.drivers / n.max(1),
            };
            for _ in 0..MAX_WALK_ATTEMPTS {
                let start = NodeIdx(starts[rng.gen_range(0..starts.len())]);
                let out = net.out_edge_ids(start);
                let mut path = vec![out[rng.gen_range(0..out.len())]];
                while path.len() < spec.traj_length {
                    match walker.step(net, &path, &mut rng) {
                        Some(e) => path.push(e),
                        None => break,
                    }
                }
                if path.len() == spec.traj_length {
                    return Ok(TrajectoryRecord { id: i.to_string(), context, edges: path });
                }
            }
            Err(SynthError::Trapped(i))
        })
        .collect()
}

/// Smallest heading change between consecutive edges of a path, in degrees.
pub fn turn_angles(net: &RoadNetwork, path: &[EdgeId]) -> Vec<f64> {
    path.windows(2)
        .map(|p| circular_distance(net.edge(p[0]).heading.unwrap_or(0.0), net.edge(p[1]).heading.unwrap_or(0.0)))
        .collect()
}
