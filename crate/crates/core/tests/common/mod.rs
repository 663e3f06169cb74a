//! Test-only helpers shared by the integration targets: an f64
//! re-implementation of the model forward pass written from the model
//! description (not from the tape code), plus random-walk utilities.

#![allow(dead_code)]

use std::collections::HashMap;

use nettraj::codec::encode;
use nettraj::model::{ModelConfig, NetTraj, TrainSample, Variant};
use nettraj::trainer::tail_sample;
use nettraj::{ContextFeatures, EdgeId, NodeIdx, RoadNetwork};
use nettraj::model::Topology;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `x · W` for a row vector `x`.
fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.rows, "vecmat shape");
    let mut out = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn weighted_sum(weights: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Forward pass in f64 with parameters copied out of a [`NetTraj`].
pub struct RefModel {
    pub cfg: ModelConfig,
    pub params: HashMap<String, Mat>,
    /// Parameter names in store order.
    pub names: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    /// `(node, direction) -> target` for the labeled network.
    steps: HashMap<(usize, usize), usize>,
}

struct State {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl RefModel {
    pub fn new(model: &NetTraj, net: &RoadNetwork) -> Self {
        let mut params = HashMap::new();
        let mut names = Vec::new();
        for (_, name, t) in model.params().iter() {
            params.insert(
                name.to_string(),
                Mat { rows: t.rows(), cols: t.cols(), data: t.data().iter().map(|&v| f64::from(v)).collect() },
            );
            names.push(name.to_string());
        }
        let mut neighbors = vec![Vec::new(); net.node_count()];
        let mut steps = HashMap::new();
        let mut edges: Vec<_> = net.edges().iter().collect();
        edges.sort_by_key(|e| e.id);
        for e in edges {
            neighbors[e.source.0].push(e.target.0);
            steps.insert((e.source.0, e.direction.expect("labeled")), e.target.0);
        }
        Self { cfg: model.config().clone(), params, names, neighbors, steps }
    }

    fn p(&self, name: &str) -> &Mat {
        &self.params[name]
    }

    fn uses_dirs(&self) -> bool {
        self.cfg.variant != Variant::NoDtr
    }

    fn token(&self, node: usize, dir: usize) -> Vec<f64> {
        let v_n = self.p("node_embedding").row(node).to_vec();
        let v_r = self.uses_dirs().then(|| self.p("direction_embedding").row(dir).to_vec());
        let mut ctx = vec![0.0; self.cfg.node_dim];
        let nbrs = &self.neighbors[node];
        if self.cfg.variant != Variant::NoSa && !nbrs.is_empty() {
            let with_dir = matches!(self.cfg.variant, Variant::Full | Variant::Fta | Variant::NoTa);
            let values: Vec<Vec<f64>> = nbrs.iter().map(|&t| self.p("node_embedding").row(t).to_vec()).collect();
            let scores: Vec<f64> = values
                .iter()
                .map(|v_t| {
                    let mut feats = v_n.clone();
                    feats.extend_from_slice(v_t);
                    if with_dir {
                        feats.extend_from_slice(v_r.as_ref().unwrap());
                    }
                    let s = vecmat(&feats, self.p("spatial_score"))[0];
                    if s >= 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
                .collect();
            ctx = weighted_sum(&softmax(&scores), &values);
        }
        let mut x = v_n;
        if let Some(v_r) = v_r {
            x.extend(v_r);
        }
        x.extend(ctx);
        x
    }

    fn lstm(&self, prefix: &str, x: Vec<f64>, s: &State) -> State {
        let hd = self.cfg.hidden;
        let mut input = x;
        let mut next = State { h: Vec::new(), c: Vec::new() };
        for l in 0..self.cfg.layers {
            let a = vecmat(&input, self.p(&format!("{prefix}.l{l}.w_ih")));
            let r = vecmat(&s.h[l], self.p(&format!("{prefix}.l{l}.w_hh")));
            let b = &self.p(&format!("{prefix}.l{l}.bias")).data;
            let g: Vec<f64> = (0..4 * hd).map(|j| a[j] + r[j] + b[j]).collect();
            let mut h = vec![0.0; hd];
            let mut c = vec![0.0; hd];
            for j in 0..hd {
                let i_gate = sigmoid(g[j]);
                let f_gate = sigmoid(g[hd + j]);
                let cand = g[2 * hd + j].tanh();
                let o_gate = sigmoid(g[3 * hd + j]);
                c[j] = f_gate * s.c[l][j] + i_gate * cand;
                h[j] = o_gate * c[j].tanh();
            }
            input = h.clone();
            next.h.push(h);
            next.c.push(c);
        }
        next
    }

    fn context(&self, c: ContextFeatures) -> Vec<f64> {
        let row = if c.driver_id < self.cfg.driver_vocab { c.driver_id + 1 } else { 0 };
        let mut q = self.p("ctx.time").row(c.time_slot).to_vec();
        q.extend_from_slice(self.p("ctx.weather").row(c.weather));
        q.extend_from_slice(self.p("ctx.driver").row(row));
        q
    }

    /// Teacher-forced class distributions for every decoder step.
    pub fn probs(&self, s: &TrainSample) -> Vec<Vec<f64>> {
        let (l_in, hd, layers) = (self.cfg.l_in, self.cfg.hidden, self.cfg.layers);
        let dir_at = |dirs: &[usize], t: usize| if self.uses_dirs() { dirs[t] } else { 0 };
        let mut state = State { h: vec![vec![0.0; hd]; layers], c: vec![vec![0.0; hd]; layers] };
        let mut enc = Vec::new();
        for t in 0..l_in {
            let x = self.token(s.input.nodes[t].0, dir_at(&s.input.directions, t));
            state = self.lstm("encoder", x, &state);
            enc.push(state.h[layers - 1].clone());
        }
        let q = self.context(s.input.context);
        let mut history = enc.clone();
        let mut prev = (s.input.nodes[l_in - 1].0, dir_at(&s.input.directions, l_in - 1));
        let mut out = Vec::new();
        for i in 0..self.cfg.l_out {
            let mut x = self.token(prev.0, prev.1);
            if self.cfg.variant != Variant::NoTa {
                let window = if self.cfg.variant == Variant::Fta { &enc[..] } else { &history[history.len() - l_in..] };
                let mut query: Vec<f64> = state.h.iter().chain(&state.c).flatten().copied().collect();
                let base = query.len();
                query.resize(base + hd, 0.0);
                let scores: Vec<f64> = window
                    .iter()
                    .map(|h_j| {
                        query[base..].copy_from_slice(h_j);
                        vecmat(&query, self.p("temporal_score"))[0]
                    })
                    .collect();
                x.extend(weighted_sum(&softmax(&scores), window));
            }
            state = self.lstm("decoder", x, &state);
            let mut head = state.h[layers - 1].clone();
            head.extend_from_slice(&q);
            out.push(softmax(&vecmat(&head, self.p("output.w"))));
            history.push(state.h[layers - 1].clone());
            prev = (s.target_nodes[i].0, dir_at(&s.target_directions, i));
        }
        out
    }

    fn class(&self, s: &TrainSample, i: usize) -> usize {
        if self.uses_dirs() {
            s.target_directions[i]
        } else {
            s.target_nodes[i].0
        }
    }

    /// Sum of per-step cross-entropies divided by the number of samples.
    pub fn loss(&self, samples: &[TrainSample]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|s| self.probs(s).iter().enumerate().map(|(i, p)| -p[self.class(s, i)].ln()).sum::<f64>())
            .sum();
        total / samples.len() as f64
    }

    /// Whether direction `d` leaves `node`.
    pub fn has_step(&self, node: usize, d: usize) -> bool {
        self.steps.contains_key(&(node, d))
    }
}

/// A uniformly random walk of `len` edges, or `None` when it hits a dead end.
pub fn random_walk<R: Rng>(net: &RoadNetwork, len: usize, rng: &mut R) -> Option<Vec<EdgeId>> {
    let mut node = NodeIdx(rng.gen_range(0..net.node_count()));
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let choices = net.out_edge_ids(node);
        if choices.is_empty() {
            return None;
        }
        let e = choices[rng.gen_range(0..choices.len())];
        out.push(e);
        node = net.edge(e).target;
    }
    Some(out)
}

pub fn random_context<R: Rng>(rng: &mut R, drivers: usize) -> ContextFeatures {
    ContextFeatures::new(rng.gen_range(0..168), rng.gen_range(0..5), rng.gen_range(0..drivers)).unwrap()
}

/// Random training samples built from walks of `l_in + l_out` edges.
pub fn random_samples<R: Rng>(
    net: &RoadNetwork,
    topo: &Topology,
    cfg: &ModelConfig,
    n: usize,
    drivers: usize,
    rng: &mut R,
) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let Some(walk) = random_walk(net, cfg.l_in + cfg.l_out, rng) else { continue };
        let enc = encode(net, &walk, random_context(rng, drivers)).unwrap();
        out.push(tail_sample(&enc, topo, cfg.l_in, cfg.l_out).unwrap().unwrap());
    }
    out
}
