//! The encoder-decoder over (node, direction) tokens.
//!
//! Every operation is batched: row `b` of each tensor belongs to sample `b`.

mod checkpoint;
mod topology;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::codec::{ContextFeatures, TIME_SLOTS, WEATHER_KINDS};
use crate::network::{EdgeId, NodeIdx};

pub use topology::Topology;

pub const INIT_BOUND: f32 = 0.1;
const SCORE_SLOPE: f32 = 0.2;
/// Rows per tape when predicting; results do not depend on it.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} index {index} out of range (limit {limit})")]
    Index { what: &'static str, index: usize, limit: usize },
    #[error("window length {got}, expected {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("temporal window holds {got} states, expected {expected}")]
    WindowUnderflow { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Spatial score ignores the incoming direction.
    Fsa,
    /// No spatial attention; the neighborhood context is zero.
    NoSa,
    /// Temporal attention over the encoder outputs only.
    Fta,
    /// No temporal attention.
    NoTa,
    /// Next-node classification instead of directions.
    NoDtr,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::Fsa, Variant::NoSa, Variant::Fta, Variant::NoTa, Variant::NoDtr];

    pub fn uses_directions(self) -> bool {
        self != Variant::NoDtr
    }

    fn has_spatial(self) -> bool {
        self != Variant::NoSa
    }

    fn direction_in_score(self) -> bool {
        matches!(self, Variant::Full | Variant::Fta | Variant::NoTa)
    }

    fn has_temporal(self) -> bool {
        self != Variant::NoTa
    }

    fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fsa => "fsa",
            Variant::NoSa => "no-sa",
            Variant::Fta => "fta",
            Variant::NoTa => "no-ta",
            Variant::NoDtr => "no-dtr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == lower)
            .ok_or_else(|| ModelError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub node_dim: usize,
    pub dir_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub weather_dim: usize,
    pub driver_dim: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub node_vocab: usize,
    pub driver_vocab: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size defaults for a network with `node_vocab` nodes.
    pub fn new(node_vocab: usize, driver_vocab: usize) -> Self {
        Self {
            k: crate::codec::DEFAULT_K,
            node_dim: 256,
            dir_dim: 256,
            hidden: 512,
            layers: 2,
            time_dim: 32,
            weather_dim: 32,
            driver_dim: 32,
            l_in: 10,
            l_out: 5,
            node_vocab,
            driver_vocab,
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("k", self.k),
            ("node_dim", self.node_dim),
            ("dir_dim", self.dir_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("time_dim", self.time_dim),
            ("weather_dim", self.weather_dim),
            ("driver_dim", self.driver_dim),
            ("l_in", self.l_in),
            ("l_out", self.l_out),
            ("node_vocab", self.node_vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(ModelError::Config("k must be at least 2".into()));
        }
        Ok(())
    }

    fn dir_width(&self) -> usize {
        if self.variant.uses_directions() {
            self.dir_dim
        } else {
            0
        }
    }

    /// `[v_n; v_r; w_n]`
    pub fn encoder_input_dim(&self) -> usize {
        2 * self.node_dim + self.dir_width()
    }

    /// `[v_n; v_r; w_n; u]`
    pub fn decoder_input_dim(&self) -> usize {
        self.encoder_input_dim() + if self.variant.has_temporal() { self.hidden } else { 0 }
    }

    pub fn head_input_dim(&self) -> usize {
        self.hidden + self.time_dim + self.weather_dim + self.driver_dim
    }

    pub fn output_dim(&self) -> usize {
        if self.variant.uses_directions() {
            self.k
        } else {
            self.node_vocab
        }
    }

    fn spatial_score_dim(&self) -> usize {
        2 * self.node_dim + if self.variant.direction_in_score() { self.dir_dim } else { 0 }
    }

    fn temporal_score_dim(&self) -> usize {
        (2 * self.layers + 1) * self.hidden
    }
}

/// The input half of a sample: `nodes[t]` is reached by a move with
/// label `directions[t]`. The last node is where prediction starts.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    pub nodes: Vec<NodeIdx>,
    pub directions: Vec<usize>,
    pub context: ContextFeatures,
}

impl InputWindow {
    pub fn last_node(&self) -> NodeIdx {
        *self.nodes.last().expect("non-empty window")
    }
}

/// An input window plus the `l_out` tokens that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: InputWindow,
    pub target_nodes: Vec<NodeIdx>,
    pub target_directions: Vec<usize>,
    pub target_edges: Vec<EdgeId>,
}

impl TrainSample {
    fn class(&self, variant: Variant, i: usize) -> usize {
        if variant.uses_directions() {
            self.target_directions[i]
        } else {
            self.target_nodes[i].0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttnOut {
    pub context: Vec<f32>,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f32>,
    /// No out-neighbors: the context is zero and `weights` is empty.
    pub isolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttnOut {
    pub context: Vec<f32>,
    pub weights: Vec<f32>,
}

/// Batched spatial attention on a tape.
#[derive(Debug, Clone)]
pub struct SpatialBatch {
    pub context: Var,
    /// `[batch, max_degree]`, absent when the variant has no spatial
    /// attention or the network has no edges.
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TemporalBatch {
    pub context: Var,
    /// `[batch, window]`
    pub weights: Var,
}

/// Per-layer hidden and cell states.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Top-layer hidden state per input position.
    pub outputs: Vec<Var>,
    pub state: LstmState,
}

#[derive(Debug, Clone)]
pub struct DecodeStep {
    /// `[batch, output_dim]`
    pub probs: Var,
    pub state: LstmState,
    pub temporal: Option<TemporalBatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRecord {
    pub sample: usize,
    pub phase: Phase,
    pub step: usize,
    pub node: NodeIdx,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionDump {
    pub spatial: Vec<SpatialRecord>,
    /// `temporal[sample][decoder step]` holds the window weights.
    pub temporal: Vec<Vec<Vec<f32>>>,
}

/// Greedy decoding result for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Argmax class per step (direction, or node index for no-DTR).
    pub classes: Vec<usize>,
    /// Decoded edges; shorter than `l_out` when decoding failed.
    pub edges: Vec<EdgeId>,
    /// First step whose class had no matching edge.
    pub invalid_at: Option<usize>,
}

/// Output of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// Mean over samples of the summed per-position cross-entropy.
    pub loss: Var,
    pub positions: usize,
    /// Decoder inputs taken from the model instead of the ground truth.
    pub sampled: usize,
    /// Positions whose unmasked argmax equals the target.
    pub correct: usize,
}

#[derive(Debug, Clone)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    node: ParamId,
    dir: Option<ParamId>,
    spatial: Option<ParamId>,
    encoder: Vec<LstmIds>,
    decoder: Vec<LstmIds>,
    temporal: Option<ParamId>,
    output: ParamId,
    time: ParamId,
    weather: ParamId,
    driver: ParamId,
}

/// Parameter names and shapes in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out = vec![("node_embedding".to_string(), cfg.node_vocab, cfg.node_dim)];
    if cfg.variant.uses_directions() {
        out.push(("direction_embedding".into(), cfg.k, cfg.dir_dim));
    }
    if cfg.variant.has_spatial() {
        out.push(("spatial_score".into(), cfg.spatial_score_dim(), 1));
    }
    let g = 4 * cfg.hidden;
    for (prefix, first) in [("encoder", cfg.encoder_input_dim()), ("decoder", cfg.decoder_input_dim())] {
        for l in 0..cfg.layers {
            let input = if l == 0 { first } else { cfg.hidden };
            out.push((format!("{prefix}.l{l}.w_ih"), input, g));
            out.push((format!("{prefix}.l{l}.w_hh"), cfg.hidden, g));
            out.push((format!("{prefix}.l{l}.bias"), 1, g));
        }
    }
    if cfg.variant.has_temporal() {
        out.push(("temporal_score".into(), cfg.temporal_score_dim(), 1));
    }
    out.push(("output.w".into(), cfg.head_input_dim(), cfg.output_dim()));
    out.push(("ctx.time".into(), TIME_SLOTS, cfg.time_dim));
    out.push(("ctx.weather".into(), WEATHER_KINDS, cfg.weather_dim));
    out.push(("ctx.driver".into(), cfg.driver_vocab + 1, cfg.driver_dim));
    out
}

#[derive(Debug, Clone)]
pub struct NetTraj {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

/// Dropout state for one forward pass; `rng == None` means evaluation.
struct Noise<'r> {
    rate: f32,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Noise<'_> {
    fn eval() -> Noise<'static> {
        Noise { rate: 0.0, rng: None }
    }
}

struct Recorder {
    spatial: Vec<SpatialRecord>,
    temporal: Vec<Vec<Vec<f32>>>,
    offset: usize,
}

impl NetTraj {
    /// A freshly initialized model, every parameter uniform in
    /// `[-INIT_BOUND, INIT_BOUND]`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, rows, cols) in layout(&config) {
            params.add(name, Tensor::uniform(rows, cols, INIT_BOUND, &mut rng))?;
        }
        Self::from_parts(config, params)
    }

    /// Wraps an existing store, checking every name and shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, rows, cols), (_, have, t)) in expected.iter().zip(params.iter()) {
            if name != have || t.shape() != [*rows, *cols] {
                return Err(ModelError::Config(format!(
                    "parameter {have} {:?} does not match {name} [{rows}, {cols}]",
                    t.shape()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let lstm = |prefix: &str| {
            (0..config.layers)
                .map(|l| LstmIds {
                    w_ih: id(&format!("{prefix}.l{l}.w_ih")),
                    w_hh: id(&format!("{prefix}.l{l}.w_hh")),
                    bias: id(&format!("{prefix}.l{l}.bias")),
                })
                .collect()
        };
        let ids = Ids {
            node: id("node_embedding"),
            dir: params.id("direction_embedding"),
            spatial: params.id("spatial_score"),
            encoder: lstm("encoder"),
            decoder: lstm("decoder"),
            temporal: params.id("temporal_score"),
            output: id("output.w"),
            time: id("ctx.time"),
            weather: id("ctx.weather"),
            driver: id("ctx.driver"),
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Checks that a network matches the vocabulary and label count.
    pub fn check_topology(&self, topo: &Topology) -> Result<()> {
        if topo.node_count() != self.config.node_vocab {
            return Err(ModelError::Config(format!(
                "network has {} nodes, model expects {}",
                topo.node_count(),
                self.config.node_vocab
            )));
        }
        if topo.k() != self.config.k {
            return Err(ModelError::Config(format!("network uses k={}, model expects {}", topo.k(), self.config.k)));
        }
        Ok(())
    }

    fn driver_row(&self, driver: usize) -> usize {
        if driver < self.config.driver_vocab {
            driver + 1
        } else {
            0
        }
    }

    fn check_nodes(&self, nodes: &[NodeIdx]) -> Result<()> {
        match nodes.iter().find(|n| n.0 >= self.config.node_vocab) {
            Some(n) => Err(ModelError::Index { what: "node", index: n.0, limit: self.config.node_vocab }),
            None => Ok(()),
        }
    }

    fn check_dirs(&self, dirs: &[usize]) -> Result<()> {
        if !self.config.variant.uses_directions() {
            return Ok(());
        }
        match dirs.iter().find(|&&d| d >= self.config.k) {
            Some(&d) => Err(ModelError::Index { what: "direction", index: d, limit: self.config.k }),
            None => Ok(()),
        }
    }

    /// Node and direction embeddings (`[batch, M]`, `[batch, D]`). The
    /// direction part is absent for no-DTR.
    pub fn embed(&self, tape: &mut Tape<'_>, nodes: &[NodeIdx], dirs: &[usize]) -> Result<(Var, Option<Var>)> {
        self.check_nodes(nodes)?;
        self.check_dirs(dirs)?;
        let table = tape.param(self.ids.node);
        let idx: Vec<usize> = nodes.iter().map(|n| n.0).collect();
        let v_n = tape.gather(table, &idx)?;
        let v_r = match self.ids.dir {
            Some(id) => {
                let table = tape.param(id);
                Some(tape.gather(table, dirs)?)
            }
            None => None,
        };
        Ok((v_n, v_r))
    }

    /// Time, weather and driver embeddings concatenated, `[batch, Q]`.
    pub fn embed_context(&self, tape: &mut Tape<'_>, ctx: &[ContextFeatures]) -> Result<Var> {
        let time: Vec<usize> = ctx.iter().map(|c| c.time_slot).collect();
        let weather: Vec<usize> = ctx.iter().map(|c| c.weather).collect();
        let driver: Vec<usize> = ctx.iter().map(|c| self.driver_row(c.driver_id)).collect();
        let (t, w, d) = (tape.param(self.ids.time), tape.param(self.ids.weather), tape.param(self.ids.driver));
        let parts = [tape.gather(t, &time)?, tape.gather(w, &weather)?, tape.gather(d, &driver)?];
        Ok(tape.concat(&parts)?)
    }

    /// Attention over the out-neighbors of each node. Padded slots are
    /// masked; a node without neighbors gets a zero context.
    pub fn spatial_attention(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        nodes: &[NodeIdx],
        v_n: Var,
        v_r: Option<Var>,
    ) -> Result<SpatialBatch> {
        let batch = nodes.len();
        let m = self.config.node_dim;
        let slots = topo.max_degree();
        let Some(score_id) = self.ids.spatial.filter(|_| slots > 0) else {
            return Ok(SpatialBatch { context: tape.input(Tensor::zeros(batch, m))?, weights: None });
        };
        let table = tape.param(self.ids.node);
        let w_s = tape.param(score_id);
        let with_dir = self.config.variant.direction_in_score();
        let mut mask = vec![false; batch * slots];
        let mut values = Vec::with_capacity(slots);
        let mut scores = Vec::with_capacity(slots);
        for slot in 0..slots {
            let idx: Vec<usize> = nodes
                .iter()
                .enumerate()
                .map(|(b, &n)| match topo.neighbors(n).get(slot) {
                    Some(&t) => {
                        mask[b * slots + slot] = true;
                        t
                    }
                    None => 0,
                })
                .collect();
            let nb = tape.gather(table, &idx)?;
            let feats = match (with_dir, v_r) {
                (true, Some(v_r)) => tape.concat(&[v_n, nb, v_r])?,
                _ => tape.concat(&[v_n, nb])?,
            };
            scores.push(tape.matmul(feats, w_s)?);
            values.push(nb);
        }
        let raw = tape.concat(&scores)?;
        let raw = tape.leaky_relu(raw, SCORE_SLOPE)?;
        let weights = tape.masked_softmax(raw, Some(&mask))?;
        let context = tape.attend(weights, &values)?;
        Ok(SpatialBatch { context, weights: Some(weights) })
    }

    /// `[v_n; v_r; w_n]` for one position of every sample.
    fn token_input(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        nodes: &[NodeIdx],
        dirs: &[usize],
        rec: Option<(&mut Recorder, Phase, usize)>,
    ) -> Result<Var> {
        let (v_n, v_r) = self.embed(tape, nodes, dirs)?;
        let spatial = self.spatial_attention(tape, topo, nodes, v_n, v_r)?;
        if let (Some((rec, phase, step)), Some(w)) = (rec, spatial.weights) {
            let w = tape.value(w);
            for (b, &node) in nodes.iter().enumerate() {
                let neighbors = topo.neighbors(node).to_vec();
                let weights = w.row_slice(b)[..neighbors.len()].to_vec();
                rec.spatial.push(SpatialRecord { sample: rec.offset + b, phase, step, node, neighbors, weights });
            }
        }
        let parts: Vec<Var> = [Some(v_n), v_r, Some(spatial.context)].into_iter().flatten().collect();
        Ok(tape.concat(&parts)?)
    }

    fn lstm_step(
        &self,
        tape: &mut Tape<'_>,
        layers: &[LstmIds],
        x: Var,
        state: &LstmState,
        noise: &mut Noise<'_>,
    ) -> Result<LstmState> {
        let hd = self.config.hidden;
        let mut input = x;
        let mut next = LstmState { h: Vec::with_capacity(layers.len()), c: Vec::with_capacity(layers.len()) };
        for (l, ids) in layers.iter().enumerate() {
            let (w_ih, w_hh, bias) = (tape.param(ids.w_ih), tape.param(ids.w_hh), tape.param(ids.bias));
            let a = tape.matmul(input, w_ih)?;
            let r = tape.matmul(state.h[l], w_hh)?;
            let g = tape.add(a, r)?;
            let g = tape.add_row(g, bias)?;
            let i = tape.slice_cols(g, 0, hd)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice_cols(g, hd, hd)?;
            let f = tape.sigmoid(f)?;
            let cand = tape.slice_cols(g, 2 * hd, hd)?;
            let cand = tape.tanh(cand)?;
            let o = tape.slice_cols(g, 3 * hd, hd)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, state.c[l])?;
            let write = tape.mul(i, cand)?;
            let c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            next.h.push(h);
            next.c.push(c);
            input = if l + 1 < layers.len() {
                match noise.rng.as_deref_mut() {
                    Some(rng) => tape.dropout(h, noise.rate, true, rng)?,
                    None => h,
                }
            } else {
                h
            };
        }
        Ok(next)
    }

    fn zero_state(&self, tape: &mut Tape<'_>, batch: usize) -> Result<LstmState> {
        let z = tape.input(Tensor::zeros(batch, self.config.hidden))?;
        Ok(LstmState { h: vec![z; self.config.layers], c: vec![z; self.config.layers] })
    }

    fn check_window(&self, w: &InputWindow) -> Result<()> {
        let expected = self.config.l_in;
        if w.nodes.len() != expected {
            return Err(ModelError::WindowLength { expected, got: w.nodes.len() });
        }
        if self.config.variant.uses_directions() && w.directions.len() != expected {
            return Err(ModelError::WindowLength { expected, got: w.directions.len() });
        }
        Ok(())
    }

    fn column_dirs(&self, windows: &[&InputWindow], t: usize) -> Vec<usize> {
        if self.config.variant.uses_directions() {
            windows.iter().map(|w| w.directions[t]).collect()
        } else {
            vec![0; windows.len()]
        }
    }

    /// Runs the stacked encoder over the `l_in` input tokens.
    pub fn encode_sequence(&self, tape: &mut Tape<'_>, topo: &Topology, windows: &[&InputWindow]) -> Result<Encoded> {
        self.encode_inner(tape, topo, windows, &mut Noise::eval(), None)
    }

    fn encode_inner(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        windows: &[&InputWindow],
        noise: &mut Noise<'_>,
        mut rec: Option<&mut Recorder>,
    ) -> Result<Encoded> {
        for w in windows {
            self.check_window(w)?;
        }
        let mut state = self.zero_state(tape, windows.len())?;
        let mut outputs = Vec::with_capacity(self.config.l_in);
        for t in 0..self.config.l_in {
            let nodes: Vec<NodeIdx> = windows.iter().map(|w| w.nodes[t]).collect();
            let dirs = self.column_dirs(windows, t);
            let x = self.token_input(tape, topo, &nodes, &dirs, rec.as_deref_mut().map(|r| (r, Phase::Encoder, t)))?;
            state = self.lstm_step(tape, &self.ids.encoder, x, &state, noise)?;
            outputs.push(state.top());
        }
        Ok(Encoded { outputs, state })
    }

    /// Attention over exactly `l_in` states, scored from the decoder
    /// state of the previous step.
    pub fn temporal_attention(&self, tape: &mut Tape<'_>, state: &LstmState, window: &[Var]) -> Result<TemporalBatch> {
        let expected = self.config.l_in;
        if window.len() != expected {
            return Err(ModelError::WindowUnderflow { expected, got: window.len() });
        }
        let id = self.ids.temporal.ok_or_else(|| ModelError::Config("variant has no temporal attention".into()))?;
        let w_t = tape.param(id);
        let mut parts: Vec<Var> = state.h.iter().chain(&state.c).copied().collect();
        parts.push(window[0]);
        let mut scores = Vec::with_capacity(window.len());
        for &h_j in window {
            *parts.last_mut().unwrap() = h_j;
            let feats = tape.concat(&parts)?;
            scores.push(tape.matmul(feats, w_t)?);
        }
        let raw = tape.concat(&scores)?;
        let weights = tape.softmax(raw)?;
        let context = tape.attend(weights, window)?;
        Ok(TemporalBatch { context, weights })
    }

    /// One decoder step from the previous token, returning the class
    /// distribution and the new state.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        prev_nodes: &[NodeIdx],
        prev_dirs: &[usize],
        state: &LstmState,
        window: &[Var],
        context: Var,
    ) -> Result<DecodeStep> {
        self.decode_inner(tape, topo, prev_nodes, prev_dirs, state, window, context, &mut Noise::eval(), None)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_inner(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        prev_nodes: &[NodeIdx],
        prev_dirs: &[usize],
        state: &LstmState,
        window: &[Var],
        context: Var,
        noise: &mut Noise<'_>,
        rec: Option<(&mut Recorder, usize)>,
    ) -> Result<DecodeStep> {
        let (rec, step) = match rec {
            Some((r, s)) => (Some(r), s),
            None => (None, 0),
        };
        let mut rec = rec;
        let x = self.token_input(
            tape,
            topo,
            prev_nodes,
            prev_dirs,
            rec.as_deref_mut().map(|r| (r, Phase::Decoder, step)),
        )?;
        let (x, temporal) = if self.config.variant.has_temporal() {
            let att = self.temporal_attention(tape, state, window)?;
            (tape.concat(&[x, att.context])?, Some(att))
        } else {
            (x, None)
        };
        if let (Some(rec), Some(att)) = (rec, &temporal) {
            let w = tape.value(att.weights);
            for b in 0..prev_nodes.len() {
                rec.temporal[rec.offset + b].push(w.row_slice(b).to_vec());
            }
        }
        let state = self.lstm_step(tape, &self.ids.decoder, x, state, noise)?;
        let head = tape.concat(&[state.top(), context])?;
        let w_c = tape.param(self.ids.output);
        let logits = tape.matmul(head, w_c)?;
        let probs = tape.softmax(logits)?;
        Ok(DecodeStep { probs, state, temporal })
    }

    /// Whether `class` is realizable at `node`, and where it leads.
    pub fn resolve(&self, topo: &Topology, node: NodeIdx, class: usize) -> Option<(EdgeId, NodeIdx)> {
        if self.config.variant.uses_directions() {
            topo.step(node, class)
        } else {
            topo.edge_to(node, class)
        }
    }

    /// Argmax over the classes realizable at `node`; `None` at a dead end.
    fn masked_argmax(&self, topo: &Topology, node: NodeIdx, probs: &[f32]) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (c, &p) in probs.iter().enumerate() {
            if self.resolve(topo, node, c).is_some() && best.map_or(true, |b| p > probs[b]) {
                best = Some(c);
            }
        }
        best
    }

    fn token_of(&self, class: usize, target: NodeIdx) -> (NodeIdx, usize) {
        if self.config.variant.uses_directions() {
            (target, class)
        } else {
            (target, 0)
        }
    }

    /// Teacher-forced loss with scheduled sampling. Each decoder input is
    /// the ground truth with probability `alpha`, otherwise the model's
    /// own argmax (its masked argmax when that is not a real edge).
    /// Without `rng`, dropout is off and `alpha` must be 1.
    pub fn forward_train(
        &self,
        tape: &mut Tape<'_>,
        topo: &Topology,
        samples: &[&TrainSample],
        alpha: f64,
        dropout: f32,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TrainForward> {
        if samples.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let l_out = self.config.l_out;
        for s in samples {
            let got = if self.config.variant.uses_directions() { s.target_directions.len() } else { s.target_nodes.len() };
            if got != l_out || s.target_nodes.len() != l_out {
                return Err(ModelError::WindowLength { expected: l_out, got });
            }
            self.check_nodes(&s.target_nodes)?;
            self.check_dirs(&s.target_directions)?;
        }
        let mut noise = Noise { rate: dropout, rng };
        let windows: Vec<&InputWindow> = samples.iter().map(|s| &s.input).collect();
        let enc = self.encode_inner(tape, topo, &windows, &mut noise, None)?;
        let ctx: Vec<ContextFeatures> = windows.iter().map(|w| w.context).collect();
        let context = self.embed_context(tape, &ctx)?;

        let mut prev: Vec<(NodeIdx, usize)> =
            windows.iter().map(|w| (w.last_node(), *w.directions.last().unwrap_or(&0))).collect();
        let mut combined = enc.outputs.clone();
        let mut state = enc.state;
        let mut losses = Vec::with_capacity(l_out);
        let (mut sampled, mut correct) = (0, 0);
        for i in 0..l_out {
            let window = self.window_for(&enc.outputs, &combined);
            let nodes: Vec<NodeIdx> = prev.iter().map(|p| p.0).collect();
            let dirs: Vec<usize> = prev.iter().map(|p| p.1).collect();
            let step = self.decode_inner(tape, topo, &nodes, &dirs, &state, window, context, &mut noise, None)?;
            let targets: Vec<usize> = samples.iter().map(|s| s.class(self.config.variant, i)).collect();
            losses.push(tape.cross_entropy(step.probs, &targets)?);
            let probs = tape.value(step.probs).clone();
            for (b, s) in samples.iter().enumerate() {
                let row = probs.row_slice(b);
                let guess = crate::autograd::argmax(row);
                if guess == targets[b] {
                    correct += 1;
                }
                let truth = self.token_of(targets[b], s.target_nodes[i]);
                let coin = match noise.rng.as_deref_mut() {
                    Some(rng) => rng.gen::<f64>() < alpha,
                    None => true,
                };
                prev[b] = if coin {
                    truth
                } else {
                    sampled += 1;
                    let node = nodes[b];
                    let pick = match self.resolve(topo, node, guess) {
                        Some(_) => Some(guess),
                        None => self.masked_argmax(topo, node, row),
                    };
                    match pick.and_then(|c| self.resolve(topo, node, c).map(|(_, t)| (c, t))) {
                        Some((c, t)) => self.token_of(c, t),
                        None => truth,
                    }
                };
            }
            combined.push(step.state.top());
            state = step.state;
        }
        let total = tape.concat(&losses)?;
        let total = tape.sum(total)?;
        let loss = tape.scale(total, 1.0 / samples.len() as f32)?;
        Ok(TrainForward { loss, positions: samples.len() * l_out, sampled, correct })
    }

    /// The states the next temporal attention looks at.
    fn window_for<'a>(&self, encoder: &'a [Var], combined: &'a [Var]) -> &'a [Var] {
        match self.config.variant {
            Variant::Fta => encoder,
            _ => &combined[combined.len() - self.config.l_in..],
        }
    }

    /// Greedy decoding. In masked mode the argmax is restricted to
    /// classes with an outgoing edge at the current node.
    pub fn predict(&self, topo: &Topology, inputs: &[InputWindow], masked: bool) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            out.extend(self.predict_chunk(topo, chunk, masked, None)?);
        }
        Ok(out)
    }

    /// Like [`NetTraj::predict`], also returning every attention weight
    /// vector computed along the way.
    pub fn predict_with_attention(
        &self,
        topo: &Topology,
        inputs: &[InputWindow],
        masked: bool,
    ) -> Result<(Vec<Prediction>, AttentionDump)> {
        let mut rec = Recorder { spatial: Vec::new(), temporal: vec![Vec::new(); inputs.len()], offset: 0 };
        let mut out = Vec::with_capacity(inputs.len());
        for (c, chunk) in inputs.chunks(PREDICT_CHUNK).enumerate() {
            rec.offset = c * PREDICT_CHUNK;
            out.extend(self.predict_chunk(topo, chunk, masked, Some(&mut rec))?);
        }
        Ok((out, AttentionDump { spatial: rec.spatial, temporal: rec.temporal }))
    }

    fn predict_chunk(
        &self,
        topo: &Topology,
        inputs: &[InputWindow],
        masked: bool,
        mut rec: Option<&mut Recorder>,
    ) -> Result<Vec<Prediction>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let windows: Vec<&InputWindow> = inputs.iter().collect();
        let mut noise = Noise::eval();
        let enc = self.encode_inner(&mut tape, topo, &windows, &mut noise, rec.as_deref_mut())?;
        let ctx: Vec<ContextFeatures> = windows.iter().map(|w| w.context).collect();
        let context = self.embed_context(&mut tape, &ctx)?;

        let mut preds: Vec<Prediction> =
            inputs.iter().map(|_| Prediction { classes: Vec::new(), edges: Vec::new(), invalid_at: None }).collect();
        let mut prev: Vec<(NodeIdx, usize)> =
            windows.iter().map(|w| (w.last_node(), *w.directions.last().unwrap_or(&0))).collect();
        let mut combined = enc.outputs.clone();
        let mut state = enc.state;
        for i in 0..self.config.l_out {
            let window = self.window_for(&enc.outputs, &combined);
            let nodes: Vec<NodeIdx> = prev.iter().map(|p| p.0).collect();
            let dirs: Vec<usize> = prev.iter().map(|p| p.1).collect();
            let step = self.decode_inner(
                &mut tape,
                topo,
                &nodes,
                &dirs,
                &state,
                window,
                context,
                &mut noise,
                rec.as_deref_mut().map(|r| (r, i)),
            )?;
            let probs = tape.value(step.probs);
            for (b, pred) in preds.iter_mut().enumerate() {
                let row = probs.row_slice(b);
                let node = nodes[b];
                let fallback = self.masked_argmax(topo, node, row);
                let class = if masked { fallback.unwrap_or_else(|| crate::autograd::argmax(row)) } else { crate::autograd::argmax(row) };
                pred.classes.push(class);
                match self.resolve(topo, node, class) {
                    Some((e, t)) => {
                        if pred.invalid_at.is_none() {
                            pred.edges.push(e);
                        }
                        prev[b] = self.token_of(class, t);
                    }
                    None => {
                        pred.invalid_at.get_or_insert(i);
                        // keep the batch going from some real node
                        prev[b] = match fallback.and_then(|c| self.resolve(topo, node, c).map(|(_, t)| (c, t))) {
                            Some((c, t)) => self.token_of(c, t),
                            None => (node, prev[b].1),
                        };
                    }
                }
            }
            combined.push(step.state.top());
            state = step.state;
        }
        Ok(preds)
    }

    /// Spatial attention of a single (node, incoming direction) pair.
    pub fn spatial_attention_at(&self, topo: &Topology, node: NodeIdx, dir: usize) -> Result<SpatialAttnOut> {
        let mut tape = Tape::new(&self.params);
        let (v_n, v_r) = self.embed(&mut tape, &[node], &[dir])?;
        let out = self.spatial_attention(&mut tape, topo, &[node], v_n, v_r)?;
        let neighbors = topo.neighbors(node).to_vec();
        let weights = match out.weights {
            Some(w) => tape.value(w).row_slice(0)[..neighbors.len()].to_vec(),
            None => Vec::new(),
        };
        Ok(SpatialAttnOut {
            context: tape.value(out.context).data().to_vec(),
            isolated: neighbors.is_empty(),
            neighbors,
            weights,
        })
    }

    /// Class probabilities at every decoder step with ground-truth inputs.
    pub fn teacher_forced_probs(&self, topo: &Topology, sample: &TrainSample) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_sequence(&mut tape, topo, &[&sample.input])?;
        let context = self.embed_context(&mut tape, &[sample.input.context])?;
        let mut prev = (sample.input.last_node(), *sample.input.directions.last().unwrap_or(&0));
        let mut combined = enc.outputs.clone();
        let mut state = enc.state;
        let mut out = Vec::new();
        for i in 0..self.config.l_out {
            let window = self.window_for(&enc.outputs, &combined);
            let step = self.decode_step(&mut tape, topo, &[prev.0], &[prev.1], &state, window, context)?;
            out.push(tape.value(step.probs).data().to_vec());
            prev = self.token_of(sample.class(self.config.variant, i), sample.target_nodes[i]);
            combined.push(step.state.top());
            state = step.state;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
