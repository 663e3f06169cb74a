//! Stream segmentation, scheduled sampling and the SGD training loop.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, Tape};
use crate::codec::EncodedTrajectory;
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::model::{InputWindow, ModelError, NetTraj, Topology};
use crate::network::{EdgeId, NodeIdx};

pub use crate::model::TrainSample;

pub const LOG_HEADER: &str = "epoch,loss,val_AMR,val_DE,lr,alpha";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus has {tokens} tokens; {streams} streams of {window}-token windows need at least {needed}")]
    TooFewTokens { tokens: usize, streams: usize, window: usize, needed: usize },
    #[error("trajectory {index} step {step}: no edge with that direction")]
    BadTrajectory { index: usize, step: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("no training windows")]
    NoSamples,
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<AutogradError> for TrainError {
    fn from(e: AutogradError) -> Self {
        TrainError::Model(ModelError::Autograd(e))
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Drop windows that span two trajectories.
    #[default]
    Respect,
    /// Keep every window of the concatenated streams.
    ConcatFaithful,
}

impl fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryMode::Respect => "respect",
            BoundaryMode::ConcatFaithful => "concat-faithful",
        })
    }
}

impl FromStr for BoundaryMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "respect" => Ok(BoundaryMode::Respect),
            "concat-faithful" => Ok(BoundaryMode::ConcatFaithful),
            _ => Err(TrainError::Config(format!("unknown boundary mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of parallel streams, which is also the batch size.
    pub batch_size: usize,
    /// Window stride in tokens.
    pub slide: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub dropout: f32,
    /// Epochs over which the ground-truth probability decays to 0;
    /// `None` means `epochs`.
    pub sampling_epochs: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    pub boundary_mode: BoundaryMode,
    /// Masked decoding for validation metrics.
    pub masked_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            slide: 5,
            lr0: 0.5,
            lr_decay: 0.8,
            epochs: 10,
            dropout: 0.1,
            sampling_epochs: None,
            clip_norm: 5.0,
            seed: 0,
            boundary_mode: BoundaryMode::Respect,
            masked_eval: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.slide == 0 {
            return err("batch size and slide must be at least 1");
        }
        if !(self.lr0 > 0.0) {
            return err("initial learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err("learning-rate decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip norm must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// Probability of feeding the ground truth in `epoch` (0-based): linear
/// decay from 1 to 0 over `sampling_epochs`.
pub fn scheduled_sampling_alpha(epoch: usize, sampling_epochs: usize) -> f64 {
    if sampling_epochs == 0 {
        return 0.0;
    }
    (1.0 - epoch as f64 / sampling_epochs as f64).max(0.0)
}

/// One (node, direction) token with the edge that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub node: NodeIdx,
    pub direction: usize,
    pub edge: EdgeId,
}

/// Token `i` is the `i`-th edge's target and label.
pub fn tokens(t: &EncodedTrajectory, topo: &Topology, index: usize) -> Result<Vec<Token>> {
    t.directions
        .iter()
        .enumerate()
        .map(|(step, &direction)| match topo.step(t.nodes[step], direction) {
            Some((edge, node)) if node == t.nodes[step + 1] => Ok(Token { node, direction, edge }),
            _ => Err(TrainError::BadTrajectory { index, step }),
        })
        .collect()
}

fn window_sample(toks: &[Token], l_in: usize, context: crate::codec::ContextFeatures) -> TrainSample {
    let (input, target) = toks.split_at(l_in);
    TrainSample {
        input: InputWindow {
            nodes: input.iter().map(|t| t.node).collect(),
            directions: input.iter().map(|t| t.direction).collect(),
            context,
        },
        target_nodes: target.iter().map(|t| t.node).collect(),
        target_directions: target.iter().map(|t| t.direction).collect(),
        target_edges: target.iter().map(|t| t.edge).collect(),
    }
}

/// The last `l_in + l_out` edges of a trajectory, or `None` when it is
/// shorter than that. Used for every held-out evaluation.
pub fn tail_sample(t: &EncodedTrajectory, topo: &Topology, l_in: usize, l_out: usize) -> Result<Option<TrainSample>> {
    let w = l_in + l_out;
    if t.directions.len() < w {
        return Ok(None);
    }
    let toks = tokens(t, topo, 0)?;
    Ok(Some(window_sample(&toks[toks.len() - w..], l_in, t.context)))
}

/// The last `l_in` edges as a decoder input, for forecasting past the end
/// of `t`. `None` when the trajectory is shorter than `l_in`.
pub fn last_window(t: &EncodedTrajectory, topo: &Topology, l_in: usize) -> Result<Option<InputWindow>> {
    if t.directions.len() < l_in {
        return Ok(None);
    }
    let toks = tokens(t, topo, 0)?;
    Ok(Some(window_sample(&toks[toks.len() - l_in..], l_in, t.context).input))
}

/// Tail samples for a corpus, with the index of each source trajectory.
pub fn tail_samples(
    corpus: &[EncodedTrajectory],
    topo: &Topology,
    l_in: usize,
    l_out: usize,
) -> Result<Vec<(usize, TrainSample)>> {
    let mut out = Vec::new();
    for (i, t) in corpus.iter().enumerate() {
        let w = l_in + l_out;
        if t.directions.len() < w {
            continue;
        }
        let toks = tokens(t, topo, i)?;
        out.push((i, window_sample(&toks[toks.len() - w..], l_in, t.context)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// `batches[i]` holds the `i`-th window of every stream.
    pub batches: Vec<Vec<TrainSample>>,
    pub stream_len: usize,
    pub trimmed: usize,
    /// Windows dropped for crossing a trajectory boundary.
    pub dropped: usize,
}

impl Segmentation {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Concatenates all tokens, cuts them into `batch_size` equal streams
/// (dropping the remainder) and slides an `l_in + l_out` window along each
/// stream by `slide` tokens.
pub fn segment(
    corpus: &[EncodedTrajectory],
    topo: &Topology,
    l_in: usize,
    l_out: usize,
    cfg: &TrainConfig,
) -> Result<Segmentation> {
    cfg.validate()?;
    let mut all = Vec::new();
    let mut owner = Vec::new();
    for (i, t) in corpus.iter().enumerate() {
        let toks = tokens(t, topo, i)?;
        owner.extend(std::iter::repeat(i).take(toks.len()));
        all.extend(toks);
    }
    let c = cfg.batch_size;
    let w = l_in + l_out;
    if all.len() < c * w {
        return Err(TrainError::TooFewTokens { tokens: all.len(), streams: c, window: w, needed: c * w });
    }
    let stream_len = all.len() / c;
    let trimmed = all.len() - stream_len * c;
    let per_stream = (stream_len - w) / cfg.slide + 1;
    let mut batches = Vec::with_capacity(per_stream);
    let mut dropped = 0;
    for i in 0..per_stream {
        let mut batch = Vec::with_capacity(c);
        for s in 0..c {
            let start = s * stream_len + i * cfg.slide;
            let range = start..start + w;
            let first = owner[range.start];
            let last = owner[range.end - 1];
            if cfg.boundary_mode == BoundaryMode::Respect && first != last {
                dropped += 1;
                continue;
            }
            // context of the trajectory holding the last input token
            let ctx = corpus[owner[start + l_in - 1]].context;
            batch.push(window_sample(&all[range], l_in, ctx));
        }
        if !batch.is_empty() {
            batches.push(batch);
        }
    }
    Ok(Segmentation { batches, stream_len, trimmed, dropped })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-position cross-entropy over the epoch.
    pub loss: f64,
    pub val: Option<MetricsReport>,
    pub lr: f64,
    pub alpha: f64,
    /// Decoder inputs that came from the model instead of the data.
    pub sampled: usize,
    pub train_correct: usize,
    pub positions: usize,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let (amr, de) = match &self.val {
            Some(r) => (r.amr.to_string(), r.de.to_string()),
            None => (String::new(), String::new()),
        };
        format!("{},{},{},{},{},{}", self.epoch, self.loss, amr, de, self.lr, self.alpha)
    }
}

/// Greedy predictions of `samples` scored against their targets.
pub fn evaluate(model: &NetTraj, topo: &Topology, samples: &[TrainSample], masked: bool) -> Result<MetricsReport> {
    let inputs: Vec<InputWindow> = samples.iter().map(|s| s.input.clone()).collect();
    let preds = model.predict(topo, &inputs, masked)?;
    let pred: Vec<Vec<EdgeId>> = preds.into_iter().map(|p| p.edges).collect();
    let truth: Vec<Vec<EdgeId>> = samples.iter().map(|s| s.target_edges.clone()).collect();
    Ok(compute_metrics(&pred, &truth)?)
}

/// Mean per-position cross-entropy with ground-truth decoder inputs and
/// no dropout.
pub fn mean_loss(model: &NetTraj, topo: &Topology, samples: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let mut tape = Tape::new(model.params());
        let out = model.forward_train(&mut tape, topo, &refs, 1.0, 0.0, None)?;
        total += f64::from(tape.value(out.loss).item()) * chunk.len() as f64;
    }
    Ok(total / (samples.len() * model.config().l_out) as f64)
}

/// Where the trainer writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn log(&self) -> PathBuf {
        self.0.join("log.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.0.join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.0.join("model.ckpt")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Trains `model` in place with SGD. Each epoch visits every batch of the
/// segmentation once, in a seeded random order. `on_epoch` sees each log
/// line as it is produced.
pub fn train(
    model: &mut NetTraj,
    topo: &Topology,
    corpus: &[EncodedTrajectory],
    val: &[TrainSample],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    model.check_topology(topo)?;
    let (l_in, l_out) = (model.config().l_in, model.config().l_out);
    let seg = segment(corpus, topo, l_in, l_out, cfg)?;
    if seg.batches.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(&dir.0).map_err(io_err(&dir.0))?;
            let path = dir.log();
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let sampling_epochs = cfg.sampling_epochs.unwrap_or(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seg.batches.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let alpha = scheduled_sampling_alpha(epoch, sampling_epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut positions, mut sampled, mut correct) = (0.0f64, 0, 0, 0);
        for &b in &order {
            let batch: Vec<&TrainSample> = seg.batches[b].iter().collect();
            let (loss, grads, stats) = {
                let mut tape = Tape::new(model.params());
                let fwd = model.forward_train(&mut tape, topo, &batch, alpha, cfg.dropout, Some(&mut rng))?;
                let loss = tape.value(fwd.loss).item();
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, batch: b });
                }
                let grads = match tape.backward(fwd.loss) {
                    Ok(g) => g,
                    Err(AutogradError::NonFinite { .. }) => return Err(TrainError::Diverged { epoch, batch: b }),
                    Err(e) => return Err(e.into()),
                };
                (loss, grads, fwd)
            };
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads);
            params.clip_grad_norm(cfg.clip_norm);
            match params.sgd_step(lr as f32) {
                Ok(()) => {}
                Err(AutogradError::NonFiniteGradient { .. }) => return Err(TrainError::Diverged { epoch, batch: b }),
                Err(e) => return Err(e.into()),
            }
            loss_sum += f64::from(loss) * batch.len() as f64;
            positions += stats.positions;
            sampled += stats.sampled;
            correct += stats.correct;
        }
        let val_report =
            if val.is_empty() { None } else { Some(evaluate(model, topo, val, cfg.masked_eval)?) };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / positions as f64,
            val: val_report,
            lr,
            alpha,
            sampled,
            train_correct: correct,
            positions,
        };
        if let (Some((f, path)), Some(dir)) = (log_file.as_mut(), out) {
            writeln!(f, "{}", entry.csv_row()).map_err(io_err(path))?;
            f.flush().map_err(io_err(path))?;
            let ckpt = dir.epoch_checkpoint(epoch);
            model.save(&ckpt)?;
        }
        on_epoch(&entry);
        logs.push(entry);
    }
    if let Some(dir) = out {
        model.save(dir.final_checkpoint())?;
    }
    Ok(logs)
}
