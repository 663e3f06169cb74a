//! Flat `key = value` run configuration for `train`. Lines starting with
//! `#` are comments; `-` and `_` are interchangeable in keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nettraj::codec::DEFAULT_K;
use nettraj::model::{ModelConfig, Variant};
use nettraj::trainer::{BoundaryMode, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
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
    pub variant: Variant,
    /// `None` sizes the table from the largest driver id in the corpus.
    pub driver_vocab: Option<usize>,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "nodes",
    "edges",
    "trajectories",
    "val",
    "out",
    "k",
    "node-dim",
    "dir-dim",
    "hidden",
    "layers",
    "time-dim",
    "weather-dim",
    "driver-dim",
    "l-in",
    "l-out",
    "variant",
    "driver-vocab",
    "batch-size",
    "slide",
    "lr",
    "lr-decay",
    "epochs",
    "dropout",
    "sampling-epochs",
    "clip-norm",
    "seed",
    "boundary-mode",
    "masked-eval",
];

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            nodes: None,
            edges: None,
            trajectories: None,
            val: None,
            out: None,
            k: DEFAULT_K,
            node_dim: m.node_dim,
            dir_dim: m.dir_dim,
            hidden: m.hidden,
            layers: m.layers,
            time_dim: m.time_dim,
            weather_dim: m.weather_dim,
            driver_dim: m.driver_dim,
            l_in: m.l_in,
            l_out: m.l_out,
            variant: m.variant,
            driver_vocab: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "nodes" => self.nodes = Some(v.into()),
            "edges" => self.edges = Some(v.into()),
            "trajectories" => self.trajectories = Some(v.into()),
            "val" => self.val = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "k" => self.k = parse(k, v)?,
            "node-dim" => self.node_dim = parse(k, v)?,
            "dir-dim" => self.dir_dim = parse(k, v)?,
            "hidden" => self.hidden = parse(k, v)?,
            "layers" => self.layers = parse(k, v)?,
            "time-dim" => self.time_dim = parse(k, v)?,
            "weather-dim" => self.weather_dim = parse(k, v)?,
            "driver-dim" => self.driver_dim = parse(k, v)?,
            "l-in" => self.l_in = parse(k, v)?,
            "l-out" => self.l_out = parse(k, v)?,
            "variant" => self.variant = parse(k, v)?,
            "driver-vocab" => self.driver_vocab = Some(parse(k, v)?),
            "batch-size" => self.train.batch_size = parse(k, v)?,
            "slide" => self.train.slide = parse(k, v)?,
            "lr" => self.train.lr0 = parse(k, v)?,
            "lr-decay" => self.train.lr_decay = parse(k, v)?,
            "epochs" => self.train.epochs = parse(k, v)?,
            "dropout" => self.train.dropout = parse(k, v)?,
            "sampling-epochs" => self.train.sampling_epochs = Some(parse(k, v)?),
            "clip-norm" => self.train.clip_norm = parse(k, v)?,
            "seed" => self.train.seed = parse(k, v)?,
            "boundary-mode" => self.train.boundary_mode = parse::<BoundaryMode>(k, v)?,
            "masked-eval" => self.train.masked_eval = parse(k, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(key, value).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.parse_text(&text, &path.display().to_string())
    }

    pub fn model_config(&self, node_vocab: usize, driver_vocab: usize) -> ModelConfig {
        ModelConfig {
            k: self.k,
            node_dim: self.node_dim,
            dir_dim: self.dir_dim,
            hidden: self.hidden,
            layers: self.layers,
            time_dim: self.time_dim,
            weather_dim: self.weather_dim,
            driver_dim: self.driver_dim,
            l_in: self.l_in,
            l_out: self.l_out,
            node_vocab,
            driver_vocab: self.driver_vocab.unwrap_or(driver_vocab),
            variant: self.variant,
        }
    }

    /// The resolved configuration in the file format, paths included.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        for (k, p) in [
            ("nodes", &self.nodes),
            ("edges", &self.edges),
            ("trajectories", &self.trajectories),
            ("val", &self.val),
            ("out", &self.out),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        put("k", self.k.to_string());
        put("node-dim", self.node_dim.to_string());
        put("dir-dim", self.dir_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("layers", self.layers.to_string());
        put("time-dim", self.time_dim.to_string());
        put("weather-dim", self.weather_dim.to_string());
        put("driver-dim", self.driver_dim.to_string());
        put("l-in", self.l_in.to_string());
        put("l-out", self.l_out.to_string());
        put("variant", self.variant.to_string());
        if let Some(v) = self.driver_vocab {
            put("driver-vocab", v.to_string());
        }
        let t = &self.train;
        put("batch-size", t.batch_size.to_string());
        put("slide", t.slide.to_string());
        put("lr", t.lr0.to_string());
        put("lr-decay", t.lr_decay.to_string());
        put("epochs", t.epochs.to_string());
        put("dropout", t.dropout.to_string());
        if let Some(e) = t.sampling_epochs {
            put("sampling-epochs", e.to_string());
        }
        put("clip-norm", t.clip_norm.to_string());
        put("seed", t.seed.to_string());
        put("boundary-mode", t.boundary_mode.to_string());
        put("masked-eval", t.masked_eval.to_string());
        s
    }
}
