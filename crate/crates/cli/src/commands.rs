use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nettraj::codec::{self, encode, label_network, load_trajectories, TrajectoryRecord};
use nettraj::metrics::{compute_metrics, write_details, MarkovModel};
use nettraj::model::{InputWindow, NetTraj, Phase, Topology};
use nettraj::network::{write_edges, write_nodes};
use nettraj::synth::{gen_corpus, gen_network, RoutingRule, SynthSpec, SynthTopology};
use nettraj::trainer::{last_window, tail_sample, tail_samples, train, OutputDir};
use nettraj::{EdgeId, EncodedTrajectory, RoadNetwork};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::files::{read_edge_seqs, write_edge_seqs, write_with};

pub fn labeled_network(nodes: &Path, edges: &Path, k: usize) -> Result<(RoadNetwork, codec::RevisionReport)> {
    Ok(label_network(RoadNetwork::load(nodes, edges)?, k)?)
}

fn encode_all(net: &RoadNetwork, records: &[TrajectoryRecord]) -> Result<Vec<EncodedTrajectory>> {
    records
        .iter()
        .map(|r| encode(net, &r.edges, r.context).map_err(|e| CliError::Data(format!("trajectory {}: {e}", r.id))))
        .collect()
}

pub fn network_build(nodes: &Path, edges: &Path, k: usize, out: &Path, revisions: Option<&Path>) -> Result<()> {
    let (net, report) = labeled_network(nodes, edges, k)?;
    write_with(out, |w| codec::write_labeled_edges(w, &net))?;
    if let Some(path) = revisions {
        write_with(path, |w| {
            writeln!(w, "edge,source,heading,interval,direction")?;
            for r in &report.revisions {
                writeln!(w, "{},{},{:.6},{},{}", r.edge, net.node(r.source).id, r.heading, r.interval, r.direction)?;
            }
            Ok(())
        })?;
    }
    println!(
        "labeled {} edges with K = {k}; {} revised (rate {:.6})",
        net.edge_count(),
        report.revisions.len(),
        report.rate()
    );
    Ok(())
}

pub fn network_stats(nodes: &Path, edges: &Path, k: usize) -> Result<()> {
    let (net, report) = labeled_network(nodes, edges, k)?;
    println!("nodes {}", net.node_count());
    println!("edges {}", net.edge_count());
    println!("K {k}");
    println!("revision rate {:.6} ({} of {} edges)", report.rate(), report.revisions.len(), report.total_edges);
    println!("out-degree histogram");
    println!("degree,nodes");
    for (d, n) in net.degree_histogram().iter().enumerate() {
        println!("{d},{n}");
    }
    Ok(())
}

pub struct SynthArgs<'a> {
    pub topology: &'a str,
    pub rule: &'a str,
    pub trajectories: usize,
    pub length: usize,
    pub drivers: usize,
    pub k: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub out: &'a Path,
}

pub fn synth(a: SynthArgs<'_>) -> Result<()> {
    let topology: SynthTopology = a.topology.parse().map_err(|e| CliError::Usage(format!("--topology: {e}")))?;
    let rule: RoutingRule = a.rule.parse().map_err(|e| CliError::Usage(format!("--rule: {e}")))?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CliError::Usage("--test-fraction must be in [0, 1)".into()));
    }
    let spec = SynthSpec {
        topology,
        rule,
        n_trajectories: a.trajectories,
        traj_length: a.length,
        drivers: a.drivers,
        seed: a.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (net, report) = label_network(gen_network(&spec)?, a.k)?;
    let corpus = gen_corpus(&net, &spec)?;
    write_with(&a.out.join("nodes.csv"), |w| write_nodes(w, &net))?;
    write_with(&a.out.join("edges.csv"), |w| write_edges(w, &net))?;
    write_with(&a.out.join("trajectories.csv"), |w| codec::write_trajectories(w, &corpus))?;
    if a.test_fraction > 0.0 {
        let n_test = (corpus.len() as f64 * a.test_fraction).round() as usize;
        let (tr, te) = corpus.split_at(corpus.len() - n_test);
        write_with(&a.out.join("train.csv"), |w| codec::write_trajectories(w, tr))?;
        write_with(&a.out.join("test.csv"), |w| codec::write_trajectories(w, te))?;
    }
    println!(
        "{} nodes, {} edges (revision rate {:.6}), {} trajectories written to {}",
        net.node_count(),
        net.edge_count(),
        report.rate(),
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

pub fn encode_cmd(nodes: &Path, edges: &Path, k: usize, trajectories: &Path, out: &Path) -> Result<()> {
    let (net, _) = labeled_network(nodes, edges, k)?;
    let records = load_trajectories(trajectories)?;
    let encoded = encode_all(&net, &records)?;
    let items: Vec<(String, EncodedTrajectory)> = records.into_iter().map(|r| r.id).zip(encoded).collect();
    write_with(out, |w| codec::write_encoded(w, &net, &items))?;
    println!("encoded {} trajectories", items.len());
    Ok(())
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| CliError::Usage(format!("missing required setting `{key}`")))?;
    Ok(p)
}

fn require_existing<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = require(p, key)?;
    if !p.exists() {
        return Err(CliError::Usage(format!("`{key}` path {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let nodes = require_existing(&cfg.nodes, "nodes")?;
    let edges = require_existing(&cfg.edges, "edges")?;
    let trajectories = require_existing(&cfg.trajectories, "trajectories")?;
    let val_path = match &cfg.val {
        Some(_) => Some(require_existing(&cfg.val, "val")?),
        None => None,
    };
    let out = require(&cfg.out, "out")?;
    cfg.train.validate()?;

    let (net, _) = labeled_network(nodes, edges, cfg.k)?;
    let topo = Topology::new(&net)?;
    let records = load_trajectories(trajectories)?;
    let corpus = encode_all(&net, &records)?;
    let val_corpus = match val_path {
        Some(p) => encode_all(&net, &load_trajectories(p)?)?,
        None => corpus.clone(),
    };
    let drivers = corpus.iter().chain(&val_corpus).map(|t| t.context.driver_id + 1).max().unwrap_or(1);
    let model_cfg = cfg.model_config(net.node_count(), drivers);
    let mut model = NetTraj::new(model_cfg, cfg.train.seed)?;
    let val: Vec<_> =
        tail_samples(&val_corpus, &topo, cfg.l_in, cfg.l_out)?.into_iter().map(|(_, s)| s).collect();

    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let conf = out.join("run.conf");
    std::fs::write(&conf, cfg.to_text()).map_err(|e| CliError::io(&conf, e))?;
    let dir = OutputDir(out.to_path_buf());
    train(&mut model, &topo, &corpus, &val, &cfg.train, Some(&dir), |log| match &log.val {
        Some(r) => println!(
            "epoch {:>3}  loss {:.4}  val AMR {:.2}  val DE {:.2}  lr {:.4}  alpha {:.3}",
            log.epoch, log.loss, r.amr, r.de, log.lr, log.alpha
        ),
        None => println!("epoch {:>3}  loss {:.4}  lr {:.4}  alpha {:.3}", log.epoch, log.loss, log.lr, log.alpha),
    })?;
    println!("model written to {}", dir.final_checkpoint().display());
    Ok(())
}

/// Which part of each trajectory the model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Input is the `l_in` edges before the last `l_out`; those are the truth.
    Tail,
    /// Input is the final `l_in` edges; predicts past the end.
    Last,
}

struct Windows {
    ids: Vec<String>,
    inputs: Vec<InputWindow>,
    truth: Vec<Vec<EdgeId>>,
    skipped: usize,
}

fn windows(
    model: &NetTraj,
    topo: &Topology,
    net: &RoadNetwork,
    records: &[TrajectoryRecord],
    mode: WindowMode,
) -> Result<Windows> {
    let (l_in, l_out) = (model.config().l_in, model.config().l_out);
    let mut w = Windows { ids: Vec::new(), inputs: Vec::new(), truth: Vec::new(), skipped: 0 };
    for (r, t) in records.iter().zip(encode_all(net, records)?) {
        let (input, truth) = match mode {
            WindowMode::Tail => match tail_sample(&t, topo, l_in, l_out)? {
                Some(s) => (s.input, s.target_edges),
                None => {
                    w.skipped += 1;
                    continue;
                }
            },
            WindowMode::Last => match last_window(&t, topo, l_in)? {
                Some(i) => (i, Vec::new()),
                None => {
                    w.skipped += 1;
                    continue;
                }
            },
        };
        w.ids.push(r.id.clone());
        w.inputs.push(input);
        w.truth.push(truth);
    }
    if w.skipped > 0 {
        eprintln!("skipped {} trajectories shorter than the window", w.skipped);
    }
    Ok(w)
}

fn load_model(nodes: &Path, edges: &Path, model: &Path) -> Result<(NetTraj, RoadNetwork, Topology)> {
    let model = NetTraj::load(model)?;
    let (net, _) = labeled_network(nodes, edges, model.config().k)?;
    let topo = Topology::new(&net)?;
    model.check_topology(&topo)?;
    Ok((model, net, topo))
}

pub struct PredictArgs<'a> {
    pub nodes: &'a Path,
    pub edges: &'a Path,
    pub model: &'a Path,
    pub trajectories: &'a Path,
    pub out: &'a Path,
    pub truth_out: Option<&'a Path>,
    pub mode: WindowMode,
    pub masked: bool,
}

pub fn predict(a: PredictArgs<'_>) -> Result<()> {
    if a.truth_out.is_some() && a.mode == WindowMode::Last {
        return Err(CliError::Usage("--truth-out needs --mode tail".into()));
    }
    let (model, net, topo) = load_model(a.nodes, a.edges, a.model)?;
    let records = load_trajectories(a.trajectories)?;
    let w = windows(&model, &topo, &net, &records, a.mode)?;
    let preds = model.predict(&topo, &w.inputs, a.masked)?;
    let rows: Vec<_> = w.ids.iter().cloned().zip(preds.into_iter().map(|p| p.edges)).collect();
    write_edge_seqs(a.out, &rows)?;
    if let Some(path) = a.truth_out {
        let truth: Vec<_> = w.ids.iter().cloned().zip(w.truth).collect();
        write_edge_seqs(path, &truth)?;
    }
    println!("predicted {} trajectories", rows.len());
    Ok(())
}

pub fn evaluate(pred: &Path, truth: &Path, out: Option<&Path>, details: Option<&Path>) -> Result<()> {
    let truth = read_edge_seqs(truth)?;
    let mut by_id: HashMap<String, Vec<EdgeId>> = HashMap::new();
    for (id, edges) in read_edge_seqs(pred)? {
        if by_id.insert(id.clone(), edges).is_some() {
            return Err(CliError::Data(format!("duplicate prediction for {id}")));
        }
    }
    let known: std::collections::HashSet<&str> = truth.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(id) = by_id.keys().find(|id| !known.contains(id.as_str())) {
        return Err(CliError::Data(format!("prediction for {id} has no ground truth")));
    }
    let ids: Vec<String> = truth.iter().map(|(id, _)| id.clone()).collect();
    let pred: Vec<Vec<EdgeId>> = ids.iter().map(|id| by_id.remove(id).unwrap_or_default()).collect();
    let truth: Vec<Vec<EdgeId>> = truth.into_iter().map(|(_, t)| t).collect();
    let report = compute_metrics(&pred, &truth)?;
    print!("{report}");
    if let Some(path) = out {
        write_with(path, |w| report.write_csv(w))?;
    }
    if let Some(path) = details {
        write_with(path, |w| write_details(w, &ids, &pred, &truth))?;
    }
    Ok(())
}

pub struct BaselineArgs<'a> {
    pub nodes: &'a Path,
    pub edges: &'a Path,
    pub train: &'a Path,
    pub test: &'a Path,
    pub l_in: usize,
    pub l_out: usize,
    pub out: &'a Path,
    pub truth_out: Option<&'a Path>,
    pub report: Option<&'a Path>,
}

/// First-order Markov baseline scored on the same tail windows as the
/// model: the last input edge seeds `l_out` greedy steps.
pub fn baseline_mc(a: BaselineArgs<'_>) -> Result<()> {
    if a.l_in == 0 || a.l_out == 0 {
        return Err(CliError::Usage("--l-in and --l-out must be positive".into()));
    }
    let net = RoadNetwork::load(a.nodes, a.edges)?.compute_headings()?;
    let train = load_trajectories(a.train)?;
    let test = load_trajectories(a.test)?;
    for r in train.iter().chain(&test) {
        for e in &r.edges {
            net.try_edge(*e).map_err(|err| CliError::Data(format!("trajectory {}: {err}", r.id)))?;
        }
    }
    let mc = MarkovModel::fit(train.iter().map(|r| r.edges.as_slice()));
    let (mut rows, mut truth_rows) = (Vec::new(), Vec::new());
    for r in test.iter().filter(|r| r.edges.len() >= a.l_in + a.l_out) {
        let split = r.edges.len() - a.l_out;
        let pred = mc.predict(&net, r.edges[split - 1], a.l_out);
        rows.push((r.id.clone(), pred.edges));
        truth_rows.push((r.id.clone(), r.edges[split..].to_vec()));
    }
    write_edge_seqs(a.out, &rows)?;
    if let Some(path) = a.truth_out {
        write_edge_seqs(path, &truth_rows)?;
    }
    let pred: Vec<_> = rows.into_iter().map(|(_, p)| p).collect();
    let truth: Vec<_> = truth_rows.into_iter().map(|(_, t)| t).collect();
    let report = compute_metrics(&pred, &truth)?;
    print!("{report}");
    if let Some(path) = a.report {
        write_with(path, |w| report.write_csv(w))?;
    }
    Ok(())
}

pub struct AttnArgs<'a> {
    pub nodes: &'a Path,
    pub edges: &'a Path,
    pub model: &'a Path,
    pub trajectories: &'a Path,
    pub out_dir: &'a Path,
    pub limit: Option<usize>,
    pub masked: bool,
}

/// Writes `spatial.csv` (one row per attended neighbor) and `temporal.csv`
/// (one row per decoder step, one column per window position) for the tail
/// window of each trajectory.
pub fn attn_dump(a: AttnArgs<'_>) -> Result<()> {
    let (model, net, topo) = load_model(a.nodes, a.edges, a.model)?;
    let mut records = load_trajectories(a.trajectories)?;
    if let Some(n) = a.limit {
        records.truncate(n);
    }
    let w = windows(&model, &topo, &net, &records, WindowMode::Tail)?;
    let (_, dump) = model.predict_with_attention(&topo, &w.inputs, a.masked)?;
    let node_id = |i: usize| net.nodes()[i].id;
    write_with(&a.out_dir.join("spatial.csv"), |f| {
        writeln!(f, "traj_id,phase,step,node,neighbor,weight")?;
        for r in &dump.spatial {
            let phase = match r.phase {
                Phase::Encoder => "encoder",
                Phase::Decoder => "decoder",
            };
            for (&n, wt) in r.neighbors.iter().zip(&r.weights) {
                writeln!(f, "{},{phase},{},{},{},{wt}", w.ids[r.sample], r.step, net.node(r.node).id, node_id(n))?;
            }
        }
        Ok(())
    })?;
    let l_in = model.config().l_in;
    write_with(&a.out_dir.join("temporal.csv"), |f| {
        write!(f, "traj_id,step")?;
        for j in 0..l_in {
            write!(f, ",w{j}")?;
        }
        writeln!(f)?;
        for (s, steps) in dump.temporal.iter().enumerate() {
            for (t, weights) in steps.iter().enumerate() {
                write!(f, "{},{t}", w.ids[s])?;
                for v in weights {
                    write!(f, ",{v}")?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    })?;
    println!(
        "{} spatial and {} temporal weight vectors written to {}",
        dump.spatial.len(),
        dump.temporal.iter().map(Vec::len).sum::<usize>(),
        a.out_dir.display()
    );
    Ok(())
}
