use super::*;
use crate::codec::label_network;
use crate::network::{EdgeRecord, NodeRecord, RoadNetwork};

fn build(coords: &[(f64, f64)], links: &[(usize, usize)]) -> RoadNetwork {
    let nodes = coords.iter().enumerate().map(|(i, &(lat, lon))| NodeRecord { id: i as u64, lat, lon }).collect();
    let edges = links
        .iter()
        .enumerate()
        .map(|(i, &(s, t))| EdgeRecord::new(EdgeId(i), NodeIdx(s), NodeIdx(t)))
        .collect();
    let net = RoadNetwork::from_records(nodes, edges).unwrap();
    label_network(net, 8).unwrap().0
}

fn grid(w: usize, h: usize) -> RoadNetwork {
    let coords: Vec<(f64, f64)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (31.0 + 0.01 * y as f64, 121.0 + 0.01 * x as f64))).collect();
    let mut links = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let n = y * w + x;
            if x + 1 < w {
                links.push((n, n + 1));
                links.push((n + 1, n));
            }
            if y + 1 < h {
                links.push((n, n + w));
                links.push((n + w, n));
            }
        }
    }
    build(&coords, &links)
}

fn toy(node_vocab: usize, variant: Variant) -> ModelConfig {
    ModelConfig {
        k: 8,
        node_dim: 6,
        dir_dim: 5,
        hidden: 7,
        layers: 2,
        time_dim: 3,
        weather_dim: 2,
        driver_dim: 4,
        l_in: 3,
        l_out: 2,
        node_vocab,
        driver_vocab: 3,
        variant,
    }
}

fn ctx() -> ContextFeatures {
    ContextFeatures { time_slot: 5, weather: 1, driver_id: 2 }
}

/// Splits a node path of `l_in + l_out + 1` nodes into a sample.
fn sample_on(net: &RoadNetwork, cfg: &ModelConfig, path: &[usize]) -> TrainSample {
    let edges: Vec<EdgeId> =
        path.windows(2).map(|p| net.edge_between(NodeIdx(p[0]), NodeIdx(p[1])).unwrap()).collect();
    let enc = crate::codec::encode(net, &edges, ctx()).unwrap();
    let l_in = cfg.l_in;
    TrainSample {
        input: InputWindow {
            nodes: enc.nodes[1..=l_in].to_vec(),
            directions: enc.directions[..l_in].to_vec(),
            context: ctx(),
        },
        target_nodes: enc.nodes[l_in + 1..].to_vec(),
        target_directions: enc.directions[l_in..].to_vec(),
        target_edges: edges[l_in..].to_vec(),
    }
}

fn set(model: &mut NetTraj, name: &str, f: impl Fn(usize, usize) -> f32) {
    let id = model.params().id(name).unwrap();
    let t = model.params_mut().value_mut(id);
    let cols = t.cols();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i / cols, i % cols);
    }
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
    assert_eq!("No-SA".parse::<Variant>().unwrap(), Variant::NoSa);
    assert!("nope".parse::<Variant>().is_err());
}

#[test]
fn defaults_and_validation() {
    let cfg = ModelConfig::new(10, 2);
    assert_eq!((cfg.k, cfg.node_dim, cfg.dir_dim, cfg.hidden, cfg.layers), (8, 256, 256, 512, 2));
    assert_eq!((cfg.time_dim, cfg.l_in, cfg.l_out), (32, 10, 5));
    let mut bad = toy(9, Variant::Full);
    bad.hidden = 0;
    assert!(matches!(NetTraj::new(bad, 0), Err(ModelError::Config(_))));
}

#[test]
fn shape_contract() {
    let cfg = toy(9, Variant::Full);
    assert_eq!(cfg.encoder_input_dim(), 2 * 6 + 5);
    assert_eq!(cfg.decoder_input_dim(), 2 * 6 + 5 + 7);
    assert_eq!(cfg.head_input_dim(), 7 + 3 + 2 + 4);
    assert_eq!(cfg.output_dim(), 8);
    let model = NetTraj::new(cfg, 1).unwrap();
    let p = model.params();
    assert_eq!(p.value(p.id("spatial_score").unwrap()).shape(), [17, 1]);
    assert_eq!(p.value(p.id("temporal_score").unwrap()).shape(), [5 * 7, 1]);
    assert_eq!(p.value(p.id("decoder.l0.w_ih").unwrap()).shape(), [24, 28]);
    assert_eq!(p.value(p.id("encoder.l1.w_ih").unwrap()).shape(), [7, 28]);
    assert_eq!(p.value(p.id("ctx.driver").unwrap()).shape(), [4, 4]);

    let nota = toy(9, Variant::NoTa);
    assert_eq!(nota.decoder_input_dim(), nota.encoder_input_dim());
    let nodtr = toy(9, Variant::NoDtr);
    assert_eq!(nodtr.encoder_input_dim(), 12);
    assert_eq!(nodtr.output_dim(), 9);
    let m = NetTraj::new(nodtr, 1).unwrap();
    assert!(m.params().id("direction_embedding").is_none());
    assert_eq!(m.params().value(m.params().id("spatial_score").unwrap()).shape(), [12, 1]);
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = NetTraj::new(toy(9, Variant::Full), 7).unwrap();
    let b = NetTraj::new(toy(9, Variant::Full), 7).unwrap();
    let c = NetTraj::new(toy(9, Variant::Full), 8).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
    for (_, _, t) in a.params().iter() {
        assert!(t.data().iter().all(|v| v.abs() <= INIT_BOUND));
    }
}

#[test]
fn embedding_lookups() {
    let model = NetTraj::new(toy(9, Variant::Full), 3).unwrap();
    let mut tape = Tape::new(model.params());
    let (v_n, v_r) = model.embed(&mut tape, &[NodeIdx(4), NodeIdx(4), NodeIdx(5)], &[1, 1, 2]).unwrap();
    let v = tape.value(v_n).clone();
    assert_eq!(v.row_slice(0), v.row_slice(1));
    assert_ne!(v.row_slice(0), v.row_slice(2));
    assert_eq!(tape.value(v_r.unwrap()).shape(), [3, 5]);
    assert!(matches!(
        model.embed(&mut tape, &[NodeIdx(9)], &[0]),
        Err(ModelError::Index { what: "node", index: 9, .. })
    ));
    assert!(matches!(model.embed(&mut tape, &[NodeIdx(0)], &[8]), Err(ModelError::Index { what: "direction", .. })));
}

#[test]
fn embedding_gradient_touches_only_looked_up_rows() {
    let model = NetTraj::new(toy(9, Variant::Full), 3).unwrap();
    let mut tape = Tape::new(model.params());
    let (v_n, _) = model.embed(&mut tape, &[NodeIdx(2), NodeIdx(6)], &[0, 0]).unwrap();
    let loss = tape.sum(v_n).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(model.params().id("node_embedding").unwrap()).unwrap();
    for (row, chunk) in g.chunks(6).enumerate() {
        let expected = if row == 2 || row == 6 { 1.0 } else { 0.0 };
        assert!(chunk.iter().all(|&v| v == expected), "row {row}");
    }
}

#[test]
fn single_neighbor_takes_all_weight() {
    // 0 -> 1 -> 2, node 1 has the single neighbor 2
    let net = build(&[(31.0, 121.0), (31.01, 121.0), (31.02, 121.0)], &[(0, 1), (1, 2)]);
    let topo = Topology::new(&net).unwrap();
    let model = NetTraj::new(toy(3, Variant::Full), 5).unwrap();
    let out = model.spatial_attention_at(&topo, NodeIdx(1), 0).unwrap();
    assert_eq!(out.neighbors, vec![2]);
    assert_eq!(out.weights, vec![1.0]);
    let table = model.params().value(model.params().id("node_embedding").unwrap());
    assert_eq!(out.context, table.row_slice(2));

    let dead = model.spatial_attention_at(&topo, NodeIdx(2), 0).unwrap();
    assert!(dead.isolated && dead.weights.is_empty());
    assert!(dead.context.iter().all(|&v| v == 0.0));
}

#[test]
fn equal_neighbor_embeddings_split_evenly() {
    let net = grid(3, 1);
    let topo = Topology::new(&net).unwrap();
    let mut model = NetTraj::new(toy(3, Variant::Full), 5).unwrap();
    set(&mut model, "node_embedding", |r, c| if r == 1 { 0.3 } else { 0.05 * c as f32 });
    let out = model.spatial_attention_at(&topo, NodeIdx(1), 1).unwrap();
    assert_eq!(out.neighbors.len(), 2);
    assert!((out.weights[0] - 0.5).abs() < 1e-6 && (out.weights[1] - 0.5).abs() < 1e-6);
}

#[test]
fn direction_changes_spatial_weights_unless_fsa() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let center = NodeIdx(4);
    let full = NetTraj::new(toy(9, Variant::Full), 11).unwrap();
    let a = full.spatial_attention_at(&topo, center, 0).unwrap();
    let b = full.spatial_attention_at(&topo, center, 4).unwrap();
    assert!(a.weights.iter().zip(&b.weights).any(|(x, y)| (x - y).abs() > 1e-6));
    for out in [&a, &b] {
        let s: f32 = out.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-6 && out.weights.iter().all(|&w| w >= 0.0));
    }

    let fsa = NetTraj::new(toy(9, Variant::Fsa), 11).unwrap();
    let a = fsa.spatial_attention_at(&topo, center, 0).unwrap();
    let b = fsa.spatial_attention_at(&topo, center, 4).unwrap();
    assert_eq!(a.weights, b.weights);

    let nosa = NetTraj::new(toy(9, Variant::NoSa), 11).unwrap();
    let out = nosa.spatial_attention_at(&topo, center, 0).unwrap();
    assert!(out.context.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_parameters_give_zero_hidden_states() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(9, Variant::Full);
    let mut model = NetTraj::new(cfg.clone(), 1).unwrap();
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names {
        set(&mut model, &n, |_, _| 0.0);
    }
    let s = sample_on(&net, &cfg, &[0, 1, 2, 5, 8, 7]);
    let mut tape = Tape::new(model.params());
    let enc = model.encode_sequence(&mut tape, &topo, &[&s.input]).unwrap();
    assert_eq!(enc.outputs.len(), cfg.l_in);
    for v in enc.outputs.iter().chain(&enc.state.h).chain(&enc.state.c) {
        assert_eq!(tape.value(*v).shape(), [1, cfg.hidden]);
        assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn encoder_rejects_wrong_window_length() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(9, Variant::Full);
    let model = NetTraj::new(cfg.clone(), 1).unwrap();
    let mut s = sample_on(&net, &cfg, &[0, 1, 2, 5, 8, 7]);
    s.input.nodes.pop();
    let mut tape = Tape::new(model.params());
    assert!(matches!(
        model.encode_sequence(&mut tape, &topo, &[&s.input]),
        Err(ModelError::WindowLength { expected: 3, got: 2 })
    ));
}

#[test]
fn temporal_attention_window_rules() {
    let cfg = toy(9, Variant::Full);
    let mut model = NetTraj::new(cfg.clone(), 1).unwrap();
    set(&mut model, "temporal_score", |_, _| 0.0);
    let mut tape = Tape::new(model.params());
    let state = model.zero_state(&mut tape, 2).unwrap();
    let window: Vec<Var> = (0..cfg.l_in)
        .map(|j| tape.input(Tensor::from_vec(2, 7, (0..14).map(|i| (i + j) as f32 * 0.1).collect())).unwrap())
        .collect();
    let out = model.temporal_attention(&mut tape, &state, &window).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-6));
    assert!(matches!(
        model.temporal_attention(&mut tape, &state, &window[..2]),
        Err(ModelError::WindowUnderflow { expected: 3, got: 2 })
    ));

    // score = 100 * h_j[0]; the last state has the largest first entry
    let offset = 2 * cfg.layers * cfg.hidden;
    set(&mut model, "temporal_score", |r, _| if r == offset { 100.0 } else { 0.0 });
    let mut tape = Tape::new(model.params());
    let state = model.zero_state(&mut tape, 1).unwrap();
    let window: Vec<Var> = (0..cfg.l_in)
        .map(|j| tape.input(Tensor::row((0..7).map(|i| if i == 0 { j as f32 } else { i as f32 - j as f32 }).collect())).unwrap())
        .collect();
    let out = model.temporal_attention(&mut tape, &state, &window).unwrap();
    let u = tape.value(out.context).data().to_vec();
    let last = tape.value(window[2]).data().to_vec();
    for (a, b) in u.iter().zip(&last) {
        assert!((a - b).abs() < 1e-4, "{u:?} vs {last:?}");
    }
}

#[test]
fn decode_step_distribution() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(9, Variant::Full);
    let mut model = NetTraj::new(cfg.clone(), 2).unwrap();
    let s = sample_on(&net, &cfg, &[0, 1, 2, 5, 8, 7]);

    let probs_for = |model: &NetTraj, driver: usize| {
        let mut tape = Tape::new(model.params());
        let enc = model.encode_sequence(&mut tape, &topo, &[&s.input]).unwrap();
        let mut c = ctx();
        c.driver_id = driver;
        let context = model.embed_context(&mut tape, &[c]).unwrap();
        let n = s.input.last_node();
        let d = *s.input.directions.last().unwrap();
        let step = model.decode_step(&mut tape, &topo, &[n], &[d], &enc.state, &enc.outputs, context).unwrap();
        tape.value(step.probs).data().to_vec()
    };
    let p = probs_for(&model, 0);
    assert_eq!(p.len(), 8);
    assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert_ne!(p, probs_for(&model, 1));

    set(&mut model, "output.w", |_, _| 0.0);
    assert!(probs_for(&model, 0).iter().all(|&v| (v - 0.125).abs() < 1e-7));
}

#[test]
fn unseen_driver_uses_reserved_row() {
    let model = NetTraj::new(toy(9, Variant::Full), 2).unwrap();
    assert_eq!(model.driver_row(0), 1);
    assert_eq!(model.driver_row(2), 3);
    assert_eq!(model.driver_row(3), 0);
    assert_eq!(model.driver_row(1000), 0);
}

#[test]
fn single_path_network_is_followed() {
    // a directed ring: every node has exactly one way out
    let coords: Vec<(f64, f64)> = (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 8.0;
            (31.0 + 0.01 * a.cos(), 121.0 + 0.01 * a.sin())
        })
        .collect();
    let links: Vec<(usize, usize)> = (0..8).map(|i| (i, (i + 1) % 8)).collect();
    let net = build(&coords, &links);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(8, Variant::Full);
    let model = NetTraj::new(cfg.clone(), 9).unwrap();
    let s = sample_on(&net, &cfg, &[0, 1, 2, 3, 4, 5]);
    let pred = model.predict(&topo, &[s.input.clone()], true).unwrap();
    assert_eq!(pred[0].edges, s.target_edges);
    assert_eq!(pred[0].invalid_at, None);
}

fn corpus(net: &RoadNetwork, cfg: &ModelConfig, n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.l_in + cfg.l_out + 1;
    (0..n)
        .map(|_| {
            let mut path = vec![rng.gen_range(0..net.node_count())];
            while path.len() < len {
                let out = net.out_edge_ids(NodeIdx(*path.last().unwrap()));
                let e = out[rng.gen_range(0..out.len())];
                path.push(net.edge(e).target.0);
            }
            sample_on(net, cfg, &path)
        })
        .collect()
}

#[test]
fn masked_prediction_is_always_valid() {
    let net = grid(4, 4);
    let topo = Topology::new(&net).unwrap();
    for variant in Variant::ALL {
        let cfg = toy(16, variant);
        let model = NetTraj::new(cfg.clone(), 4).unwrap();
        let inputs: Vec<InputWindow> = corpus(&net, &cfg, 150, 1).into_iter().map(|s| s.input).collect();
        let masked = model.predict(&topo, &inputs, true).unwrap();
        assert!(masked.iter().all(|p| p.invalid_at.is_none() && p.edges.len() == cfg.l_out), "{variant}");
        let unmasked = model.predict(&topo, &inputs, false).unwrap();
        for p in &unmasked {
            match p.invalid_at {
                Some(i) => assert_eq!(p.edges.len(), i),
                None => assert_eq!(p.edges.len(), cfg.l_out),
            }
        }
    }
}

#[test]
fn greedy_output_matches_manual_replay() {
    let net = grid(4, 4);
    let topo = Topology::new(&net).unwrap();
    for variant in [Variant::Full, Variant::NoDtr, Variant::Fta] {
        let cfg = toy(16, variant);
        let model = NetTraj::new(cfg.clone(), 21).unwrap();
        for s in corpus(&net, &cfg, 20, 2) {
            let pred = &model.predict(&topo, &[s.input.clone()], true).unwrap()[0];
            // Replay the decoded tokens as teacher-forced targets.
            let mut replay = s.clone();
            let mut node = s.input.last_node();
            for (i, &e) in pred.edges.iter().enumerate() {
                let rec = net.edge(e);
                assert_eq!(rec.source, node);
                replay.target_nodes[i] = rec.target;
                replay.target_directions[i] = rec.direction.unwrap();
                node = rec.target;
            }
            let probs = model.teacher_forced_probs(&topo, &replay).unwrap();
            let mut node = s.input.last_node();
            for (i, row) in probs.iter().enumerate() {
                let mut best = None;
                for c in 0..row.len() {
                    if model.resolve(&topo, node, c).is_some() && best.map_or(true, |b: usize| row[c] > row[b]) {
                        best = Some(c);
                    }
                }
                assert_eq!(Some(pred.classes[i]), best);
                node = replay.target_nodes[i];
            }
        }
    }
}

#[test]
fn batched_prediction_equals_one_at_a_time() {
    let net = grid(4, 4);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(16, Variant::Full);
    let model = NetTraj::new(cfg.clone(), 8).unwrap();
    let inputs: Vec<InputWindow> = corpus(&net, &cfg, 70, 3).into_iter().map(|s| s.input).collect();
    let all = model.predict(&topo, &inputs, false).unwrap();
    for (i, w) in inputs.iter().enumerate() {
        assert_eq!(model.predict(&topo, std::slice::from_ref(w), false).unwrap()[0], all[i]);
    }
}

#[test]
fn attention_dump_shapes() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(9, Variant::Full);
    let model = NetTraj::new(cfg.clone(), 8).unwrap();
    let inputs: Vec<InputWindow> = corpus(&net, &cfg, 4, 3).into_iter().map(|s| s.input).collect();
    let (_, dump) = model.predict_with_attention(&topo, &inputs, true).unwrap();
    assert_eq!(dump.spatial.len(), 4 * (cfg.l_in + cfg.l_out));
    assert_eq!(dump.temporal.len(), 4);
    for m in &dump.temporal {
        assert_eq!(m.len(), cfg.l_out);
        for row in m {
            assert_eq!(row.len(), cfg.l_in);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
    for r in &dump.spatial {
        assert_eq!(r.neighbors.len(), r.weights.len());
        assert!((r.weights.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn scheduled_sampling_counts() {
    let net = grid(4, 4);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(16, Variant::Full);
    let model = NetTraj::new(cfg.clone(), 8).unwrap();
    let samples = corpus(&net, &cfg, 10, 5);
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new(model.params());
    let out = model.forward_train(&mut tape, &topo, &refs, 1.0, 0.1, Some(&mut rng)).unwrap();
    assert_eq!((out.sampled, out.positions), (0, 20));
    tape.reset();
    let out = model.forward_train(&mut tape, &topo, &refs, 0.0, 0.1, Some(&mut rng)).unwrap();
    assert_eq!(out.sampled, 20);
    tape.reset();
    let out = model.forward_train(&mut tape, &topo, &refs, 1.0, 0.0, None).unwrap();
    let loss = tape.value(out.loss).item();
    let uniform = cfg.l_out as f32 * 8f32.ln();
    assert!((loss - uniform).abs() < 0.05 * uniform, "{loss} vs {uniform}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let net = grid(4, 4);
    let topo = Topology::new(&net).unwrap();
    let cfg = toy(16, Variant::Fta);
    let model = NetTraj::new(cfg.clone(), 8).unwrap();
    let inputs: Vec<InputWindow> = corpus(&net, &cfg, 30, 3).into_iter().map(|s| s.input).collect();
    let before = model.predict(&topo, &inputs, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = NetTraj::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.to_bytes(), model.to_bytes());
    assert_eq!(loaded.predict(&topo, &inputs, false).unwrap(), before);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = NetTraj::new(toy(9, Variant::Full), 8).unwrap();
    let bytes = model.to_bytes();
    assert!(matches!(NetTraj::from_bytes(&bytes[..bytes.len() - 1]), Err(ModelError::Checkpoint(_))));
    assert!(matches!(NetTraj::from_bytes(b"nope"), Err(ModelError::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(NetTraj::from_bytes(&extra).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 9;
    assert!(NetTraj::from_bytes(&bad_version).is_err());
}

#[test]
fn topology_must_match() {
    let net = grid(3, 3);
    let topo = Topology::new(&net).unwrap();
    let model = NetTraj::new(toy(10, Variant::Full), 8).unwrap();
    assert!(model.check_topology(&topo).is_err());
    let model = NetTraj::new(toy(9, Variant::Full), 8).unwrap();
    assert!(model.check_topology(&topo).is_ok());
}
