mod common;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use septa_core::encoders::{GraphEncoder, HashTextEmbedder, TextEmbedder};
use septa_core::sampler::{bfs_sample, SamplerConfig, Subgraph};
use septa_core::KnowledgeGraph;

use common::{random_graph, random_matrix, rng};

/// Per-node loop over the induced edges, written without matrices.
fn encode_by_hand(enc: &GraphEncoder, graph: &KnowledgeGraph, s: &Subgraph) -> Vec<f64> {
    let n = s.nodes.len();
    let pos = |v: usize| s.nodes.iter().position(|&x| x == v).unwrap();
    // (neighbor position, relation) per incidence, self-loops counted once
    let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for &e in &s.edges {
        let t = graph.triple(e);
        let (a, b) = (pos(t.head), pos(t.tail));
        incident[a].push((b, t.relation));
        if a != b {
            incident[b].push((a, t.relation));
        }
    }
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| s.features.row(i).to_vec()).collect();
    for layer in &enc.layers {
        let out = layer.w_self.nrows();
        let mut next = vec![vec![0.0; out]; n];
        for i in 0..n {
            for o in 0..out {
                let mut z = layer.bias[o];
                for (c, x) in h[i].iter().enumerate() {
                    z += layer.w_self[[o, c]] * x;
                }
                if !incident[i].is_empty() {
                    let mut msg = 0.0;
                    for &(j, r) in &incident[i] {
                        let mut m = layer.relation[[r, o]];
                        for (c, x) in h[j].iter().enumerate() {
                            m += layer.w_neigh[[o, c]] * x;
                        }
                        msg += m;
                    }
                    z += msg / incident[i].len() as f64;
                }
                next[i][o] = z.max(0.0);
            }
        }
        h = next;
    }
    let width = h[0].len();
    (0..width).map(|c| h.iter().map(|row| row[c]).sum::<f64>() / n as f64).collect()
}

fn featured_graph(seed: u64, d: usize) -> KnowledgeGraph {
    let mut r = rng(seed);
    let g = random_graph(seed, 15, 3, 40);
    let f = random_matrix(&mut r, g.num_nodes(), d);
    g.with_features(f).unwrap()
}

#[test]
fn encoder_matches_hand_unrolled_loops() {
    for seed in 0..20 {
        let g = featured_graph(seed, 5);
        let enc = GraphEncoder::init(&mut rng(seed + 100), 5, 6, 3, 2);
        let config = SamplerConfig::default();
        for center in 0..g.num_nodes() {
            let s = bfs_sample(&g, center, &config, &mut config.rng_for_center(center)).unwrap();
            let got = enc.encode(&g, &s).unwrap();
            let want = encode_by_hand(&enc, &g, &s);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed} center {center}");
            }
        }
    }
}

#[test]
fn encoder_ignores_node_order() {
    let mut r = rng(3);
    for seed in 0..10 {
        let g = featured_graph(seed, 4);
        let enc = GraphEncoder::init(&mut rng(seed), 4, 4, 3, 2);
        let config = SamplerConfig { p: 1.0, ..Default::default() };
        let s = bfs_sample(&g, 0, &config, &mut config.rng_for_center(0)).unwrap();
        let base = enc.encode(&g, &s).unwrap();
        let mut nodes = s.nodes.clone();
        nodes.shuffle(&mut r);
        let shuffled = Subgraph::induced(&g, nodes).unwrap();
        let moved = enc.encode(&g, &shuffled).unwrap();
        for (a, b) in base.iter().zip(moved.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_output_finite_over_random_draws() {
    let g = featured_graph(1, 6);
    let config = SamplerConfig::default();
    let mut r = rng(8);
    for draw in 0..1000u64 {
        let enc = GraphEncoder::init(&mut rng(draw), 6, 5, 3, r.gen_range(1..4));
        let center = r.gen_range(0..g.num_nodes());
        let s = bfs_sample(&g, center, &config, &mut config.rng_for_center(center)).unwrap();
        let out = enc.encode(&g, &s).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn text_embedding_is_unit_and_stable() {
    let emb = HashTextEmbedder::new(32, 0);
    let a = emb.embed("bird can fly. bird is at nest.");
    assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
    assert_eq!(a, emb.embed("Bird  can fly. BIRD is at nest."));
    // repeated n-grams count once
    assert_eq!(emb.embed("bird can bird"), emb.embed("bird can bird can"));
    let empty: Array1<f64> = emb.embed("");
    assert!(empty.iter().all(|&x| x == 0.0));
    assert_ne!(emb.embed("bird"), HashTextEmbedder::new(32, 1).embed("bird"));
}

#[test]
fn wrong_feature_width_is_rejected() {
    let g = featured_graph(0, 4);
    let enc = GraphEncoder::init(&mut rng(0), 5, 4, 3, 2);
    let config = SamplerConfig::default();
    let s = bfs_sample(&g, 0, &config, &mut config.rng_for_center(0)).unwrap();
    assert!(enc.encode(&g, &s).is_err());
}
