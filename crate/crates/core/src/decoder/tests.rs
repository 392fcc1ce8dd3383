use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::harness::features::synthesize_bev_features;
use crate::mapcore::{resample_polyline, MapInstance, MapScene};
use crate::ndgrad::gradcheck::{fd_check, random_vec};
use crate::ndgrad::{AdamW, AdamWConfig};
use crate::raster::rasterize_scene;

pub(crate) fn tiny() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        applied: 1,
        queries: 4,
        query_dim: 8,
        attn_dim: 4,
        ffn_hidden: 8,
        points: 4,
        map_h: 16,
        map_w: 8,
        features: FeatureSpec { h: 8, w: 4, fourier: vec![1.0], ..Default::default() },
        d_grl: 8,
        grl_h: 4,
        grl_w: 2,
        phi_hidden: 4,
        d_g: 6,
        ..Default::default()
    }
}

fn scene(cfg: &DecoderConfig, seed: u64) -> MapScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(-10.0..10.0);
    let x1 = rng.random_range(-10.0..10.0);
    let div = resample_polyline(&[[x0, -30.0], [x1, 30.0]], cfg.points).unwrap();
    let y = rng.random_range(-20.0..20.0);
    let bou = resample_polyline(&[[-15.0, y], [15.0, y + 2.0]], cfg.points).unwrap();
    MapScene::new(cfg.extent, vec![MapInstance::new(MapClass::Divider, div), MapInstance::new(MapClass::Boundary, bou)])
}

fn sample(cfg: &DecoderConfig, seed: u64) -> TrainSample {
    let s = scene(cfg, seed);
    TrainSample {
        mask: rasterize_scene(&s, &cfg.grid().unwrap(), cfg.raster_thickness).unwrap(),
        features: synthesize_bev_features(&s, &cfg.features, seed).unwrap(),
        scene: s,
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn all_outputs(cfg: &DecoderConfig, store: &ParamStore, features: &[f64]) -> Vec<u64> {
    let g = Graph::new();
    let out = decoder_forward(&g, cfg, store, features).unwrap();
    let mut v = Vec::new();
    for l in &out.layers {
        v.extend(bits(&l.class_logits.to_vec()));
        v.extend(bits(&l.points.to_vec()));
        if let Some(m) = l.global_logits {
            v.extend(bits(&m.to_vec()));
        }
    }
    v
}

#[test]
fn applied_layers_follow_config() {
    let cfg = DecoderConfig::default();
    let store = init_params(&cfg).unwrap();
    let s = sample(&cfg, 1);
    let g = Graph::new();
    let out = decoder_forward(&g, &cfg, &store, &s.features).unwrap();
    assert_eq!(out.layers.len(), 6);
    let active: Vec<usize> = out.layers.iter().enumerate().filter(|(_, l)| l.global_logits.is_some()).map(|(k, _)| k).collect();
    assert_eq!(active, vec![0, 1]);

    let all = DecoderConfig { layers: 6, applied: 6, ..tiny() };
    let store = init_params(&all).unwrap();
    let s = sample(&all, 1);
    let g = Graph::new();
    let out = decoder_forward(&g, &all, &store, &s.features).unwrap();
    assert!(out.layers.iter().all(|l| l.global_logits.is_some()));

    assert!(init_params(&DecoderConfig { applied: 7, ..Default::default() }).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let s = sample(&cfg, 3);
    let a = all_outputs(&cfg, &init_params(&cfg).unwrap(), &s.features);
    let b = all_outputs(&cfg, &init_params(&cfg).unwrap(), &s.features);
    assert_eq!(a, b);
}

#[test]
fn zero_heads_put_points_at_center() {
    let cfg = tiny();
    let mut store = init_params(&cfg).unwrap();
    for name in ["head.pts.1.weight", "head.pts.1.bias"] {
        let n = store.get(name).unwrap().value.len();
        store.set(name, vec![0.0; n]).unwrap();
    }
    let s = sample(&cfg, 0);
    let g = Graph::new();
    let out = decoder_forward(&g, &cfg, &store, &s.features).unwrap();
    let preds = out.layers[1].instances();
    assert_eq!(preds.len(), cfg.queries);
    for p in preds {
        assert!(p.points.iter().all(|pt| *pt == cfg.extent.center()));
    }
}

#[test]
fn heads_are_per_query() {
    let cfg = DecoderConfig { point_queries: false, ..tiny() };
    let store = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let qv = random_vec(&mut rng, 32);
    let run = |v: Vec<f64>| {
        let g = Graph::new();
        let q = QuerySet::new(0, g.leaf(v, &[4, 8], false)).unwrap();
        let (c, p) = predict_instances(&cfg, &store, &q).unwrap();
        (c.to_vec(), p.to_vec())
    };
    let (c0, p0) = run(qv.clone());
    let mut moved = qv;
    moved[2 * 8 + 3] += 0.5;
    let (c1, p1) = run(moved);
    for i in 0..4 {
        let same = c0[i * 4..(i + 1) * 4] == c1[i * 4..(i + 1) * 4] && p0[i * 8..(i + 1) * 8] == p1[i * 8..(i + 1) * 8];
        assert_eq!(same, i != 2, "query {i}");
    }
}

#[test]
fn unapplied_layer_parameters_are_never_read() {
    let cfg = DecoderConfig { layers: 4, applied: 2, ..tiny() };
    let store = init_params(&cfg).unwrap();
    let s = sample(&cfg, 2);
    let base = all_outputs(&cfg, &store, &s.features);
    let mut perturbed = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| ["grl.2.", "grl.3.", "grg.2.", "grg.3."].iter().any(|p| n.starts_with(p)))
        .map(String::from)
        .collect();
    assert!(!names.is_empty());
    for n in names {
        perturbed.values_mut(&n).unwrap().iter_mut().for_each(|v| *v = *v * 3.0 + 1.0);
    }
    assert_eq!(base, all_outputs(&cfg, &perturbed, &s.features));
}

fn two_point_scene(points: Vec<[f64; 2]>) -> MapScene {
    MapScene::new(Default::default(), vec![MapInstance::new(MapClass::Divider, points)])
}

#[test]
fn detection_loss_examples() {
    let gt_pts = vec![[0.0, 0.0], [1.0, 2.0], [3.0, 3.0]];
    let gt = two_point_scene(gt_pts.clone());
    let m = MatchResult { assignment: vec![1], total_cost: 0.0, pair_costs: vec![0.0] };
    let g = Graph::new();
    // query 1 predicts the divider confidently; query 0 predicts background
    let logits = g.leaf(vec![-20.0, -20.0, -20.0, 20.0, 20.0, -20.0, -20.0, -20.0], &[2, 4], true);
    let flat: Vec<f64> = gt_pts.iter().flatten().copied().collect();
    let mut pv = vec![9.0; 6];
    pv.extend(&flat);
    let pts = g.leaf(pv.clone(), &[2, 6], true);
    let w = DetLossWeights::default();
    assert!(detection_loss(logits, pts, &gt, &m, &w).unwrap().item() < 1e-3);

    let rev = two_point_scene(gt_pts.iter().rev().copied().collect());
    let a = detection_loss(logits, pts, &gt, &m, &w).unwrap().item();
    let b = detection_loss(logits, pts, &rev, &m, &w).unwrap().item();
    assert_eq!(a, b);

    let shifted: Vec<f64> = pv.iter().enumerate().map(|(i, v)| if i >= 6 && i % 2 == 0 { v + 1.0 } else { *v }).collect();
    let pts = g.leaf(shifted, &[2, 6], true);
    let only_l1 = DetLossWeights { classification: false, ..w };
    let l1 = detection_loss(logits, pts, &gt, &m, &only_l1).unwrap().item();
    assert!((l1 - 5.0).abs() < 1e-12, "{l1}");
}

#[test]
fn one_step_reduces_loss_on_most_seeds() {
    let mut improved = 0;
    for seed in 0..20 {
        let cfg = DecoderConfig { init_seed: seed, ..tiny() };
        let batch = vec![sample(&cfg, 100 + seed), sample(&cfg, 200 + seed)];
        let mut state = TrainState { store: init_params(&cfg).unwrap(), opt: AdamW::new(AdamWConfig::default()), step: 0 };
        let before = train_step(&cfg, &mut state, &batch, 1e-3).unwrap().total;
        let g = Graph::new();
        let after: f64 = batch.iter().map(|s| scene_loss(&g, &cfg, &state.store, s).unwrap().total.item()).sum::<f64>() / 2.0;
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 18, "{improved}/20");
}

#[test]
fn training_trajectory_is_deterministic() {
    let cfg = tiny();
    let batch = vec![sample(&cfg, 5)];
    let run = || {
        let mut state = TrainState { store: init_params(&cfg).unwrap(), opt: AdamW::new(AdamWConfig::default()), step: 0 };
        let mut snaps = Vec::new();
        for _ in 0..3 {
            train_step(&cfg, &mut state, &batch, 1e-3).unwrap();
            snaps.push(state.store.to_checkpoint_json().unwrap());
        }
        snaps
    };
    assert_eq!(run(), run());
}

#[test]
fn baseline_weights_reduce_to_plain_detection() {
    let cfg = DecoderConfig { lambda_global: 0.0, grg_enabled: false, ..tiny() };
    assert_eq!(layer_weights(&cfg, 0), (0.0, 1.0));
    let on = tiny();
    assert_eq!(layer_weights(&on, 0), (1.0, 0.1));
    assert_eq!(layer_weights(&on, 1), (0.0, 1.0));
    let s = sample(&cfg, 1);
    let g = Graph::new();
    let out = decoder_forward(&g, &cfg, &init_params(&cfg).unwrap(), &s.features).unwrap();
    assert!(out.layers.iter().all(|l| l.global_logits.is_none()));
}

#[test]
fn composed_graph_matches_finite_differences() {
    let cfg = DecoderConfig { weaken: 0.0, ..tiny() };
    for seed in 0..3 {
        let cfg = DecoderConfig { init_seed: seed, ..cfg.clone() };
        let store = init_params(&cfg).unwrap();
        let s = sample(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = random_vec(&mut rng, 4 * 4 + 4 * 8);
        let names = ["query.embed", "grl.0.proj.1.weight", "grg.0.fuse.0.weight"];
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = names
            .iter()
            .map(|n| {
                let p = store.get(n).unwrap();
                (p.value.as_ref().clone(), p.shape.clone())
            })
            .collect();
        let err = fd_check(&inputs, |ts| {
            let g = ts[0].graph();
            for (n, t) in names.iter().zip(ts) {
                g.bind_param(n, *t);
            }
            let out = decoder_forward(g, &cfg, &store, &s.features)?;
            let last = out.layers.last().unwrap();
            let heads = Tensor::concat_cols(&[last.class_logits, last.points])?.flatten();
            let lg = crate::grl::global_loss(out.layers[0].global_logits.unwrap(), &s.mask)?;
            heads.mul(g.constant(proj.clone(), &[proj.len()]))?.sum().add(lg)
        });
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}
