//! Reverse-mode gradients against central finite differences.

mod support;

use std::time::Instant;

use atei_core::atei::{AteiConfig, AteiMode, AteiNetwork, FcLayer};
use atei_core::encoder::{aggregate_mean, EncoderStack, Trace};
use atei_core::fusion::{classify, fuse, ClassifierHead, FusionStrategy, ModelLayout, TrainConfig};
use atei_core::graph::{Graph, NodeId, SeqMask};
use atei_core::optim::{ParamId, ParamStore};
use atei_core::rng::stream;
use atei_core::Scalar;
use support::{grad_check, GradCheck, ragged_batch, tiny_encoder, uniform, weighted_sum};

const H: f64 = 1e-3;

/// A graph touching every differentiable op, with all leaves as parameters.
fn op_soup<F: Scalar>(store: &ParamStore<F>, p: &[ParamId]) -> (Graph<F>, NodeId) {
    let mask = SeqMask::new(2, 3, vec![true, true, false, true, true, true]).unwrap();
    let mut g = Graph::new();
    let [x, w, b, gamma, gain, bias, wq, wk, wv, wc] = std::array::from_fn(|i| g.param(store, p[i]));
    let a = g.matmul(x, w).unwrap();
    let a = g.add_row(a, b).unwrap();
    let r = g.relu(a).unwrap();
    let r = g.mul_row(r, gamma).unwrap();
    let r = g.scale(r, F::of(0.7)).unwrap();
    let m = g.mul(r, a).unwrap();
    let s = g.add(m, a).unwrap();
    let n = g.layer_norm(s, gain, bias).unwrap();
    let keep: Vec<F> = (0..24).map(|i| if i % 5 == 0 { F::zero() } else { F::of(1.25) }).collect();
    let n = g.dropout(n, keep).unwrap();
    let q = g.matmul(n, wq).unwrap();
    let k = g.matmul(n, wk).unwrap();
    let v = g.matmul(n, wv).unwrap();
    let att = g.attention(q, k, v, 2, &mask, F::of(0.5)).unwrap();
    let cat = g.concat_cols(&[att, n]).unwrap();
    let pooled = g.segment_mean(cat, &mask).unwrap();
    let logits = g.matmul(pooled, wc).unwrap();
    let sm_mask = vec![true, false, true, true, true, true];
    let sm = g.softmax_masked(logits, Some(sm_mask)).unwrap();
    let ce = g.cross_entropy(logits, &[2, 0]).unwrap();
    let ws = weighted_sum(&mut g, sm, 1);
    let total = g.add(ce, ws).unwrap();
    (g, total)
}

fn op_soup_store<F: Scalar>() -> (ParamStore<F>, Vec<ParamId>) {
    let mut rng = stream(5, &[1]);
    let mut store = ParamStore::new();
    let shapes = [(6, 4), (4, 4), (1, 4), (1, 4), (1, 4), (1, 4), (4, 4), (4, 4), (4, 4), (8, 3)];
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), uniform(r, c, &mut rng).cast()))
        .collect();
    (store, ids)
}

#[test]
fn every_op_matches_finite_differences_in_f64() {
    let (mut store, ids) = op_soup_store::<f64>();
    grad_check(&mut store, &ids, H, |s| op_soup(s, &ids)).assert_within(1e-6, "op graph");
}

#[test]
fn every_op_matches_finite_differences_in_f32() {
    let (mut store, ids) = op_soup_store::<f32>();
    grad_check(&mut store, &ids, 1e-2, |s| op_soup(s, &ids)).assert_within(1e-3, "op graph");
}

#[test]
fn encoder_stack_gradients() {
    let cfg = tiny_encoder(8, 2, 1);
    let mut store = ParamStore::<f64>::new();
    let enc = EncoderStack::new(&mut store, "enc", 5, &cfg, &mut stream(2, &[0]));
    let ids = enc.param_ids();
    let mask = SeqMask::new(2, 4, vec![true, true, true, true, true, true, false, false]).unwrap();
    let x = uniform(8, 5, &mut stream(2, &[1]));
    let check = grad_check(&mut store, &ids, H, |s| {
        let mut g = Graph::new();
        let xi = g.input(x.clone()).unwrap();
        let h = enc.forward(&mut g, s, xi, &mask, &mut None, &mut Trace::default()).unwrap();
        let e = aggregate_mean(&mut g, h, &mask).unwrap();
        let out = weighted_sum(&mut g, e, 3);
        (g, out)
    });
    check.assert_within(1e-6, "encoder");
}

#[test]
fn atei_network_gradients() {
    let cfg = AteiConfig {
        encoder: tiny_encoder(4, 2, 1),
        fc_dim: 4,
    };
    let mut store = ParamStore::<f64>::new();
    let net = AteiNetwork::new(&mut store, "atei", (3, 2), &cfg, &mut stream(4, &[0]));
    let ids = net.param_ids();
    let mask_a = SeqMask::new(2, 3, vec![true, true, true, true, false, false]).unwrap();
    let mask_t = SeqMask::new(2, 2, vec![true, false, true, true]).unwrap();
    let xa = uniform(6, 3, &mut stream(4, &[1]));
    let xt = uniform(4, 2, &mut stream(4, &[2]));
    let check = grad_check(&mut store, &ids, H, |s| {
        let mut g = Graph::new();
        let a = g.input(xa.clone()).unwrap();
        let t = g.input(xt.clone()).unwrap();
        let nodes = net
            .forward(&mut g, s, (a, &mask_a), (t, &mask_t), &mut None, &mut Trace::default())
            .unwrap();
        let e = net
            .representation_node(&mut g, s, &nodes, AteiMode::Embedding(FcLayer::Fc2), true)
            .unwrap();
        let ce = g.cross_entropy(nodes.logits, &[0, 1]).unwrap();
        let ws = weighted_sum(&mut g, e, 7);
        let out = g.add(ce, ws).unwrap();
        (g, out)
    });
    check.assert_within(1e-6, "extractor");
}

#[test]
fn fuse_and_classify_gradients_for_each_strategy() {
    for strategy in [FusionStrategy::Concat, FusionStrategy::Add, FusionStrategy::Mult] {
        let d = 16;
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(6, &[0]);
        let inputs: Vec<ParamId> = (0..3)
            .map(|i| store.add(format!("e{i}"), uniform(3, d, &mut rng)))
            .collect();
        let width = if strategy == FusionStrategy::Concat { 3 * d } else { d };
        let head = ClassifierHead::new(&mut store, width, 16, &mut rng);
        let mut ids = inputs.clone();
        ids.extend(head.param_ids());
        let check = grad_check(&mut store, &ids, H, |s| {
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = inputs.iter().map(|&p| g.param(s, p)).collect();
            let fused = fuse(&mut g, &nodes, strategy).unwrap();
            let (_, logits) = classify(&mut g, s, fused, &head).unwrap();
            let out = g.cross_entropy(logits, &[0, 2, 1]).unwrap();
            (g, out)
        });
        check.assert_within(1e-6, &format!("{strategy:?}"));
    }
}

fn desk_scale_config(mode: Option<AteiMode>, scaling: bool) -> TrainConfig {
    let enc = tiny_encoder(16, 4, 1);
    TrainConfig {
        atei_mode: mode,
        scaling,
        pretrain_epochs: 0,
        encoder: enc.clone(),
        atei: AteiConfig { encoder: enc, fc_dim: 16 },
        classifier_dim: 16,
        ..TrainConfig::desk()
    }
}

fn full_model_check(cfg: &TrainConfig) -> GradCheck {
    let (_, batch) = ragged_batch(&[(6, 4), (3, 6), (5, 2)], (16, 16), 9);
    let mut store = ParamStore::<f64>::new();
    let layout = ModelLayout::new(&mut store, cfg, (16, 16));
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, H, |s| {
        let mut g = Graph::new();
        let (_, loss) = layout.loss(&mut g, s, cfg, &batch, &mut None).unwrap();
        (g, loss.total)
    })
}

#[test]
fn full_model_gradients_at_desk_scale() {
    let start = Instant::now();
    let cfg = desk_scale_config(Some(AteiMode::Embedding(FcLayer::Fc2)), true);
    let check = full_model_check(&cfg);
    let secs = start.elapsed().as_secs_f64();
    check.assert_within(1e-6, "A+T+E");
    assert!(secs < 60.0, "gradient check took {secs:.1}s");
}

#[test]
fn full_model_gradients_for_other_representations() {
    for (mode, scaling) in [
        (None, false),
        (Some(AteiMode::ZeroOne), false),
        (Some(AteiMode::ZeroOneLogits), false),
        (Some(AteiMode::Embedding(FcLayer::Fc1)), false),
        (Some(AteiMode::Embedding(FcLayer::Fc3)), true),
    ] {
        full_model_check(&desk_scale_config(mode, scaling)).assert_within(1e-6, &format!("{mode:?} scaling={scaling}"));
    }
}
