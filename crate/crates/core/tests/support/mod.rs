#![allow(dead_code)]

use atei_core::atei::{AteiConfig, AteiMode, FcLayer};
use atei_core::data::{Batch, SegmentRecord, SynthConfig};
use atei_core::encoder::{EncoderConfig, FeatureSequence, Modality};
use atei_core::fusion::{FusionStrategy, TrainConfig};
use atei_core::graph::{Graph, NodeId};
use atei_core::labels::{DepressionClass, SentimentLabel};
use atei_core::optim::{ParamId, ParamStore};
use atei_core::rng::{stream, Rng};
use atei_core::eval::Metrics;
use atei_core::{Scalar, Tensor};
use rand::Rng as _;

pub fn uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn uniform_f32(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f32> {
    uniform(rows, cols, rng).cast()
}

pub fn tiny_encoder(model_dim: usize, heads: usize, blocks: usize) -> EncoderConfig {
    EncoderConfig {
        n_blocks: blocks,
        n_heads: heads,
        model_dim,
        head_dim: model_dim / heads,
        ffn_dim: 2 * model_dim,
        dropout: 0.1,
    }
}

/// Full A+T+E configuration at gradient-check scale.
pub fn small_config(mode: Option<AteiMode>, scaling: bool) -> TrainConfig {
    let enc = tiny_encoder(8, 2, 1);
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 2,
        pretrain_epochs: if mode.is_some() { 1 } else { 0 },
        seed: 3,
        fusion: FusionStrategy::Concat,
        atei_mode: mode,
        scaling,
        use_text: true,
        encoder: enc.clone(),
        atei: AteiConfig { encoder: enc, fc_dim: 8 },
        classifier_dim: 8,
    }
}

pub fn fc2_scaled() -> TrainConfig {
    small_config(Some(AteiMode::Embedding(FcLayer::Fc2)), true)
}

/// A tiny synthetic dataset: `per_class` subjects per class, 4 segments each.
pub fn tiny_synth(per_class: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        subjects_per_class: [per_class; 3],
        segments_mean: 4.0,
        acoustic_dim: 4,
        textual_dim: 5,
        acoustic_len: [2, 4],
        textual_len: [1, 3],
        seed,
        ..SynthConfig::default()
    }
}

/// Random record with the given sequence lengths and feature dims.
pub fn random_record(id: usize, lens: (usize, usize), dims: (usize, usize), rng: &mut Rng) -> SegmentRecord {
    let sent = |rng: &mut Rng| SentimentLabel::from_index(rng.random_range(0..3)).unwrap();
    let (sa, st) = (sent(rng), sent(rng));
    SegmentRecord::new(
        format!("seg-{id}"),
        format!("subj-{}", id % 3),
        FeatureSequence::new(Modality::Acoustic, uniform_f32(lens.0, dims.0, rng)),
        FeatureSequence::new(Modality::Textual, uniform_f32(lens.1, dims.1, rng)),
        sa,
        st,
        DepressionClass::from_index(id % 3).unwrap(),
    )
}

/// A batch of records with differing lengths, so every sequence but the
/// longest is padded.
pub fn ragged_batch(lens: &[(usize, usize)], dims: (usize, usize), seed: u64) -> (Vec<SegmentRecord>, Batch) {
    let mut rng = stream(seed, &[0x7E57]);
    let records: Vec<SegmentRecord> = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| random_record(i, l, dims, &mut rng))
        .collect();
    let refs: Vec<&SegmentRecord> = records.iter().collect();
    let idx: Vec<usize> = (0..refs.len()).collect();
    let batch = Batch::build(&refs, &idx).unwrap();
    (records, batch)
}

pub struct GradCheck {
    /// Largest `|a - n| / max(1, |a|, |n|)` over all checked elements.
    pub max_error: f64,
    pub elements: usize,
    /// Elements whose `±h` stencil crossed a ReLU kink; these are compared
    /// against a stencil 100 times narrower instead.
    pub kinks: usize,
}

impl GradCheck {
    pub fn assert_within(&self, tol: f64, what: &str) {
        assert!(self.max_error < tol, "{what}: max relative error {:e}", self.max_error);
        assert!(
            self.kinks * 100 <= self.elements,
            "{what}: {} of {} elements needed the narrow stencil",
            self.kinks,
            self.elements
        );
    }
}

/// Reverse-mode vs central finite differences over every element of every
/// listed parameter.
///
/// A piecewise-linear op makes the `±h` stencil wrong wherever a kink lies
/// inside it. An element failing at `h` is retried at `h / 100`: a wrong
/// analytic gradient fails both, a kink only the first.
pub fn grad_check<F: Scalar, L>(store: &mut ParamStore<F>, ids: &[ParamId], h: f64, loss: L) -> GradCheck
where
    L: Fn(&ParamStore<F>) -> (Graph<F>, NodeId),
{
    store.zero_grad();
    let (g, out) = loss(store);
    g.backward(out, store).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.get(id).grad.data().iter().map(|v| v.as_f64()).collect())
        .collect();
    let eval = |s: &ParamStore<F>| {
        let (g, out) = loss(s);
        g.value(out).item().as_f64()
    };
    let central = |store: &mut ParamStore<F>, id: ParamId, i: usize, h: f64| {
        let orig = store.get(id).value.data()[i];
        let (hi, lo) = (orig + F::of(h), orig - F::of(h));
        store.get_mut(id).value.data_mut()[i] = hi;
        let up = eval(store);
        store.get_mut(id).value.data_mut()[i] = lo;
        let down = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        (up - down) / (hi.as_f64() - lo.as_f64())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
    let mut report = GradCheck {
        max_error: 0.0,
        elements: 0,
        kinks: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).value.len() {
            let a = analytic[k][i];
            let mut err = rel(a, central(store, id, i, h));
            if err >= 1e-6 {
                let fine = rel(a, central(store, id, i, h / 100.0));
                if fine < err / 10.0 {
                    report.kinks += 1;
                    err = fine;
                }
            }
            report.max_error = report.max_error.max(err);
            report.elements += 1;
        }
    }
    report
}

/// `sum(x * w)` for a fixed random `w`, turning any node into a scalar loss
/// whose gradient reaches every output element.
pub fn weighted_sum<F: Scalar>(g: &mut Graph<F>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let w = uniform(shape[0], shape[1], &mut stream(seed, &[0x5A])).cast();
    let w = g.input(w).unwrap();
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

/// Per-class counting straight from the definitions, macro-averaged over the
/// classes that appear at all.
pub fn brute_metrics(pred: &[usize], truth: &[usize]) -> Metrics {
    let n = pred.len();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    let mut fs = Vec::new();
    for c in 0..3 {
        let tp = (0..n).filter(|&i| pred[i] == c && truth[i] == c).count() as f64;
        let fp = (0..n).filter(|&i| pred[i] == c && truth[i] != c).count() as f64;
        let fn_ = (0..n).filter(|&i| pred[i] != c && truth[i] == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        ps.push(p);
        rs.push(r);
        fs.push(f);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Metrics {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        f1: mean(&fs),
        precision: mean(&ps),
        recall: mean(&rs),
    }
}

/// The winner is the class with the lexicographically largest
/// (votes, mean probability, -index).
pub fn reference_vote(votes: [usize; 3], mean: [f64; 3]) -> usize {
    (0..3)
        .max_by(|&a, &b| {
            votes[a]
                .cmp(&votes[b])
                .then(mean[a].total_cmp(&mean[b]))
                .then(b.cmp(&a))
        })
        .unwrap()
}

/// Accuracy of the indicator-based classifier for one subject, by summing
/// over all 2^n indicator patterns.
pub fn enumerated_subject_accuracy(n: usize, c: usize, rates: [f64; 3], priors: [f64; 3]) -> f64 {
    let posterior = |bit: usize| -> [f64; 3] {
        let joint: [f64; 3] = std::array::from_fn(|k| priors[k] * if bit == 1 { rates[k] } else { 1.0 - rates[k] });
        let z: f64 = joint.iter().sum();
        joint.map(|j| if z > 0.0 { j / z } else { 0.0 })
    };
    let decide = |post: &[f64; 3]| {
        // Posteriors share a normalizer, so comparing them compares the
        // joint probabilities; the first maximum wins.
        let mut best = 0;
        for k in 1..3 {
            if post[k] > post[best] {
                best = k;
            }
        }
        best
    };
    let post = [posterior(0), posterior(1)];
    let dec = [decide(&post[0]), decide(&post[1])];
    let mut total = 0.0;
    for pattern in 0u32..(1 << n) {
        let bits: Vec<usize> = (0..n).map(|i| ((pattern >> i) & 1) as usize).collect();
        let ones = bits.iter().sum::<usize>();
        let prob = rates[c].powi(ones as i32) * (1.0 - rates[c]).powi((n - ones) as i32);
        let mut votes = [0usize; 3];
        let mut mean = [0.0; 3];
        for &b in &bits {
            votes[dec[b]] += 1;
            for k in 0..3 {
                mean[k] += post[b][k] / n as f64;
            }
        }
        if reference_vote(votes, mean) == c {
            total += prob;
        }
    }
    total
}
