//! Metrics, per-subject majority voting, speaker-disjoint cross-validation
//! and embedding export.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atei::consistency_accuracy;
use crate::data::{make_batches_ordered, split_speaker_folds, FoldSplit, SegmentRecord};
use crate::error::{Error, Result};
use crate::fusion::{
    predicted_class, train_incremental, train_incremental_cached, DepressionModel, PretrainedAtei, TrainConfig,
};
use crate::graph::Graph;
use crate::history::TrainHistory;
use crate::labels::DepressionClass;
use crate::rng;

/// Macro-averaged classification metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(predictions: &[DepressionClass], labels: &[DepressionClass]) -> Result<[[usize; 3]; 3]> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = [[0usize; 3]; 3];
    for (p, l) in predictions.iter().zip(labels) {
        m[l.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Accuracy plus precision, recall and F1 averaged over the classes that
/// occur among the labels or predictions. A ratio with an empty denominator
/// counts as 0.
pub fn compute_metrics(predictions: &[DepressionClass], labels: &[DepressionClass]) -> Result<Metrics> {
    let m = confusion_matrix(predictions, labels)?;
    Ok(metrics_from_confusion(&m))
}

pub fn metrics_from_confusion(m: &[[usize; 3]; 3]) -> Metrics {
    let total: usize = m.iter().flatten().sum();
    if total == 0 {
        return Metrics::default();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let correct: usize = (0..3).map(|c| m[c][c]).sum();
    let (mut p_sum, mut r_sum, mut f_sum, mut n) = (0.0, 0.0, 0.0, 0);
    for c in 0..3 {
        let actual: usize = m[c].iter().sum();
        let predicted: usize = (0..3).map(|t| m[t][c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let p = ratio(m[c][c], predicted);
        let r = ratio(m[c][c], actual);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        n += 1;
    }
    let n = n as f64;
    Metrics {
        accuracy: ratio(correct, total),
        f1: f_sum / n,
        precision: p_sum / n,
        recall: r_sum / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub segment_id: String,
    pub subject_id: String,
    pub predicted: DepressionClass,
    pub probabilities: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub predicted: DepressionClass,
    pub votes: [usize; 3],
    pub mean_probabilities: [f64; 3],
}

/// One label per subject: the most voted class; ties go to the tied class
/// with the highest mean probability, then to the lowest class index.
///
/// Probabilities are summed in sorted order, so the result does not depend
/// on the order of `predictions`. Output is sorted by subject id.
pub fn majority_vote(predictions: &[SegmentPrediction]) -> Vec<SubjectPrediction> {
    let mut groups: BTreeMap<&str, Vec<&SegmentPrediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(&p.subject_id).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(subject, preds)| {
            let mut votes = [0usize; 3];
            for p in &preds {
                votes[p.predicted.index()] += 1;
            }
            let mean: [f64; 3] = std::array::from_fn(|c| {
                let mut v: Vec<f64> = preds.iter().map(|p| p.probabilities[c]).collect();
                v.sort_by(f64::total_cmp);
                v.iter().sum::<f64>() / v.len() as f64
            });
            let top = *votes.iter().max().expect("three classes");
            let mut winner = None::<usize>;
            for c in (0..3).filter(|&c| votes[c] == top) {
                match winner {
                    Some(w) if mean[c] <= mean[w] => {}
                    _ => winner = Some(c),
                }
            }
            SubjectPrediction {
                subject_id: subject.to_string(),
                predicted: DepressionClass::from_index(winner.expect("non-empty group")).expect("class"),
                votes,
                mean_probabilities: mean,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub segment: Metrics,
    pub subject: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub test_subjects: Vec<String>,
    pub train_segments: usize,
    pub test_segments: usize,
    pub metrics: LevelMetrics,
    /// Held-out consistency accuracy of the extractor, when the model has one.
    pub consistency_accuracy: Option<f64>,
    pub subject_predictions: Vec<SubjectPrediction>,
    pub alpha: Option<Vec<f64>>,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: TrainConfig,
    pub k: usize,
    pub averaging: String,
    pub folds: Vec<FoldReport>,
    /// Mean of the per-fold metrics.
    pub mean: LevelMetrics,
}

fn mean_metrics(ms: impl Iterator<Item = Metrics> + Clone) -> Metrics {
    let n = ms.clone().count().max(1) as f64;
    let sum = |f: fn(&Metrics) -> f64| ms.clone().map(|m| f(&m)).sum::<f64>() / n;
    Metrics {
        accuracy: sum(|m| m.accuracy),
        f1: sum(|m| m.f1),
        precision: sum(|m| m.precision),
        recall: sum(|m| m.recall),
    }
}

/// Segment predictions of `model` on `records`.
pub fn predict_segments(model: &DepressionModel, records: &[&SegmentRecord]) -> Result<Vec<SegmentPrediction>> {
    let probs = model.predict(records)?;
    Ok(records
        .iter()
        .zip(probs)
        .map(|(r, p)| SegmentPrediction {
            segment_id: r.segment_id.clone(),
            subject_id: r.subject_id.clone(),
            predicted: predicted_class(&p),
            probabilities: p,
        })
        .collect())
}

/// Segment- and subject-level metrics of `model` on `records`.
pub fn evaluate(model: &DepressionModel, records: &[&SegmentRecord]) -> Result<(LevelMetrics, Vec<SubjectPrediction>)> {
    let preds = predict_segments(model, records)?;
    let seg_pred: Vec<_> = preds.iter().map(|p| p.predicted).collect();
    let seg_true: Vec<_> = records.iter().map(|r| r.depression).collect();
    let segment = compute_metrics(&seg_pred, &seg_true)?;
    let truth: BTreeMap<&str, DepressionClass> = records.iter().map(|r| (r.subject_id.as_str(), r.depression)).collect();
    let subjects = majority_vote(&preds);
    let sub_pred: Vec<_> = subjects.iter().map(|s| s.predicted).collect();
    let sub_true: Vec<_> = subjects.iter().map(|s| truth[s.subject_id.as_str()]).collect();
    let subject = compute_metrics(&sub_pred, &sub_true)?;
    Ok((LevelMetrics { segment, subject }, subjects))
}

/// Shared pretraining results, keyed by fold and pretraining settings.
pub type PretrainCache = Mutex<HashMap<String, PretrainedAtei>>;

/// Trains and evaluates one fold; `seed` replaces the config seed.
pub fn run_fold(
    records: &[SegmentRecord],
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainConfig,
    seed: u64,
    cache: Option<&PretrainCache>,
) -> Result<FoldReport> {
    let test: std::collections::BTreeSet<&str> = split.test_subjects(fold).iter().map(String::as_str).collect();
    let (test_recs, train_recs): (Vec<&SegmentRecord>, Vec<&SegmentRecord>) =
        records.iter().partition(|r| test.contains(r.subject_id.as_str()));
    if test_recs.is_empty() || train_recs.is_empty() {
        return Err(Error::Data(format!("fold {fold} has an empty train or test side")));
    }
    let fold_cfg = TrainConfig { seed, ..cfg.clone() };
    let (model, history) = match cache {
        Some(c) => train_incremental_cached(&train_recs, &fold_cfg, c)?,
        None => train_incremental(&train_recs, &fold_cfg)?,
    };
    let (metrics, subject_predictions) = evaluate(&model, &test_recs)?;
    let consistency_accuracy = model
        .layout
        .atei
        .as_ref()
        .map(|net| consistency_accuracy(net, &model.store, &test_recs, model.cfg.batch_size))
        .transpose()?;
    log::info!(
        "fold {fold}: segment acc {:.3}, subject acc {:.3}",
        metrics.segment.accuracy,
        metrics.subject.accuracy
    );
    Ok(FoldReport {
        fold,
        seed,
        test_subjects: split.test_subjects(fold).to_vec(),
        train_segments: train_recs.len(),
        test_segments: test_recs.len(),
        metrics,
        consistency_accuracy,
        subject_predictions,
        alpha: model.alpha(),
        history,
    })
}

/// k-fold speaker-disjoint cross-validation.
///
/// Fold `i` trains with seed `derive_seed(cfg.seed, [i])`, so the report does
/// not depend on `parallel_folds`, the number of folds run at once.
pub fn run_cross_validation(
    records: &[SegmentRecord],
    cfg: &TrainConfig,
    k: usize,
    parallel_folds: usize,
) -> Result<CvReport> {
    let mut reports = run_cross_validation_variants(records, std::slice::from_ref(cfg), k, parallel_folds)?;
    Ok(reports.remove(0))
}

/// Cross-validates several configurations on the same records.
///
/// Variants whose extractor pretraining would be identical share one
/// pretraining run per fold; every report equals what
/// [`run_cross_validation`] returns for that configuration alone.
pub fn run_cross_validation_variants(
    records: &[SegmentRecord],
    cfgs: &[TrainConfig],
    k: usize,
    parallel_folds: usize,
) -> Result<Vec<CvReport>> {
    crate::data::validate_records(records)?;
    let mut jobs = Vec::new();
    let mut splits = Vec::new();
    for (v, cfg) in cfgs.iter().enumerate() {
        cfg.validate()?;
        splits.push(split_speaker_folds(records, k, cfg.seed)?);
        for fold in 0..k {
            jobs.push((v, fold, rng::derive_seed(cfg.seed, &[fold as u64])));
        }
    }
    // Folds of one variant never share pretraining; ordering jobs fold-major
    // lets a worker reuse a result computed moments earlier.
    jobs.sort_by_key(|&(v, fold, _)| (fold, v));
    let cache = PretrainCache::default();
    let run = |&(v, fold, seed): &(usize, usize, u64)| run_fold(records, &splits[v], fold, &cfgs[v], seed, Some(&cache));

    let workers = parallel_folds.clamp(1, jobs.len().max(1));
    let mut results: Vec<Option<Result<FoldReport>>> = (0..jobs.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, job) in results.iter_mut().zip(&jobs) {
            *slot = Some(run(job));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run(&jobs[i]);
                    done.lock().expect("fold results lock")[i] = Some(r);
                });
            }
        });
    }

    let mut per_variant: Vec<Vec<FoldReport>> = cfgs.iter().map(|_| Vec::new()).collect();
    for (job, r) in jobs.iter().zip(results) {
        per_variant[job.0].push(r.expect("every job ran")?);
    }
    Ok(cfgs
        .iter()
        .zip(per_variant)
        .map(|(cfg, mut folds)| {
            folds.sort_by_key(|f| f.fold);
            let mean = LevelMetrics {
                segment: mean_metrics(folds.iter().map(|f| f.metrics.segment)),
                subject: mean_metrics(folds.iter().map(|f| f.metrics.subject)),
            };
            CvReport {
                config: cfg.clone(),
                k,
                averaging: "macro".into(),
                folds,
                mean,
            }
        })
        .collect())
}

/// Layer whose activations [`export_embeddings`] writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    /// Fused representation entering the classifier head.
    Fused,
    /// Last hidden layer of the classifier head.
    Head,
    Fc1,
    Fc2,
    Fc3,
}

impl EmbeddingLayer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(EmbeddingLayer::Fused),
            "head" => Ok(EmbeddingLayer::Head),
            "fc1" => Ok(EmbeddingLayer::Fc1),
            "fc2" => Ok(EmbeddingLayer::Fc2),
            "fc3" => Ok(EmbeddingLayer::Fc3),
            _ => Err(Error::Config(format!("unknown embedding layer {s:?} (fused, head, fc1, fc2, fc3)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub segment_id: String,
    pub subject_id: String,
    pub depression: DepressionClass,
    pub vector: Vec<f32>,
}

/// Inference-mode activations of `layer` for every record.
pub fn embeddings(model: &DepressionModel, records: &[&SegmentRecord], layer: EmbeddingLayer) -> Result<Vec<EmbeddingRow>> {
    let mut out = Vec::with_capacity(records.len());
    let mut offset = 0;
    for batch in make_batches_ordered(records, model.cfg.batch_size)? {
        let mut g = Graph::<f32>::new();
        let nodes = model.layout.forward(&mut g, &model.store, &model.cfg, &batch, &mut None)?;
        let node = match layer {
            EmbeddingLayer::Fused => nodes.fused,
            EmbeddingLayer::Head => nodes.head_hidden,
            EmbeddingLayer::Fc1 | EmbeddingLayer::Fc2 | EmbeddingLayer::Fc3 => {
                let atei = nodes
                    .atei
                    .as_ref()
                    .ok_or_else(|| Error::Config("the model has no extractor layers to export".into()))?;
                atei.fc[layer as usize - EmbeddingLayer::Fc1 as usize]
            }
        };
        let v = g.value(node);
        for row in 0..v.rows() {
            let r = records[offset + row];
            out.push(EmbeddingRow {
                segment_id: r.segment_id.clone(),
                subject_id: r.subject_id.clone(),
                depression: r.depression,
                vector: v.row_slice(row).to_vec(),
            });
        }
        offset += v.rows();
    }
    Ok(out)
}

/// Writes one JSON object per segment to `path`.
pub fn export_embeddings(
    model: &DepressionModel,
    records: &[&SegmentRecord],
    layer: EmbeddingLayer,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let rows = embeddings(model, records, layer)?;
    let mut buf = Vec::new();
    for row in &rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use DepressionClass::*;

    fn seg(subject: &str, class: DepressionClass, probs: [f64; 3]) -> SegmentPrediction {
        SegmentPrediction {
            segment_id: String::new(),
            subject_id: subject.into(),
            predicted: class,
            probabilities: probs,
        }
    }

    #[test]
    fn all_correct_is_perfect() {
        let labels = [Healthy, Mild, Moderate, Mild];
        let m = compute_metrics(&labels, &labels).unwrap();
        assert_eq!(m, Metrics { accuracy: 1.0, f1: 1.0, precision: 1.0, recall: 1.0 });
    }

    #[test]
    fn two_class_confusion() {
        let m = compute_metrics(&[Healthy, Mild, Healthy, Mild], &[Healthy, Healthy, Mild, Mild]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_metrics(&[Healthy], &[]).is_err());
    }

    #[test]
    fn vote_examples() {
        let p = [0.4, 0.3, 0.3];
        let out = majority_vote(&[seg("s", Healthy, p), seg("s", Healthy, p), seg("s", Mild, p)]);
        assert_eq!(out[0].predicted, Healthy);
        let out = majority_vote(&[seg("s", Healthy, [0.6, 0.3, 0.1]), seg("s", Mild, [0.1, 0.8, 0.1])]);
        assert_eq!(out[0].predicted, Mild);
        let out = majority_vote(&[seg("s", Healthy, [0.5, 0.5, 0.0]), seg("s", Mild, [0.5, 0.5, 0.0])]);
        assert_eq!(out[0].predicted, Healthy);
    }

    #[test]
    fn layer_names() {
        assert_eq!(EmbeddingLayer::parse("fc2").unwrap(), EmbeddingLayer::Fc2);
        assert!(EmbeddingLayer::parse("fc4").is_err());
    }
}
