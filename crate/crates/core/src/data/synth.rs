//! Synthetic segments whose class signal lives only in how often the acoustic
//! and textual sentiments disagree, plus the analytic accuracy of a classifier
//! that sees the true disagreement indicator of every segment.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SegmentRecord;
use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::labels::{DepressionClass, SentimentLabel};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Subjects generated for healthy, mild and moderate.
    pub subjects_per_class: [usize; 3],
    pub segments_mean: f64,
    pub segments_std: f64,
    pub acoustic_dim: usize,
    pub textual_dim: usize,
    /// Inclusive frame-count range of acoustic sequences.
    pub acoustic_len: [usize; 2],
    /// Inclusive token-count range of textual sequences.
    pub textual_len: [usize; 2],
    /// Probability that a segment's two sentiments differ, per class.
    pub mismatch_rates: [f64; 3],
    /// Cluster centers drawn per sentiment and modality; each segment picks
    /// one of its sentiment's centers uniformly, independently per modality.
    pub centers_per_sentiment: usize,
    /// Standard deviation of the random sentiment-cluster centers.
    pub center_scale: f64,
    /// Per-frame Gaussian noise around the cluster center.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects_per_class: [14, 20, 14],
            segments_mean: 10.0,
            segments_std: 0.0,
            acoustic_dim: 16,
            textual_dim: 16,
            acoustic_len: [2, 4],
            textual_len: [2, 4],
            mismatch_rates: [0.1, 0.4, 0.7],
            centers_per_sentiment: 8,
            center_scale: 1.0,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects_per_class.iter().all(|&n| n == 0) {
            return bad("subjects_per_class must not be all zero".into());
        }
        if !(self.segments_mean >= 1.0 && self.segments_mean.is_finite()) {
            return bad(format!("segments_mean {} must be at least 1", self.segments_mean));
        }
        if !(self.segments_std >= 0.0 && self.segments_std.is_finite()) {
            return bad(format!("segments_std {} must be non-negative", self.segments_std));
        }
        if self.acoustic_dim == 0 || self.textual_dim == 0 {
            return bad("feature dims must be positive".into());
        }
        for (name, [lo, hi]) in [("acoustic_len", self.acoustic_len), ("textual_len", self.textual_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} [{lo}, {hi}] must satisfy 1 <= min <= max"));
            }
        }
        if let Some(p) = self.mismatch_rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("mismatch rate {p} outside [0, 1]"));
        }
        if self.centers_per_sentiment == 0 {
            return bad("centers_per_sentiment must be at least 1".into());
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// Expected share of segments per class.
    pub fn class_priors(&self) -> [f64; 3] {
        let total: usize = self.subjects_per_class.iter().sum();
        self.subjects_per_class.map(|n| n as f64 / total as f64)
    }
}

/// Analytic behaviour of the classifier that observes each segment's true
/// mismatch indicator and votes per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub mismatch_rates: [f64; 3],
    pub class_priors: [f64; 3],
    /// Class posterior given the indicator: index 0 for "sentiments agree",
    /// index 1 for "sentiments differ".
    pub segment_posteriors: [[f64; 3]; 2],
    pub segment_decisions: [DepressionClass; 2],
    pub bayes_segment_accuracy: f64,
    /// Expected subject-level accuracy averaged over the generated subjects.
    pub bayes_subject_accuracy: f64,
    /// Mean of the per-class subject accuracies.
    pub bayes_balanced_subject_accuracy: f64,
    pub per_class_subject_accuracy: [f64; 3],
    /// Observed mismatch frequency per class in the generated segments.
    pub empirical_mismatch_rates: [f64; 3],
    pub indistinguishable: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<SegmentRecord>,
    pub oracle: OracleSummary,
}

pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mismatch-indicator Bayes rule: posteriors and decisions per indicator value.
pub fn segment_oracle(rates: [f64; 3], priors: [f64; 3]) -> ([[f64; 3]; 2], [DepressionClass; 2]) {
    let mut post = [[0.0; 3]; 2];
    let mut dec = [DepressionClass::Healthy; 2];
    for bit in 0..2 {
        let joint: Vec<f64> = (0..3)
            .map(|c| priors[c] * if bit == 1 { rates[c] } else { 1.0 - rates[c] })
            .collect();
        let z: f64 = joint.iter().sum();
        for c in 0..3 {
            post[bit][c] = if z > 0.0 { joint[c] / z } else { priors[c] };
        }
        dec[bit] = DepressionClass::from_index(argmax_first(&joint)).expect("class index");
    }
    (post, dec)
}

/// Subject decision of the indicator classifier when `k` of `n` segments
/// carry a mismatch, using the same two-stage tie rule as majority voting.
pub fn vote_decision(k: usize, n: usize, post: &[[f64; 3]; 2], dec: &[DepressionClass; 2]) -> DepressionClass {
    let (f0, f1) = (dec[0], dec[1]);
    if f0 == f1 || 2 * k != n {
        return if 2 * k > n { f1 } else { f0 };
    }
    let nf = n as f64;
    let mean = |c: usize| (k as f64 * post[1][c] + (n - k) as f64 * post[0][c]) / nf;
    let (m0, m1) = (mean(f0.index()), mean(f1.index()));
    if m0 > m1 || (m0 == m1 && f0.index() < f1.index()) {
        f0
    } else {
        f1
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let lf = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

fn binom_pmf(n: usize, k: usize, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Probability that the indicator classifier labels a class-`class` subject
/// with `n` segments correctly.
pub fn subject_accuracy(n: usize, class: DepressionClass, rates: [f64; 3], priors: [f64; 3]) -> f64 {
    let (post, dec) = segment_oracle(rates, priors);
    let p = rates[class.index()];
    (0..=n)
        .filter(|&k| vote_decision(k, n, &post, &dec) == class)
        .map(|k| binom_pmf(n, k, p))
        .sum()
}

/// Builds the oracle summary for subjects with the given class and segment count.
pub fn oracle_summary(rates: [f64; 3], priors: [f64; 3], subjects: &[(DepressionClass, usize)]) -> OracleSummary {
    let (post, dec) = segment_oracle(rates, priors);
    let seg_acc: f64 = (0..3)
        .map(|c| {
            let p = rates[c];
            let hit1 = if dec[1].index() == c { p } else { 0.0 };
            let hit0 = if dec[0].index() == c { 1.0 - p } else { 0.0 };
            priors[c] * (hit0 + hit1)
        })
        .sum();
    let mut class_sum = [0.0; 3];
    let mut class_n = [0usize; 3];
    for &(c, n) in subjects {
        class_sum[c.index()] += subject_accuracy(n, c, rates, priors);
        class_n[c.index()] += 1;
    }
    let per_class: [f64; 3] = std::array::from_fn(|c| {
        if class_n[c] == 0 {
            0.0
        } else {
            class_sum[c] / class_n[c] as f64
        }
    });
    let present: Vec<usize> = (0..3).filter(|&c| class_n[c] > 0).collect();
    let total_n: usize = class_n.iter().sum();
    OracleSummary {
        mismatch_rates: rates,
        class_priors: priors,
        segment_posteriors: post,
        segment_decisions: dec,
        bayes_segment_accuracy: seg_acc,
        bayes_subject_accuracy: if total_n == 0 { 0.0 } else { class_sum.iter().sum::<f64>() / total_n as f64 },
        bayes_balanced_subject_accuracy: if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| per_class[c]).sum::<f64>() / present.len() as f64
        },
        per_class_subject_accuracy: per_class,
        empirical_mismatch_rates: [0.0; 3],
        indistinguishable: rates[0] == rates[1] || rates[1] == rates[2] || rates[0] == rates[2],
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn cluster_sequence(
    modality: Modality,
    center: &[f64],
    len: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<FeatureSequence> {
    let mut data = Vec::with_capacity(len * center.len());
    for _ in 0..len {
        for &c in center {
            data.push((c + noise * gaussian(rng)) as f32);
        }
    }
    Ok(FeatureSequence::new(modality, Tensor::matrix(len, center.len(), data)?))
}

/// `3 * per_sentiment` centers; sentiment `s` owns indices `s * per_sentiment..`.
fn centers(dim: usize, per_sentiment: usize, scale: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let n = 3 * per_sentiment;
    let cs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| scale * gaussian(rng)).collect())
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= 1e-12 {
                return Err(Error::Config("sentiment cluster centers coincide; change the seed".into()));
            }
        }
    }
    Ok(cs)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let priors = cfg.class_priors();
    let rates = cfg.mismatch_rates;
    let mut oracle_subjects = Vec::new();
    let mut crng = rng::stream(cfg.seed, &[0x5E47, 0]);
    let k = cfg.centers_per_sentiment;
    let centers_a = centers(cfg.acoustic_dim, k, cfg.center_scale, &mut crng)?;
    let centers_t = centers(cfg.textual_dim, k, cfg.center_scale, &mut crng)?;

    let mut records = Vec::new();
    let mut mismatches = [0usize; 3];
    let mut segments = [0usize; 3];
    for class in DepressionClass::ALL {
        let c = class.index();
        for s in 0..cfg.subjects_per_class[c] {
            let mut r = rng::stream(cfg.seed, &[0x5E47, 1, c as u64, s as u64]);
            let n = (cfg.segments_mean + cfg.segments_std * gaussian(&mut r)).round().max(1.0) as usize;
            let subject = format!("{}-{s:03}", class.as_str());
            oracle_subjects.push((class, n));
            for j in 0..n {
                let st = r.random_range(0..3usize);
                let mismatch = r.random_bool(rates[c]);
                let sa = if mismatch { (st + 1 + r.random_range(0..2usize)) % 3 } else { st };
                let ta = r.random_range(cfg.acoustic_len[0]..=cfg.acoustic_len[1]);
                let tt = r.random_range(cfg.textual_len[0]..=cfg.textual_len[1]);
                let ca = &centers_a[sa * k + r.random_range(0..k)];
                let ct = &centers_t[st * k + r.random_range(0..k)];
                let acoustic = cluster_sequence(Modality::Acoustic, ca, ta, cfg.noise_std, &mut r)?;
                let textual = cluster_sequence(Modality::Textual, ct, tt, cfg.noise_std, &mut r)?;
                let to_label = |i: usize| SentimentLabel::from_index(i).expect("sentiment index");
                records.push(SegmentRecord::new(
                    format!("{subject}-{j:03}"),
                    subject.clone(),
                    acoustic,
                    textual,
                    to_label(sa),
                    to_label(st),
                    class,
                ));
                segments[c] += 1;
                mismatches[c] += mismatch as usize;
            }
        }
    }

    let mut oracle = oracle_summary(rates, priors, &oracle_subjects);
    oracle.empirical_mismatch_rates =
        std::array::from_fn(|c| if segments[c] == 0 { 0.0 } else { mismatches[c] as f64 / segments[c] as f64 });
    if oracle.indistinguishable {
        log::warn!("mismatch rates {rates:?} are not pairwise distinct; some classes are indistinguishable");
    }
    Ok(SyntheticDataset { records, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIFORM: [f64; 3] = [1.0 / 3.0; 3];

    #[test]
    fn equal_rates_give_chance() {
        let subjects: Vec<_> = DepressionClass::ALL.iter().flat_map(|&c| [(c, 10), (c, 7)]).collect();
        let o = oracle_summary([0.3; 3], UNIFORM, &subjects);
        assert!((o.bayes_subject_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(o.indistinguishable);
        let o = oracle_summary([0.3; 3], [0.29, 0.42, 0.29], &subjects);
        assert!((o.bayes_balanced_subject_accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_indicator_separates_extremes() {
        let rates = [0.0, 0.5, 1.0];
        let priors = [0.5, 0.0, 0.5];
        let subjects = [(DepressionClass::Healthy, 40), (DepressionClass::Moderate, 40)];
        let o = oracle_summary(rates, priors, &subjects);
        assert_eq!(o.bayes_subject_accuracy, 1.0);
    }

    #[test]
    fn worked_decisions() {
        let (post, dec) = segment_oracle([0.1, 0.4, 0.7], UNIFORM);
        assert_eq!(dec, [DepressionClass::Healthy, DepressionClass::Moderate]);
        assert!((post[1][2] - 7.0 / 12.0).abs() < 1e-12);
        let o = oracle_summary([0.1, 0.4, 0.7], UNIFORM, &[(DepressionClass::Mild, 10)]);
        assert!((o.bayes_segment_accuracy - 1.6 / 3.0).abs() < 1e-12);
        assert_eq!(o.per_class_subject_accuracy[1], 0.0);
    }

    #[test]
    fn reproducible_and_sized() {
        let cfg = SynthConfig { subjects_per_class: [3, 2, 1], segments_mean: 4.0, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 24);
        assert_eq!(crate::data::subject_classes(&a.records).unwrap().len(), 6);
        for r in &a.records {
            assert!((2..=4).contains(&r.acoustic.len()));
            assert_eq!(r.textual.dim(), 16);
        }
    }

    #[test]
    fn empirical_rates_within_three_sigma() {
        let cfg = SynthConfig {
            subjects_per_class: [100, 100, 100],
            segments_mean: 12.0,
            acoustic_dim: 2,
            textual_dim: 2,
            acoustic_len: [1, 1],
            textual_len: [1, 1],
            seed: 7,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        for c in 0..3 {
            let p = cfg.mismatch_rates[c];
            let n = 1200.0;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((d.oracle.empirical_mismatch_rates[c] - p).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = SynthConfig { mismatch_rates: [0.1, 1.2, 0.3], ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}
