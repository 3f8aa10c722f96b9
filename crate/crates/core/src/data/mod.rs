//! Segment records, feature storage, lexicon scoring, synthetic data,
//! speaker-disjoint folds and batching.

pub mod atfs;
pub mod batch;
pub mod folds;
pub mod lexicon;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;

use crate::atei::consistency_label;
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::labels::{ConsistencyLabel, DepressionClass, SentimentLabel};

pub use atfs::{decode_atfs, encode_atfs, read_atfs, write_atfs};
pub use batch::{make_batches, make_batches_ordered, Batch, PaddedSequences};
pub use folds::{split_speaker_folds, FoldSplit};
pub use lexicon::{score_text_sentiment, Lexicon};
pub use manifest::{load_dataset, write_dataset, ManifestEntry};
pub use synth::{generate_synthetic, OracleSummary, SynthConfig, SyntheticDataset};

/// One acoustic/textual segment pair with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub subject_id: String,
    pub acoustic: FeatureSequence,
    pub textual: FeatureSequence,
    pub tokens: Option<Vec<String>>,
    pub sent_a: SentimentLabel,
    pub sent_t: SentimentLabel,
    pub consistency: ConsistencyLabel,
    pub depression: DepressionClass,
}

impl SegmentRecord {
    /// Builds a record, deriving the consistency label from the two sentiments.
    pub fn new(
        segment_id: impl Into<String>,
        subject_id: impl Into<String>,
        acoustic: FeatureSequence,
        textual: FeatureSequence,
        sent_a: SentimentLabel,
        sent_t: SentimentLabel,
        depression: DepressionClass,
    ) -> Self {
        SegmentRecord {
            segment_id: segment_id.into(),
            subject_id: subject_id.into(),
            acoustic,
            textual,
            tokens: None,
            sent_a,
            sent_t,
            consistency: consistency_label(sent_a, sent_t),
            depression,
        }
    }
}

/// Subject id -> depression class, checking that each subject has one label.
pub fn subject_classes(records: &[SegmentRecord]) -> Result<BTreeMap<String, DepressionClass>> {
    let mut out = BTreeMap::new();
    for r in records {
        match out.insert(r.subject_id.clone(), r.depression) {
            Some(prev) if prev != r.depression => {
                return Err(Error::Data(format!(
                    "subject {} has segments labelled {} and {}",
                    r.subject_id,
                    prev.as_str(),
                    r.depression.as_str()
                )))
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Checks the dataset-wide invariants: fixed input dims per modality and
/// consistency labels matching the sentiment pair.
pub fn validate_records(records: &[SegmentRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    let (da, dt) = (first.acoustic.dim(), first.textual.dim());
    for r in records {
        if r.acoustic.dim() != da || r.textual.dim() != dt {
            return Err(Error::Data(format!(
                "segment {} has feature dims ({}, {}), expected ({da}, {dt})",
                r.segment_id,
                r.acoustic.dim(),
                r.textual.dim()
            )));
        }
        if r.consistency != consistency_label(r.sent_a, r.sent_t) {
            return Err(Error::Data(format!(
                "segment {} consistency label disagrees with its sentiments",
                r.segment_id
            )));
        }
    }
    subject_classes(records)?;
    Ok((da, dt))
}
