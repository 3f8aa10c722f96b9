//! Shuffled, right-padded mini-batches.

use rand::seq::SliceRandom;

use crate::data::SegmentRecord;
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::graph::SeqMask;
use crate::rng;
use crate::tensor::Tensor;

/// `batch` sequences padded to a common length, stacked as `(batch*len) x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSequences {
    pub data: Tensor<f32>,
    pub mask: SeqMask,
}

impl PaddedSequences {
    pub fn from_sequences(seqs: &[&FeatureSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let dim = first.dim();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut data = vec![0.0f32; seqs.len() * len * dim];
        let mut valid = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::Shape(format!("feature dim {} in a batch of dim {dim}", s.dim())));
            }
            let off = b * len * dim;
            data[off..off + s.len() * dim].copy_from_slice(s.features.data());
            valid[b * len..b * len + s.len()].copy_from_slice(&s.valid_mask);
        }
        Ok(PaddedSequences {
            data: Tensor::matrix(seqs.len() * len, dim, data)?,
            mask: SeqMask::new(seqs.len(), len, valid)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the slice given to the batcher.
    pub indices: Vec<usize>,
    pub acoustic: PaddedSequences,
    pub textual: PaddedSequences,
    pub depression: Vec<usize>,
    pub consistency: Vec<usize>,
}

impl Batch {
    pub fn build(records: &[&SegmentRecord], indices: &[usize]) -> Result<Self> {
        let members: Vec<&SegmentRecord> = indices.iter().map(|&i| records[i]).collect();
        let acoustic: Vec<&FeatureSequence> = members.iter().map(|r| &r.acoustic).collect();
        let textual: Vec<&FeatureSequence> = members.iter().map(|r| &r.textual).collect();
        Ok(Batch {
            indices: indices.to_vec(),
            acoustic: PaddedSequences::from_sequences(&acoustic)?,
            textual: PaddedSequences::from_sequences(&textual)?,
            depression: members.iter().map(|r| r.depression.index()).collect(),
            consistency: members.iter().map(|r| r.consistency.value()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffles with `seed`, then cuts consecutive batches; the last may be short.
pub fn make_batches(records: &[&SegmentRecord], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[0xBA7C]));
    cut(records, &order, batch_size)
}

/// Batches in record order, for inference.
pub fn make_batches_ordered(records: &[&SegmentRecord], batch_size: usize) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..records.len()).collect();
    cut(records, &order, batch_size)
}

fn cut(records: &[&SegmentRecord], order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    order.chunks(batch_size).map(|idx| Batch::build(records, idx)).collect()
}
