//! Loss bookkeeping shared by the pretraining and joint training loops.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// Per-batch loss terms, exactly as computed in the graph.
///
/// `total` is the graph's own sum node, so `total == depression + atei`
/// holds in `f32` arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f32,
    pub depression: f32,
    pub atei: f32,
}

impl LossBreakdown {
    pub fn is_additive(&self) -> bool {
        self.total == self.depression + self.atei
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// `sum(alpha)` and `min(alpha)` right after the optimizer step, when scaling is on.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_sum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_min: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_depression: f64,
    pub mean_atei: f64,
    /// Training accuracy of the phase's task (consistency while pretraining,
    /// depression class during joint training).
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

impl TrainHistory {
    pub fn append(&mut self, other: TrainHistory) {
        self.epochs.extend(other.epochs);
        self.batches.extend(other.batches);
    }
}

/// Accumulates batch records into one epoch record.
pub(crate) struct EpochAccumulator {
    phase: Phase,
    epoch: usize,
    total: f64,
    depression: f64,
    atei: f64,
    batches: usize,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    pub fn new(phase: Phase, epoch: usize) -> Self {
        EpochAccumulator {
            phase,
            epoch,
            total: 0.0,
            depression: 0.0,
            atei: 0.0,
            batches: 0,
            correct: 0,
            seen: 0,
        }
    }

    pub fn add(&mut self, loss: &LossBreakdown, correct: usize, seen: usize) {
        self.total += loss.total as f64;
        self.depression += loss.depression as f64;
        self.atei += loss.atei as f64;
        self.batches += 1;
        self.correct += correct;
        self.seen += seen;
    }

    pub fn finish(self) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            phase: self.phase,
            epoch: self.epoch,
            mean_total: self.total / n,
            mean_depression: self.depression / n,
            mean_atei: self.atei / n,
            accuracy: if self.seen == 0 {
                0.0
            } else {
                self.correct as f64 / self.seen as f64
            },
        }
    }
}
