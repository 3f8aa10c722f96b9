//! Acoustic-textual emotion inconsistency (ATEI) extractor.
//!
//! Two encoder stacks feed a single-head acoustic/textual cross-attention
//! layer. The pooled self- and cross-attended sequences are concatenated into
//! `h = [avg(X'a); avg(Xat); avg(Xta); avg(X't)]` and classified as
//! consistent / inconsistent by FC1 -> FC2 -> FC3 -> output. The hidden FC
//! outputs (or the classifier decision) serve as the ATEI representation.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, SegmentRecord};
use crate::encoder::{DropoutCtx, EncoderConfig, EncoderStack, Trace};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, SeqMask};
use crate::history::{BatchRecord, EpochAccumulator, LossBreakdown, Phase, TrainHistory};
use crate::labels::{ConsistencyLabel, SentimentLabel};
use crate::layers::Dense;
use crate::optim::{Adam, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

/// 1 iff the two sentiment labels are equal.
pub fn consistency_label(sent_a: SentimentLabel, sent_t: SentimentLabel) -> ConsistencyLabel {
    if sent_a == sent_t {
        ConsistencyLabel::Consistent
    } else {
        ConsistencyLabel::Inconsistent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FcLayer {
    Fc1,
    Fc2,
    Fc3,
}

impl FcLayer {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// How the extractor's output is handed to the fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AteiMode {
    /// Hard decision, a single 0/1 value (no gradient).
    ZeroOne,
    /// The two pre-softmax output-layer logits.
    ZeroOneLogits,
    /// Post-ReLU output of one hidden FC layer.
    Embedding(FcLayer),
}

impl AteiMode {
    pub fn width(self, fc_dim: usize) -> usize {
        match self {
            AteiMode::ZeroOne => 1,
            AteiMode::ZeroOneLogits => 2,
            AteiMode::Embedding(_) => fc_dim,
        }
    }
}

/// Per-segment ATEI representation.
#[derive(Clone, Debug, PartialEq)]
pub enum AteiRepresentation {
    ZeroOne(u8),
    ZeroOneLogits([f32; 2]),
    Embedding { layer: FcLayer, values: Vec<f32> },
}

impl AteiRepresentation {
    pub fn mode(&self) -> AteiMode {
        match self {
            AteiRepresentation::ZeroOne(_) => AteiMode::ZeroOne,
            AteiRepresentation::ZeroOneLogits(_) => AteiMode::ZeroOneLogits,
            AteiRepresentation::Embedding { layer, .. } => AteiMode::Embedding(*layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AteiConfig {
    /// Encoder stacks inside the extractor (`n_blocks` is N_atei).
    pub encoder: EncoderConfig,
    /// Width of FC1..FC3.
    pub fc_dim: usize,
}

impl AteiConfig {
    pub fn paper() -> Self {
        AteiConfig {
            encoder: EncoderConfig::paper(),
            fc_dim: 1024,
        }
    }

    pub fn desk() -> Self {
        AteiConfig {
            encoder: EncoderConfig::desk(),
            fc_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fc_dim == 0 {
            return Err(Error::Config("fc_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub q_a: ParamId,
    pub k_a: ParamId,
    pub v_a: ParamId,
    pub q_t: ParamId,
    pub k_t: ParamId,
    pub v_t: ParamId,
}

#[derive(Clone, Debug)]
pub struct AteiNetwork {
    pub cfg: AteiConfig,
    pub acoustic: EncoderStack,
    pub textual: EncoderStack,
    pub cross: CrossAttentionParams,
    pub fc: [Dense; 3],
    pub output: Dense,
    pub alpha_logits: ParamId,
}

/// Graph nodes of one extractor forward pass.
#[derive(Clone, Debug)]
pub struct AteiNodes {
    pub xa: NodeId,
    pub xt: NodeId,
    pub x_at: NodeId,
    pub x_ta: NodeId,
    pub hidden: NodeId,
    pub fc: [NodeId; 3],
    pub logits: NodeId,
    pub cross_attention: [NodeId; 2],
}

impl AteiNetwork {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dims: (usize, usize),
        cfg: &AteiConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.encoder.model_dim;
        let acoustic = EncoderStack::new(store, &format!("{prefix}.acoustic"), input_dims.0, &cfg.encoder, rng);
        let textual = EncoderStack::new(store, &format!("{prefix}.textual"), input_dims.1, &cfg.encoder, rng);
        let mut sq = |n: &str| store.add_xavier(format!("{prefix}.cross.{n}"), d, d, rng);
        let cross = CrossAttentionParams {
            q_a: sq("q_a"),
            k_a: sq("k_a"),
            v_a: sq("v_a"),
            q_t: sq("q_t"),
            k_t: sq("k_t"),
            v_t: sq("v_t"),
        };
        let fc = [
            Dense::new(store, &format!("{prefix}.fc1"), 4 * d, cfg.fc_dim, rng),
            Dense::new(store, &format!("{prefix}.fc2"), cfg.fc_dim, cfg.fc_dim, rng),
            Dense::new(store, &format!("{prefix}.fc3"), cfg.fc_dim, cfg.fc_dim, rng),
        ];
        let output = Dense::new(store, &format!("{prefix}.output"), cfg.fc_dim, 2, rng);
        let alpha_logits = store.add_zeros(format!("{prefix}.alpha_logits"), 1, cfg.fc_dim);
        AteiNetwork {
            cfg: cfg.clone(),
            acoustic,
            textual,
            cross,
            fc,
            output,
            alpha_logits,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.acoustic.param_ids();
        ids.extend(self.textual.param_ids());
        let c = &self.cross;
        ids.extend([c.q_a, c.k_a, c.v_a, c.q_t, c.k_t, c.v_t]);
        for l in self.fc.iter().chain(std::iter::once(&self.output)) {
            ids.extend(l.param_ids());
        }
        ids.push(self.alpha_logits);
        ids
    }

    /// Runs both stacks, cross-attention, pooling and the FC classifier.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        acoustic: (NodeId, &SeqMask),
        textual: (NodeId, &SeqMask),
        dropout: &mut Option<DropoutCtx<'_>>,
        trace: &mut Trace,
    ) -> Result<AteiNodes> {
        let xa = self.acoustic.forward(g, store, acoustic.0, acoustic.1, dropout, trace)?;
        let xt = self.textual.forward(g, store, textual.0, textual.1, dropout, trace)?;
        let (x_at, x_ta) = cross_attend(
            g,
            store,
            (xa, acoustic.1),
            (xt, textual.1),
            &self.cross,
            self.cfg.encoder.head_dim,
        )?;
        let hidden = build_atei_hidden(g, [xa, x_at, x_ta, xt], acoustic.1, textual.1)?;
        let mut h = hidden;
        let mut fc = [hidden; 3];
        for (slot, layer) in fc.iter_mut().zip(&self.fc) {
            let z = layer.forward(g, store, h)?;
            h = g.relu(z)?;
            *slot = h;
        }
        let logits = self.output.forward(g, store, h)?;
        Ok(AteiNodes {
            xa,
            xt,
            x_at,
            x_ta,
            hidden,
            fc,
            logits,
            cross_attention: [x_at, x_ta],
        })
    }

    /// The node handed to fusion for `mode`, optionally scaled by `softmax(alpha_logits)`.
    pub fn representation_node<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        nodes: &AteiNodes,
        mode: AteiMode,
        scaling: bool,
    ) -> Result<NodeId> {
        match mode {
            AteiMode::ZeroOne => {
                let decisions = zero_one_decisions(g.value(nodes.logits));
                g.input(Tensor::matrix(decisions.len(), 1, decisions)?)
            }
            AteiMode::ZeroOneLogits => Ok(nodes.logits),
            AteiMode::Embedding(layer) => {
                let e = nodes.fc[layer.index()];
                if scaling {
                    let alpha = g.param(store, self.alpha_logits);
                    scale_atei(g, e, alpha)
                } else {
                    Ok(e)
                }
            }
        }
    }

    /// Current `softmax(alpha_logits)`.
    pub fn alpha<F: Scalar>(&self, store: &ParamStore<F>) -> Vec<f64> {
        softmax_f64(store.value(self.alpha_logits).data())
    }
}

/// Argmax of each row of a `B x 2` logit matrix as 0.0 / 1.0 (ties go to 0).
fn zero_one_decisions<F: Scalar>(logits: &Tensor<F>) -> Vec<F> {
    (0..logits.rows())
        .map(|r| {
            if logits.get(r, 1) > logits.get(r, 0) {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect()
}

fn softmax_f64<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Single-head cross-attention in both directions.
///
/// Acoustic queries attend over textual keys (`X_at`, masked by the textual
/// mask) and textual queries over acoustic keys (`X_ta`).
pub fn cross_attend<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    acoustic: (NodeId, &SeqMask),
    textual: (NodeId, &SeqMask),
    p: &CrossAttentionParams,
    head_dim: usize,
) -> Result<(NodeId, NodeId)> {
    if acoustic.1.groups != textual.1.groups {
        return Err(Error::Shape(format!(
            "cross attention over {} acoustic and {} textual sequences",
            acoustic.1.groups, textual.1.groups
        )));
    }
    let scale = F::of(1.0 / (head_dim as f64).sqrt());
    let mut proj = |x: NodeId, w: ParamId| -> Result<NodeId> {
        let wn = g.param(store, w);
        g.matmul(x, wn)
    };
    let q_a = proj(acoustic.0, p.q_a)?;
    let k_a = proj(acoustic.0, p.k_a)?;
    let v_a = proj(acoustic.0, p.v_a)?;
    let q_t = proj(textual.0, p.q_t)?;
    let k_t = proj(textual.0, p.k_t)?;
    let v_t = proj(textual.0, p.v_t)?;
    let x_at = g.attention(q_a, k_t, v_t, 1, textual.1, scale)?;
    let x_ta = g.attention(q_t, k_a, v_a, 1, acoustic.1, scale)?;
    Ok((x_at, x_ta))
}

/// `[avg(X'a); avg(Xat); avg(Xta); avg(X't)]`, each average over valid steps.
pub fn build_atei_hidden<F: Scalar>(
    g: &mut Graph<F>,
    [xa, x_at, x_ta, xt]: [NodeId; 4],
    mask_a: &SeqMask,
    mask_t: &SeqMask,
) -> Result<NodeId> {
    let pa = g.segment_mean(xa, mask_a)?;
    let pat = g.segment_mean(x_at, mask_a)?;
    let pta = g.segment_mean(x_ta, mask_t)?;
    let pt = g.segment_mean(xt, mask_t)?;
    g.concat_cols(&[pa, pat, pta, pt])
}

/// `softmax(alpha_logits) * e`, element-wise per row of `e`.
pub fn scale_atei<F: Scalar>(g: &mut Graph<F>, e: NodeId, alpha_logits: NodeId) -> Result<NodeId> {
    if g.value(alpha_logits).cols() != g.value(e).cols() {
        return Err(Error::Dimension {
            op: "scale_atei",
            lhs: g.value(e).shape().to_vec(),
            rhs: g.value(alpha_logits).shape().to_vec(),
        });
    }
    let alpha = g.softmax_masked(alpha_logits, None)?;
    g.mul_row(e, alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Forward graph for one extractor batch; returns the graph and its nodes.
pub fn atei_batch_graph<F: Scalar>(
    net: &AteiNetwork,
    store: &ParamStore<F>,
    batch: &Batch,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<(Graph<F>, AteiNodes)> {
    let mut g = Graph::new();
    let xa = g.input(batch.acoustic.data.cast())?;
    let xt = g.input(batch.textual.data.cast())?;
    let nodes = net.forward(
        &mut g,
        store,
        (xa, &batch.acoustic.mask),
        (xt, &batch.textual.mask),
        dropout,
        &mut Trace::default(),
    )?;
    Ok((g, nodes))
}

pub(crate) fn count_correct<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| argmax(logits.row_slice(r)) == t)
        .count()
}

pub(crate) fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Consistency pretraining of the extractor with Adam on its own parameters.
///
/// Every epoch reshuffles with a stream derived from `(seed, epoch)`; the
/// returned history holds one record per epoch and per batch.
pub fn pretrain_atei(
    net: &AteiNetwork,
    store: &mut ParamStore<f32>,
    records: &[&SegmentRecord],
    cfg: &PretrainConfig,
) -> Result<TrainHistory> {
    if records.is_empty() {
        return Err(Error::Data("cannot pretrain on an empty dataset".into()));
    }
    let positives = records
        .iter()
        .filter(|r| r.consistency == ConsistencyLabel::Consistent)
        .count();
    if positives == 0 || positives == records.len() {
        log::warn!("consistency labels are single-class; the extractor cannot learn a boundary");
    }
    let adam = Adam::new(cfg.lr);
    let ids = net.param_ids();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(records, cfg.batch_size, rng::derive_seed(cfg.seed, &[1, epoch as u64]))?;
        let mut drop_rng = rng::stream(cfg.seed, &[2, epoch as u64]);
        let mut acc = EpochAccumulator::new(Phase::Pretrain, epoch);
        for batch in &batches {
            let mut dropout = Some(DropoutCtx {
                rate: net.cfg.encoder.dropout,
                rng: &mut drop_rng,
            });
            let (mut g, nodes) = atei_batch_graph(net, store, batch, &mut dropout)?;
            let loss = g.cross_entropy(nodes.logits, &batch.consistency)?;
            store.zero_grad();
            g.backward(loss, store)?;
            adam.step(store, &ids);
            let l = g.value(loss).item();
            let rec = LossBreakdown {
                total: l,
                depression: 0.0,
                atei: l,
            };
            acc.add(&rec, count_correct(g.value(nodes.logits), &batch.consistency), batch.len());
            history.batches.push(BatchRecord {
                phase: Phase::Pretrain,
                epoch,
                loss: rec,
                alpha_sum: None,
                alpha_min: None,
            });
        }
        let record = acc.finish();
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} consistency acc {:.3}",
            record.mean_total,
            record.accuracy
        );
        history.epochs.push(record);
    }
    Ok(history)
}

/// Consistency-prediction accuracy of the extractor on `records` (inference mode).
pub fn consistency_accuracy(
    net: &AteiNetwork,
    store: &ParamStore<f32>,
    records: &[&SegmentRecord],
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0;
    for batch in crate::data::make_batches_ordered(records, batch_size)? {
        let (g, nodes) = atei_batch_graph(net, store, &batch, &mut None)?;
        correct += count_correct(g.value(nodes.logits), &batch.consistency);
    }
    Ok(correct as f64 / records.len().max(1) as f64)
}

/// Extractor outputs for a single segment in inference mode.
pub fn atei_representations(
    net: &AteiNetwork,
    store: &ParamStore<f32>,
    record: &SegmentRecord,
) -> Result<Vec<AteiRepresentation>> {
    let batch = Batch::build(&[record], &[0])?;
    let (g, nodes) = atei_batch_graph(net, store, &batch, &mut None)?;
    let logits = g.value(nodes.logits).row_slice(0);
    let mut out = vec![
        AteiRepresentation::ZeroOne(argmax(logits) as u8),
        AteiRepresentation::ZeroOneLogits([logits[0], logits[1]]),
    ];
    for layer in [FcLayer::Fc1, FcLayer::Fc2, FcLayer::Fc3] {
        out.push(AteiRepresentation::Embedding {
            layer,
            values: g.value(nodes.fc[layer.index()]).row_slice(0).to_vec(),
        });
    }
    Ok(out)
}
