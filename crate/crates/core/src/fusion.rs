//! Feature fusion, the depression classifier, the joint loss, and the
//! incremental (pretrain, then joint) training schedule.

use serde::{Deserialize, Serialize};

use crate::atei::{argmax, count_correct, pretrain_atei, AteiConfig, AteiMode, AteiNetwork, AteiNodes, PretrainConfig};
use crate::data::{make_batches, make_batches_ordered, Batch, SegmentRecord};
use crate::encoder::{aggregate_mean, DropoutCtx, EncoderConfig, EncoderStack, Trace};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::history::{BatchRecord, EpochAccumulator, LossBreakdown, Phase, TrainHistory};
use crate::labels::DepressionClass;
use crate::layers::Dense;
use crate::optim::{Adam, ParamId, ParamStore, Parameter};
use crate::rng;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Add,
    Mult,
    Concat,
}

/// Fuses the present inputs in (A, T, E) order.
///
/// `Add`/`Mult` are element-wise and need equal widths; `Concat` stacks the
/// columns so every input coordinate lands verbatim at a fixed offset.
pub fn fuse<F: Scalar>(g: &mut Graph<F>, inputs: &[NodeId], strategy: FusionStrategy) -> Result<NodeId> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Contract("fusion needs at least one input".into()))?;
    if strategy == FusionStrategy::Concat {
        return g.concat_cols(inputs);
    }
    let width = g.value(first).cols();
    for &x in &inputs[1..] {
        let w = g.value(x).cols();
        if w != width {
            if w == 1 || width == 1 {
                return Err(Error::Config(
                    "a scalar 0/1 ATEI value can only be fused by concatenation".into(),
                ));
            }
            return Err(Error::Dimension {
                op: "fuse",
                lhs: g.value(first).shape().to_vec(),
                rhs: g.value(x).shape().to_vec(),
            });
        }
    }
    let mut acc = first;
    for &x in &inputs[1..] {
        acc = match strategy {
            FusionStrategy::Add => g.add(acc, x)?,
            FusionStrategy::Mult => g.mul(acc, x)?,
            FusionStrategy::Concat => unreachable!(),
        };
    }
    Ok(acc)
}

/// FC(hidden) -> ReLU -> FC(hidden) -> ReLU -> FC(3).
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
}

impl ClassifierHead {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, input_dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        ClassifierHead {
            fc1: Dense::new(store, "head.fc1", input_dim, hidden, rng),
            fc2: Dense::new(store, "head.fc2", hidden, hidden, rng),
            out: Dense::new(store, "head.out", hidden, DepressionClass::COUNT, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2, &self.out]
            .iter()
            .flat_map(|d| d.param_ids())
            .collect()
    }
}

/// Returns `(final hidden layer, logits)`.
pub fn classify<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    fused: NodeId,
    head: &ClassifierHead,
) -> Result<(NodeId, NodeId)> {
    let expected = store.value(head.fc1.w).rows();
    if g.value(fused).cols() != expected {
        return Err(Error::Dimension {
            op: "classify",
            lhs: g.value(fused).shape().to_vec(),
            rhs: store.value(head.fc1.w).shape().to_vec(),
        });
    }
    let h = head.fc1.forward(g, store, fused)?;
    let h = g.relu(h)?;
    let h = head.fc2.forward(g, store, h)?;
    let h = g.relu(h)?;
    let logits = head.out.forward(g, store, h)?;
    Ok((h, logits))
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct JointLossNodes {
    pub total: NodeId,
    pub depression: NodeId,
    pub atei: Option<NodeId>,
}

impl JointLossNodes {
    pub fn breakdown<F: Scalar>(&self, g: &Graph<F>) -> LossBreakdown {
        let val = |n: NodeId| g.value(n).item().as_f64() as f32;
        LossBreakdown {
            total: val(self.total),
            depression: val(self.depression),
            atei: self.atei.map_or(0.0, val),
        }
    }
}

/// `L_total = L_depression + L_atei`, unweighted. Without an ATEI branch the
/// total node is the depression node itself.
pub fn joint_loss<F: Scalar>(
    g: &mut Graph<F>,
    dep_logits: NodeId,
    dep_labels: &[usize],
    atei: Option<(NodeId, &[usize])>,
) -> Result<JointLossNodes> {
    let depression = g.cross_entropy(dep_logits, dep_labels)?;
    match atei {
        None => Ok(JointLossNodes {
            total: depression,
            depression,
            atei: None,
        }),
        Some((logits, labels)) => {
            let a = g.cross_entropy(logits, labels)?;
            let total = g.add(depression, a)?;
            Ok(JointLossNodes {
                total,
                depression,
                atei: Some(a),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub fusion: FusionStrategy,
    /// `null` switches the ATEI branch off.
    pub atei_mode: Option<AteiMode>,
    pub scaling: bool,
    /// Include the textual branch `e^(T)`; false gives the A / A+E systems.
    pub use_text: bool,
    pub encoder: EncoderConfig,
    pub atei: AteiConfig,
    /// Width of the two hidden classifier layers.
    pub classifier_dim: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 64,
            max_epochs: 30,
            pretrain_epochs: 10,
            seed: 0,
            fusion: FusionStrategy::Concat,
            atei_mode: Some(AteiMode::Embedding(crate::atei::FcLayer::Fc2)),
            scaling: true,
            use_text: true,
            encoder: EncoderConfig::paper(),
            atei: AteiConfig::paper(),
            classifier_dim: 1024,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            encoder: EncoderConfig::desk(),
            atei: AteiConfig::desk(),
            classifier_dim: 16,
            ..Self::paper()
        }
    }

    /// A+T system without the ATEI branch.
    pub fn baseline(mut self) -> Self {
        self.atei_mode = None;
        self.scaling = false;
        self.pretrain_epochs = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.classifier_dim == 0 {
            return Err(Error::Config(
                "lr, batch_size, max_epochs and classifier_dim must be positive".into(),
            ));
        }
        self.encoder.validate()?;
        self.atei.validate()?;
        match self.atei_mode {
            None => {
                if self.scaling {
                    return Err(Error::Config("scaling needs an ATEI embedding mode".into()));
                }
                if self.pretrain_epochs > 0 {
                    return Err(Error::Config(
                        "pretrain_epochs > 0 needs an ATEI mode".into(),
                    ));
                }
            }
            Some(AteiMode::Embedding(_)) => {}
            Some(mode) => {
                if self.scaling {
                    return Err(Error::Config(format!("scaling applies to embeddings only, not {mode:?}")));
                }
                if self.fusion != FusionStrategy::Concat {
                    return Err(Error::Config(
                        "0/1 ATEI representations can only be fused by concatenation".into(),
                    ));
                }
            }
        }
        if self.fusion != FusionStrategy::Concat {
            if let Some(AteiMode::Embedding(_)) = self.atei_mode {
                if self.atei.fc_dim != self.encoder.model_dim {
                    return Err(Error::Config(format!(
                        "{:?} fusion needs fc_dim ({}) == model_dim ({})",
                        self.fusion, self.atei.fc_dim, self.encoder.model_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        let d = self.encoder.model_dim;
        let e = self.atei_mode.map(|m| m.width(self.atei.fc_dim));
        match self.fusion {
            FusionStrategy::Concat => d + if self.use_text { d } else { 0 } + e.unwrap_or(0),
            _ => d,
        }
    }
}

/// Parameter ids of every component; values live in a `ParamStore`.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub acoustic: EncoderStack,
    pub textual: Option<EncoderStack>,
    pub atei: Option<AteiNetwork>,
    pub head: ClassifierHead,
}

/// Graph nodes of one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub e_a: NodeId,
    pub e_t: Option<NodeId>,
    pub atei: Option<AteiNodes>,
    pub e_e: Option<NodeId>,
    pub fused: NodeId,
    pub head_hidden: NodeId,
    pub logits: NodeId,
    pub trace: Trace,
}

impl ModelLayout {
    /// Each component draws its initial weights from its own stream, so the
    /// extractor starts identically whatever the rest of the system is.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &TrainConfig, input_dims: (usize, usize)) -> Self {
        let atei = cfg.atei_mode.map(|_| {
            AteiNetwork::new(store, "atei", input_dims, &cfg.atei, &mut rng::stream(cfg.seed, &[12]))
        });
        let acoustic = EncoderStack::new(store, "acoustic", input_dims.0, &cfg.encoder, &mut rng::stream(cfg.seed, &[10]));
        let textual = cfg
            .use_text
            .then(|| EncoderStack::new(store, "textual", input_dims.1, &cfg.encoder, &mut rng::stream(cfg.seed, &[11])));
        let head = ClassifierHead::new(store, cfg.fused_dim(), cfg.classifier_dim, &mut rng::stream(cfg.seed, &[13]));
        ModelLayout {
            acoustic,
            textual,
            atei,
            head,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        cfg: &TrainConfig,
        batch: &Batch,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<ForwardNodes> {
        let mut trace = Trace::default();
        let xa = g.input(batch.acoustic.data.cast())?;
        let ha = self.acoustic.forward(g, store, xa, &batch.acoustic.mask, dropout, &mut trace)?;
        let e_a = aggregate_mean(g, ha, &batch.acoustic.mask)?;
        let xt = match (&self.textual, &self.atei) {
            (None, None) => None,
            _ => Some(g.input(batch.textual.data.cast())?),
        };
        let e_t = match (&self.textual, xt) {
            (Some(enc), Some(xt)) => {
                let ht = enc.forward(g, store, xt, &batch.textual.mask, dropout, &mut trace)?;
                Some(aggregate_mean(g, ht, &batch.textual.mask)?)
            }
            _ => None,
        };
        let (atei_nodes, e_e) = match (&self.atei, cfg.atei_mode, xt) {
            (Some(net), Some(mode), Some(xt)) => {
                let nodes = net.forward(
                    g,
                    store,
                    (xa, &batch.acoustic.mask),
                    (xt, &batch.textual.mask),
                    dropout,
                    &mut trace,
                )?;
                trace.attention.extend(nodes.cross_attention);
                let e = net.representation_node(g, store, &nodes, mode, cfg.scaling)?;
                (Some(nodes), Some(e))
            }
            _ => (None, None),
        };
        let inputs: Vec<NodeId> = std::iter::once(e_a).chain(e_t).chain(e_e).collect();
        let fused = fuse(g, &inputs, cfg.fusion)?;
        let (head_hidden, logits) = classify(g, store, fused, &self.head)?;
        Ok(ForwardNodes {
            e_a,
            e_t,
            atei: atei_nodes,
            e_e,
            fused,
            head_hidden,
            logits,
            trace,
        })
    }

    /// Forward plus joint loss for one batch.
    pub fn loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        cfg: &TrainConfig,
        batch: &Batch,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<(ForwardNodes, JointLossNodes)> {
        let nodes = self.forward(g, store, cfg, batch, dropout)?;
        let atei = nodes.atei.as_ref().map(|a| (a.logits, batch.consistency.as_slice()));
        let loss = joint_loss(g, nodes.logits, &batch.depression, atei)?;
        Ok((nodes, loss))
    }
}

/// A trained (or freshly initialized) depression detector.
#[derive(Clone, Debug)]
pub struct DepressionModel {
    pub cfg: TrainConfig,
    pub input_dims: (usize, usize),
    pub store: ParamStore<f32>,
    pub layout: ModelLayout,
}

impl DepressionModel {
    pub fn new(cfg: &TrainConfig, input_dims: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let layout = ModelLayout::new(&mut store, cfg, input_dims);
        Ok(DepressionModel {
            cfg: cfg.clone(),
            input_dims,
            store,
            layout,
        })
    }

    /// Class probabilities for every record, in order (inference mode).
    pub fn predict(&self, records: &[&SegmentRecord]) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(records.len());
        for batch in make_batches_ordered(records, self.cfg.batch_size)? {
            let mut g = Graph::new();
            let nodes = self.layout.forward(&mut g, &self.store, &self.cfg, &batch, &mut None)?;
            let logits = g.value(nodes.logits);
            for r in 0..logits.rows() {
                out.push(softmax3(logits.row_slice(r)));
            }
        }
        Ok(out)
    }

    pub fn predict_segment(&self, record: &SegmentRecord) -> Result<[f64; 3]> {
        Ok(self.predict(&[record])?[0])
    }

    pub fn alpha(&self) -> Option<Vec<f64>> {
        self.layout.atei.as_ref().map(|a| a.alpha(&self.store))
    }
}

fn softmax3(logits: &[f32]) -> [f64; 3] {
    let max = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

pub fn predicted_class(probs: &[f64; 3]) -> DepressionClass {
    DepressionClass::from_index(argmax(probs)).expect("three classes")
}

/// Pretrains the extractor (when present), then optimizes the joint loss
/// over the whole network.
///
/// The history holds `pretrain_epochs + max_epochs` epoch records and one
/// record per batch. Every stochastic choice derives from `cfg.seed`.
pub fn train_incremental(records: &[&SegmentRecord], cfg: &TrainConfig) -> Result<(DepressionModel, TrainHistory)> {
    if records.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let dims = validate_records_refs(records)?;
    let mut model = DepressionModel::new(cfg, dims)?;
    let mut history = pretrain_model(&mut model, records)?;
    history.append(joint_train(&mut model, records)?);
    Ok((model, history))
}

/// Extractor parameters, optimizer state included, right after pretraining.
#[derive(Clone, Debug)]
pub struct PretrainedAtei {
    pub params: Vec<Parameter<f32>>,
    pub history: TrainHistory,
}

/// Everything pretraining depends on besides the records, or `None` when the
/// config has no extractor. Configs with equal keys pretrain identically.
pub fn pretrain_key(cfg: &TrainConfig) -> Option<String> {
    cfg.atei_mode?;
    serde_json::to_string(&(cfg.seed, &cfg.atei, cfg.lr, cfg.batch_size, cfg.pretrain_epochs)).ok()
}

impl DepressionModel {
    pub fn atei_params(&self) -> Option<Vec<Parameter<f32>>> {
        let net = self.layout.atei.as_ref()?;
        Some(net.param_ids().into_iter().map(|id| self.store.get(id).clone()).collect())
    }

    /// Overwrites the extractor's parameters with `params`, which must come
    /// from an extractor of the same configuration.
    pub fn set_atei_params(&mut self, params: &[Parameter<f32>]) -> Result<()> {
        let net = self
            .layout
            .atei
            .as_ref()
            .ok_or_else(|| Error::Config("the model has no extractor".into()))?;
        let ids = net.param_ids();
        if ids.len() != params.len() {
            return Err(Error::Data(format!("{} extractor tensors for {} slots", params.len(), ids.len())));
        }
        for (id, p) in ids.into_iter().zip(params) {
            let slot = self.store.get_mut(id);
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::Data(format!("extractor tensor {} does not fit slot {}", p.name, slot.name)));
            }
            *slot = p.clone();
        }
        Ok(())
    }
}

/// [`train_incremental`] that reuses a previous pretraining result when
/// `cache` holds one for the same [`pretrain_key`] and stores new ones.
///
/// Callers must only share a cache between runs on the same records.
pub fn train_incremental_cached(
    records: &[&SegmentRecord],
    cfg: &TrainConfig,
    cache: &std::sync::Mutex<std::collections::HashMap<String, PretrainedAtei>>,
) -> Result<(DepressionModel, TrainHistory)> {
    if records.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let dims = validate_records_refs(records)?;
    let mut model = DepressionModel::new(cfg, dims)?;
    let key = pretrain_key(cfg);
    let hit = key
        .as_ref()
        .and_then(|k| cache.lock().expect("pretrain cache lock").get(k).cloned());
    let mut history = match hit {
        Some(pre) => {
            model.set_atei_params(&pre.params)?;
            pre.history
        }
        None => {
            let h = pretrain_model(&mut model, records)?;
            if let (Some(k), Some(params)) = (key, model.atei_params()) {
                cache
                    .lock()
                    .expect("pretrain cache lock")
                    .insert(k, PretrainedAtei { params, history: h.clone() });
            }
            h
        }
    };
    history.append(joint_train(&mut model, records)?);
    Ok((model, history))
}

/// Consistency pretraining of the model's extractor; a no-op without one.
pub fn pretrain_model(model: &mut DepressionModel, records: &[&SegmentRecord]) -> Result<TrainHistory> {
    let Some(net) = &model.layout.atei else {
        return Ok(TrainHistory::default());
    };
    check_dims(records, model.input_dims)?;
    let cfg = &model.cfg;
    let pre = PretrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.pretrain_epochs,
        seed: rng::derive_seed(cfg.seed, &[20]),
    };
    pretrain_atei(net, &mut model.store, records, &pre)
}

fn check_dims(records: &[&SegmentRecord], expected: (usize, usize)) -> Result<()> {
    let dims = validate_records_refs(records)?;
    if dims != expected {
        return Err(Error::Data(format!("records have feature dims {dims:?}, model expects {expected:?}")));
    }
    Ok(())
}

fn validate_records_refs(records: &[&SegmentRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    let dims = (first.acoustic.dim(), first.textual.dim());
    for r in records {
        if (r.acoustic.dim(), r.textual.dim()) != dims {
            return Err(Error::Data(format!(
                "segment {} has feature dims ({}, {}), expected {dims:?}",
                r.segment_id,
                r.acoustic.dim(),
                r.textual.dim()
            )));
        }
    }
    Ok(dims)
}

/// Optimizes the joint loss over every parameter for `max_epochs` epochs.
pub fn joint_train(model: &mut DepressionModel, records: &[&SegmentRecord]) -> Result<TrainHistory> {
    if records.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    check_dims(records, model.input_dims)?;
    let cfg = model.cfg.clone();
    let adam = Adam::new(cfg.lr);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.max_epochs {
        let batches = make_batches(records, cfg.batch_size, rng::derive_seed(cfg.seed, &[30, epoch as u64]))?;
        let mut drop_rng = rng::stream(cfg.seed, &[31, epoch as u64]);
        let mut acc = EpochAccumulator::new(Phase::Joint, epoch);
        for batch in &batches {
            let mut dropout = Some(DropoutCtx {
                rate: cfg.encoder.dropout,
                rng: &mut drop_rng,
            });
            let mut g = Graph::new();
            let (nodes, loss) = model.layout.loss(&mut g, &model.store, &cfg, batch, &mut dropout)?;
            model.store.zero_grad();
            g.backward(loss.total, &mut model.store)?;
            adam.step(&mut model.store, &ids);
            let breakdown = loss.breakdown(&g);
            acc.add(&breakdown, count_correct(g.value(nodes.logits), &batch.depression), batch.len());
            let alpha = cfg
                .scaling
                .then(|| model.layout.atei.as_ref().map(|a| a.alpha(&model.store)))
                .flatten();
            history.batches.push(BatchRecord {
                phase: Phase::Joint,
                epoch,
                loss: breakdown,
                alpha_sum: alpha.as_ref().map(|a| a.iter().sum()),
                alpha_min: alpha.as_ref().map(|a| a.iter().copied().fold(f64::INFINITY, f64::min)),
            });
        }
        let record = acc.finish();
        log::info!(
            "joint epoch {epoch}: loss {:.4} (dep {:.4}, atei {:.4}) acc {:.3}",
            record.mean_total,
            record.mean_depression,
            record.mean_atei,
            record.accuracy
        );
        history.epochs.push(record);
    }
    Ok(history)
}
