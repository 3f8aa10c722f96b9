//! Transformer encoder stacks that turn a frame/token feature sequence into a
//! segment-level embedding.
//!
//! Batches are laid out as `(batch * len) x dim` matrices with a `batch x len`
//! validity mask. Padded rows are carried through position-wise layers but
//! are never attended to and never pooled, so their contents cannot leak
//! into valid outputs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, SeqMask};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Acoustic,
    Textual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Acoustic => "acoustic",
            Modality::Textual => "textual",
        }
    }
}

/// Variable-length feature matrix (`T x D_in`) of one modality of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub features: Tensor<f32>,
    pub valid_mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, features: Tensor<f32>) -> Self {
        let t = features.rows();
        FeatureSequence {
            modality,
            features,
            valid_mask: vec![true; t],
        }
    }

    pub fn with_mask(modality: Modality, features: Tensor<f32>, valid_mask: Vec<bool>) -> Result<Self> {
        if valid_mask.len() != features.rows() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} frames",
                valid_mask.len(),
                features.rows()
            )));
        }
        if !valid_mask.iter().any(|&v| v) {
            return Err(Error::DegenerateMask("sequence without valid positions".into()));
        }
        Ok(FeatureSequence {
            modality,
            features,
            valid_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Segment-level embedding produced by average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEmbedding {
    pub modality: Modality,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            n_blocks: 12,
            n_heads: 8,
            model_dim: 1024,
            head_dim: 128,
            ffn_dim: 4096,
            dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            n_blocks: 2,
            n_heads: 4,
            model_dim: 64,
            head_dim: 16,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.n_heads == 0 || self.model_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} must equal n_heads {} x head_dim {}",
                self.model_dim, self.n_heads, self.head_dim
            )));
        }
        if self.model_dim < 2 || self.ffn_dim == 0 {
            return Err(Error::Config("model_dim >= 2 and ffn_dim >= 1 required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameters of one encoder block. The per-head projections `W^Q_i` are the
/// column blocks `i*head_dim..(i+1)*head_dim` of `wq` (same for `wk`, `wv`).
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl BlockParams {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        BlockParams {
            wq: store.add_xavier(format!("{prefix}.wq"), d, d, rng),
            wk: store.add_xavier(format!("{prefix}.wk"), d, d, rng),
            wv: store.add_xavier(format!("{prefix}.wv"), d, d, rng),
            wo: store.add_xavier(format!("{prefix}.wo"), d, d, rng),
            w1: store.add_xavier(format!("{prefix}.w1"), d, cfg.ffn_dim, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), 1, cfg.ffn_dim),
            w2: store.add_xavier(format!("{prefix}.w2"), cfg.ffn_dim, d, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), 1, d),
            ln1_gain: store.add_ones(format!("{prefix}.ln1.gain"), 1, d),
            ln1_bias: store.add_zeros(format!("{prefix}.ln1.bias"), 1, d),
            ln2_gain: store.add_ones(format!("{prefix}.ln2.gain"), 1, d),
            ln2_bias: store.add_zeros(format!("{prefix}.ln2.bias"), 1, d),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Dropout state for a training forward pass. `None` means inference.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

pub fn apply_dropout<F: Scalar>(g: &mut Graph<F>, x: NodeId, ctx: &mut Option<DropoutCtx<'_>>) -> Result<NodeId> {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let keep = F::of(1.0 / (1.0 - c.rate));
            let mask = (0..g.value(x).len())
                .map(|_| if c.rng.random::<f64>() < c.rate { F::zero() } else { keep })
                .collect();
            g.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// Linear projection of input features to the model dimension.
pub fn project_input<F: Scalar>(g: &mut Graph<F>, x: NodeId, proj: NodeId) -> Result<NodeId> {
    g.matmul(x, proj)
}

/// Sinusoidal table: `pe[t][2i] = sin(t / 10000^(2i/D))`, `pe[t][2i+1] = cos(..)`.
pub fn positional_encoding<F: Scalar>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * dim];
    for t in 0..len {
        for c in 0..dim {
            let pair = (c / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(pair / dim as f64);
            data[t * dim + c] = F::of(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, dim, data).expect("positive dims")
}

/// Adds the sinusoidal table to each of the `groups` sequences of length `len`.
pub fn add_positional_encoding<F: Scalar>(g: &mut Graph<F>, x: NodeId, groups: usize, len: usize) -> Result<NodeId> {
    let dim = g.value(x).cols();
    if g.value(x).rows() != groups * len {
        return Err(Error::Shape(format!(
            "positional encoding for {groups}x{len} rows, got {}",
            g.value(x).rows()
        )));
    }
    let table = positional_encoding::<F>(len, dim);
    let mut tiled = Vec::with_capacity(groups * len * dim);
    for _ in 0..groups {
        tiled.extend_from_slice(table.data());
    }
    let pe = g.input(Tensor::matrix(groups * len, dim, tiled)?)?;
    g.add(x, pe)
}

/// Node ids recorded while building a forward pass, for inspection.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub attention: Vec<NodeId>,
}

/// Post-norm block: self-attention, add & norm, FFN, add & norm.
pub fn encoder_block<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: NodeId,
    mask: &SeqMask,
    p: &BlockParams,
    cfg: &EncoderConfig,
    dropout: &mut Option<DropoutCtx<'_>>,
    trace: &mut Trace,
) -> Result<NodeId> {
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = F::of(1.0 / (cfg.head_dim as f64).sqrt());
    let heads = g.attention(q, k, v, cfg.n_heads, mask, scale)?;
    trace.attention.push(heads);
    let wo = g.param(store, p.wo);
    let attn = g.matmul(heads, wo)?;
    let attn = apply_dropout(g, attn, dropout)?;
    let res = g.add(x, attn)?;
    let (gain, bias) = (g.param(store, p.ln1_gain), g.param(store, p.ln1_bias));
    let z = g.layer_norm(res, gain, bias)?;

    let (w1, b1) = (g.param(store, p.w1), g.param(store, p.b1));
    let (w2, b2) = (g.param(store, p.w2), g.param(store, p.b2));
    let hidden = g.matmul(z, w1)?;
    let hidden = g.add_row(hidden, b1)?;
    let hidden = g.relu(hidden)?;
    let ffn = g.matmul(hidden, w2)?;
    let ffn = g.add_row(ffn, b2)?;
    let ffn = apply_dropout(g, ffn, dropout)?;
    let res = g.add(z, ffn)?;
    let (gain, bias) = (g.param(store, p.ln2_gain), g.param(store, p.ln2_bias));
    g.layer_norm(res, gain, bias)
}

pub fn encoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: NodeId,
    mask: &SeqMask,
    blocks: &[BlockParams],
    cfg: &EncoderConfig,
    dropout: &mut Option<DropoutCtx<'_>>,
    trace: &mut Trace,
) -> Result<NodeId> {
    if g.value(x).cols() != cfg.model_dim {
        return Err(Error::Dimension {
            op: "encoder_forward",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![cfg.model_dim],
        });
    }
    let mut h = x;
    for b in blocks {
        h = encoder_block(g, store, h, mask, b, cfg, dropout, trace)?;
    }
    Ok(h)
}

/// Mean over valid positions of each sequence: `(batch*len) x D -> batch x D`.
pub fn aggregate_mean<F: Scalar>(g: &mut Graph<F>, h: NodeId, mask: &SeqMask) -> Result<NodeId> {
    g.segment_mean(h, mask)
}

/// Input projection, positional encoding and `N` encoder blocks.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub proj: ParamId,
    pub blocks: Vec<BlockParams>,
    pub cfg: EncoderConfig,
}

impl EncoderStack {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Self {
        let proj = store.add_xavier(format!("{prefix}.proj"), input_dim, cfg.model_dim, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockParams::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect();
        EncoderStack {
            proj,
            blocks,
            cfg: cfg.clone(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }

    /// Returns the `(batch*len) x D` hidden sequence (H of the branch).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        mask: &SeqMask,
        dropout: &mut Option<DropoutCtx<'_>>,
        trace: &mut Trace,
    ) -> Result<NodeId> {
        let proj = g.param(store, self.proj);
        let h = project_input(g, x, proj)?;
        let h = add_positional_encoding(g, h, mask.groups, mask.len)?;
        encoder_forward(g, store, h, mask, &self.blocks, &self.cfg, dropout, trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn project_input_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap()).unwrap();
        let eye = g.input(Tensor::identity(2)).unwrap();
        let y = project_input(&mut g, x, eye).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zero = g.input(Tensor::zeros(2, 3)).unwrap();
        let y = project_input(&mut g, x, zero).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(2, 3));

        let sum = g.input(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap()).unwrap();
        let y = project_input(&mut g, x, sum).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let bad = g.input(Tensor::zeros(3, 3)).unwrap();
        assert!(matches!(project_input(&mut g, x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn positional_encoding_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(2, 6)).unwrap();
        let y = add_positional_encoding(&mut g, x, 1, 2).unwrap();
        assert_eq!(g.value(y).row_slice(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((g.value(y).get(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!((g.value(y).get(1, 0) - 0.8415).abs() < 1e-4);

        let twice = add_positional_encoding(&mut g, y, 1, 2).unwrap();
        for (a, b) in g.value(twice).data().iter().zip(g.value(y).data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_mean_cases() {
        let mut g = Graph::<f64>::new();
        let h = g.input(Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 1.0], &[100.0, -7.0]]).unwrap()).unwrap();
        let mask = SeqMask::new(1, 3, vec![true, true, false]).unwrap();
        let e = aggregate_mean(&mut g, h, &mask).unwrap();
        assert_eq!(g.value(e).data(), &[2.0, 2.0]);

        let single = SeqMask::new(1, 3, vec![false, false, true]).unwrap();
        let e = aggregate_mean(&mut g, h, &single).unwrap();
        assert_eq!(g.value(e).data(), &[100.0, -7.0]);

        let none = SeqMask::new(1, 3, vec![false; 3]).unwrap();
        assert!(matches!(aggregate_mean(&mut g, h, &none), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn config_validation() {
        EncoderConfig::paper().validate().unwrap();
        EncoderConfig::desk().validate().unwrap();
        let mut bad = EncoderConfig::desk();
        bad.head_dim = 15;
        assert!(bad.validate().is_err());
        bad = EncoderConfig::desk();
        bad.n_blocks = 0;
        assert!(bad.validate().is_err());
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_blocks: 1,
            n_heads: 2,
            model_dim: 4,
            head_dim: 2,
            ffn_dim: 8,
            dropout: 0.0,
        }
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let block = BlockParams::new(&mut store, "b", &cfg, &mut stream(1, &[]));
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 4, vec![0.1, -0.4, 0.7, 0.2]).unwrap()).unwrap();
        let mask = SeqMask::all_valid(1, 1);
        let mut trace = Trace::default();
        encoder_block(&mut g, &store, x, &mask, &block, &cfg, &mut None, &mut trace).unwrap();
        let (w, _) = g.attention_weights(trace.attention[0]).unwrap();
        assert!(w.iter().all(|&p| p == 1.0));
    }
}
