//! Sparse geometry feature enhancement: multi-scale sparse projection (MSP)
//! followed by attentive multi-scale fusion (AMF).
//!
//! For each pooling factor `s`, MSP computes the offset of every voxel from
//! its cell mean, turns that shift into a per-channel weight on the input,
//! and embeds the result. AMF sums the per-scale embeddings, derives a
//! logistic gate per scale and channel from the sum, and returns the gated
//! re-sum.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Eager, Op};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::sparse_conv::{leaky, linear};
use crate::sparse_tensor::{CoordSet, Pooling, ScaleSet, ScaleStack, SparseVoxelTensor, stack_scales};

/// Output nonlinearity of the shift-to-weight map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MspGate {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// One affine map `C → K·C` shared across scales.
    #[default]
    Shared,
    /// Independent `C → C` map per scale.
    PerScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgfeConfig {
    pub scales: ScaleSet,
    pub channels: usize,
    pub slope: f64,
    pub gate: MspGate,
    pub attention: AttentionKind,
}

impl SgfeConfig {
    pub fn new(scales: ScaleSet, channels: usize) -> Self {
        Self {
            scales,
            channels,
            slope: crate::sparse_conv::DEFAULT_LEAKY_SLOPE,
            gate: MspGate::Linear,
            attention: AttentionKind::Shared,
        }
    }
}

pub fn init_sgfe(store: &mut ParameterStore, prefix: &str, cfg: &SgfeConfig, rng: &mut impl rand::Rng) {
    let c = cfg.channels;
    for s in cfg.scales.as_slice() {
        // The weight map multiplies features, so it gets unit gain.
        store.init_linear(&format!("{prefix}.msp.s{s}.weight"), 1, c, c, 1.0, rng);
        store.init_linear(&format!("{prefix}.msp.s{s}.embed"), 1, c, c, cfg.slope, rng);
    }
    let k = cfg.scales.len();
    match cfg.attention {
        AttentionKind::Shared => store.init_linear(&format!("{prefix}.amf.attn"), 1, c, k * c, 1.0, rng),
        AttentionKind::PerScale => {
            for i in 0..k {
                store.init_linear(&format!("{prefix}.amf.attn{i}"), 1, c, c, 1.0, rng);
            }
        }
    }
}

/// `F − UpsampleNearest(AvgPool(F, s))` on the coordinates of `F`.
pub fn projection_shift<C: Ctx>(cx: &mut C, f: &C::Var, coords: &CoordSet, s: u32) -> Result<C::Var> {
    let pooling = Pooling::build(coords, s)?;
    let n_src = pooling.parents.len();
    let index: Vec<Option<usize>> = pooling.child_to_parent.iter().map(|&p| Some(p)).collect();
    let pooled = cx.apply(Op::SegmentMean { pooling }, &[f])?;
    let up = cx.apply(Op::Gather { index: Arc::new(index), n_src }, &[&pooled])?;
    cx.apply(Op::WeightedSum { weights: vec![1.0, -1.0] }, &[f, &up])
}

/// Per-scale embeddings, in scale order.
pub fn msp_layer<C: Ctx>(
    cx: &mut C,
    f: &C::Var,
    coords: &CoordSet,
    cfg: &SgfeConfig,
    prefix: &str,
) -> Result<Vec<C::Var>> {
    if coords.is_empty() {
        return Err(Error::Empty("multi-scale projection of an empty tensor".into()));
    }
    let mut out = Vec::with_capacity(cfg.scales.len());
    for &s in cfg.scales.as_slice() {
        let shift = projection_shift(cx, f, coords, s)?;
        let mut w = linear(cx, &shift, &format!("{prefix}.msp.s{s}.weight"))?;
        if cfg.gate == MspGate::Sigmoid {
            w = cx.apply(Op::Sigmoid, &[&w])?;
        }
        let weighted = cx.apply(Op::Mul, &[&w, f])?;
        let e = linear(cx, &weighted, &format!("{prefix}.msp.s{s}.embed"))?;
        out.push(leaky(cx, &e, cfg.slope)?);
    }
    Ok(out)
}

pub fn amf_layer<C: Ctx>(cx: &mut C, slices: &[C::Var], cfg: &SgfeConfig, prefix: &str) -> Result<C::Var> {
    let k = slices.len();
    if k == 0 {
        return Err(Error::shape("attentive fusion of zero scales"));
    }
    let c = cx.value(&slices[0]).ncols();
    let refs: Vec<&C::Var> = slices.iter().collect();
    let g = cx.apply(Op::WeightedSum { weights: vec![1.0; k] }, &refs)?;

    let gates: Vec<C::Var> = match cfg.attention {
        AttentionKind::Shared => {
            let a = linear(cx, &g, &format!("{prefix}.amf.attn"))?;
            let a = cx.apply(Op::Sigmoid, &[&a])?;
            (0..k)
                .map(|i| cx.apply(Op::SliceCols { start: i * c, len: c }, &[&a]))
                .collect::<Result<_>>()?
        }
        AttentionKind::PerScale => (0..k)
            .map(|i| {
                let a = linear(cx, &g, &format!("{prefix}.amf.attn{i}"))?;
                cx.apply(Op::Sigmoid, &[&a])
            })
            .collect::<Result<_>>()?,
    };

    let gated: Vec<C::Var> = gates
        .iter()
        .zip(slices)
        .map(|(a, x)| cx.apply(Op::Mul, &[a, x]))
        .collect::<Result<_>>()?;
    let refs: Vec<&C::Var> = gated.iter().collect();
    cx.apply(Op::WeightedSum { weights: vec![1.0; k] }, &refs)
}

pub fn sgfe_layer<C: Ctx>(cx: &mut C, f: &C::Var, coords: &CoordSet, cfg: &SgfeConfig, prefix: &str) -> Result<C::Var> {
    let slices = msp_layer(cx, f, coords, cfg, prefix)?;
    amf_layer(cx, &slices, cfg, prefix)
}

/// Pre-MLP shift `F − UpsampleNearest(AvgPool(F, s))` for every scale.
pub fn msp_shifts(f: &SparseVoxelTensor, scales: &ScaleSet) -> Result<Vec<Array2<f64>>> {
    let store = ParameterStore::new();
    let mut cx = Eager::new(&store);
    let x = cx.constant(f.feats().clone());
    scales
        .as_slice()
        .iter()
        .map(|&s| {
            let v = projection_shift(&mut cx, &x, f.coord_set(), s)?;
            Ok(cx.take(v))
        })
        .collect()
}

pub fn msp(f: &SparseVoxelTensor, cfg: &SgfeConfig, store: &ParameterStore, prefix: &str) -> Result<ScaleStack> {
    let mut cx = Eager::new(store);
    let x = cx.constant(f.feats().clone());
    let parts = msp_layer(&mut cx, &x, f.coord_set(), cfg, prefix)?
        .into_iter()
        .map(|v| f.with_feats(cx.take(v)))
        .collect::<Result<Vec<_>>>()?;
    stack_scales(&parts)
}

pub fn amf(x: &ScaleStack, cfg: &SgfeConfig, store: &ParameterStore, prefix: &str) -> Result<SparseVoxelTensor> {
    let mut cx = Eager::new(store);
    let slices: Vec<_> = (0..x.num_scales()).map(|k| cx.constant(x.slice(k).into_feats())).collect();
    let out = amf_layer(&mut cx, &slices, cfg, prefix)?;
    SparseVoxelTensor::from_parts(x.coord_set().clone(), cx.take(out))
}

pub fn sgfe(f: &SparseVoxelTensor, cfg: &SgfeConfig, store: &ParameterStore, prefix: &str) -> Result<SparseVoxelTensor> {
    let mut cx = Eager::new(store);
    let x = cx.constant(f.feats().clone());
    let out = sgfe_layer(&mut cx, &x, f.coord_set(), cfg, prefix)?;
    f.with_feats(cx.take(out))
}
