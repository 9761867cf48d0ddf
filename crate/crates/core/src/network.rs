//! The full segmentation network.
//!
//! ```text
//! x0 ─ stem ─┬─ block 1: SFE → V₁ → SGFE → F₁ ─ upsample → O₁ ─┐
//!            ├─ block 2: SFE → V₂ → SGFE → F₂ ─ upsample → O₂ ─┤
//!            ⋮                                                   ├─ concat → head → softmax
//!            └─ block B: SFE → V_B → SGFE → F_B ─ upsample → O_B ┘
//! ```
//!
//! Each SFE is two residual bottlenecks followed, when `stage_stride` is 2,
//! by a stride-2 sparse convolution, so block `i` lives at scale `i`. Every
//! `V_i` also feeds a small auxiliary classifier used for deep supervision
//! during training; the taps are free to ignore at inference.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Eager, Op};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::pointcloud::Label;
use crate::sgfe::{init_sgfe, sgfe_layer, AttentionKind, MspGate, SgfeConfig};
use crate::sparse_conv::{
    bottleneck_layer, build_rulebook, conv, init_bottleneck, leaky, linear, norm, ConvMode, NormKind, Rulebook,
    DEFAULT_LEAKY_SLOPE,
};
use crate::sparse_tensor::{upsample_index, CoordSet, ScaleSet, SparseVoxelTensor};
use crate::voxelizer::{PointVoxelMap, INPUT_CHANNELS};

/// Bottlenecks per sparse feature encoder.
pub const BOTTLENECKS_PER_SFE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub scales: ScaleSet,
    pub num_classes: usize,
    pub leaky_slope: f64,
    /// 2: each block halves resolution; 1: all blocks at the input scale.
    pub stage_stride: u32,
    pub norm: NormKind,
    pub msp_gate: MspGate,
    pub attention: AttentionKind,
    /// Label assigned to points outside the voxel grid.
    pub unlabeled: Label,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            channels: 64,
            scales: ScaleSet::default(),
            num_classes: 20,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            stage_stride: 2,
            norm: NormKind::Batch,
            msp_gate: MspGate::Linear,
            attention: AttentionKind::Shared,
            unlabeled: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::config("num_blocks must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.channels < 1 {
            return Err(Error::config("channels must be positive"));
        }
        if !matches!(self.stage_stride, 1 | 2) {
            return Err(Error::config(format!("stage_stride must be 1 or 2, got {}", self.stage_stride)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn sgfe(&self) -> SgfeConfig {
        SgfeConfig {
            scales: self.scales.clone(),
            channels: self.channels,
            slope: self.leaky_slope,
            gate: self.msp_gate,
            attention: self.attention,
        }
    }

    /// Upsampling factor from block `i` (1-based) back to the input scale.
    pub fn stage_factor(&self, block: usize) -> u32 {
        self.stage_stride.pow(block as u32)
    }
}

/// Deterministic parameter initialization.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let c = cfg.channels;
    let slope = cfg.leaky_slope;
    let batch = cfg.norm == NormKind::Batch;

    store.init_linear("stem.conv", 27, INPUT_CHANNELS, c, slope, &mut rng);
    if batch {
        store.init_norm("stem.bn", c);
    }
    let sgfe = cfg.sgfe();
    for i in 1..=cfg.num_blocks {
        for j in 0..BOTTLENECKS_PER_SFE {
            init_bottleneck(&mut store, &format!("block{i}.sfe.b{j}"), c, cfg.norm, slope, &mut rng);
        }
        if cfg.stage_stride == 2 {
            store.init_linear(&format!("block{i}.sfe.down"), 8, c, c, slope, &mut rng);
            if batch {
                store.init_norm(&format!("block{i}.sfe.down_bn"), c);
            }
        }
        init_sgfe(&mut store, &format!("block{i}.sgfe"), &sgfe, &mut rng);
        store.init_linear(&format!("block{i}.aux"), 1, c, cfg.num_classes, 1.0, &mut rng);
    }
    store.init_linear("head.fc1", 1, cfg.num_blocks * c, c, slope, &mut rng);
    store.init_linear("head.fc2", 1, c, cfg.num_classes, 1.0, &mut rng);
    Ok(store)
}

/// Per-block intermediate values.
#[derive(Debug, Clone)]
pub struct StageTap<V> {
    /// SFE output at the block's own scale.
    pub v: V,
    /// Auxiliary voxel logits computed from `v`.
    pub aux_logits: V,
    /// SGFE output upsampled to the input coordinates.
    pub o: V,
    pub coords: Arc<CoordSet>,
}

#[derive(Debug, Clone)]
pub struct GraphOutput<V> {
    pub logits: V,
    pub probs: V,
    pub taps: Vec<StageTap<V>>,
}

/// Coordinate sets of every block, computed without running the network.
pub fn stage_coords(input: &Arc<CoordSet>, cfg: &NetworkConfig) -> Result<Vec<Arc<CoordSet>>> {
    let mut out = Vec::with_capacity(cfg.num_blocks);
    let mut cur = input.clone();
    for _ in 0..cfg.num_blocks {
        if cfg.stage_stride == 2 {
            cur = build_rulebook(&cur, ConvMode::Strided { stride: 2 })?.out_coords.clone();
        }
        out.push(cur.clone());
    }
    Ok(out)
}

fn submanifold(coords: &Arc<CoordSet>) -> Result<Arc<Rulebook>> {
    build_rulebook(coords, ConvMode::Submanifold { kernel: 3 })
}

/// Builds the network on `cx` for input features on `coords`.
pub fn forward_graph<C: Ctx>(
    cx: &mut C,
    coords: &Arc<CoordSet>,
    feats: Array2<f64>,
    cfg: &NetworkConfig,
) -> Result<GraphOutput<C::Var>> {
    cfg.validate()?;
    if coords.is_empty() {
        return Err(Error::Empty("network input has no voxels".into()));
    }
    if feats.dim() != (coords.len(), INPUT_CHANNELS) {
        return Err(Error::shape(format!(
            "input features {:?}, expected ({}, {INPUT_CHANNELS})",
            feats.dim(),
            coords.len()
        )));
    }
    let slope = cfg.leaky_slope;
    let sgfe = cfg.sgfe();

    let x = cx.constant(feats);
    let mut rb = submanifold(coords)?;
    let mut h = conv(cx, &x, "stem.conv", &rb)?;
    h = norm(cx, &h, "stem.bn", cfg.norm)?;
    h = leaky(cx, &h, slope)?;

    let mut cur = coords.clone();
    let mut taps = Vec::with_capacity(cfg.num_blocks);
    for i in 1..=cfg.num_blocks {
        for j in 0..BOTTLENECKS_PER_SFE {
            h = bottleneck_layer(cx, &h, &format!("block{i}.sfe.b{j}"), &rb, cfg.norm, slope)?;
        }
        if cfg.stage_stride == 2 {
            let down = build_rulebook(&cur, ConvMode::Strided { stride: 2 })?;
            h = conv(cx, &h, &format!("block{i}.sfe.down"), &down)?;
            h = norm(cx, &h, &format!("block{i}.sfe.down_bn"), cfg.norm)?;
            h = leaky(cx, &h, slope)?;
            cur = down.out_coords.clone();
            rb = submanifold(&cur)?;
        }
        let v = h;
        let aux_logits = linear(cx, &v, &format!("block{i}.aux"))?;
        h = sgfe_layer(cx, &v, &cur, &sgfe, &format!("block{i}.sgfe"))?;

        let index = upsample_index(&cur, coords.coords(), cfg.stage_factor(i));
        if index.iter().any(Option::is_none) {
            return Err(Error::shape("stage coordinates do not cover the input"));
        }
        let o = cx.apply(Op::Gather { index: Arc::new(index), n_src: cur.len() }, &[&h])?;
        taps.push(StageTap { v, aux_logits, o, coords: cur.clone() });
    }

    let stacked: Vec<&C::Var> = taps.iter().map(|t| &t.o).collect();
    let l = cx.apply(Op::ConcatCols, &stacked)?;
    let z = linear(cx, &l, "head.fc1")?;
    let z = leaky(cx, &z, slope)?;
    let logits = linear(cx, &z, "head.fc2")?;
    let probs = cx.apply(Op::Softmax, &[&logits])?;
    Ok(GraphOutput { logits, probs, taps })
}

/// Materialized stage outputs.
#[derive(Debug, Clone)]
pub struct StageTaps {
    pub v: Vec<SparseVoxelTensor>,
    pub o: Vec<SparseVoxelTensor>,
}

/// Inference-mode forward pass. Returns per-voxel class probabilities on
/// the input coordinates and the per-block taps.
pub fn forward(t0: &SparseVoxelTensor, cfg: &NetworkConfig, store: &ParameterStore) -> Result<(Array2<f64>, StageTaps)> {
    let mut cx = Eager::new(store);
    let out = forward_graph(&mut cx, t0.coord_set(), t0.feats().clone(), cfg)?;
    let mut taps = StageTaps { v: Vec::new(), o: Vec::new() };
    for tap in out.taps {
        taps.v.push(SparseVoxelTensor::from_parts(tap.coords.clone(), cx.take(tap.v))?);
        taps.o.push(SparseVoxelTensor::from_parts(t0.coord_set().clone(), cx.take(tap.o))?);
    }
    drop(out.logits);
    Ok((cx.take(out.probs), taps))
}

/// Inference-mode class probabilities only.
pub fn predict_probs(t0: &SparseVoxelTensor, cfg: &NetworkConfig, store: &ParameterStore) -> Result<Array2<f64>> {
    let mut cx = Eager::new(store);
    let out = forward_graph(&mut cx, t0.coord_set(), t0.feats().clone(), cfg)?;
    drop(out.taps);
    drop(out.logits);
    Ok(cx.take(out.probs))
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_rows(p: &Array2<f64>) -> Array1<usize> {
    p.outer_iter().map(argmax_row).collect()
}

/// Point labels from voxel probabilities; points without a voxel receive
/// `unlabeled`.
pub fn predict_points(p: &Array2<f64>, map: &PointVoxelMap, unlabeled: Label) -> Result<Vec<Label>> {
    let voxel_labels = argmax_rows(p);
    map.point_to_voxel
        .iter()
        .map(|v| match v {
            None => Ok(unlabeled),
            Some(i) => voxel_labels
                .get(*i as usize)
                .map(|&l| l as Label)
                .ok_or_else(|| Error::Index(format!("voxel {i} out of range for {} rows", p.nrows()))),
        })
        .collect()
}
