//! Sparse 3D convolution driven by rulebooks.
//!
//! A rulebook lists, per kernel offset, the `(input_row, output_row)` pairs
//! that interact. Convolution then runs as gather → GEMM → scatter-add per
//! offset, so only active sites are touched.
//!
//! Weights are stored as a `(K·C_in) × C_out` matrix whose `k`-th block of
//! `C_in` rows is the filter for offset `k`.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::autograd::{Ctx, Eager, Op};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::sparse_tensor::{Coord, CoordSet, Pooling, SparseVoxelTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites equal input sites; odd cubic kernel of edge `k`.
    Submanifold { kernel: u32 },
    /// Kernel = stride = `s`; outputs are the unique coarsened cells.
    Strided { stride: u32 },
}

impl ConvMode {
    pub fn kernel_volume(&self) -> usize {
        let k = match *self {
            ConvMode::Submanifold { kernel } => kernel,
            ConvMode::Strided { stride } => stride,
        } as usize;
        k * k * k
    }
}

#[derive(Debug)]
pub struct Rulebook {
    pub mode: ConvMode,
    pub n_in: usize,
    pub out_coords: Arc<CoordSet>,
    /// `pairs[k]` holds `(input_row, output_row)` for kernel offset `k`.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Offset vector for kernel index `k` of a cubic kernel with edge `edge`,
/// shifted by `lo` (−radius for submanifold, 0 for strided).
pub fn kernel_offset(k: usize, edge: u32, lo: i32) -> [i32; 3] {
    let e = edge as usize;
    [(k % e) as i32 + lo, ((k / e) % e) as i32 + lo, (k / (e * e)) as i32 + lo]
}

pub fn build_rulebook(coords: &Arc<CoordSet>, mode: ConvMode) -> Result<Arc<Rulebook>> {
    let n_in = coords.len();
    match mode {
        ConvMode::Submanifold { kernel } => {
            if kernel % 2 == 0 {
                return Err(Error::config(format!("submanifold kernel must be odd, got {kernel}")));
            }
            let r = (kernel / 2) as i32;
            let pairs = (0..mode.kernel_volume())
                .map(|k| {
                    let o = kernel_offset(k, kernel, -r);
                    coords
                        .coords()
                        .iter()
                        .enumerate()
                        .filter_map(|(i, c)| coords.lookup(c.offset(o)).map(|j| (i as u32, j as u32)))
                        .collect()
                })
                .collect();
            Ok(Arc::new(Rulebook { mode, n_in, out_coords: coords.clone(), pairs }))
        }
        ConvMode::Strided { stride } => {
            let pool = Pooling::build(coords, stride)?;
            Ok(strided_rulebook(coords, &pool, stride))
        }
    }
}

fn strided_rulebook(coords: &CoordSet, pool: &Pooling, stride: u32) -> Arc<Rulebook> {
    let s = stride as i32;
    let mut pairs = vec![Vec::new(); (stride * stride * stride) as usize];
    for (i, (c, &j)) in coords.coords().iter().zip(&pool.child_to_parent).enumerate() {
        let p: Coord = pool.parents.coords()[j];
        let [ox, oy, oz] = [c.x - s * p.x, c.y - s * p.y, c.z - s * p.z];
        let k = (ox + s * oy + s * s * oz) as usize;
        pairs[k].push((i as u32, j as u32));
    }
    Arc::new(Rulebook {
        mode: ConvMode::Strided { stride },
        n_in: coords.len(),
        out_coords: pool.parents.clone(),
        pairs,
    })
}

fn check_conv_shapes(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>, rb: &Rulebook) -> Result<usize> {
    let kv = rb.mode.kernel_volume();
    if x.nrows() != rb.n_in {
        return Err(Error::shape(format!("conv input has {} rows, rulebook expects {}", x.nrows(), rb.n_in)));
    }
    if w.nrows() != kv * x.ncols() {
        return Err(Error::shape(format!(
            "conv weight has {} rows, expected {kv}x{}",
            w.nrows(),
            x.ncols()
        )));
    }
    if b.dim() != (1, w.ncols()) {
        return Err(Error::shape(format!("conv bias shape {:?}", b.dim())));
    }
    Ok(x.ncols())
}

fn gather(x: ArrayView2<f64>, rows: impl Iterator<Item = usize>, n: usize) -> Array2<f64> {
    let mut g = Array2::zeros((n, x.ncols()));
    for (mut dst, i) in g.outer_iter_mut().zip(rows) {
        dst.assign(&x.row(i));
    }
    g
}

/// `out[j] = b + Σ_k Σ_{(i,j) ∈ pairs[k]} x[i] · W_k`.
pub fn conv_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>, rb: &Rulebook) -> Result<Array2<f64>> {
    let cin = check_conv_shapes(x, w, b, rb)?;
    let mut out = Array2::zeros((rb.n_out(), w.ncols()));
    out += &b.row(0);
    for (k, pairs) in rb.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let wk = w.slice(s![k * cin..(k + 1) * cin, ..]);
        let g = gather(x, pairs.iter().map(|p| p.0 as usize), pairs.len());
        let prod = g.dot(&wk);
        for (&(_, j), row) in pairs.iter().zip(prod.outer_iter()) {
            let mut dst = out.row_mut(j as usize);
            dst += &row;
        }
    }
    Ok(out)
}

/// Adjoints `(dx, dW, db)` of [`conv_forward`].
pub fn conv_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dout: ArrayView2<f64>,
    rb: &Rulebook,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let cin = x.ncols();
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dw = Array2::zeros(w.raw_dim());
    let db = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    for (k, pairs) in rb.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let wk = w.slice(s![k * cin..(k + 1) * cin, ..]);
        let g = gather(x, pairs.iter().map(|p| p.0 as usize), pairs.len());
        let d = gather(dout, pairs.iter().map(|p| p.1 as usize), pairs.len());
        dw.slice_mut(s![k * cin..(k + 1) * cin, ..]).assign(&g.t().dot(&d));
        let back = d.dot(&wk.t());
        for (&(i, _), row) in pairs.iter().zip(back.outer_iter()) {
            let mut dst = dx.row_mut(i as usize);
            dst += &row;
        }
    }
    (dx, dw, db)
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

/// Convolution parameters in `K³ × C_in × C_out` layout.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
    pub mode: ConvMode,
}

impl ConvParams {
    pub fn zeros(mode: ConvMode, cin: usize, cout: usize) -> Self {
        Self {
            weights: Array3::zeros((mode.kernel_volume(), cin, cout)),
            bias: Array1::zeros(cout),
            mode,
        }
    }

    pub fn weight_matrix(&self) -> Result<Array2<f64>> {
        let (k, cin, cout) = self.weights.dim();
        if k != self.mode.kernel_volume() {
            return Err(Error::shape(format!("{k} kernel slices for mode {:?}", self.mode)));
        }
        Ok(self.weights.to_owned().into_shape_with_order((k * cin, cout)).expect("contiguous"))
    }
}

/// Convolves `t` with `p` following rulebook `rb`.
pub fn sparse_conv(t: &SparseVoxelTensor, p: &ConvParams, rb: &Rulebook) -> Result<SparseVoxelTensor> {
    if rb.mode != p.mode {
        return Err(Error::shape("rulebook and parameters disagree on conv mode"));
    }
    if rb.n_in != t.len() {
        return Err(Error::shape("rulebook was built for a different coordinate set"));
    }
    let w = p.weight_matrix()?;
    let b = p.bias.view().insert_axis(Axis(0));
    let out = conv_forward(t.feats().view(), w.view(), b, rb)?;
    SparseVoxelTensor::from_parts(rb.out_coords.clone(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-channel batch normalization over active voxels.
    Batch,
    None,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Normalization followed by nothing: BN in train mode uses batch
/// statistics and queues a running-stat update on the context.
pub fn norm<C: Ctx>(cx: &mut C, x: &C::Var, prefix: &str, kind: NormKind) -> Result<C::Var> {
    match kind {
        NormKind::None => Ok(x.clone()),
        NormKind::Batch => {
            let gamma = cx.param(&format!("{prefix}.gamma"))?;
            let beta = cx.param(&format!("{prefix}.beta"))?;
            if cx.training() {
                let xv = cx.value(x);
                let mean = xv.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(xv.ncols()));
                let var = xv.var_axis(Axis(0), 0.0);
                cx.record_stats(prefix, mean, var);
                cx.apply(Op::BatchNorm { eps: BN_EPS, running: None }, &[x, &gamma, &beta])
            } else {
                let store = cx.store();
                let rm = store.vector(&format!("{prefix}.running_mean"))?;
                let rv = store.vector(&format!("{prefix}.running_var"))?;
                cx.apply(
                    Op::BatchNorm { eps: BN_EPS, running: Some(Arc::new((rm, rv))) },
                    &[x, &gamma, &beta],
                )
            }
        }
    }
}

/// Affine map with weight `{prefix}.w` and bias `{prefix}.b`.
pub fn linear<C: Ctx>(cx: &mut C, x: &C::Var, prefix: &str) -> Result<C::Var> {
    let w = cx.param(&format!("{prefix}.w"))?;
    let b = cx.param(&format!("{prefix}.b"))?;
    cx.apply(Op::Affine, &[x, &w, &b])
}

pub fn conv<C: Ctx>(cx: &mut C, x: &C::Var, prefix: &str, rb: &Arc<Rulebook>) -> Result<C::Var> {
    let w = cx.param(&format!("{prefix}.w"))?;
    let b = cx.param(&format!("{prefix}.b"))?;
    cx.apply(Op::SparseConv { rulebook: rb.clone() }, &[x, &w, &b])
}

pub fn leaky<C: Ctx>(cx: &mut C, x: &C::Var, slope: f64) -> Result<C::Var> {
    cx.apply(Op::LeakyRelu { slope }, &[x])
}

/// Residual bottleneck: `y = LeakyReLU(x + f(x))` with
/// `f = conv1x1 → norm → act → conv3³ → norm → act → conv1x1 → norm`.
/// `rb` is the submanifold 3³ rulebook of the input coordinates.
pub fn bottleneck_layer<C: Ctx>(
    cx: &mut C,
    x: &C::Var,
    prefix: &str,
    rb: &Arc<Rulebook>,
    norm_kind: NormKind,
    slope: f64,
) -> Result<C::Var> {
    let h = linear(cx, x, &format!("{prefix}.conv1"))?;
    let h = norm(cx, &h, &format!("{prefix}.bn1"), norm_kind)?;
    let h = leaky(cx, &h, slope)?;
    let h = conv(cx, &h, &format!("{prefix}.conv2"), rb)?;
    let h = norm(cx, &h, &format!("{prefix}.bn2"), norm_kind)?;
    let h = leaky(cx, &h, slope)?;
    let h = linear(cx, &h, &format!("{prefix}.conv3"))?;
    let h = norm(cx, &h, &format!("{prefix}.bn3"), norm_kind)?;
    let sum = cx.apply(Op::WeightedSum { weights: vec![1.0, 1.0] }, &[x, &h])?;
    leaky(cx, &sum, slope)
}

/// Registers bottleneck parameters: channel contraction 4:1.
pub fn init_bottleneck(
    store: &mut ParameterStore,
    prefix: &str,
    channels: usize,
    norm_kind: NormKind,
    slope: f64,
    rng: &mut impl rand::Rng,
) {
    let mid = (channels / 4).max(1);
    store.init_linear(&format!("{prefix}.conv1"), 1, channels, mid, slope, rng);
    store.init_linear(&format!("{prefix}.conv2"), 27, mid, mid, slope, rng);
    store.init_linear(&format!("{prefix}.conv3"), 1, mid, channels, slope, rng);
    if norm_kind == NormKind::Batch {
        for (bn, c) in [("bn1", mid), ("bn2", mid), ("bn3", channels)] {
            store.init_norm(&format!("{prefix}.{bn}"), c);
        }
        // residual branch starts as identity
        store.set(&format!("{prefix}.bn3.gamma"), &vec![0.0; channels]).expect("registered above");
    }
}

/// Runs one bottleneck block on `t` in inference mode.
pub fn bottleneck(
    t: &SparseVoxelTensor,
    store: &ParameterStore,
    prefix: &str,
    norm_kind: NormKind,
    slope: f64,
) -> Result<SparseVoxelTensor> {
    let rb = build_rulebook(t.coord_set(), ConvMode::Submanifold { kernel: 3 })?;
    let mut cx = Eager::new(store);
    let x = cx.constant(t.feats().clone());
    let y = bottleneck_layer(&mut cx, &x, prefix, &rb, norm_kind, slope)?;
    t.with_feats(cx.take(y))
}
