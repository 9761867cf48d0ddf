//! Reverse-mode differentiation over the sparse network's op set.
//!
//! Layers are written once against the [`Ctx`] trait and run on either
//! backend:
//!
//! - [`Tape`] records every op with its inputs so that [`Tape::backward`]
//!   can replay the adjoint rules in reverse;
//! - [`Eager`] only evaluates, dropping intermediates as soon as the layer
//!   code releases them, which keeps inference memory proportional to the
//!   live set.
//!
//! All values are dense `rows × cols` matrices; sparse topology lives in the
//! ops (rulebooks, poolings, gather indices) and never needs a gradient.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::pointcloud::Label;
use crate::sparse_conv::{conv_backward, conv_forward, Rulebook};
use crate::sparse_tensor::{gather_rows, gather_rows_backward, segment_mean, segment_mean_backward, Pooling};
use crate::training::loss;

#[derive(Debug, Clone)]
pub enum Op {
    /// `[x, w, b] → x·w + b`.
    Affine,
    /// `[x, w, b]` convolved along the rulebook.
    SparseConv { rulebook: Arc<Rulebook> },
    /// `[x, gamma, beta]`; batch statistics when `running` is `None`.
    BatchNorm { eps: f64, running: Option<Arc<(Array1<f64>, Array1<f64>)>> },
    LeakyRelu { slope: f64 },
    Sigmoid,
    /// Rowwise softmax.
    Softmax,
    /// Elementwise product of two equal-shape inputs.
    Mul,
    /// `Σ_i w_i · x_i` over equal-shape inputs.
    WeightedSum { weights: Vec<f64> },
    /// Average rows into the pooling's parent cells.
    SegmentMean { pooling: Arc<Pooling> },
    /// `out[i] = x[idx[i]]` or zeros.
    Gather { index: Arc<Vec<Option<usize>>>, n_src: usize },
    ConcatCols,
    SliceCols { start: usize, len: usize },
    /// Sum of every entry, as `1×1`.
    SumAll,
    /// `[logits] → 1×1` mean cross-entropy over non-ignored rows.
    CrossEntropy { labels: Arc<Vec<Label>>, ignore: Label },
    /// `[probs] → 1×1` Lovász-softmax loss.
    Lovasz { labels: Arc<Vec<Label>>, ignore: Label },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Affine => "affine",
            Op::SparseConv { .. } => "sparse_conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Mul => "mul",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Gather { .. } => "gather",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SumAll => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Lovasz { .. } => "lovasz",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Affine | Op::SparseConv { .. } | Op::BatchNorm { .. } => Some(3),
            Op::Mul => Some(2),
            Op::WeightedSum { weights } => Some(weights.len()),
            Op::ConcatCols => None,
            _ => Some(1),
        }
    }

    pub fn forward(&self, xs: &[&Array2<f64>]) -> Result<Array2<f64>> {
        if let Some(n) = self.arity() {
            if xs.len() != n {
                return Err(Error::shape(format!("{} takes {n} inputs, got {}", self.name(), xs.len())));
            }
        }
        match self {
            Op::Affine => {
                let (x, w, b) = (xs[0], xs[1], xs[2]);
                if x.ncols() != w.nrows() || b.dim() != (1, w.ncols()) {
                    return Err(Error::shape(format!(
                        "affine {:?} · {:?} + {:?}",
                        x.dim(),
                        w.dim(),
                        b.dim()
                    )));
                }
                Ok(x.dot(w) + b)
            }
            Op::SparseConv { rulebook } => conv_forward(xs[0].view(), xs[1].view(), xs[2].view(), rulebook),
            Op::BatchNorm { eps, running } => {
                let (x, gamma, beta) = (xs[0], xs[1], xs[2]);
                let c = x.ncols();
                if gamma.dim() != (1, c) || beta.dim() != (1, c) {
                    return Err(Error::shape("batch norm affine shape"));
                }
                let (mean, inv_std) = bn_stats(x, *eps, running.as_deref());
                let xhat = (x - &mean) * &inv_std;
                Ok(xhat * gamma + beta)
            }
            Op::LeakyRelu { slope } => Ok(xs[0].mapv(|v| if v >= 0.0 { v } else { slope * v })),
            Op::Sigmoid => Ok(xs[0].mapv(sigmoid)),
            Op::Softmax => Ok(softmax_rows(xs[0].view())),
            Op::Mul => {
                same_shape(self, xs)?;
                Ok(xs[0] * xs[1])
            }
            Op::WeightedSum { weights } => {
                same_shape(self, xs)?;
                let mut out = Array2::zeros(xs[0].raw_dim());
                for (x, &w) in xs.iter().zip(weights) {
                    out.scaled_add(w, *x);
                }
                Ok(out)
            }
            Op::SegmentMean { pooling } => {
                if xs[0].nrows() != pooling.child_to_parent.len() {
                    return Err(Error::shape("segment mean row count"));
                }
                Ok(segment_mean(xs[0].view(), &pooling.child_to_parent, &pooling.counts))
            }
            Op::Gather { index, n_src } => {
                if xs[0].nrows() != *n_src || index.iter().flatten().any(|&i| i >= *n_src) {
                    return Err(Error::shape("gather source rows"));
                }
                Ok(gather_rows(xs[0].view(), index))
            }
            Op::ConcatCols => {
                let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
                concatenate(Axis(1), &views).map_err(|e| Error::shape(format!("concat: {e}")))
            }
            Op::SliceCols { start, len } => {
                if start + len > xs[0].ncols() {
                    return Err(Error::shape("column slice out of range"));
                }
                Ok(xs[0].slice(s![.., *start..start + len]).to_owned())
            }
            Op::SumAll => Ok(Array2::from_elem((1, 1), xs[0].sum())),
            Op::CrossEntropy { labels, ignore } => {
                let (l, _) = loss::cross_entropy(xs[0].view(), labels, *ignore)?;
                Ok(Array2::from_elem((1, 1), l))
            }
            Op::Lovasz { labels, ignore } => {
                let (l, _) = loss::lovasz_softmax(xs[0].view(), labels, *ignore)?;
                Ok(Array2::from_elem((1, 1), l))
            }
        }
    }

    /// Input adjoints given the output adjoint `dy`.
    pub fn backward(&self, xs: &[&Array2<f64>], y: &Array2<f64>, dy: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(match self {
            Op::Affine => {
                let (x, w) = (xs[0], xs[1]);
                vec![dy.dot(&w.t()), x.t().dot(dy), dy.sum_axis(Axis(0)).insert_axis(Axis(0))]
            }
            Op::SparseConv { rulebook } => {
                let (dx, dw, db) = conv_backward(xs[0].view(), xs[1].view(), dy.view(), rulebook);
                vec![dx, dw, db]
            }
            Op::BatchNorm { eps, running } => {
                let (x, gamma) = (xs[0], xs[1]);
                let (mean, inv_std) = bn_stats(x, *eps, running.as_deref());
                let xhat = (x - &mean) * &inv_std;
                let dgamma = (dy * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = dy * gamma;
                let dx = match running {
                    Some(_) => dxhat * &inv_std,
                    None => {
                        let n = x.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * &xhat).sum_axis(Axis(0));
                        let inner = dxhat * n - &sum_d - &(&xhat * &sum_dx);
                        inner * &inv_std / n
                    }
                };
                vec![dx, dgamma, dbeta]
            }
            Op::LeakyRelu { slope } => {
                let mut dx = dy.clone();
                dx.zip_mut_with(xs[0], |d, &x| {
                    if x < 0.0 {
                        *d *= slope
                    }
                });
                vec![dx]
            }
            Op::Sigmoid => vec![dy * &y.mapv(|s| s * (1.0 - s))],
            Op::Softmax => {
                let dot = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![y * &(dy - &dot)]
            }
            Op::Mul => vec![dy * xs[1], dy * xs[0]],
            Op::WeightedSum { weights } => weights.iter().map(|&w| dy * w).collect(),
            Op::SegmentMean { pooling } => {
                vec![segment_mean_backward(dy.view(), &pooling.child_to_parent, &pooling.counts)]
            }
            Op::Gather { index, n_src } => vec![gather_rows_backward(dy.view(), index, *n_src)],
            Op::ConcatCols => {
                let mut start = 0;
                xs.iter()
                    .map(|x| {
                        let part = dy.slice(s![.., start..start + x.ncols()]).to_owned();
                        start += x.ncols();
                        part
                    })
                    .collect()
            }
            Op::SliceCols { start, len } => {
                let mut dx = Array2::zeros(xs[0].raw_dim());
                dx.slice_mut(s![.., *start..start + len]).assign(dy);
                vec![dx]
            }
            Op::SumAll => vec![Array2::from_elem(xs[0].raw_dim(), dy[[0, 0]])],
            Op::CrossEntropy { labels, ignore } => {
                let (_, g) = loss::cross_entropy(xs[0].view(), labels, *ignore)?;
                vec![g * dy[[0, 0]]]
            }
            Op::Lovasz { labels, ignore } => {
                let (_, g) = loss::lovasz_softmax(xs[0].view(), labels, *ignore)?;
                vec![g * dy[[0, 0]]]
            }
        })
    }
}

fn same_shape(op: &Op, xs: &[&Array2<f64>]) -> Result<()> {
    if let Some(first) = xs.first() {
        if let Some(bad) = xs.iter().find(|x| x.dim() != first.dim()) {
            return Err(Error::shape(format!("{}: {:?} vs {:?}", op.name(), first.dim(), bad.dim())));
        }
    }
    Ok(())
}

fn bn_stats(x: &Array2<f64>, eps: f64, running: Option<&(Array1<f64>, Array1<f64>)>) -> (Array1<f64>, Array1<f64>) {
    let (mean, var) = match running {
        Some((m, v)) => (m.clone(), v.clone()),
        None => (
            x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols())),
            x.var_axis(Axis(0), 0.0),
        ),
    };
    (mean, var.mapv(|v| 1.0 / (v + eps).sqrt()))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted rowwise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Evaluation context shared by the tape and the eager evaluator.
pub trait Ctx {
    type Var: Clone;

    fn store(&self) -> &ParameterStore;

    /// Train mode: batch-norm uses batch statistics.
    fn training(&self) -> bool;

    fn record_stats(&mut self, prefix: &str, mean: Array1<f64>, var: Array1<f64>);

    fn param(&mut self, name: &str) -> Result<Self::Var>;

    fn constant(&mut self, value: Array2<f64>) -> Self::Var;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Array2<f64>;

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;
}

/// Batch statistics observed during a train-mode pass, in call order.
#[derive(Debug, Clone, Default)]
pub struct StatsLog(pub Vec<(String, Array1<f64>, Array1<f64>)>);

/// Eager evaluator. Parameters are materialized once per context.
pub struct Eager<'s> {
    store: &'s ParameterStore,
    training: bool,
    cache: HashMap<String, Rc<Array2<f64>>>,
    pub stats: StatsLog,
}

impl<'s> Eager<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, training: false, cache: HashMap::new(), stats: StatsLog::default() }
    }

    pub fn train_mode(mut self, on: bool) -> Self {
        self.training = on;
        self
    }

    /// Unwraps a value, cloning only if it is still shared.
    pub fn take(&self, v: Rc<Array2<f64>>) -> Array2<f64> {
        Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl Ctx for Eager<'_> {
    type Var = Rc<Array2<f64>>;

    fn store(&self) -> &ParameterStore {
        self.store
    }

    fn training(&self) -> bool {
        self.training
    }

    fn record_stats(&mut self, prefix: &str, mean: Array1<f64>, var: Array1<f64>) {
        self.stats.0.push((prefix.to_string(), mean, var));
    }

    fn param(&mut self, name: &str) -> Result<Self::Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(v.clone());
        }
        let v = Rc::new(self.store.matrix(name)?);
        self.cache.insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn constant(&mut self, value: Array2<f64>) -> Self::Var {
        Rc::new(value)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Array2<f64> {
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let xs: Vec<&Array2<f64>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(op.forward(&xs)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Source {
    Param(String),
    /// Leaf whose adjoint is reported back.
    Input,
    Constant,
    Op { op: Op, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    source: Source,
    needs_grad: bool,
}

/// Recording context.
pub struct Tape<'s> {
    store: &'s ParameterStore,
    training: bool,
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    pub stats: StatsLog,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: IndexMap<String, Array2<f64>>,
    pub inputs: HashMap<NodeId, Array2<f64>>,
}

impl Gradients {
    /// Adds every parameter adjoint into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g.view())?;
        }
        Ok(())
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, training: false, nodes: Vec::new(), params: HashMap::new(), stats: StatsLog::default() }
    }

    pub fn train_mode(mut self, on: bool) -> Self {
        self.training = on;
        self
    }

    /// Leaf that receives an adjoint in [`Gradients::inputs`].
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Source::Input, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, source: Source, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, source, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (`1×1`) node with seed 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let v = &self.nodes[root.0].value;
        if v.dim() != (1, 1) {
            return Err(Error::shape(format!("backward root must be 1x1, got {:?}", v.dim())));
        }
        self.backward_with_seed(root, Array2::ones((1, 1)))
    }

    pub fn backward_with_seed(&self, root: NodeId, seed: Array2<f64>) -> Result<Gradients> {
        if seed.dim() != self.nodes[root.0].value.dim() {
            return Err(Error::shape("seed shape differs from root value"));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);
        let mut grads = Gradients::default();

        for id in (0..=root.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.source {
                Source::Param(name) => {
                    grads.params.insert(name.clone(), dy);
                }
                Source::Input => {
                    grads.inputs.insert(NodeId(id), dy);
                }
                Source::Constant => {}
                Source::Op { op, inputs } => {
                    if !node.needs_grad {
                        continue;
                    }
                    let xs: Vec<&Array2<f64>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    let dxs = op.backward(&xs, &node.value, &dy)?;
                    for (i, dx) in inputs.iter().zip(dxs) {
                        if !self.nodes[i.0].needs_grad {
                            continue;
                        }
                        match &mut adj[i.0] {
                            Some(acc) => *acc += &dx,
                            slot => *slot = Some(dx),
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

impl Ctx for Tape<'_> {
    type Var = NodeId;

    fn store(&self) -> &ParameterStore {
        self.store
    }

    fn training(&self) -> bool {
        self.training
    }

    fn record_stats(&mut self, prefix: &str, mean: Array1<f64>, var: Array1<f64>) {
        self.stats.0.push((prefix.to_string(), mean, var));
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let trainable = self.store.get(name)?.trainable;
        let value = self.store.matrix(name)?;
        let id = self.push(value, Source::Param(name.to_string()), trainable);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Source::Constant, false)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Array2<f64> {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op, inputs: &[&NodeId]) -> Result<NodeId> {
        let xs: Vec<&Array2<f64>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = op.forward(&xs)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let inputs = inputs.iter().map(|&&i| i).collect();
        Ok(self.push(value, Source::Op { op, inputs }, needs_grad))
    }
}
