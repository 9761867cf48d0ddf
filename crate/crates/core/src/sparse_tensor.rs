//! Coordinate-indexed sparse voxel tensors.
//!
//! A [`SparseVoxelTensor`] is a set of unique integer cell coordinates at a
//! given scale plus one feature row per cell. Every primitive here is a pure
//! function returning a new tensor; the scatter/gather kernels they are built
//! from are exposed separately so the autodiff tape can reuse them.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hash, Hasher};
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Integer cell coordinate. Field order makes the derived `Ord`
/// lexicographic by `(z, y, x)`, the canonical voxel ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Coord {
    pub z: i32,
    pub y: i32,
    pub x: i32,
}

impl Coord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { z, y, x }
    }

    pub fn xyz(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    /// Parent cell after coarsening by `s` (floor division).
    pub fn coarsen(self, s: i32) -> Self {
        Self::new(self.x.div_euclid(s), self.y.div_euclid(s), self.z.div_euclid(s))
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    /// Packs the low 21 bits of each component into one word.
    fn pack(self) -> u64 {
        const MASK: u64 = (1 << 21) - 1;
        (self.x as u64 & MASK) | ((self.y as u64 & MASK) << 21) | ((self.z as u64 & MASK) << 42)
    }
}

impl Hash for Coord {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.pack());
    }
}

/// Finalizes the packed coordinate with the splitmix64 mixer. Keys are
/// still compared in full by the map, so packing collisions outside the
/// 21-bit range only cost probe length.
#[derive(Default, Clone, Copy)]
pub struct CoordHasher(u64);

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        let mut z = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ b as u64;
        }
    }

    fn write_u64(&mut self, n: u64) {
        self.0 = n;
    }
}

pub type CoordMap<V> = HashMap<Coord, V, BuildHasherDefault<CoordHasher>>;

/// Coordinate → row lookup for a fixed coordinate list.
#[derive(Debug, Clone, Default)]
pub struct CoordIndex {
    map: CoordMap<u32>,
}

impl CoordIndex {
    /// Fails on duplicate coordinates.
    pub fn build(coords: &[Coord]) -> Result<Self> {
        let mut map = CoordMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, &c) in coords.iter().enumerate() {
            if map.insert(c, i as u32).is_some() {
                return Err(Error::shape(format!("duplicate coordinate {:?}", c.xyz())));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, c: Coord) -> Option<usize> {
        self.map.get(&c).map(|&i| i as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Immutable coordinate set shared by every tensor living on it.
#[derive(Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: CoordIndex,
    scale: u32,
}

impl CoordSet {
    pub fn new(coords: Vec<Coord>, scale: u32) -> Result<Arc<Self>> {
        let index = CoordIndex::build(&coords)?;
        Ok(Arc::new(Self { coords, index, scale }))
    }

    /// Sorts into canonical `(z, y, x)` order and deduplicates.
    pub fn from_unsorted(mut coords: Vec<Coord>, scale: u32) -> Arc<Self> {
        coords.sort_unstable();
        coords.dedup();
        Self::new(coords, scale).expect("deduplicated")
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, c: Coord) -> Option<usize> {
        self.index.get(c)
    }

    pub fn same_as(&self, other: &CoordSet) -> bool {
        self.scale == other.scale && self.coords == other.coords
    }
}

#[derive(Debug, Clone)]
pub struct SparseVoxelTensor {
    coords: Arc<CoordSet>,
    feats: Array2<f64>,
}

impl SparseVoxelTensor {
    pub fn new(coords: Vec<Coord>, feats: Array2<f64>, scale: u32) -> Result<Self> {
        Self::from_parts(CoordSet::new(coords, scale)?, feats)
    }

    pub fn from_parts(coords: Arc<CoordSet>, feats: Array2<f64>) -> Result<Self> {
        if coords.len() != feats.nrows() {
            return Err(Error::shape(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                feats.nrows()
            )));
        }
        Ok(Self { coords, feats })
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn coords(&self) -> &[Coord] {
        self.coords.coords()
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn into_feats(self) -> Array2<f64> {
        self.feats
    }

    pub fn scale(&self) -> u32 {
        self.coords.scale()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.ncols()
    }

    pub fn lookup(&self, c: Coord) -> Option<usize> {
        self.coords.lookup(c)
    }

    pub fn with_feats(&self, feats: Array2<f64>) -> Result<Self> {
        Self::from_parts(self.coords.clone(), feats)
    }
}

/// Pooling factors used by multi-scale projection: strictly increasing,
/// each at least 2.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ScaleSet(Vec<u32>);

impl ScaleSet {
    pub fn new(scales: Vec<u32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("scale set is empty"));
        }
        if scales[0] < 2 || scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!("scales must be strictly increasing and >= 2, got {scales:?}")));
        }
        Ok(Self(scales))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![2, 4, 8, 16])
    }
}

impl TryFrom<Vec<u32>> for ScaleSet {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<u32> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

/// Scale id reached after coarsening scale `scale` by factor `s`.
/// Non-power-of-two factors are recorded by their ceil(log2).
pub fn coarser_scale(scale: u32, s: u32) -> u32 {
    scale + (32 - (s - 1).leading_zeros())
}

/// Grouping of fine rows into coarse cells: the shared structure behind
/// average pooling, strided outputs, and nearest upsampling.
#[derive(Debug)]
pub struct Pooling {
    pub parents: Arc<CoordSet>,
    /// For each fine row, the row of its parent cell.
    pub child_to_parent: Vec<usize>,
    /// Number of fine rows per parent.
    pub counts: Vec<usize>,
}

impl Pooling {
    pub fn build(fine: &CoordSet, s: u32) -> Result<Arc<Self>> {
        if s < 2 {
            return Err(Error::config(format!("pooling factor must be >= 2, got {s}")));
        }
        let si = s as i32;
        let parents = CoordSet::from_unsorted(
            fine.coords().iter().map(|c| c.coarsen(si)).collect(),
            coarser_scale(fine.scale(), s),
        );
        let child_to_parent: Vec<usize> = fine
            .coords()
            .iter()
            .map(|c| parents.lookup(c.coarsen(si)).expect("parent present"))
            .collect();
        let mut counts = vec![0usize; parents.len()];
        for &p in &child_to_parent {
            counts[p] += 1;
        }
        Ok(Arc::new(Self { parents, child_to_parent, counts }))
    }
}

/// `out[g] = mean of rows i with group[i] == g`. Empty groups stay zero.
/// Uses a running mean, which is exact when a group's rows are equal.
pub fn segment_mean(x: ArrayView2<f64>, group: &[usize], counts: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((counts.len(), x.ncols()));
    let mut seen = vec![0usize; counts.len()];
    for (row, &g) in x.outer_iter().zip(group) {
        seen[g] += 1;
        let k = seen[g] as f64;
        for (m, &v) in out.row_mut(g).iter_mut().zip(row) {
            *m += (v - *m) / k;
        }
    }
    out
}

/// Adjoint of [`segment_mean`].
pub fn segment_mean_backward(dout: ArrayView2<f64>, group: &[usize], counts: &[usize]) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros((group.len(), dout.ncols()));
    for (mut row, &g) in dx.outer_iter_mut().zip(group) {
        row.assign(&dout.row(g));
        row /= counts[g] as f64;
    }
    dx
}

/// `out[i] = x[idx[i]]`, or a zero row where `idx[i]` is `None`.
pub fn gather_rows(x: ArrayView2<f64>, idx: &[Option<usize>]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), x.ncols()));
    for (mut row, i) in out.outer_iter_mut().zip(idx) {
        if let Some(i) = *i {
            row.assign(&x.row(i));
        }
    }
    out
}

/// Adjoint of [`gather_rows`]: scatter-add into `n_src` rows.
pub fn gather_rows_backward(dout: ArrayView2<f64>, idx: &[Option<usize>], n_src: usize) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros((n_src, dout.ncols()));
    for (row, i) in dout.outer_iter().zip(idx) {
        if let Some(i) = *i {
            let mut dst = dx.row_mut(i);
            dst += &row;
        }
    }
    dx
}

/// Parent-row index of each target coordinate in `src` after coarsening by `s`.
pub fn upsample_index(src: &CoordSet, targets: &[Coord], s: u32) -> Vec<Option<usize>> {
    let si = s as i32;
    targets
        .iter()
        .map(|c| if si == 1 { src.lookup(*c) } else { src.lookup(c.coarsen(si)) })
        .collect()
}

/// Non-overlapping average pooling with kernel = stride = `s`. Each output
/// row is the mean over the active input voxels in its cell.
pub fn avg_pool(t: &SparseVoxelTensor, s: u32) -> Result<SparseVoxelTensor> {
    let pool = Pooling::build(t.coord_set(), s)?;
    let feats = segment_mean(t.feats().view(), &pool.child_to_parent, &pool.counts);
    SparseVoxelTensor::from_parts(pool.parents.clone(), feats)
}

/// Assigns each target (finer-scale) coordinate the feature of its parent
/// cell in `src`; targets whose parent is absent get a zero row.
pub fn upsample_nearest(
    src: &SparseVoxelTensor,
    target: &Arc<CoordSet>,
    s: u32,
) -> Result<SparseVoxelTensor> {
    let idx = upsample_index(src.coord_set(), target.coords(), s);
    SparseVoxelTensor::from_parts(target.clone(), gather_rows(src.feats().view(), &idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
}

pub fn ewise(a: &SparseVoxelTensor, b: &SparseVoxelTensor, op: EwiseOp) -> Result<SparseVoxelTensor> {
    if !a.coord_set().same_as(b.coord_set()) {
        return Err(Error::shape("ewise operands live on different coordinate sets"));
    }
    if a.feats().dim() != b.feats().dim() {
        return Err(Error::shape(format!(
            "ewise feature shapes {:?} vs {:?}",
            a.feats().dim(),
            b.feats().dim()
        )));
    }
    let feats = match op {
        EwiseOp::Add => a.feats() + b.feats(),
        EwiseOp::Sub => a.feats() - b.feats(),
        EwiseOp::Mul => a.feats() * b.feats(),
    };
    a.with_feats(feats)
}

/// `M×K×C` stack of per-scale features on one coordinate set.
#[derive(Debug, Clone)]
pub struct ScaleStack {
    coords: Arc<CoordSet>,
    feats: Array3<f64>,
}

impl ScaleStack {
    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn feats(&self) -> &Array3<f64> {
        &self.feats
    }

    pub fn num_scales(&self) -> usize {
        self.feats.len_of(Axis(1))
    }

    pub fn slice(&self, k: usize) -> SparseVoxelTensor {
        let f = self.feats.index_axis(Axis(1), k).to_owned();
        SparseVoxelTensor::from_parts(self.coords.clone(), f).expect("stack rows match coords")
    }
}

pub fn stack_scales(parts: &[SparseVoxelTensor]) -> Result<ScaleStack> {
    let first = parts.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
    for p in &parts[1..] {
        if !p.coord_set().same_as(first.coord_set()) {
            return Err(Error::shape("stacked tensors have different coordinates"));
        }
        if p.channels() != first.channels() {
            return Err(Error::shape("stacked tensors have different channel counts"));
        }
    }
    let views: Vec<_> = parts.iter().map(|p| p.feats().view()).collect();
    let feats = ndarray::stack(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
    Ok(ScaleStack { coords: first.coord_set().clone(), feats })
}
