//! Point cloud → initial sparse voxel tensor.
//!
//! Each active voxel carries the mean of its member points' feature vectors
//! `(dx, dy, dz, intensity, 1/n)`, where `(dx, dy, dz)` is the point's offset
//! from the voxel center in meters and `n` the member count.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::sparse_tensor::{Coord, CoordMap, CoordSet, SparseVoxelTensor};

/// Channel count of the initial voxel features.
pub const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::config(format!("degenerate bounds {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Half-open containment: `min <= p < max` on every axis.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridConfig {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub bounds: Option<Bounds>,
}

impl VoxelGridConfig {
    pub fn new(voxel_size: f64) -> Result<Self> {
        let cfg = Self { voxel_size, origin: [0.0; 3], bounds: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        Ok(())
    }

    pub fn center(&self, c: Coord) -> [f64; 3] {
        let [x, y, z] = c.xyz();
        [
            self.origin[0] + (x as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (y as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (z as f64 + 0.5) * self.voxel_size,
        ]
    }
}

/// `floor((p - origin) / voxel_size)` per axis.
pub fn quantize(p: [f64; 3], cfg: &VoxelGridConfig) -> Coord {
    let q = |a: usize| ((p[a] - cfg.origin[a]) / cfg.voxel_size).floor() as i32;
    Coord::new(q(0), q(1), q(2))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointVoxelMap {
    /// Voxel row per point; `None` for points outside the bounds.
    pub point_to_voxel: Vec<Option<u32>>,
    pub voxel_point_counts: Vec<u32>,
}

impl PointVoxelMap {
    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_point_counts.len()
    }

    pub fn as_gather_index(&self) -> Vec<Option<usize>> {
        self.point_to_voxel.iter().map(|v| v.map(|i| i as usize)).collect()
    }
}

pub fn voxelize(pc: &PointCloud, cfg: &VoxelGridConfig) -> Result<(SparseVoxelTensor, PointVoxelMap)> {
    cfg.validate()?;
    let cells: Vec<Option<Coord>> = pc
        .positions()
        .iter()
        .map(|&p| match cfg.bounds {
            Some(b) if !b.contains(p) => None,
            _ => Some(quantize(p, cfg)),
        })
        .collect();

    let coords = CoordSet::from_unsorted(cells.iter().flatten().copied().collect(), 0);
    let m = coords.len();
    let mut sums = Array2::<f64>::zeros((m, INPUT_CHANNELS));
    let mut counts = vec![0u32; m];
    let mut point_to_voxel = Vec::with_capacity(pc.len());

    for (i, cell) in cells.iter().enumerate() {
        let Some(c) = *cell else {
            point_to_voxel.push(None);
            continue;
        };
        let v = coords.lookup(c).expect("cell registered");
        let center = cfg.center(c);
        let p = pc.positions()[i];
        let mut row = sums.row_mut(v);
        row[0] += p[0] - center[0];
        row[1] += p[1] - center[1];
        row[2] += p[2] - center[2];
        row[3] += pc.intensity()[i];
        counts[v] += 1;
        point_to_voxel.push(Some(v as u32));
    }
    for (mut row, &n) in sums.outer_iter_mut().zip(&counts) {
        let n = n as f64;
        for j in 0..4 {
            row[j] /= n;
        }
        row[4] = 1.0 / n;
    }

    let map = PointVoxelMap { point_to_voxel, voxel_point_counts: counts };
    Ok((SparseVoxelTensor::from_parts(coords, sums)?, map))
}

/// Number of distinct occupied cells at `voxel_size`.
pub fn count_voxels(pc: &PointCloud, voxel_size: f64) -> Result<usize> {
    let cfg = VoxelGridConfig::new(voxel_size)?;
    let mut seen: CoordMap<()> = CoordMap::default();
    for &p in pc.positions() {
        seen.insert(quantize(p, &cfg), ());
    }
    Ok(seen.len())
}

/// `M(size) / N` for each voxel size.
pub fn voxel_point_ratio(pc: &PointCloud, sizes: &[f64]) -> Result<Vec<f64>> {
    if pc.is_empty() {
        return Err(Error::Empty("voxel/point ratio of an empty cloud".into()));
    }
    if sizes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("voxel sizes must be strictly increasing"));
    }
    sizes
        .iter()
        .map(|&s| Ok(count_voxels(pc, s)? as f64 / pc.len() as f64))
        .collect()
}

/// Per-point copy of the containing voxel's feature row; zero rows for
/// points without a voxel.
pub fn interpolate_to_points(t: &SparseVoxelTensor, map: &PointVoxelMap) -> Result<Array2<f64>> {
    gather_points(t.feats().view(), map)
}

pub fn gather_points(feats: ArrayView2<f64>, map: &PointVoxelMap) -> Result<Array2<f64>> {
    let m = feats.nrows();
    if let Some(bad) = map.point_to_voxel.iter().flatten().find(|&&v| v as usize >= m) {
        return Err(Error::Index(format!("voxel index {bad} out of range for {m} voxels")));
    }
    Ok(crate::sparse_tensor::gather_rows(feats, &map.as_gather_index()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud(points: &[([f64; 3], f64)]) -> PointCloud {
        PointCloud::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn quantize_floor() {
        let cfg = VoxelGridConfig::new(0.2).unwrap();
        assert_eq!(quantize([0.05, 0.25, -0.1], &cfg), Coord::new(0, 1, -1));
        assert_eq!(quantize([0.0, 0.0, 0.0], &cfg), Coord::new(0, 0, 0));
        let mut cfg = cfg;
        cfg.origin = [1.0, -2.0, 3.0];
        assert_eq!(quantize(cfg.origin, &cfg), Coord::new(0, 0, 0));
    }

    #[test]
    fn rejects_bad_size() {
        assert!(VoxelGridConfig::new(0.0).is_err());
        assert!(VoxelGridConfig::new(-1.0).is_err());
        assert!(Bounds::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn two_points_one_cell() {
        let pc = cloud(&[([0.05, 0.05, 0.05], 0.2), ([0.15, 0.15, 0.15], 0.4)]);
        let (t, map) = voxelize(&pc, &VoxelGridConfig::new(0.2).unwrap()).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t.feats()[[0, 3]] - 0.3).abs() < 1e-15);
        assert!(t.feats()[[0, 0]].abs() < 1e-15);
        assert_eq!(t.feats()[[0, 4]], 0.5);
        assert_eq!(map.voxel_point_counts, vec![2]);
        assert_eq!(map.point_to_voxel, vec![Some(0), Some(0)]);
    }

    #[test]
    fn singleton_offsets_exact() {
        let pts = [([0.03, 0.41, -0.33], 0.1), ([1.07, -0.5, 2.0], 0.9)];
        let cfg = VoxelGridConfig::new(0.2).unwrap();
        let (t, map) = voxelize(&cloud(&pts), &cfg).unwrap();
        assert_eq!(t.len(), 2);
        for (i, (p, inten)) in pts.iter().enumerate() {
            let v = map.point_to_voxel[i].unwrap() as usize;
            let c = cfg.center(t.coords()[v]);
            for a in 0..3 {
                assert_eq!(t.feats()[[v, a]], p[a] - c[a]);
            }
            assert_eq!(t.feats()[[v, 3]], *inten);
            assert_eq!(t.feats()[[v, 4]], 1.0);
        }
    }

    #[test]
    fn out_of_bounds_gets_sentinel() {
        let pc = cloud(&[([0.1, 0.1, 0.1], 0.5), ([10.0, 0.0, 0.0], 0.5)]);
        let cfg = VoxelGridConfig::new(0.2)
            .unwrap()
            .with_bounds(Bounds::new([-1.0; 3], [1.0; 3]).unwrap());
        let (t, map) = voxelize(&pc, &cfg).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(map.point_to_voxel, vec![Some(0), None]);

        let feats = interpolate_to_points(&t, &map).unwrap();
        assert_eq!(feats.nrows(), 2);
        assert!(feats.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_out_of_bounds_is_empty() {
        let pc = cloud(&[([10.0, 0.0, 0.0], 0.5)]);
        let cfg = VoxelGridConfig::new(0.2)
            .unwrap()
            .with_bounds(Bounds::new([-1.0; 3], [1.0; 3]).unwrap());
        let (t, map) = voxelize(&pc, &cfg).unwrap();
        assert!(t.is_empty());
        assert_eq!(map.point_to_voxel, vec![None]);
    }

    #[test]
    fn broadcast_to_members() {
        let t = SparseVoxelTensor::new(vec![Coord::new(0, 0, 0)], array![[7.0]], 0).unwrap();
        let map = PointVoxelMap { point_to_voxel: vec![Some(0); 3], voxel_point_counts: vec![3] };
        assert_eq!(interpolate_to_points(&t, &map).unwrap(), array![[7.0], [7.0], [7.0]]);
    }

    #[test]
    fn corrupt_map_rejected() {
        let t = SparseVoxelTensor::new(vec![Coord::new(0, 0, 0)], array![[7.0]], 0).unwrap();
        let map = PointVoxelMap { point_to_voxel: vec![Some(1)], voxel_point_counts: vec![1] };
        assert!(matches!(interpolate_to_points(&t, &map), Err(Error::Index(_))));
    }

    #[test]
    fn ratio_edge_cases() {
        let same = cloud(&[([1.0, 1.0, 1.0], 0.0); 10]);
        assert_eq!(voxel_point_ratio(&same, &[0.1, 0.5, 2.0]).unwrap(), vec![0.1; 3]);

        let spread: Vec<_> = (0..10).map(|i| ([i as f64 * 10.0, 0.5, 0.5], 0.0)).collect();
        assert_eq!(voxel_point_ratio(&cloud(&spread), &[0.1, 1.0, 4.0]).unwrap(), vec![1.0; 3]);

        assert!(voxel_point_ratio(&cloud(&[]), &[0.1]).is_err());
        assert!(voxel_point_ratio(&same, &[0.2, 0.1]).is_err());
    }
}
