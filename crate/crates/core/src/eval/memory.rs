//! Memory needed to hold per-class supervision on a dense grid versus on
//! the active voxels only.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::voxelizer::Bounds;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub dense_bytes: u64,
    pub sparse_bytes: u64,
    pub ratio: f64,
    /// Grid cells along x, y, z.
    pub grid: [u64; 3],
    pub cells: u64,
    pub active_voxels: u64,
    pub num_classes: usize,
    pub bytes_per_value: u64,
    pub bytes_per_label: u64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub voxel_size: f64,
}

impl MemoryReport {
    pub fn assumptions(&self) -> String {
        format!(
            "bounds [{:.2}, {:.2}] x [{:.2}, {:.2}] x [{:.2}, {:.2}] m, voxel {} m, grid {}x{}x{} = {} cells, \
             {} classes at {} B per value, labels {} B, {} active voxels",
            self.bounds_min[0],
            self.bounds_max[0],
            self.bounds_min[1],
            self.bounds_max[1],
            self.bounds_min[2],
            self.bounds_max[2],
            self.voxel_size,
            self.grid[0],
            self.grid[1],
            self.grid[2],
            self.cells,
            self.num_classes,
            self.bytes_per_value,
            self.bytes_per_label,
            self.active_voxels,
        )
    }
}

/// Dense: one score per class plus one label for every grid cell.
/// Sparse: the same for active voxels only.
pub fn supervision_memory(
    bounds: &Bounds,
    voxel_size: f64,
    num_classes: usize,
    active_voxels: u64,
    bytes_per_value: u64,
    bytes_per_label: u64,
) -> Result<MemoryReport> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::config("voxel size must be positive"));
    }
    let ext = bounds.extent();
    let mut grid = [0u64; 3];
    for (g, e) in grid.iter_mut().zip(ext) {
        // tolerate float noise in extents that are exact multiples
        *g = ((e / voxel_size) - 1e-9).ceil().max(0.0) as u64;
    }
    let cells = grid.iter().product::<u64>();
    if cells == 0 {
        return Err(Error::Empty("grid has no cells".into()));
    }
    if active_voxels > cells {
        return Err(Error::config(format!("{active_voxels} active voxels exceed {cells} cells")));
    }
    let per_cell = num_classes as u64 * bytes_per_value + bytes_per_label;
    let dense_bytes = cells * per_cell;
    let sparse_bytes = active_voxels * per_cell;
    Ok(MemoryReport {
        dense_bytes,
        sparse_bytes,
        ratio: sparse_bytes as f64 / dense_bytes as f64,
        grid,
        cells,
        active_voxels,
        num_classes,
        bytes_per_value,
        bytes_per_label,
        bounds_min: bounds.min,
        bounds_max: bounds.max,
        voxel_size,
    })
}

/// Bounds of a typical automotive scan: ±48 m around the sensor and
/// [-3, 1.8] m vertically.
pub fn kitti_like_bounds() -> Bounds {
    Bounds::new([-48.0, -48.0, -3.0], [48.0, 48.0, 1.8]).expect("valid constant bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> Bounds {
        Bounds::new([0.0; 3], [10.0; 3]).unwrap()
    }

    #[test]
    fn closed_form() {
        let r = supervision_memory(&cube(), 1.0, 2, 10, 4, 4).unwrap();
        assert_eq!((r.dense_bytes, r.sparse_bytes, r.ratio), (12000, 120, 0.01));
        assert_eq!(r.cells, 1000);
    }

    #[test]
    fn fully_dense() {
        let r = supervision_memory(&cube(), 1.0, 5, 1000, 4, 2).unwrap();
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn ratio_is_occupancy_for_any_widths() {
        let r = supervision_memory(&cube(), 2.0, 20, 25, 8, 1).unwrap();
        assert_eq!(r.ratio, 25.0 / 125.0);
    }

    #[test]
    fn kitti_grid() {
        let r = supervision_memory(&kitti_like_bounds(), 0.2, 20, 0, 4, 4).unwrap();
        assert_eq!(r.grid, [480, 480, 24]);
        assert!(r.assumptions().contains("480x480x24"));
    }

    #[test]
    fn invalid() {
        assert!(supervision_memory(&cube(), 0.0, 2, 1, 4, 4).is_err());
        assert!(supervision_memory(&cube(), 1.0, 2, 1001, 4, 4).is_err());
    }
}
