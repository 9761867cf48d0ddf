//! Voxel-level targets by majority vote.

use crate::error::{Error, Result};
use crate::pointcloud::Label;
use crate::sparse_tensor::CoordSet;
use crate::voxelizer::PointVoxelMap;

/// Most frequent class per row of a flat `n × classes` vote table; ties go
/// to the lowest id and rows without votes get `ignore`.
fn tally(votes: &[u32], classes: usize, ignore: Label) -> Vec<Label> {
    votes
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if row[best] == 0 {
                ignore
            } else {
                best as Label
            }
        })
        .collect()
}

fn check(label: Label, classes: usize, ignore: Label) -> Result<bool> {
    if label == ignore {
        return Ok(false);
    }
    if label as usize >= classes {
        return Err(Error::format(format!("label {label} out of range for {classes} classes")));
    }
    Ok(true)
}

/// Scale-0 voxel labels from member points.
pub fn voxel_labels(map: &PointVoxelMap, point_labels: &[Label], classes: usize, ignore: Label) -> Result<Vec<Label>> {
    if point_labels.len() != map.num_points() {
        return Err(Error::shape(format!("{} labels for {} points", point_labels.len(), map.num_points())));
    }
    let mut votes = vec![0u32; map.num_voxels() * classes];
    for (v, &l) in map.point_to_voxel.iter().zip(point_labels) {
        let Some(v) = *v else { continue };
        if check(l, classes, ignore)? {
            let v = v as usize;
            if v >= map.num_voxels() {
                return Err(Error::Index(format!("voxel {v} out of range")));
            }
            votes[v * classes + l as usize] += 1;
        }
    }
    Ok(tally(&votes, classes, ignore))
}

/// Labels on `coarse` by majority over the child voxels of `fine`, where a
/// child at `c` belongs to the parent at `c.coarsen(factor)`.
pub fn coarsen_labels(
    fine: &CoordSet,
    fine_labels: &[Label],
    coarse: &CoordSet,
    factor: u32,
    classes: usize,
    ignore: Label,
) -> Result<Vec<Label>> {
    if fine_labels.len() != fine.len() {
        return Err(Error::shape("one label per fine voxel expected"));
    }
    let mut votes = vec![0u32; coarse.len() * classes];
    for (&c, &l) in fine.coords().iter().zip(fine_labels) {
        if !check(l, classes, ignore)? {
            continue;
        }
        let parent = coarse
            .lookup(c.coarsen(factor as i32))
            .ok_or_else(|| Error::Index(format!("no parent for {c:?}")))?;
        votes[parent * classes + l as usize] += 1;
    }
    Ok(tally(&votes, classes, ignore))
}

/// Scale-0 labels followed by one array per stage. Each stage is
/// `stride` times coarser than the previous one.
pub fn label_pyramid(
    map: &PointVoxelMap,
    point_labels: &[Label],
    coords0: &CoordSet,
    stages: &[std::sync::Arc<CoordSet>],
    stride: u32,
    classes: usize,
    ignore: Label,
) -> Result<Vec<Vec<Label>>> {
    let mut out = vec![voxel_labels(map, point_labels, classes, ignore)?];
    let mut prev = coords0;
    for stage in stages {
        let next = coarsen_labels(prev, out.last().expect("nonempty"), stage, stride, classes, ignore)?;
        out.push(next);
        prev = stage;
    }
    Ok(out)
}
