//! Brute-force reference implementations shared by the integration tests.
//! None of these reuse library kernels beyond plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use drinet::sparse_tensor::{Coord, SparseVoxelTensor};
use drinet::Label;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random occupancy of the cube `[0, extent)³` (shifted by `origin`) with
/// uniform features in [-1, 1].
pub fn random_tensor(seed: u64, extent: i32, origin: i32, occupancy: f64, channels: usize) -> SparseVoxelTensor {
    let mut r = rng(seed);
    let mut coords = Vec::new();
    for z in 0..extent {
        for y in 0..extent {
            for x in 0..extent {
                if r.random::<f64>() < occupancy {
                    coords.push(Coord::new(x + origin, y + origin, z + origin));
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(Coord::new(origin, origin, origin));
    }
    let feats = Array2::from_shape_simple_fn((coords.len(), channels), || r.random_range(-1.0..1.0));
    SparseVoxelTensor::new(coords, feats, 0).unwrap()
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// Dense `extent³` convolution with zero padding and zero inactive inputs,
/// read out at the active sites: `out[p] = b + Σ_d x[p − d] · W[k(d)]` with
/// `k(d) = (dx+1) + 3(dy+1) + 9(dz+1)`.
pub fn dense_conv3(t: &SparseVoxelTensor, extent: i32, w: &Array3<f64>, b: &Array1<f64>) -> Array2<f64> {
    let e = extent as usize;
    let cin = t.channels();
    let cout = w.dim().2;
    let mut grid = vec![0.0; e * e * e * cin];
    let at = |x: i32, y: i32, z: i32| ((z as usize * e + y as usize) * e + x as usize) * cin;
    for (c, row) in t.coords().iter().zip(t.feats().outer_iter()) {
        let base = at(c.x, c.y, c.z);
        for j in 0..cin {
            grid[base + j] = row[j];
        }
    }
    let mut out = Array2::zeros((t.len(), cout));
    for (i, c) in t.coords().iter().enumerate() {
        for o in 0..cout {
            let mut acc = b[o];
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (x, y, z) = (c.x - dx, c.y - dy, c.z - dz);
                        if x < 0 || y < 0 || z < 0 || x >= extent || y >= extent || z >= extent {
                            continue;
                        }
                        let k = ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize;
                        let base = at(x, y, z);
                        for j in 0..cin {
                            acc += grid[base + j] * w[[k, j, o]];
                        }
                    }
                }
            }
            out[[i, o]] = acc;
        }
    }
    out
}

fn floor_div(a: i32, s: i32) -> i32 {
    let q = a / s;
    if (a % s != 0) && ((a < 0) != (s < 0)) {
        q - 1
    } else {
        q
    }
}

pub fn parent(c: Coord, s: i32) -> Coord {
    Coord::new(floor_div(c.x, s), floor_div(c.y, s), floor_div(c.z, s))
}

/// Group-by mean keyed by parent cell.
pub fn pool_oracle(t: &SparseVoxelTensor, s: i32) -> BTreeMap<Coord, Vec<f64>> {
    let mut sums: BTreeMap<Coord, (Vec<f64>, usize)> = BTreeMap::new();
    for (c, row) in t.coords().iter().zip(t.feats().outer_iter()) {
        let e = sums.entry(parent(*c, s)).or_insert_with(|| (vec![0.0; t.channels()], 0));
        for (a, v) in e.0.iter_mut().zip(row) {
            *a += v;
        }
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (v, n))| (k, v.into_iter().map(|x| x / n as f64).collect())).collect()
}

/// Per-target row of the parent cell, or zeros.
pub fn upsample_oracle(src: &SparseVoxelTensor, targets: &[Coord], s: i32) -> Array2<f64> {
    let mut out = Array2::zeros((targets.len(), src.channels()));
    for (i, t) in targets.iter().enumerate() {
        let p = parent(*t, s);
        if let Some(j) = src.coords().iter().position(|c| *c == p) {
            out.row_mut(i).assign(&src.feats().row(j));
        }
    }
    out
}

/// Jaccard loss of the "mistake set" `s` for a class with ground truth `gt`.
fn jaccard_loss(gt: &[bool], s: &[bool]) -> f64 {
    let inter = gt.iter().zip(s).filter(|(&g, &m)| g && !m).count() as f64;
    let union = gt.iter().zip(s).filter(|(&g, &m)| g || m).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

/// Lovász extension evaluated as a level-set integral,
/// `Σ_k (e_(k) − e_(k+1)) Δ({i : e_i ≥ e_(k)})`, averaged over the classes
/// present in `labels`.
pub fn lovasz_oracle(probs: &Array2<f64>, labels: &[Label], ignore: Label) -> f64 {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore).collect();
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..probs.ncols() {
        let gt: Vec<bool> = rows.iter().map(|&i| labels[i] as usize == c).collect();
        if !gt.iter().any(|&g| g) {
            continue;
        }
        present += 1;
        let errs: Vec<f64> =
            rows.iter().zip(&gt).map(|(&i, &g)| if g { 1.0 - probs[[i, c]] } else { probs[[i, c]] }).collect();
        let mut levels = errs.clone();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut f = 0.0;
        for (k, &lv) in levels.iter().enumerate() {
            let next = levels.get(k + 1).copied().unwrap_or(0.0);
            let set: Vec<bool> = errs.iter().map(|&e| e >= lv).collect();
            f += (lv - next) * jaccard_loss(&gt, &set);
        }
        total += f;
    }
    total / present as f64
}

/// Random distribution rows.
pub fn random_probs(seed: u64, n: usize, c: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let mut p = Array2::from_shape_simple_fn((n, c), || r.random_range(0.01..1.0));
    for mut row in p.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}
