//! Synthetic labeled scenes used as a stand-in for real scans.
//!
//! Points are sampled on the visible surfaces of simple primitives. Each
//! primitive carries a class id and a surface reflectance so that both
//! geometry and intensity hold signal.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Label, PointCloud};

/// Standard deviation of the per-point reflectance jitter.
const INTENSITY_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Anchor point in meters. For boxes and cylinders it is the center of
    /// the bottom face; for planes and rings the center of the surface.
    pub center: [f64; 3],
    /// Rotation about +z in radians.
    pub yaw: f64,
}

impl Pose {
    pub fn at(center: [f64; 3]) -> Self {
        Self { center, yaw: 0.0 }
    }

    fn apply(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Horizontal rectangle with the given x/y extent.
    Plane { extent: [f64; 2] },
    /// Box sampled on its four sides and top.
    Box { size: [f64; 3] },
    /// Vertical cylinder sampled on its lateral surface.
    Cylinder { radius: f64, height: f64 },
    /// Horizontal annulus with density falling off as 1/r, like a spinning
    /// sensor sweeping the ground.
    Ring { inner: f64, outer: f64 },
}

impl ShapeKind {
    fn area(&self) -> f64 {
        match *self {
            ShapeKind::Plane { extent } => extent[0] * extent[1],
            ShapeKind::Box { size } => 2.0 * (size[0] + size[1]) * size[2] + size[0] * size[1],
            ShapeKind::Cylinder { radius, height } => 2.0 * PI * radius * height,
            ShapeKind::Ring { inner, outer } => PI * (outer * outer - inner * inner),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShapeKind::Plane { extent } => extent.iter().all(|&e| e > 0.0 && e.is_finite()),
            ShapeKind::Box { size } => size.iter().all(|&e| e > 0.0 && e.is_finite()),
            ShapeKind::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            ShapeKind::Ring { inner, outer } => inner >= 0.0 && outer > inner,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("degenerate shape {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            ShapeKind::Plane { extent } => [
                (rng.random::<f64>() - 0.5) * extent[0],
                (rng.random::<f64>() - 0.5) * extent[1],
                0.0,
            ],
            ShapeKind::Box { size } => {
                let [sx, sy, sz] = size;
                let faces = [sx * sz, sx * sz, sy * sz, sy * sz, sx * sy];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = faces.len() - 1;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.random::<f64>() - 0.5;
                let v = rng.random::<f64>();
                match face {
                    0 => [u * sx, -sy / 2.0, v * sz],
                    1 => [u * sx, sy / 2.0, v * sz],
                    2 => [-sx / 2.0, u * sy, v * sz],
                    3 => [sx / 2.0, u * sy, v * sz],
                    _ => [u * sx, (v - 0.5) * sy, sz],
                }
            }
            ShapeKind::Cylinder { radius, height } => {
                let theta = rng.random::<f64>() * 2.0 * PI;
                [radius * theta.cos(), radius * theta.sin(), rng.random::<f64>() * height]
            }
            ShapeKind::Ring { inner, outer } => {
                let r = inner + rng.random::<f64>() * (outer - inner);
                let theta = rng.random::<f64>() * 2.0 * PI;
                [r * theta.cos(), r * theta.sin(), 0.0]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub pose: Pose,
    pub class_id: Label,
    /// Mean surface reflectance in `[0, 1]`.
    pub intensity: f64,
    /// Relative share of the point budget; surface area when unset.
    pub weight: Option<f64>,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, pose: Pose, class_id: Label, intensity: f64) -> Self {
        Self { kind, pose, class_id, intensity, weight: None }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = Some(weight);
        self
    }

    fn budget_weight(&self) -> f64 {
        self.weight.unwrap_or_else(|| self.kind.area())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_points: usize,
    pub class_layout: Vec<ShapeSpec>,
    /// Isotropic Gaussian position noise in meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 {
            return Err(Error::config("scene needs at least one point"));
        }
        if self.class_layout.is_empty() {
            return Err(Error::config("scene has no shapes"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        for s in &self.class_layout {
            s.kind.validate()?;
            if !(s.budget_weight() > 0.0) {
                return Err(Error::config("shape weight must be positive"));
            }
        }
        let num_classes = self.num_classes();
        for c in 0..num_classes {
            if !self.class_layout.iter().any(|s| s.class_id as usize == c) {
                return Err(Error::config(format!(
                    "class ids must be dense; {c} is missing below {num_classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_layout.iter().map(|s| s.class_id as usize + 1).max().unwrap_or(0)
    }

    /// Points assigned to each shape: proportional to its weight, rounded
    /// by the largest-remainder rule so the budgets sum to `num_points`.
    pub fn point_budgets(&self) -> Vec<usize> {
        let weights: Vec<f64> = self.class_layout.iter().map(|s| s.budget_weight()).collect();
        let total: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|w| w / total * self.num_points as f64).collect();
        let mut budgets: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = budgets.iter().sum();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.num_points - assigned) {
            budgets[i] += 1;
        }
        budgets
    }
}

/// Samples the scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let jitter = Normal::new(0.0, INTENSITY_JITTER).expect("constant sigma");

    let mut positions = Vec::with_capacity(spec.num_points);
    let mut intensity = Vec::with_capacity(spec.num_points);
    let mut labels = Vec::with_capacity(spec.num_points);
    for (shape, budget) in spec.class_layout.iter().zip(spec.point_budgets()) {
        for _ in 0..budget {
            let mut p = shape.pose.apply(shape.kind.sample(&mut rng));
            if spec.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(&mut rng);
                }
            }
            positions.push(p);
            intensity.push((shape.intensity + jitter.sample(&mut rng)).clamp(0.0, 1.0));
            labels.push(shape.class_id);
        }
    }
    PointCloud::new(positions, intensity, Some(labels))
}

/// Three-class tabletop-sized street scene: ground (0), boxes (1) and
/// poles (2), laid out at random inside a 24 m square.
pub fn toy_scene_spec(seed: u64, num_points: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5CE7E);
    let mut layout = vec![ShapeSpec::new(
        ShapeKind::Plane { extent: [24.0, 24.0] },
        Pose::at([0.0, 0.0, 0.0]),
        0,
        0.25,
    )
    .weighted(0.45)];

    let boxes = rng.random_range(3..=5);
    for _ in 0..boxes {
        let size = [
            rng.random_range(3.0..5.0),
            rng.random_range(1.6..2.2),
            rng.random_range(1.4..2.0),
        ];
        let pose = Pose {
            center: [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), 0.0],
            yaw: rng.random_range(-PI..PI),
        };
        layout.push(ShapeSpec::new(ShapeKind::Box { size }, pose, 1, 0.55).weighted(0.3 / boxes as f64));
    }

    let poles = rng.random_range(4..=8);
    for _ in 0..poles {
        let kind = ShapeKind::Cylinder {
            radius: rng.random_range(0.1..0.25),
            height: rng.random_range(2.5..4.0),
        };
        let pose = Pose::at([rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0]);
        layout.push(ShapeSpec::new(kind, pose, 2, 0.8).weighted(0.25 / poles as f64));
    }

    SceneSpec { num_points, class_layout: layout, noise_sigma: 0.02, seed }
}

/// Full-sweep street scan inside ±48 m with the sensor 1.7 m above ground:
/// a ground ring (0), parked vehicles and building walls (1), and poles (2).
pub fn lidar_scan_spec(seed: u64, num_points: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11DA_25CA_4);
    let ground_z = -1.7;
    let mut layout = vec![ShapeSpec::new(
        ShapeKind::Ring { inner: 2.5, outer: 48.0 },
        Pose::at([0.0, 0.0, ground_z]),
        0,
        0.25,
    )
    .weighted(0.55)];

    for _ in 0..24 {
        let r = rng.random_range(4.0..35.0);
        let theta = rng.random_range(-PI..PI);
        let pose = Pose {
            center: [r * theta.cos(), r * theta.sin(), ground_z],
            yaw: theta + rng.random_range(-0.2..0.2),
        };
        let size = [rng.random_range(3.8..4.8), rng.random_range(1.7..2.0), rng.random_range(1.4..1.7)];
        layout.push(ShapeSpec::new(ShapeKind::Box { size }, pose, 1, 0.55).weighted(0.2 / 24.0));
    }
    for side in [-1.0, 1.0] {
        let pose = Pose { center: [0.0, side * 20.0, ground_z], yaw: 0.0 };
        let kind = ShapeKind::Box { size: [90.0, 6.0, 3.4] };
        layout.push(ShapeSpec::new(kind, pose, 1, 0.45).weighted(0.1));
    }
    for _ in 0..40 {
        let pose = Pose::at([rng.random_range(-46.0..46.0), rng.random_range(-16.0..16.0), ground_z]);
        let kind = ShapeKind::Cylinder { radius: rng.random_range(0.1..0.3), height: 3.4 };
        layout.push(ShapeSpec::new(kind, pose, 2, 0.8).weighted(0.05 / 40.0));
    }

    SceneSpec { num_points, class_layout: layout, noise_sigma: 0.02, seed }
}
