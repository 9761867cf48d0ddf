//! Training-time point cloud augmentation: dropout, axis flips, rotation
//! about z and isotropic scaling, applied in that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_x: f64,
    pub flip_y: f64,
    /// Keep ratio drawn uniformly per call, then applied per point.
    pub keep: [f64; 2],
    pub scale: [f64; 2],
    /// Radians.
    pub rotation: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_x: 0.5,
            flip_y: 0.5,
            keep: [0.9, 1.0],
            scale: [0.95, 1.05],
            rotation: [-std::f64::consts::PI, std::f64::consts::PI],
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { flip_x: 0.0, flip_y: 0.0, keep: [1.0, 1.0], scale: [1.0, 1.0], rotation: [0.0, 0.0] }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !prob(self.flip_x) || !prob(self.flip_y) {
            return Err(Error::config("flip probabilities must lie in [0, 1]"));
        }
        if !range(self.keep) || self.keep[0] <= 0.0 || self.keep[1] > 1.0 {
            return Err(Error::config("keep range must lie in (0, 1]"));
        }
        if !range(self.scale) || self.scale[0] <= 0.0 {
            return Err(Error::config("scale range must be positive"));
        }
        if !range(self.rotation) {
            return Err(Error::config("rotation range must be ordered"));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministic for a given seed. Intensities and labels travel with
/// their points. If dropout would remove every point the cloud is kept whole.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let keep_ratio = draw(&mut rng, cfg.keep);
    let mask: Vec<bool> = (0..pc.len()).map(|_| rng.random::<f64>() < keep_ratio).collect();
    let mut out = if mask.iter().any(|&k| k) { pc.retain_indices(|i| mask[i]) } else { pc.clone() };

    let fx = if rng.random::<f64>() < cfg.flip_x { -1.0 } else { 1.0 };
    let fy = if rng.random::<f64>() < cfg.flip_y { -1.0 } else { 1.0 };
    let theta = draw(&mut rng, cfg.rotation);
    let scale = draw(&mut rng, cfg.scale);
    let (sin, cos) = theta.sin_cos();

    for p in out.positions_mut() {
        let x = p[0] * fx;
        let y = p[1] * fy;
        *p = [(cos * x - sin * y) * scale, (sin * x + cos * y) * scale, p[2] * scale];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize) -> PointCloud {
        let pos = (0..n).map(|i| [i as f64 * 0.1, (i % 7) as f64, -(i as f64) * 0.01]).collect();
        let inten = (0..n).map(|i| (i % 10) as f64 / 10.0).collect();
        let labels = (0..n).map(|i| (i % 3) as u16).collect();
        PointCloud::new(pos, inten, Some(labels)).unwrap()
    }

    #[test]
    fn identity_config_is_exact() {
        let pc = cloud(500);
        assert_eq!(augment(&pc, &AugmentConfig::identity(), 9).unwrap(), pc);
    }

    #[test]
    fn quarter_turn() {
        let cfg = AugmentConfig { rotation: [std::f64::consts::FRAC_PI_2; 2], ..AugmentConfig::identity() };
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0]], vec![0.5], None).unwrap();
        let p = augment(&pc, &cfg, 0).unwrap().positions()[0];
        assert!(p[0].abs() <= 1e-12 && (p[1] - 1.0).abs() <= 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn deterministic_and_labels_follow() {
        let pc = cloud(2000);
        let cfg = AugmentConfig::default();
        let a = augment(&pc, &cfg, 4).unwrap();
        assert_eq!(a, augment(&pc, &cfg, 4).unwrap());
        let flips = AugmentConfig { rotation: [0.0; 2], scale: [1.0; 2], keep: [0.5; 2], ..cfg };
        let b = augment(&pc, &flips, 11).unwrap();
        assert!(b.len() < pc.len());
        for ((p, l), v) in b.positions().iter().zip(b.labels().unwrap()).zip(b.intensity()) {
            let i = (p[0].abs() / 0.1).round() as usize;
            assert_eq!(*l as usize, i % 3);
            assert_eq!(*v, (i % 10) as f64 / 10.0);
        }
        for p in a.positions() {
            assert!(p[2] <= 0.0);
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            AugmentConfig { flip_x: 1.5, ..Default::default() },
            AugmentConfig { keep: [0.0, 1.0], ..Default::default() },
            AugmentConfig { scale: [-1.0, 1.0], ..Default::default() },
            AugmentConfig { rotation: [1.0, 0.0], ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
