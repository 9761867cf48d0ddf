//! TOML training configuration and dataset loading.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::pointcloud::{read_labels, read_point_cloud, Label, LabelRemap, PointCloud, PointFormat};
use crate::scene::{generate_scene, lidar_scan_spec, toy_scene_spec};
use crate::training::augment::AugmentConfig;
use crate::training::optim::LrSchedule;
use crate::voxelizer::{Bounds, VoxelGridConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub use_ce: bool,
    pub use_lovasz: bool,
    /// Weight α of the auxiliary stage losses.
    pub aux_weight: f64,
    /// Deep supervision on every stage.
    pub dss: bool,
    /// Auxiliary terms use the same CE/Lovász mix as the main head; when
    /// false they are cross-entropy only.
    pub aux_full_mix: bool,
    pub ignore_label: Label,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { use_ce: true, use_lovasz: true, aux_weight: 1.0, dss: true, aux_full_mix: true, ignore_label: 255 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_ce && !self.use_lovasz {
            return Err(Error::config("at least one of use_ce and use_lovasz must be set"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::config("aux_weight must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Toy,
    Lidar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePair {
    pub points: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        scene: SceneKind,
        num_scenes: usize,
        num_points: usize,
        /// Fraction of scenes held out for validation, taken from the end.
        val_fraction: f64,
    },
    Files {
        /// `kitti-bin` or `ascii-xyz`.
        format: String,
        train: Vec<FilePair>,
        #[serde(default)]
        val: Vec<FilePair>,
        /// Raw-to-class remap file; unmapped ids become the ignore label.
        #[serde(default)]
        remap: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { scene: SceneKind::Toy, num_scenes: 200, num_points: 8000, val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub voxel_size: f64,
    /// `[[xmin, ymin, zmin], [xmax, ymax, zmax]]`; points outside are dropped.
    pub bounds: Option<[[f64; 3]; 2]>,
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Scenes per optimizer step; gradients are averaged.
    pub batch_size: usize,
    /// Worker threads for the items of a batch and for validation; 0 uses
    /// every available core.
    pub threads: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub schedule: LrSchedule,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
    pub loss: LossConfig,
    pub network: NetworkConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            voxel_size: 0.2,
            bounds: None,
            epochs: 50,
            max_steps: None,
            batch_size: 4,
            threads: 1,
            augment: true,
            augmentation: AugmentConfig::default(),
            schedule: LrSchedule::default(),
            validate_every: 1,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("train config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every must be positive"));
        }
        self.augmentation.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.network.validate()?;
        if let DataConfig::Synthetic { num_scenes, num_points, val_fraction, .. } = &self.data {
            if *num_scenes == 0 || *num_points == 0 {
                return Err(Error::config("synthetic data needs scenes and points"));
            }
            if !(0.0..1.0).contains(val_fraction) {
                return Err(Error::config("val_fraction must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<VoxelGridConfig> {
        let grid = VoxelGridConfig::new(self.voxel_size)?;
        Ok(match self.bounds {
            Some([lo, hi]) => grid.with_bounds(Bounds::new(lo, hi)?),
            None => grid,
        })
    }

    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Synthetic scene `index` of a dataset seeded with `seed`.
pub fn synthetic_scene(kind: SceneKind, seed: u64, index: usize, num_points: usize) -> Result<PointCloud> {
    let s = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let spec = match kind {
        SceneKind::Toy => toy_scene_spec(s, num_points),
        SceneKind::Lidar => lidar_scan_spec(s, num_points),
    };
    generate_scene(&spec)
}

fn load_pairs(pairs: &[FilePair], format: PointFormat, remap: Option<&LabelRemap>) -> Result<Vec<PointCloud>> {
    pairs
        .iter()
        .map(|p| {
            let pc = read_point_cloud(&p.points, format)?;
            let mut labels = read_labels(&p.labels, Some(pc.len()))?;
            if let Some(r) = remap {
                r.apply(&mut labels);
            }
            pc.with_labels(labels)
        })
        .collect()
}

/// Training and validation clouds, each carrying labels.
pub fn load_dataset(cfg: &TrainConfig) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    match &cfg.data {
        DataConfig::Synthetic { scene, num_scenes, num_points, val_fraction } => {
            let n_val = (*num_scenes as f64 * val_fraction).round() as usize;
            let mut all = (0..*num_scenes)
                .map(|i| synthetic_scene(*scene, cfg.seed, i, *num_points))
                .collect::<Result<Vec<_>>>()?;
            let val = all.split_off(num_scenes - n_val);
            Ok((all, val))
        }
        DataConfig::Files { format, train, val, remap } => {
            let format: PointFormat = format.parse()?;
            let remap = match remap {
                Some(path) => Some(LabelRemap::parse(&fs::read_to_string(path)?, cfg.loss.ignore_label)?),
                None => None,
            };
            let train = load_pairs(train, format, remap.as_ref())?;
            if train.is_empty() {
                return Err(Error::Empty("no training files listed".into()));
            }
            Ok((train, load_pairs(val, format, remap.as_ref())?))
        }
    }
}
