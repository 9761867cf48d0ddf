//! Sparse voxel tensors, sparse convolution and a voxel-as-point LiDAR
//! segmentation network with deep supervision.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod network;
pub mod params;
pub mod pointcloud;
pub mod scene;
pub mod sgfe;
pub mod sparse_conv;
pub mod sparse_tensor;
pub mod training;
pub mod voxelizer;

pub use error::{Error, Result};
pub use network::NetworkConfig;
pub use params::ParameterStore;
pub use pointcloud::{Label, PointCloud};
pub use sparse_tensor::{Coord, CoordSet, ScaleSet, SparseVoxelTensor};
