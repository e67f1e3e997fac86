//! Glioma segmentation pipeline: MRI preprocessing, a 3D encoder-decoder
//! segmentation network trained with a small reverse-mode autodiff engine,
//! overlap metrics, mesh-based shape radiomics and a fused-feature
//! classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`], [`vxl`], [`nifti`]: voxel-grid types and file formats.
//! * [`preprocess`]: brain isolation, PCA cropping, z-score, slice range, resize.
//! * [`autodiff`]: tensors, the computation graph and its operators.
//! * [`network`]: the encoder/context/fusion/decoder graph.
//! * [`training`]: Dice and focal losses, optimizers, the training loop.
//! * [`metrics`]: DSC/JCS and confusion-based scores per tumor region.
//! * [`radiomics`]: marching cubes and the four shape features.
//! * [`classifier`]: segmentation-feature pooling, fusion and the MLP head.
//! * [`phantom`]: synthetic volumes with analytically known geometry.

pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod radiomics;
pub mod training;
pub mod volume;
pub mod vxl;

pub use error::{Error, Result};
pub use volume::{LabelVolume, MultiChannelVolume, RegionId, Volume3D};
