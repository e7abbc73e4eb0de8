//! Paired low-field to high-field MR conversion toolkit.
//!
//! Volumes are sliced along one of three orthogonal views, converted slice
//! by slice with a 2D network, restacked, and optionally fused across views.

pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod models;
pub mod multiview;
pub mod nn;
pub mod phantoms;
pub mod training;
pub mod volumes;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use metrics::{evaluate_volume, mse, psnr, ssim_2d, volume_mse, MetricsReport, SsimParams};
pub use models::{
    build_espcn, build_srgan, build_uconvertnet, count_parameters, Architecture, EspcnConfig,
    Model, ModelKind, ModelSpec, SrganConfig, UConvertNetConfig,
};
pub use multiview::{fuse, fuse_weighted, multi_view_convert, ViewEnsemble};
pub use nn::Tensor;
pub use phantoms::{
    degrade, generate_dataset, generate_pair, generate_phantom, split_by_subject, Dataset,
    DegradeParams, Manifest, PhantomParams, SubjectPair,
};
pub use training::{
    convert_volume, train_gan, train_gan_with, train_mse, train_mse_with, EpochRecord,
    OptimizerInfo, TrainConfig, TrainHistory,
};
pub use volumes::{
    extract_slices, normalize, read_mvol, stack_slices, write_mvol, Axis, Slice2D, Volume,
};

/// Derive an independent 64-bit seed for `stream` from a run seed
/// (SplitMix64 finalizer over the combined input).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
