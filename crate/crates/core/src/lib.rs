//! Few-shot 3D classification over six-view depth projections with
//! Haar wavelet attention and rate-distortion coefficient masking.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod ioutil;
pub mod model;
pub mod pgm;
pub mod rde;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use config::RunConfig;
pub use dataset::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use geometry::{
    corrupt, load_point_cloud, normalize_unit_cube, project_six_views, synth_shape, CloudFormat,
    CorruptKind, DepthImage, PointCloud, ShapeKind, ViewDirection, ViewSet,
};
pub use model::{
    copy_parameters, episode_loss, proto_head, view_pool, Backbone, Episode, ModelConfig, Role,
};
pub use rde::{
    apply_mask, estimate_noise, obfuscate, optimize_mask, CoefficientMask, MaskStore,
    ObfuscationNoise, RdeConfig,
};
pub use tensor::Tensor;
pub use training::{
    evaluate, pretrain, run_ablation, run_pipeline, sample_episode, train, AblationKind,
    EvalOutput, FoldSplit, Phase, TrainConfig, TrainOutput,
};
pub use wavelet::{dwt2, idwt2, wa_block, HaarFilterBank, SubBands, WaVariant};
