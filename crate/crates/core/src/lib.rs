//! Shared-kernel Gaussian mixture classifiers trained by supervised EM,
//! with feature partitioning for high-dimensional data.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64`/`*32` aliases name the concrete instantiations.

pub mod classifier;
pub mod cv;
pub mod em;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod partition;
pub mod preprocess;
pub mod scalar;

pub use classifier::{
    accuracy, class_scores, classify, evaluate, shared_proportion, ClassScorer, ConfusionMatrix,
    SHARED_THRESHOLD,
};
pub use cv::{cross_validate, CvConfig, CvReport};
pub use em::{
    e_step, incomplete_log_likelihood, q_bruteforce, q_function, train_skem, train_standard_em,
    update_covariance_mda, update_covariances, update_means, update_weights, CovarianceMode,
    SkemTrainer, TrainConfig, TrainHistory, TrainOutcome,
};
pub use error::{Error, Result};
pub use io::{load_delimited, load_idx, load_model, save_model, DelimitedSchema, ModelBundle, ModelKind};
pub use linalg::Matrix;
pub use model::{
    class_conditional_log_density, gaussian_log_density, GaussianComponent, LabeledDataset,
    MixtureModel, ResponsibilityMatrix, SharedKernelModel,
};
pub use partition::{
    complexity_estimate, expand_joint, make_partition, train_pskem, train_pskem_with,
    BlockSchedule, Partition, PartitionScheme, PartitionedModel,
};
pub use preprocess::{
    deskew, downsample2, normalize_image, range_scale, FeaturePipeline, GrayImage, PcaTransform,
    StandardizeTransform,
};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type GaussianComponent64 = GaussianComponent<f64>;
pub type GaussianComponent32 = GaussianComponent<f32>;
pub type SharedKernelModel64 = SharedKernelModel<f64>;
pub type SharedKernelModel32 = SharedKernelModel<f32>;
pub type MixtureModel64 = MixtureModel<f64>;
pub type MixtureModel32 = MixtureModel<f32>;
pub type PartitionedModel64 = PartitionedModel<f64>;
pub type PartitionedModel32 = PartitionedModel<f32>;
pub type LabeledDataset64 = LabeledDataset<f64>;
pub type LabeledDataset32 = LabeledDataset<f32>;
pub type ModelBundle64 = ModelBundle<f64>;
pub type ModelBundle32 = ModelBundle<f32>;
pub type FeaturePipeline64 = FeaturePipeline<f64>;
pub type FeaturePipeline32 = FeaturePipeline<f32>;
