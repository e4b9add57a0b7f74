//! Zero-shot domain adaptation on procedural driving scenes: a
//! layout-conditioned pixel diffusion model translates labelled source images
//! into unseen target conditions, and a segmenter is adapted on the pairs.

pub mod adaptation;
pub mod checkpoint;
pub mod denoiser;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scene;
pub mod segmentation;
pub mod tensor;
pub mod transfer;

pub use adaptation::{
    sim_loss, task_loss, train_source_only, train_zodi, zodi_loss, LossBreakdown, TrainConfig,
};
pub use denoiser::{Conditioning, Denoiser, DenoiserConfig, PretrainConfig};
pub use diffusion::{
    build_schedule, denoise_from, forward_noising, reverse_step, NoisePredictor, NoiseSchedule,
    ScheduleKind,
};
pub use error::{Error, Result};
pub use scene::{Domain, SceneSample, Splits};
pub use segmentation::{miou, ClassMap, SegConfig, SegModel};
pub use tensor::{LatentArray, Tensor3};
pub use transfer::{
    stochastic_inversion, strength_to_k, transfer_dataset, transfer_image, TransferConfig,
    TransferredPair, Variant,
};
