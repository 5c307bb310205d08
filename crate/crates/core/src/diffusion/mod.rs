//! Class-conditional denoising diffusion: noise schedule, a shallow
//! timestep-blind denoiser, the forward process, ancestral sampling and
//! bulk generation.

mod denoiser;
mod process;
mod resample;
mod schedule;

pub use denoiser::{build_denoiser, Denoiser, DenoiserConfig};
pub use process::{
    denoise_loss, denoise_loss_with_draws, generate_dataset, generation_stream, q_sample, sample, sample_batch,
    EpsilonModel, GeneratedSample, NoiseDraws,
};
pub use resample::{bicubic_plane, cubic_weight, upsample_bicubic};
pub use schedule::{make_linear_schedule, NoiseSchedule};
