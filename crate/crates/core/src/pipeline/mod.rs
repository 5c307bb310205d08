//! Whole runs: corpus synthesis, denoiser training, generation, classifier
//! training and evaluation, and the gradient-check suite. Every run writes
//! into the configured `out` directory and never modifies its inputs.
//!
//! Random streams, all derived from the master seed:
//!
//! | purpose             | index        |
//! |---------------------|--------------|
//! | `init`              | 0 backbone, 1 ArcFace centres |
//! | `split`             | 0            |
//! | `shuffle`           | epoch        |
//! | `pairs`, `lambda`   | epoch        |
//! | `denoiser-init`     | 0            |
//! | `diffusion-shuffle`, `diffusion-noise` | epoch |
//! | `generate`          | class * per_class + image |
//! | `synth`, `synth-textures` | sample, 0 |

mod classifier;
mod denoising;
mod records;
mod tools;

pub use classifier::{
    evaluate, load_classifier_weights, load_real, load_synthetic, split_real, train_classifier, Assessment,
    Classifier, TrainSummary,
};
pub use denoising::{generate, load_denoiser, train_diffusion};
pub use records::{read_metrics, read_mix_stats, write_metrics, write_mix_stats, write_predictions, MetricsRow};
pub use tools::{gradcheck, gradient_suite, synth_data, GRADCHECK_TOLERANCE};
