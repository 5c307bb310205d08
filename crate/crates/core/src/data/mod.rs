//! HPA-format corpora: channel images, CSV manifests, the train/validation
//! split, and a procedural desk corpus.

mod corpus;
mod image;
mod png_io;
mod synth;

pub use corpus::{
    channel_path, decode_image, format_target, load_corpus, parse_target, split, split_indices, write_manifest,
    write_sample_pngs, Dataset, SampleRecord, NUM_CLASSES,
};
pub use image::{area_resample, batch_tensor, Channel, MultiChannelImage, ValueRange, CHANNELS};
pub use png_io::{quantize, read_gray, write_gray8, GrayPlane};
pub use synth::{class_motif, synth_corpus, SynthOptions};
