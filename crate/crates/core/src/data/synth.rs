//! Procedural stand-in for an HPA-format corpus.
//!
//! Class `k` is a green-channel motif of `1 + k % 7` Gaussian blobs evenly
//! spaced on a ring around the image centre. The ring radius and the blob
//! width both grow with `k / 7`, and the ring is rotated by a class-specific
//! phase. Red, blue and yellow carry one filament, nucleus and reticulum
//! texture per corpus, shared by every sample and class. Per-sample
//! variation comes from motif brightness and pixel noise, so class identity
//! is carried by the green channel alone.

use std::f32::consts::PI;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::corpus::{Dataset, NUM_CLASSES};
use super::image::{Channel, MultiChannelImage, ValueRange, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub per_class: usize,
    pub size: usize,
    pub class_count: usize,
    /// Composite 1 to 3 class motifs per sample instead of exactly one.
    pub multi_label: bool,
}

impl SynthOptions {
    pub fn single_label(per_class: usize, size: usize) -> Self {
        Self {
            per_class,
            size,
            class_count: NUM_CLASSES,
            multi_label: false,
        }
    }
}

/// Noise-free green motif of class `k` on a `size x size` grid.
pub fn class_motif(k: usize, size: usize) -> Vec<f32> {
    let s = size as f32 / 32.0;
    let count = 1 + k % 7;
    let level = (k / 7) as f32;
    let radius = (3.5 + 3.0 * level) * s;
    let sigma = (0.9 + 0.35 * level) * s;
    let phase = 0.37 * k as f32;
    let c = (size as f32 - 1.0) / 2.0;
    let centres: Vec<(f32, f32)> = (0..count)
        .map(|j| {
            let a = phase + 2.0 * PI * j as f32 / count as f32;
            (c + radius * a.sin(), c + radius * a.cos())
        })
        .collect();
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f32 = centres
                .iter()
                .map(|&(cy, cx)| {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            out[y * size + x] = v.min(1.0);
        }
    }
    out
}

fn filaments(rng: &mut Rng, size: usize) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.15..0.45);
            (angle, freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f32 = waves
                .iter()
                .map(|&(a, f, p)| {
                    let t = (x as f32 * a.cos() + y as f32 * a.sin()) * f * 32.0 / size as f32;
                    (t + p).sin().max(0.0).powi(4)
                })
                .sum();
            out[y * size + x] = 0.35 * v / 3.0 + 0.05;
        }
    }
    out
}

fn nucleus(rng: &mut Rng, size: usize) -> (Vec<f32>, (f32, f32, f32)) {
    let c = (size as f32 - 1.0) / 2.0;
    let cy = c + rng.random_range(-2.0..2.0) * size as f32 / 32.0;
    let cx = c + rng.random_range(-2.0..2.0) * size as f32 / 32.0;
    let r = rng.random_range(4.0..6.0) * size as f32 / 32.0;
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            out[y * size + x] = 0.7 / (1.0 + ((d - r) * 1.5).exp()) + 0.05;
        }
    }
    (out, (cy, cx, r))
}

fn reticulum(rng: &mut Rng, size: usize, (cy, cx, r): (f32, f32, f32)) -> Vec<f32> {
    let mut out = vec![0f32; size * size];
    let w = rng.random_range(2.0..4.0) * size as f32 / 32.0;
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            out[y * size + x] = 0.4 * (-(d - r - w).powi(2) / (2.0 * w * w)).exp() + 0.05;
        }
    }
    out
}

/// Red, blue and yellow planes shared by every sample of a corpus.
fn textures(rng: &mut Rng, size: usize) -> [Vec<f32>; 3] {
    let red = filaments(rng, size);
    let (blue, geometry) = nucleus(rng, size);
    let yellow = reticulum(rng, size, geometry);
    [red, blue, yellow]
}

fn render(
    rng: &mut Rng,
    size: usize,
    classes: &[usize],
    motifs: &[Vec<f32>],
    shared: &[Vec<f32>; 3],
) -> MultiChannelImage {
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let mut green = vec![0.03f32; size * size];
    for &k in classes {
        let brightness = rng.random_range(0.75..1.0);
        for (g, m) in green.iter_mut().zip(&motifs[k]) {
            *g = g.max(0.03 + brightness * m);
        }
    }
    let [red, blue, yellow] = shared.clone();
    let mut planes = [red, green, blue, yellow];
    for plane in &mut planes {
        for v in plane.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    debug_assert_eq!(Channel::Green.index(), 1);
    let pixels: Vec<f32> = planes.concat();
    debug_assert_eq!(pixels.len(), CHANNELS * size * size);
    MultiChannelImage::new(size, ValueRange::Unit, pixels).expect("clamped to unit range")
}

/// Renders `per_class * class_count` samples in `[0, 1]`.
///
/// Single-label corpora are ordered class-major with ids `synth_{k}_{i}`.
/// In multi-label mode sample `n` gets ids `synth_m{n}`; it always contains
/// class `n % class_count` plus up to two other random classes.
pub fn synth_corpus(seed: u64, opts: &SynthOptions) -> Result<Dataset> {
    if opts.per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    if opts.size < 16 {
        return Err(Error::config(format!("synthetic image size {} below 16", opts.size)));
    }
    if opts.class_count == 0 || opts.class_count > NUM_CLASSES {
        return Err(Error::config(format!(
            "class count {} outside 1..={NUM_CLASSES}",
            opts.class_count
        )));
    }
    let motifs: Vec<Vec<f32>> = (0..opts.class_count).map(|k| class_motif(k, opts.size)).collect();
    let shared = textures(&mut rng::stream(seed, "synth-textures", 0), opts.size);
    let mut ds = Dataset::default();
    let total = opts.per_class * opts.class_count;
    for n in 0..total {
        let mut rng = rng::stream(seed, "synth", n as u64);
        let (id, classes) = if opts.multi_label {
            let primary = n % opts.class_count;
            let extra = rng.random_range(0..=2usize).min(opts.class_count - 1);
            let mut classes = vec![primary];
            for c in sample(&mut rng, opts.class_count - 1, extra) {
                classes.push(if c >= primary { c + 1 } else { c });
            }
            classes.sort_unstable();
            (format!("synth_m{n:05}"), classes)
        } else {
            let (k, i) = (n / opts.per_class, n % opts.per_class);
            (format!("synth_{k:02}_{i:04}"), vec![k])
        };
        ds.images.push(render(&mut rng, opts.size, &classes, &motifs, &shared));
        ds.ids.push(id);
        ds.labels.push(classes);
    }
    Ok(ds)
}
