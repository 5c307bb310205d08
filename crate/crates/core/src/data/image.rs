use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fluorescence channels in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Microtubules.
    Red,
    /// Protein of interest.
    Green,
    /// Nucleus.
    Blue,
    /// Endoplasmic reticulum.
    Yellow,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Red, Channel::Green, Channel::Blue, Channel::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Red => "red",
            Channel::Green => "green",
            Channel::Blue => "blue",
            Channel::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`, the classifier's input range.
    Unit,
    /// `[-1, 1]`, the diffusion model's working range.
    Symmetric,
}

impl ValueRange {
    fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

/// Square 4-channel image stored channel-major as `[4, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    size: usize,
    range: ValueRange,
    pixels: Vec<f32>,
}

impl MultiChannelImage {
    pub fn new(size: usize, range: ValueRange, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != CHANNELS * size * size {
            return Err(Error::dim(format!(
                "image of size {size} needs {} values, got {}",
                CHANNELS * size * size,
                pixels.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = pixels.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Domain(format!("pixel value {v} outside {range:?} range [{lo}, {hi}]")));
        }
        Ok(Self { size, range, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn channel(&self, c: Channel) -> &[f32] {
        let plane = self.size * self.size;
        &self.pixels[c.index() * plane..(c.index() + 1) * plane]
    }

    /// Affine map between the two value ranges.
    pub fn to_range(&self, range: ValueRange) -> Self {
        let pixels = match (self.range, range) {
            (a, b) if a == b => self.pixels.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => {
                self.pixels.iter().map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)).collect()
            }
            _ => self.pixels.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect(),
        };
        Self { size: self.size, range, pixels }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![CHANNELS, self.size, self.size], self.pixels.clone()).expect("consistent shape")
    }

    /// Area-average resampling of every channel to `target x target`.
    pub fn resized(&self, target: usize) -> Self {
        if target == self.size {
            return self.clone();
        }
        let pixels = Channel::ALL
            .iter()
            .flat_map(|&c| area_resample(self.channel(c), self.size, self.size, target, target))
            .collect();
        Self { size: target, range: self.range, pixels }
    }
}

/// Stacks images into a `[B, 4, S, S]` batch.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a MultiChannelImage>) -> Result<Tensor<f32>> {
    let mut size = None;
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if *size.get_or_insert(img.size) != img.size {
            return Err(Error::dim("images in a batch must share one resolution"));
        }
        data.extend_from_slice(&img.pixels);
        count += 1;
    }
    let s = size.ok_or_else(|| Error::dim("empty image batch"))?;
    Tensor::new(vec![count, CHANNELS, s, s], data)
}

/// Anti-aliased resampling: each output pixel is the area-weighted mean of
/// the input pixels its footprint covers.
pub fn area_resample(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    let wy = footprint_weights(h, oh);
    let wx = footprint_weights(w, ow);
    let mut rows = vec![0f64; oh * w];
    for (oy, taps) in wy.iter().enumerate() {
        for &(iy, a) in taps {
            for x in 0..w {
                rows[oy * w + x] += a * src[iy * w + x] as f64;
            }
        }
    }
    let mut out = vec![0f32; oh * ow];
    for oy in 0..oh {
        for (ox, taps) in wx.iter().enumerate() {
            let v: f64 = taps.iter().map(|&(ix, a)| a * rows[oy * w + ix]).sum();
            out[oy * ow + ox] = v as f32;
        }
    }
    out
}

/// For each output cell, the input cells it overlaps with normalized weights.
fn footprint_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_averages_to_half() {
        let src: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        assert_eq!(area_resample(&src, 4, 4, 1, 1), vec![0.5]);
    }

    #[test]
    fn constant_survives_downsampling() {
        let src = vec![0.3f32; 512 * 512];
        let out = area_resample(&src, 512, 512, 32, 32);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn non_integral_ratio_conserves_mass() {
        let src: Vec<f32> = (0..25).map(|i| i as f32).collect();
        let out = area_resample(&src, 5, 5, 3, 3);
        let mean_in: f32 = src.iter().sum::<f32>() / 25.0;
        let mean_out: f32 = out.iter().sum::<f32>() / 9.0;
        assert!((mean_in - mean_out).abs() < 1e-4);
    }

    #[test]
    fn range_round_trip() {
        let img = MultiChannelImage::new(2, ValueRange::Unit, [0.0, 0.25, 0.5, 1.0].repeat(4)).unwrap();
        let sym = img.to_range(ValueRange::Symmetric);
        assert_eq!(&sym.pixels()[..4], &[-1.0, -0.5, 0.0, 1.0]);
        assert_eq!(sym.to_range(ValueRange::Unit), img);
        assert!(MultiChannelImage::new(1, ValueRange::Unit, vec![0.0, 0.0, 2.0, 0.0]).is_err());
    }
}
