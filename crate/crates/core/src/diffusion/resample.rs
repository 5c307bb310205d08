use crate::data::{Channel, MultiChannelImage, ValueRange};
use crate::error::{Error, Result};

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source taps and weights for each output position, with half-pixel
/// centre alignment and edge replication.
fn taps(n: usize, m: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            std::array::from_fn(|j| {
                let i = (base as isize + j as isize - 1).clamp(0, n as isize - 1) as usize;
                (i, cubic_weight(frac - (j as f64 - 1.0)))
            })
        })
        .collect()
}

/// Separable bicubic resampling of one `h x w` plane.
pub fn bicubic_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for (ox, t) in tx.iter().enumerate() {
            rows[y * ow + ox] = t.iter().map(|&(i, a)| a * src[y * w + i] as f64).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..ow {
            out[oy * ow + ox] = t.iter().map(|&(i, a)| a * rows[i * ow + ox]).sum();
        }
    }
    out
}

/// Upsamples every channel to `target x target`. Overshoot past the
/// image's value range is clipped.
pub fn upsample_bicubic(image: &MultiChannelImage, target: usize) -> Result<MultiChannelImage> {
    if target < 32 || target < image.size() {
        return Err(Error::config(format!(
            "upsampling target {target} must be at least 32 and at least the source size {}",
            image.size()
        )));
    }
    if target == image.size() {
        return Ok(image.clone());
    }
    let (lo, hi) = match image.range() {
        ValueRange::Unit => (0.0, 1.0),
        ValueRange::Symmetric => (-1.0, 1.0),
    };
    let s = image.size();
    let pixels = Channel::ALL
        .iter()
        .flat_map(|&c| bicubic_plane(image.channel(c), s, s, target, target))
        .map(|v| v.clamp(lo, hi) as f32)
        .collect();
    MultiChannelImage::new(target, image.range(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for k in 0..10 {
            let f = k as f64 / 10.0;
            let s: f64 = (0..4).map(|j| cubic_weight(f - (j as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn constant_and_identity() {
        let img = MultiChannelImage::new(32, ValueRange::Unit, vec![0.37; 4 * 32 * 32]).unwrap();
        let up = upsample_bicubic(&img, 96).unwrap();
        assert!(up.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        assert_eq!(upsample_bicubic(&img, 32).unwrap(), img);
        assert!(upsample_bicubic(&img, 16).is_err());
    }
}
