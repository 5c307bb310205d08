//! Single-channel PNG reading and 8-bit writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

/// A decoded grayscale plane scaled to `[0, 1]` by the maximum code value.
#[derive(Clone, Debug)]
pub struct GrayPlane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

pub fn read_gray(path: &Path) -> Result<GrayPlane> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.color_type != ColorType::Grayscale {
        return Err(decode_err(format!("expected a grayscale image, found {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let values = match info.bit_depth {
        BitDepth::Eight => (0..height)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + width].iter())
            .map(|&c| c as f32 / 255.0)
            .collect(),
        BitDepth::Sixteen => (0..height)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + 2 * width].chunks_exact(2))
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    };
    Ok(GrayPlane { width, height, values })
}

/// 8-bit code for a `[0, 1]` value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray8(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(ColorType::Grayscale);
    encoder.set_depth(BitDepth::Eight);
    let codes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&codes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        write_gray8(&path, 4, 3, &vals).unwrap();
        let plane = read_gray(&path).unwrap();
        assert_eq!((plane.width, plane.height), (4, 3));
        for (a, b) in vals.iter().zip(&plane.values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn constant_128_decodes_to_128_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        write_gray8(&path, 2, 2, &[128.0 / 255.0; 4]).unwrap();
        assert!(read_gray(&path).unwrap().values.iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn sixteen_bit_scales_by_max_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 1);
        enc.set_color(ColorType::Grayscale);
        enc.set_depth(BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0xff, 0xff, 0x80, 0x00]).unwrap();
        w.finish().unwrap();
        let plane = read_gray(&path).unwrap();
        assert_eq!(plane.values, vec![1.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn rgb_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2, 3]).unwrap();
        w.finish().unwrap();
        let err = read_gray(&path).unwrap_err().to_string();
        assert!(err.contains("rgb.png"), "{err}");
    }
}
