use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::image::{Channel, MultiChannelImage, ValueRange, CHANNELS};
use super::png_io::{read_gray, write_gray8};
use super::image::area_resample;
use crate::error::{Error, Result};
use crate::metrics::LabelMatrix;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 28;

/// One row of a labels CSV with the paths of its four channel files.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Sorted, deduplicated class ids.
    pub labels: Vec<usize>,
    pub channel_paths: [PathBuf; CHANNELS],
}

pub fn channel_path(image_dir: &Path, id: &str, channel: Channel) -> PathBuf {
    image_dir.join(format!("{id}_{}.png", channel.name()))
}

pub fn parse_target(id: &str, target: &str) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for token in target.split_whitespace() {
        let class: usize = token
            .parse()
            .map_err(|_| Error::Corpus(format!("{id}: malformed label token {token:?}")))?;
        if class >= NUM_CLASSES {
            return Err(Error::Corpus(format!(
                "{id}: class id {class} out of range 0..{}",
                NUM_CLASSES - 1
            )));
        }
        labels.push(class);
    }
    if labels.is_empty() {
        return Err(Error::Corpus(format!("{id}: empty label set")));
    }
    labels.sort_unstable();
    labels.dedup();
    Ok(labels)
}

pub fn format_target(labels: &[usize]) -> String {
    labels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn load_corpus(image_dir: &Path, labels_csv: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_csv)
        .map_err(|e| csv_error(labels_csv, e))?;
    let headers = reader.headers().map_err(|e| csv_error(labels_csv, e))?;
    if headers.iter().collect::<Vec<_>>() != ["Id", "Target"] {
        return Err(Error::Corpus(format!(
            "{}: expected header `Id,Target`, found `{}`",
            labels_csv.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(labels_csv, e))?;
        let id = row[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Corpus(format!("duplicate id {id}")));
        }
        let labels = parse_target(&id, &row[1])?;
        let channel_paths = Channel::ALL.map(|c| channel_path(image_dir, &id, c));
        for (c, p) in Channel::ALL.iter().zip(&channel_paths) {
            if !p.is_file() {
                return Err(Error::Corpus(format!(
                    "{id}: missing {} channel file {}",
                    c.name(),
                    p.display()
                )));
            }
        }
        records.push(SampleRecord {
            id,
            labels,
            channel_paths,
        });
    }
    Ok(records)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corpus(format!("{}: {other:?}", path.display())),
    }
}

pub fn decode_image(record: &SampleRecord, target_size: usize, range: ValueRange) -> Result<MultiChannelImage> {
    let mut pixels = Vec::with_capacity(CHANNELS * target_size * target_size);
    for path in &record.channel_paths {
        let plane = read_gray(path)?;
        if (plane.width, plane.height) == (target_size, target_size) {
            pixels.extend_from_slice(&plane.values);
        } else {
            pixels.extend(area_resample(&plane.values, plane.height, plane.width, target_size, target_size));
        }
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(MultiChannelImage::new(target_size, ValueRange::Unit, pixels)?.to_range(range))
}

/// Shuffles `0..n` with the seed and takes the first `floor(n * fraction)`
/// indices for training and the rest for validation.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::config(format!("need at least 10 records to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = ((n as f64 * train_fraction) + 1e-9).floor() as usize;
    let val = order.split_off(n_train);
    Ok((order, val))
}

pub fn split<R: Clone>(records: &[R], train_fraction: f64, seed: u64) -> Result<(Vec<R>, Vec<R>)> {
    let (tr, va) = split_indices(records.len(), train_fraction, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(tr), pick(va)))
}

/// Decoded samples held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<MultiChannelImage>,
    pub labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn decode(records: &[SampleRecord], size: usize, range: ValueRange) -> Result<Self> {
        let mut ds = Dataset::default();
        for r in records {
            ds.ids.push(r.id.clone());
            ds.images.push(decode_image(r, size, range)?);
            ds.labels.push(r.labels.clone());
        }
        Ok(ds)
    }

    /// Loads `{root}/{stem}.csv` with images under `{root}/{stem}/`.
    pub fn load_hpa(root: &Path, stem: &str, size: usize, range: ValueRange) -> Result<Self> {
        let csv = root.join(format!("{stem}.csv"));
        if !csv.is_file() {
            return Err(Error::Corpus(format!("labels file {} not found", csv.display())));
        }
        Self::decode(&load_corpus(&root.join(stem), &csv)?, size, range)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        LabelMatrix::from_label_sets(self.labels.iter().map(Vec::as_slice), NUM_CLASSES)
            .expect("labels validated on load")
    }

    /// Multi-hot targets `[indices.len(), 28]`.
    pub fn targets(&self, indices: &[usize]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[indices.len(), NUM_CLASSES]);
        for (row, &i) in indices.iter().enumerate() {
            for &c in &self.labels[i] {
                t.data_mut()[row * NUM_CLASSES + c] = 1.0;
            }
        }
        t
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        super::image::batch_tensor(indices.iter().map(|&i| &self.images[i]))
    }

    /// Writes the HPA layout: `{image_dir}/{id}_{channel}.png` (8-bit) and a
    /// `Id,Target` manifest.
    pub fn write_hpa(&self, image_dir: &Path, labels_csv: &Path) -> Result<()> {
        fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
        for (id, img) in self.ids.iter().zip(&self.images) {
            write_sample_pngs(image_dir, id, img)?;
        }
        write_manifest(labels_csv, self.ids.iter().map(String::as_str).zip(self.labels.iter().map(Vec::as_slice)))
    }
}

/// Writes the four 8-bit channel files of one sample.
pub fn write_sample_pngs(image_dir: &Path, id: &str, image: &MultiChannelImage) -> Result<()> {
    let unit = image.to_range(ValueRange::Unit);
    for c in Channel::ALL {
        write_gray8(&channel_path(image_dir, id, c), unit.size(), unit.size(), unit.channel(c))?;
    }
    Ok(())
}

/// Writes an `Id,Target` manifest.
pub fn write_manifest<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["Id", "Target"]).map_err(|e| csv_error(path, e))?;
    for (id, labels) in rows {
        w.write_record([id, &format_target(labels)]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
