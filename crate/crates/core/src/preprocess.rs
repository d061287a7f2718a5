//! Images to fixed-shape tensors: resize, scale to `[0,1]`, one-hot labels.

use std::io::{Read, Write};
use std::path::Path;

use barkid_nn::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_rgb, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub height: u32,
    pub width: u32,
    /// Always 3; present so configs state it explicitly.
    pub channels: usize,
    pub interpolation: Interpolation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            height: 160,
            width: 160,
            channels: CHANNELS,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("preprocess height and width must be positive"));
        }
        if self.channels != CHANNELS {
            return Err(Error::invalid(format!("preprocess channels must be 3, got {}", self.channels)));
        }
        Ok(())
    }

    /// `[h, w, 3]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.height as usize, self.width as usize, CHANNELS]
    }
}

/// Stretch to exactly `height × width`, ignoring aspect ratio.
///
/// Nearest picks source index `⌊i·in/out⌋`. Bilinear samples at pixel centres
/// (`(i + ½)·in/out − ½`, clamped to the border) and rounds to 8 bits.
pub fn resize_image(img: &RgbImage, config: &PreprocessConfig) -> Result<RgbImage> {
    config.validate()?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot resize an image with a zero dimension"));
    }
    let (ow, oh) = (config.width, config.height);
    if (img.width(), img.height()) == (ow, oh) {
        return Ok(img.clone());
    }
    Ok(match config.interpolation {
        Interpolation::Nearest => {
            let (iw, ih) = (u64::from(img.width()), u64::from(img.height()));
            RgbImage::from_fn(ow, oh, |x, y| {
                let sx = (u64::from(x) * iw / u64::from(ow)) as u32;
                let sy = (u64::from(y) * ih / u64::from(oh)) as u32;
                *img.get_pixel(sx, sy)
            })
        }
        Interpolation::Bilinear => {
            let sx = img.width() as f32 / ow as f32;
            let sy = img.height() as f32 / oh as f32;
            RgbImage::from_fn(ow, oh, |x, y| {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                let fy = (y as f32 + 0.5) * sy - 0.5;
                sample_bilinear(img, fx, fy)
            })
        }
    })
}

/// Bilinear sample at continuous pixel coordinates, clamping to the border.
pub(crate) fn sample_bilinear(img: &RgbImage, fx: f32, fy: f32) -> image::Rgb<u8> {
    let max_x = (img.width() - 1) as f32;
    let max_y = (img.height() - 1) as f32;
    let fx = fx.clamp(0.0, max_x);
    let fy = fy.clamp(0.0, max_y);
    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
    let p = |x, y| img.get_pixel(x, y).0;
    let (p00, p10, p01, p11) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = f32::from(p00[c]) * (1.0 - ax) + f32::from(p10[c]) * ax;
        let bottom = f32::from(p01[c]) * (1.0 - ax) + f32::from(p11[c]) * ax;
        out[c] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
    }
    image::Rgb(out)
}

/// `v ↦ v / 255`, row-major HWC.
pub fn normalize(img: &RgbImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect()
}

/// `v ↦ round(255·v)`, the inverse of [`normalize`] on its image.
pub fn denormalize(values: &[f32], width: u32, height: u32) -> Result<RgbImage> {
    if values.len() != width as usize * height as usize * CHANNELS {
        return Err(Error::invalid(format!(
            "{} values cannot form a {width}x{height} RGB image",
            values.len()
        )));
    }
    let raw = values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Ok(RgbImage::from_raw(width, height, raw).expect("length checked"))
}

/// Decode, resize and scale one image.
pub fn load_normalized(path: &Path, config: &PreprocessConfig) -> Result<Vec<f32>> {
    Ok(normalize(&resize_image(&load_rgb(path)?, config)?))
}

/// Encoded images with one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, h, w, 3]`, values in `[0,1]`.
    pub inputs: Tensor,
    /// `[N, C]` one-hot rows in manifest class order.
    pub labels: Tensor,
    /// Row `i` came from manifest record `index_map[i]`.
    pub index_map: Vec<usize>,
    pub classes: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Label index of each row.
    pub fn label_indices(&self) -> Vec<usize> {
        one_hot_indices(&self.labels)
    }

    /// Rows at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather_rows(rows),
            labels: self.labels.gather_rows(rows),
            index_map: rows.iter().map(|&r| self.index_map[r]).collect(),
            classes: self.classes.clone(),
        }
    }
}

pub(crate) fn one_hot_indices(labels: &Tensor) -> Vec<usize> {
    (0..labels.batch())
        .map(|i| labels.row(i).iter().position(|&v| v == 1.0).expect("one-hot row"))
        .collect()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        t.data_mut()[i * num_classes + l] = 1.0;
    }
    Ok(t)
}

/// Encode the manifest records at `indices`, preserving their order.
pub fn encode_indices(manifest: &DatasetManifest, indices: &[usize], config: &PreprocessConfig) -> Result<Batch> {
    config.validate()?;
    let [h, w, c] = config.image_shape();
    let mut data = Vec::with_capacity(indices.len() * h * w * c);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = manifest
            .records
            .get(i)
            .ok_or_else(|| Error::invalid(format!("record index {i} out of range")))?;
        data.extend(load_normalized(&rec.path, config)?);
        labels.push(rec.class_index);
    }
    Ok(Batch {
        inputs: Tensor::from_vec(&[indices.len(), h, w, c], data)?,
        labels: one_hot(&labels, manifest.num_classes())?,
        index_map: indices.to_vec(),
        classes: manifest.classes.clone(),
    })
}

/// Encode `records`, each of which must appear in `manifest`; row `i` is `records[i]`.
pub fn encode_batch(records: &[ImageRecord], manifest: &DatasetManifest, config: &PreprocessConfig) -> Result<Batch> {
    let position: std::collections::HashMap<&Path, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.path.as_path(), i))
        .collect();
    let indices = records
        .iter()
        .map(|r| {
            position
                .get(r.path.as_path())
                .copied()
                .ok_or_else(|| Error::invalid(format!("{} is not in the manifest", r.path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    encode_indices(manifest, &indices, config)
}

/// Encodes records in fixed-size chunks on demand, for corpora too large to hold
/// in memory at once.
pub struct BatchStream<'a> {
    manifest: &'a DatasetManifest,
    indices: Vec<usize>,
    config: PreprocessConfig,
    chunk: usize,
    next: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(manifest: &'a DatasetManifest, indices: Vec<usize>, config: PreprocessConfig, chunk: usize) -> Self {
        Self {
            manifest,
            indices,
            config,
            chunk: chunk.max(1),
            next: 0,
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.indices.len() {
            return None;
        }
        let end = (self.next + self.chunk).min(self.indices.len());
        let part = &self.indices[self.next..end];
        self.next = end;
        Some(encode_indices(self.manifest, part, &self.config))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"BARKBAT1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    dtype: String,
    classes: Vec<String>,
    index_map: Vec<usize>,
}

/// Packed batch file: 8-byte magic `BARKBAT1`, little-endian `u32` header length,
/// UTF-8 JSON header, then `N·h·w·3` little-endian `f32` inputs followed by `N·C`
/// little-endian `f32` labels.
pub fn write_batch_cache(batch: &Batch, path: &Path) -> Result<()> {
    let (n, h, w, c) = batch.inputs.dims4();
    let header = CacheHeader {
        n,
        height: h,
        width: w,
        channels: c,
        num_classes: batch.num_classes(),
        dtype: "f32le".into(),
        classes: batch.classes.clone(),
        index_map: batch.index_map.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(CACHE_MAGIC).map_err(io)?;
    f.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    for v in batch.inputs.data().iter().chain(batch.labels.data()) {
        f.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_batch_cache(path: &Path) -> Result<Batch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d.to_string());
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a packed batch file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
    let header: CacheHeader =
        serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.dtype != "f32le" || header.channels != CHANNELS || header.classes.len() != header.num_classes {
        return Err(bad("unsupported header"));
    }
    let n_in = header.n * header.height * header.width * header.channels;
    let n_lab = header.n * header.num_classes;
    if body.len() != 4 * (n_in + n_lab) {
        return Err(bad("payload length does not match header"));
    }
    let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let (inputs, labels) = floats.split_at(n_in);
    Ok(Batch {
        inputs: Tensor::from_vec(&[header.n, header.height, header.width, header.channels], inputs.to_vec())?,
        labels: Tensor::from_vec(&[header.n, header.num_classes], labels.to_vec())?,
        index_map: header.index_map,
        classes: header.classes,
    })
}
