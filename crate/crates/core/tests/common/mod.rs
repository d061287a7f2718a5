//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use barkid::dataset::{DatasetManifest, ImageRecord, Origin};
use barkid::model::{Backbone, ModelSpec};
use barkid::preprocess::PreprocessConfig;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PALETTE: [[u8; 3]; 8] = [
    [200, 60, 40],
    [40, 80, 200],
    [60, 170, 70],
    [190, 180, 50],
    [120, 60, 150],
    [30, 160, 170],
    [220, 120, 180],
    [110, 90, 60],
];

/// A bark-like test image: class-specific tint and stripe direction plus noise.
pub fn texture(class: usize, index: usize, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64((class * 1000 + index) as u64);
    let base = PALETTE[class % PALETTE.len()];
    let (fx, fy) = ((class % 5 + 1) as f32, (5 - class % 5) as f32);
    RgbImage::from_fn(width, height, |x, y| {
        let wave = ((x as f32 * fx + y as f32 * fy) / 9.0).sin();
        let noise: f32 = rng.random_range(-40.0..40.0);
        Rgb(base.map(|c| (f32::from(c) * (0.7 + 0.3 * wave) + noise).clamp(0.0, 255.0) as u8))
    })
}

pub fn class_name(i: usize) -> String {
    format!("species_{i:02}")
}

/// Write `counts[i]` PNGs of class `species_i` under `root`.
pub fn write_corpus(root: &Path, counts: &[usize], width: u32, height: u32) {
    for (c, &n) in counts.iter().enumerate() {
        let dir = root.join(class_name(c));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            texture(c, i, width, height).save(dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }
}

/// A manifest whose records need not exist on disk, for planning-only tests.
pub fn virtual_manifest(counts: &[usize]) -> DatasetManifest {
    let classes: Vec<String> = (0..counts.len()).map(class_name).collect();
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            let name = class_name(c);
            (0..n).map(move |i| ImageRecord {
                path: PathBuf::from(format!("/virtual/{name}/{i}.jpg")),
                class_name: name.clone(),
                class_index: c,
                width: 303,
                height: 404,
                origin: Origin::Original,
                source_path: None,
            })
        })
        .collect();
    DatasetManifest::new(PathBuf::from("/virtual"), classes, records).unwrap()
}

/// A MobileNet at 32×32 with a narrow head: cheap enough to train in tests.
pub fn small_spec(num_classes: usize) -> ModelSpec {
    use barkid::model::{HeadActivation, HeadLayer};
    ModelSpec {
        backbone: Backbone::Mobilenet,
        pretrained: false,
        input_shape: [32, 32, 3],
        head: Some(vec![
            HeadLayer::Flatten,
            HeadLayer::Dense {
                units: 16,
                activation: HeadActivation::Relu,
            },
            HeadLayer::Dropout { rate: 0.45 },
            HeadLayer::Dense {
                units: num_classes,
                activation: HeadActivation::Softmax,
            },
        ]),
        num_classes,
        ..ModelSpec::default()
    }
}

pub fn small_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        height: 32,
        width: 32,
        ..PreprocessConfig::default()
    }
}

pub fn sha256_file(path: &Path) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(std::fs::read(path).unwrap()))
}
