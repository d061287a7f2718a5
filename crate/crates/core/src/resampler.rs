//! Per-class rebalancing: undersample large classes, grow small ones with
//! augmented copies of their originals.

use std::path::{Path, PathBuf};

use barkid_nn::{derive_seed, derive_seed_n, rng_for};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_rgb, DatasetManifest, ImageRecord, Origin};
use crate::error::{Error, Result};
use crate::preprocess::sample_bilinear;

/// An augmentation with its parameter ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    /// Enlarge by a factor in `[min_factor, max_factor]` and crop the centre back
    /// to the original size.
    Zoom { min_factor: f64, max_factor: f64 },
    FlipTopBottom,
    /// Elastic mesh warp: interior vertices of a `grid_width × grid_height` grid
    /// move by up to `magnitude` pixels in each direction.
    RandomDistortion {
        grid_width: u32,
        grid_height: u32,
        magnitude: u32,
    },
    /// Multiply every channel by a factor in `[min_factor, max_factor]`.
    RandomBrightness { min_factor: f64, max_factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub op: AugmentOp,
    /// Chance that the op fires for a generated image, in `(0, 1]`.
    pub probability: f64,
}

impl AugmentationSpec {
    pub fn new(op: AugmentOp, probability: f64) -> Self {
        Self { op, probability }
    }

    /// Zoom ×1.0–1.3, flip, 4×4 distortion of up to 8 px, brightness ×0.7–1.3,
    /// each with probability 0.5.
    pub fn defaults() -> Vec<AugmentationSpec> {
        vec![
            Self::new(
                AugmentOp::Zoom {
                    min_factor: 1.0,
                    max_factor: 1.3,
                },
                0.5,
            ),
            Self::new(AugmentOp::FlipTopBottom, 0.5),
            Self::new(
                AugmentOp::RandomDistortion {
                    grid_width: 4,
                    grid_height: 4,
                    magnitude: 8,
                },
                0.5,
            ),
            Self::new(
                AugmentOp::RandomBrightness {
                    min_factor: 0.7,
                    max_factor: 1.3,
                },
                0.5,
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probability;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("augmentation probability must lie in (0, 1], got {p}")));
        }
        let range = |name: &str, lo: f64, hi: f64, floor: f64| {
            if !lo.is_finite() || !hi.is_finite() || lo > hi || lo < floor {
                Err(Error::invalid(format!("{name}: degenerate factor range [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        match self.op {
            AugmentOp::Zoom { min_factor, max_factor } => range("zoom", min_factor, max_factor, 1.0),
            AugmentOp::RandomBrightness { min_factor, max_factor } => range("random_brightness", min_factor, max_factor, 0.0),
            AugmentOp::RandomDistortion {
                grid_width,
                grid_height,
                ..
            } if grid_width < 2 || grid_height < 2 => {
                Err(Error::invalid("random_distortion: grid must be at least 2×2"))
            }
            _ => Ok(()),
        }
    }
}

/// An augmentation with its sampled parameters; replaying it is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    Zoom { factor: f64 },
    FlipTopBottom,
    /// Displacements `[dx, dy]` of every grid vertex, row-major over
    /// `(grid_height + 1) × (grid_width + 1)`; border vertices stay at zero.
    RandomDistortion {
        grid_width: u32,
        grid_height: u32,
        displacements: Vec<[i32; 2]>,
    },
    RandomBrightness { factor: f64 },
}

impl AppliedOp {
    fn sample(op: &AugmentOp, rng: &mut impl Rng) -> AppliedOp {
        let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        match *op {
            AugmentOp::Zoom { min_factor, max_factor } => AppliedOp::Zoom {
                factor: uniform(rng, min_factor, max_factor),
            },
            AugmentOp::FlipTopBottom => AppliedOp::FlipTopBottom,
            AugmentOp::RandomDistortion {
                grid_width,
                grid_height,
                magnitude,
            } => {
                let m = magnitude as i32;
                let mut displacements = Vec::new();
                for gy in 0..=grid_height {
                    for gx in 0..=grid_width {
                        let interior = gx > 0 && gx < grid_width && gy > 0 && gy < grid_height;
                        displacements.push(if interior {
                            [rng.random_range(-m..=m), rng.random_range(-m..=m)]
                        } else {
                            [0, 0]
                        });
                    }
                }
                AppliedOp::RandomDistortion {
                    grid_width,
                    grid_height,
                    displacements,
                }
            }
            AugmentOp::RandomBrightness { min_factor, max_factor } => AppliedOp::RandomBrightness {
                factor: uniform(rng, min_factor, max_factor),
            },
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        match self {
            AppliedOp::Zoom { factor } => zoom(img, *factor),
            AppliedOp::FlipTopBottom => image::imageops::flip_vertical(img),
            AppliedOp::RandomDistortion {
                grid_width,
                grid_height,
                displacements,
            } => distort(img, *grid_width, *grid_height, displacements),
            AppliedOp::RandomBrightness { factor } => {
                let mut out = img.clone();
                for v in out.iter_mut() {
                    *v = (f64::from(*v) * factor).round().clamp(0.0, 255.0) as u8;
                }
                out
            }
        }
    }
}

fn zoom(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    // The visible window after enlarging by `factor` is the central 1/factor of the source.
    let (cw, ch) = (f64::from(w) / factor, f64::from(h) / factor);
    let (ox, oy) = ((f64::from(w) - cw) / 2.0, (f64::from(h) - ch) / 2.0);
    RgbImage::from_fn(w, h, |x, y| {
        let fx = ox + (f64::from(x) + 0.5) / factor - 0.5;
        let fy = oy + (f64::from(y) + 0.5) / factor - 0.5;
        sample_bilinear(img, fx as f32, fy as f32)
    })
}

fn distort(img: &RgbImage, gw: u32, gh: u32, disp: &[[i32; 2]]) -> RgbImage {
    let (w, h) = img.dimensions();
    let cell_w = f64::from(w) / f64::from(gw);
    let cell_h = f64::from(h) / f64::from(gh);
    let d = |gx: u32, gy: u32| disp[(gy * (gw + 1) + gx) as usize];
    RgbImage::from_fn(w, h, |x, y| {
        let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let gx = ((px / cell_w) as u32).min(gw - 1);
        let gy = ((py / cell_h) as u32).min(gh - 1);
        let u = px / cell_w - f64::from(gx);
        let v = py / cell_h - f64::from(gy);
        // Bilinear blend of the four corner displacements of this cell.
        let corners = [d(gx, gy), d(gx + 1, gy), d(gx, gy + 1), d(gx + 1, gy + 1)];
        let weights = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
        let (mut dx, mut dy) = (0.0, 0.0);
        for (c, wgt) in corners.iter().zip(weights) {
            dx += f64::from(c[0]) * wgt;
            dy += f64::from(c[1]) * wgt;
        }
        sample_bilinear(img, (px + dx - 0.5) as f32, (py + dy - 0.5) as f32)
    })
}

/// Draw concrete ops for one generated image: each spec fires independently with
/// its probability; if none fires, one spec chosen uniformly is forced.
pub fn sample_ops(specs: &[AugmentationSpec], seed: u64) -> Result<Vec<AppliedOp>> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one augmentation is required"));
    }
    specs.iter().try_for_each(AugmentationSpec::validate)?;
    let mut rng = rng_for(seed, "augment");
    let mut fired: Vec<bool> = specs.iter().map(|s| rng.random::<f64>() < s.probability).collect();
    if !fired.contains(&true) {
        fired[rng.random_range(0..specs.len())] = true;
    }
    Ok(specs
        .iter()
        .zip(fired)
        .filter(|(_, f)| *f)
        .map(|(s, _)| AppliedOp::sample(&s.op, &mut rng))
        .collect())
}

/// Apply recorded ops in order.
pub fn replay_ops(img: &RgbImage, ops: &[AppliedOp]) -> RgbImage {
    ops.iter().fold(img.clone(), |acc, op| op.apply(&acc))
}

/// Sample ops from `specs` with `seed` and apply them. Output dimensions equal the input's.
pub fn apply_augmentation(img: &RgbImage, specs: &[AugmentationSpec], seed: u64) -> Result<RgbImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    Ok(replay_ops(img, &sample_ops(specs, seed)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub class_name: String,
    /// Manifest indices of the originals kept, ascending.
    pub keep: Vec<usize>,
    /// Number of synthetic images to create.
    pub generate: usize,
    /// Manifest index of the original each synthetic image starts from.
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalancePlan {
    pub target_per_class: usize,
    pub seed: u64,
    pub classes: Vec<ClassPlan>,
}

impl RebalancePlan {
    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.keep.len() + c.generate).sum()
    }
}

/// Keep a uniform random `target` of each larger class; keep all of each smaller
/// class and schedule the shortfall as augmentations, drawing sources round-robin
/// over a shuffled order of the class's images.
pub fn plan_rebalance(manifest: &DatasetManifest, target_per_class: usize, seed: u64) -> Result<RebalancePlan> {
    if target_per_class == 0 {
        return Err(Error::invalid("target_per_class must be at least 1"));
    }
    let mut classes = Vec::with_capacity(manifest.num_classes());
    for (ci, name) in manifest.classes.iter().enumerate() {
        let members = manifest.indices_of_class(ci);
        if members.is_empty() {
            return Err(Error::invalid(format!("class `{name}` has no images to resample")));
        }
        let class_seed = derive_seed(seed, name);
        let plan = if members.len() >= target_per_class {
            let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng_for(class_seed, "undersample"), members.len(), target_per_class)
                .into_iter()
                .map(|i| members[i])
                .collect();
            keep.sort_unstable();
            ClassPlan {
                class_name: name.clone(),
                keep,
                generate: 0,
                sources: Vec::new(),
            }
        } else {
            let generate = target_per_class - members.len();
            let mut cycle = members.clone();
            cycle.shuffle(&mut rng_for(class_seed, "sources"));
            ClassPlan {
                class_name: name.clone(),
                keep: members,
                generate,
                sources: cycle.iter().copied().cycle().take(generate).collect(),
            }
        };
        classes.push(plan);
    }
    Ok(RebalancePlan {
        target_per_class,
        seed,
        classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub out: PathBuf,
    pub source: PathBuf,
    pub ops: Vec<AppliedOp>,
    pub sub_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub target: usize,
    pub seed: u64,
    pub specs: Vec<AugmentationSpec>,
    pub entries: Vec<ProvenanceEntry>,
}

impl Provenance {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("provenance serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad provenance: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampledDataset {
    pub manifest: DatasetManifest,
    pub provenance: Provenance,
}

/// Sub-seed of one generated image, independent of generation order.
pub fn augmentation_seed(seed: u64, class_name: &str, ordinal: usize) -> u64 {
    derive_seed_n(derive_seed(derive_seed(seed, "augment"), class_name), ordinal as u64)
}

/// Write the plan's synthetic images to `<out_dir>/<class>/aug_<ordinal>.png` and
/// return the balanced manifest. On a write failure every file written so far is
/// removed.
pub fn execute_plan(
    plan: &RebalancePlan,
    manifest: &DatasetManifest,
    specs: &[AugmentationSpec],
    out_dir: &Path,
) -> Result<ResampledDataset> {
    if plan.classes.len() != manifest.num_classes()
        || plan.classes.iter().zip(&manifest.classes).any(|(p, c)| &p.class_name != c)
    {
        return Err(Error::invalid("rebalance plan was made for a different manifest"));
    }
    let needs_augmentation = plan.classes.iter().any(|c| c.generate > 0);
    if needs_augmentation {
        if specs.is_empty() {
            return Err(Error::invalid("oversampling requires at least one augmentation"));
        }
        specs.iter().try_for_each(AugmentationSpec::validate)?;
    }
    let mut written: Vec<PathBuf> = Vec::new();
    let mut created_dirs: Vec<PathBuf> = Vec::new();
    let result = generate_all(plan, manifest, specs, out_dir, &mut written, &mut created_dirs);
    if result.is_err() {
        for f in &written {
            let _ = std::fs::remove_file(f);
        }
        for d in created_dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
    let (records, entries) = result?;
    Ok(ResampledDataset {
        manifest: DatasetManifest::new(manifest.root.clone(), manifest.classes.clone(), records)?,
        provenance: Provenance {
            target: plan.target_per_class,
            seed: plan.seed,
            specs: specs.to_vec(),
            entries,
        },
    })
}

fn generate_all(
    plan: &RebalancePlan,
    manifest: &DatasetManifest,
    specs: &[AugmentationSpec],
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
    created_dirs: &mut Vec<PathBuf>,
) -> Result<(Vec<ImageRecord>, Vec<ProvenanceEntry>)> {
    let mut records = Vec::with_capacity(plan.total());
    let mut entries = Vec::new();
    for cp in &plan.classes {
        for &i in &cp.keep {
            let rec = manifest
                .records
                .get(i)
                .ok_or_else(|| Error::invalid(format!("plan refers to missing record {i}")))?;
            records.push(rec.clone());
        }
        if cp.generate == 0 {
            continue;
        }
        let class_dir = out_dir.join(&cp.class_name);
        if !class_dir.exists() {
            for dir in class_dir.ancestors().collect::<Vec<_>>().into_iter().rev() {
                if !dir.as_os_str().is_empty() && !dir.exists() {
                    std::fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
                    created_dirs.push(dir.to_path_buf());
                }
            }
        }
        let mut bad_sources: Vec<usize> = Vec::new();
        for (ordinal, &planned) in cp.sources.iter().enumerate() {
            let (source_idx, img) = decode_source(manifest, cp, planned, &mut bad_sources)?;
            let sub_seed = augmentation_seed(plan.seed, &cp.class_name, ordinal);
            let ops = sample_ops(specs, sub_seed)?;
            let out_img = replay_ops(&img, &ops);
            let out = class_dir.join(format!("aug_{ordinal:04}.png"));
            out_img
                .save_with_format(&out, image::ImageFormat::Png)
                .map_err(|e| Error::format(&out, format!("cannot write augmented image: {e}")))?;
            written.push(out.clone());
            let source = manifest.records[source_idx].path.clone();
            records.push(ImageRecord {
                path: out.clone(),
                class_name: cp.class_name.clone(),
                class_index: 0,
                width: out_img.width(),
                height: out_img.height(),
                origin: Origin::Augmented,
                source_path: Some(source.clone()),
            });
            entries.push(ProvenanceEntry {
                out,
                source,
                ops,
                sub_seed,
            });
        }
    }
    Ok((records, entries))
}

/// Decode the planned source, falling back to the next decodable original of the
/// same class in plan order.
fn decode_source(manifest: &DatasetManifest, cp: &ClassPlan, planned: usize, bad: &mut Vec<usize>) -> Result<(usize, RgbImage)> {
    let start = cp.keep.iter().position(|&k| k == planned).unwrap_or(0);
    for step in 0..cp.keep.len() {
        let idx = cp.keep[(start + step) % cp.keep.len()];
        if bad.contains(&idx) {
            continue;
        }
        match load_rgb(&manifest.records[idx].path) {
            Ok(img) => {
                if idx != planned {
                    log::warn!(
                        "substituting {} for undecodable source {}",
                        manifest.records[idx].path.display(),
                        manifest.records[planned].path.display()
                    );
                }
                return Ok((idx, img));
            }
            Err(e) => {
                log::warn!("{e}");
                bad.push(idx);
            }
        }
    }
    Err(Error::invalid(format!("class `{}` has no decodable source image", cp.class_name)))
}
