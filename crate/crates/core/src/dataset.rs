//! Class-per-directory corpora: scanning, manifests and index partitions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use barkid_nn::derive_seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub class_name: String,
    pub class_index: usize,
    pub width: u32,
    pub height: u32,
    pub origin: Origin,
    /// The original an augmented image was derived from.
    pub source_path: Option<PathBuf>,
}

/// Index of a corpus; the single source of truth for labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted, unique class names; position is the label index.
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    path: PathBuf,
    class: String,
    width: u32,
    height: u32,
    origin: Origin,
    source: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    root: PathBuf,
    classes: Vec<String>,
    records: Vec<RecordJson>,
    counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Assemble a manifest, deriving class indices and counts and checking invariants.
    pub fn new(root: PathBuf, classes: Vec<String>, mut records: Vec<ImageRecord>) -> Result<Self> {
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("class names must be unique and sorted"));
        }
        let mut counts: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
        for r in &mut records {
            let idx = classes
                .binary_search(&r.class_name)
                .map_err(|_| Error::invalid(format!("record {} has unknown class `{}`", r.path.display(), r.class_name)))?;
            r.class_index = idx;
            if r.width == 0 || r.height == 0 {
                return Err(Error::invalid(format!("record {} has a zero dimension", r.path.display())));
            }
            if r.origin == Origin::Augmented && r.source_path.is_none() {
                return Err(Error::invalid(format!("augmented record {} has no source", r.path.display())));
            }
            *counts.get_mut(&r.class_name).expect("class present") += 1;
        }
        Ok(Self {
            root,
            classes,
            records,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Label index of every record, in record order.
    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_index).collect()
    }

    /// Counts in class-index order.
    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| self.counts[c]).collect()
    }

    pub fn indices_of_class(&self, class_index: usize) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].class_index == class_index)
            .collect()
    }

    /// The records at `indices`, in that order, keeping the full class list.
    pub fn subset(&self, indices: &[usize]) -> Result<DatasetManifest> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("record index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetManifest::new(self.root.clone(), self.classes.clone(), records)
    }

    pub fn to_json(&self) -> String {
        let doc = ManifestJson {
            root: self.root.clone(),
            classes: self.classes.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    path: r.path.clone(),
                    class: r.class_name.clone(),
                    width: r.width,
                    height: r.height,
                    origin: r.origin,
                    source: r.source_path.clone(),
                })
                .collect(),
            counts: self.counts.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ManifestJson = serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad manifest: {e}")))?;
        let records = doc
            .records
            .into_iter()
            .map(|r| ImageRecord {
                path: r.path,
                class_name: r.class,
                class_index: 0,
                width: r.width,
                height: r.height,
                origin: r.origin,
                source_path: r.source,
            })
            .collect();
        let m = DatasetManifest::new(doc.root, doc.classes, records)?;
        if m.counts != doc.counts {
            return Err(Error::invalid("manifest counts disagree with its records"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Decode an image as 8-bit RGB, replicating grayscale into three channels.
pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
    use image::ColorType::*;
    match img.color() {
        Rgb8 => {}
        L8 | La8 | L16 | La16 => log::warn!("{}: grayscale image replicated to 3 channels", path.display()),
        other => log::debug!("{}: converting {other:?} to 8-bit RGB", path.display()),
    }
    Ok(img.into_rgb8())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::fs::DirEntry>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.retain(|e| !e.file_name().to_string_lossy().starts_with('.'));
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Index `<root>/<class>/<image>`. Undecodable files are skipped with a warning;
/// empty classes are kept with count 0 unless `strict`.
pub fn scan_dataset(root: &Path, strict: bool) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::RootNotFound(root.to_path_buf()));
    }
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for entry in sorted_entries(root)? {
        let class_dir = entry.path();
        if !class_dir.is_dir() {
            continue;
        }
        let class_name = entry.file_name().to_string_lossy().into_owned();
        let before = records.len();
        for file in sorted_entries(&class_dir)? {
            let path = file.path();
            if path.is_dir() {
                log::warn!("{}: nested directory ignored", path.display());
                continue;
            }
            match load_rgb(&path) {
                Ok(img) => records.push(ImageRecord {
                    path,
                    class_name: class_name.clone(),
                    class_index: 0,
                    width: img.width(),
                    height: img.height(),
                    origin: Origin::Original,
                    source_path: None,
                }),
                Err(e) => log::warn!("skipping {e}"),
            }
        }
        if records.len() == before {
            if strict {
                return Err(Error::invalid(format!("class directory `{class_name}` contains no images")));
            }
            log::warn!("class `{class_name}` has no images; kept with count 0");
        }
        classes.push(class_name);
    }
    if classes.is_empty() {
        return Err(Error::invalid(format!("{} has no class subdirectories", root.display())));
    }
    DatasetManifest::new(root.to_path_buf(), classes, records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPartition {
    /// Indices outside fold `i`, ascending.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

fn shuffled(indices: impl IntoIterator<Item = usize>, seed: u64, label: &str) -> Vec<usize> {
    let mut v: Vec<usize> = indices.into_iter().collect();
    v.shuffle(&mut barkid_nn::rng_for(seed, label));
    v
}

fn group_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Train/test split over items with the given labels. `|train| = round(ratio·N)`;
/// stratified splits also keep every class within one item of `ratio·count`.
pub fn split_labels(labels: &[usize], ratio: f64, seed: u64, stratified: bool) -> Result<SplitAssignment> {
    let n = labels.len();
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1], got {ratio}")));
    }
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::invalid(format!("ratio {ratio} of {n} items leaves no training items")));
    }
    let mut train = if stratified {
        let groups = group_by_label(labels);
        // Largest-remainder apportionment of n_train across classes: every class gets
        // floor(ratio·count), and the remainder goes one each to the largest fractions.
        let exact: Vec<f64> = groups.values().map(|g| ratio * g.len() as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let left = n_train - quota.iter().sum::<usize>();
        for &c in order.iter().take(left) {
            quota[c] += 1;
        }
        groups
            .iter()
            .zip(quota)
            .flat_map(|((label, members), q)| {
                let sub = derive_seed(seed, &format!("split/{label}"));
                shuffled(members.iter().copied(), sub, "split").into_iter().take(q)
            })
            .collect::<Vec<_>>()
    } else {
        shuffled(0..n, seed, "split").into_iter().take(n_train).collect()
    };
    train.sort_unstable();
    let mut in_train = vec![false; n];
    train.iter().for_each(|&i| in_train[i] = true);
    let test = (0..n).filter(|&i| !in_train[i]).collect();
    Ok(SplitAssignment {
        train_indices: train,
        test_indices: test,
        ratio,
        seed,
        stratified,
    })
}

pub fn split_dataset(manifest: &DatasetManifest, ratio: f64, seed: u64, stratified: bool) -> Result<SplitAssignment> {
    split_labels(&manifest.labels(), ratio, seed, stratified)
}

/// `k` disjoint folds covering every item, sizes within one of each other.
/// Stratified partitions deal each class's shuffled members round-robin.
pub fn kfold_labels(labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<FoldPartition> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(Error::invalid(format!("k must satisfy 2 <= k <= N = {n}, got {k}")));
    }
    let order: Vec<usize> = if stratified {
        group_by_label(labels)
            .into_iter()
            .flat_map(|(label, members)| shuffled(members, derive_seed(seed, &format!("kfold/{label}")), "kfold"))
            .collect()
    } else {
        shuffled(0..n, seed, "kfold")
    };
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPartition { k, folds, seed })
}

pub fn kfold_partition(manifest: &DatasetManifest, k: usize, seed: u64, stratified: bool) -> Result<FoldPartition> {
    kfold_labels(&manifest.labels(), k, seed, stratified)
}
