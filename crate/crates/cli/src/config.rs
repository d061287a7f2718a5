//! The run configuration file (TOML).

use std::path::{Path, PathBuf};

use barkid::model::ModelSpec;
use barkid::preprocess::PreprocessConfig;
use barkid::resampler::AugmentationSpec;
use barkid::trainer::TrainingConfig;
use barkid::{Error, Result};
use barkid_nn::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    /// Skip rebalancing and use the scanned corpus as is.
    pub enabled: bool,
    pub target_per_class: usize,
    pub augmentations: Vec<AugmentationSpec>,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target_per_class: 110,
            augmentations: AugmentationSpec::defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub stratified: bool,
    /// Overrides the seed derived from the global one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            stratified: false,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Treat empty class directories and a zero learning rate as errors.
    pub strict: bool,
    /// Split before rebalancing and rebalance only the training side, so no
    /// augmented sibling of a test image is trained on.
    pub split_first: bool,
    pub resample: ResampleConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSpec,
    /// `training.seed` is ignored; the run derives it from `seed`.
    pub training: TrainingConfig,
    pub split: SplitConfig,
    pub cv: CvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_root: PathBuf::from("data/BarkVN-50"),
            output_dir: PathBuf::from("runs/default"),
            strict: false,
            split_first: false,
            resample: ResampleConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSpec::default(),
            training: TrainingConfig::default(),
            split: SplitConfig::default(),
            cv: CvConfig::default(),
        }
    }
}

/// Stages that draw randomness, each with its own labelled sub-seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rebalance,
    Split,
    Model,
    Train,
    CrossVal,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Rebalance => "rebalance",
            Stage::Split => "split",
            Stage::Model => "model",
            Stage::Train => "train",
            Stage::CrossVal => "crossval",
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let config = Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Ok((config, text))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        match (stage, self.split.seed) {
            (Stage::Split, Some(s)) => s,
            _ => derive_seed(self.seed, stage.label()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.training.validate(self.strict)?;
        let [h, w, _] = self.model.input_shape;
        if (h, w) != (self.preprocess.height as usize, self.preprocess.width as usize) {
            return Err(Error::invalid(format!(
                "preprocess size {}×{} differs from the model input {h}×{w}",
                self.preprocess.height, self.preprocess.width
            )));
        }
        if self.resample.enabled {
            if self.resample.target_per_class == 0 {
                return Err(Error::invalid("resample.target_per_class must be at least 1"));
            }
            if self.resample.augmentations.is_empty() {
                return Err(Error::invalid("resample.augmentations must not be empty"));
            }
            for spec in &self.resample.augmentations {
                spec.validate()?;
            }
        }
        if !(self.split.ratio > 0.0 && self.split.ratio <= 1.0) {
            return Err(Error::invalid(format!("split.ratio must lie in (0, 1], got {}", self.split.ratio)));
        }
        if self.cv.k < 2 {
            return Err(Error::invalid(format!("cv.k must be at least 2, got {}", self.cv.k)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use barkid::model::Backbone;
    use barkid::resampler::AugmentOp;
    use barkid::trainer::LrSchedule;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut c = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        c.split.seed = Some(3);
        c.split.stratified = true;
        c.model.backbone = Backbone::Mobilenet;
        c.model.dropout_rate = 0.3;
        c.training.schedule = LrSchedule::Plateau {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
        };
        c.resample.augmentations = vec![AugmentationSpec::new(
            AugmentOp::RandomDistortion {
                grid_width: 3,
                grid_height: 5,
                magnitude: 2,
            },
            1.0,
        )];
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(RunConfig::from_toml(&text).unwrap().to_toml(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml(
            r#"
            seed = 5
            dataset_root = "bark"

            [training]
            epochs = 2

            [[resample.augmentations]]
            op = "flip_top_bottom"
            probability = 1
            "#,
        )
        .unwrap();
        assert_eq!(c.training.epochs, 2);
        assert_eq!(c.training.learning_rate, 1e-4);
        assert_eq!(c.resample.augmentations, [AugmentationSpec::new(AugmentOp::FlipTopBottom, 1.0)]);
        assert_eq!(c.model.num_classes, 50);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[training]\nlr = 1").is_err());
        let mut c = RunConfig::default();
        c.preprocess.height = 128;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.cv.k = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.training.learning_rate = 0.0;
        assert!(c.validate().is_ok());
        c.strict = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_overridable() {
        let mut c = RunConfig::default();
        let stages = [Stage::Rebalance, Stage::Split, Stage::Model, Stage::Train, Stage::CrossVal];
        let seeds: std::collections::BTreeSet<u64> = stages.iter().map(|&s| c.stage_seed(s)).collect();
        assert_eq!(seeds.len(), stages.len());
        c.split.seed = Some(99);
        assert_eq!(c.stage_seed(Stage::Split), 99);
    }
}
