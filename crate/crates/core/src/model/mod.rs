//! Classifier construction: a convolutional backbone followed by a dense head.

mod backbones;
mod checkpoint;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use barkid_nn::{derive_seed, Activation, Graph, GraphBuilder, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, load_weights, read_fingerprint, save_weights, Fingerprint, FingerprintLayer};

/// Environment variable naming the directory that holds exported backbone weights.
pub const WEIGHTS_DIR_ENV: &str = "BARKID_WEIGHTS_DIR";

/// Images per inference chunk; bounds peak activation memory.
const INFERENCE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Resnet101V2,
    Resnet101,
    Resnet50,
    Vgg19,
    InceptionV3,
    Mobilenet,
}

impl Backbone {
    pub const ALL: [Backbone; 6] = [
        Backbone::Resnet101V2,
        Backbone::Resnet101,
        Backbone::Resnet50,
        Backbone::Vgg19,
        Backbone::InceptionV3,
        Backbone::Mobilenet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Resnet101V2 => "resnet101_v2",
            Backbone::Resnet101 => "resnet101",
            Backbone::Resnet50 => "resnet50",
            Backbone::Vgg19 => "vgg19",
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Mobilenet => "mobilenet",
        }
    }

    /// Model name Keras gives the application for this input shape.
    pub fn keras_name(self, input: [usize; 3]) -> &'static str {
        match self {
            Backbone::Resnet101V2 => "resnet101v2",
            Backbone::Resnet101 => "resnet101",
            Backbone::Resnet50 => "resnet50",
            Backbone::Vgg19 => "vgg19",
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Mobilenet => match input[0] {
                128 => "mobilenet_1.00_128",
                160 => "mobilenet_1.00_160",
                192 => "mobilenet_1.00_192",
                _ => "mobilenet_1.00_224",
            },
        }
    }

    /// The input transform the published weights were trained with.
    fn native_scaling(self) -> NativeScaling {
        match self {
            Backbone::Resnet101 | Backbone::Resnet50 | Backbone::Vgg19 => NativeScaling::Caffe,
            Backbone::Resnet101V2 | Backbone::InceptionV3 | Backbone::Mobilenet => NativeScaling::SymmetricUnit,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match key.as_str() {
            "resnet101v2" => Backbone::Resnet101V2,
            "resnet101" | "resnet101v1" => Backbone::Resnet101,
            "resnet50" => Backbone::Resnet50,
            "vgg19" => Backbone::Vgg19,
            "inceptionv3" => Backbone::InceptionV3,
            "mobilenet" | "mobilenetv1" => Backbone::Mobilenet,
            _ => {
                return Err(Error::invalid(format!(
                    "unsupported backbone `{s}`; expected one of resnet101_v2, resnet101, resnet50, vgg19, inception_v3, mobilenet"
                )))
            }
        })
    }
}

enum NativeScaling {
    /// `[0,1] → [-1,1]`.
    SymmetricUnit,
    /// RGB→BGR on the 0–255 scale minus the ImageNet channel means.
    Caffe,
}

/// How `[0,1]` batch values are presented to the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    /// Feed the `[0,1]` values unchanged.
    #[default]
    Unit,
    /// Apply the transform the backbone's published weights expect.
    BackboneNative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Linear,
    Relu,
    Softmax,
}

impl From<HeadActivation> for Activation {
    fn from(a: HeadActivation) -> Self {
        match a {
            HeadActivation::Linear => Activation::Linear,
            HeadActivation::Relu => Activation::Relu,
            HeadActivation::Softmax => Activation::Softmax,
        }
    }
}

/// One layer of the classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadLayer {
    Flatten,
    Dense { units: usize, activation: HeadActivation },
    Dropout { rate: f32 },
}

/// The default head: flatten, three relu layers of 512/512/256 units with dropout
/// after the first two, and a softmax output.
pub fn default_head(num_classes: usize, dropout_rate: f32) -> Vec<HeadLayer> {
    let relu = |units| HeadLayer::Dense {
        units,
        activation: HeadActivation::Relu,
    };
    vec![
        HeadLayer::Flatten,
        relu(512),
        HeadLayer::Dropout { rate: dropout_rate },
        relu(512),
        HeadLayer::Dropout { rate: dropout_rate },
        relu(256),
        HeadLayer::Dense {
            units: num_classes,
            activation: HeadActivation::Softmax,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Initialise the backbone from exported ImageNet weights.
    pub pretrained: bool,
    pub input_shape: [usize; 3],
    /// Explicit head; `None` means [`default_head`].
    pub head: Option<Vec<HeadLayer>>,
    pub num_classes: usize,
    pub dropout_rate: f32,
    pub backbone_trainable: bool,
    pub input_scaling: InputScaling,
    /// Weight file to use instead of looking one up under [`WEIGHTS_DIR_ENV`].
    pub weights_file: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::default(),
            pretrained: true,
            input_shape: [160, 160, 3],
            head: None,
            num_classes: 50,
            dropout_rate: 0.45,
            backbone_trainable: true,
            input_scaling: InputScaling::Unit,
            weights_file: None,
        }
    }
}

impl ModelSpec {
    pub fn head_layers(&self) -> Vec<HeadLayer> {
        self.head
            .clone()
            .unwrap_or_else(|| default_head(self.num_classes, self.dropout_rate))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::invalid(format!("input_shape must be (h, w, 3) with h, w > 0, got {:?}", self.input_shape)));
        }
        let head = self.head_layers();
        if !matches!(head.first(), Some(HeadLayer::Flatten)) {
            return Err(Error::invalid("head must start with a flatten layer"));
        }
        for layer in &head {
            match layer {
                HeadLayer::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::invalid(format!("head dropout rate must lie in [0, 1), got {rate}")));
                }
                HeadLayer::Dense { units: 0, .. } => return Err(Error::invalid("head dense layer with 0 units")),
                _ => {}
            }
        }
        match head.last() {
            Some(HeadLayer::Dense {
                units,
                activation: HeadActivation::Softmax,
            }) if *units == self.num_classes => Ok(()),
            _ => Err(Error::invalid(format!(
                "the head's final layer must be a softmax dense layer of num_classes = {} units",
                self.num_classes
            ))),
        }
    }

    /// Widths of the head's dense layers in order.
    pub fn head_widths(&self) -> Vec<usize> {
        self.head_layers()
            .iter()
            .filter_map(|l| match l {
                HeadLayer::Dense { units, .. } => Some(*units),
                _ => None,
            })
            .collect()
    }

    /// Where pretrained weights for this spec are looked up.
    pub fn weights_path(&self) -> PathBuf {
        if let Some(p) = &self.weights_file {
            return p.clone();
        }
        let dir = std::env::var_os(WEIGHTS_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/barkid/weights")))
            .unwrap_or_else(|| PathBuf::from("weights"));
        dir.join(format!("{}_notop.safetensors", self.backbone.as_str()))
    }
}

/// Backbone plus head, with the class names it was trained on.
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ModelSpec,
    classes: Vec<String>,
    backbone: Graph,
    head: Graph,
}

/// Builds a classifier with backbone weights loaded from the exported cache when
/// `spec.pretrained`, otherwise freshly initialised. Head weights are always
/// initialised from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Classifier> {
    let mut model = build_uninitialised(spec, seed)?;
    if spec.pretrained {
        let path = spec.weights_path();
        if !path.is_file() {
            return Err(Error::WeightsUnavailable {
                backbone: spec.backbone.to_string(),
                path,
            });
        }
        checkpoint::load_backbone_weights(&mut model.backbone, &path)?;
    }
    Ok(model)
}

/// Architecture only: every layer initialised from `seed`, nothing read from disk.
pub(crate) fn build_uninitialised(spec: &ModelSpec, seed: u64) -> Result<Classifier> {
    spec.validate()?;
    let mut backbone = backbones::build(spec.backbone, spec.input_shape, derive_seed(seed, "backbone"))?;
    backbone.params_mut().set_trainable(spec.backbone_trainable);
    let head = build_head(backbone.output_shape(), &spec.head_layers(), derive_seed(seed, "head"))?;
    Ok(Classifier {
        spec: spec.clone(),
        classes: Vec::new(),
        backbone,
        head,
    })
}

fn build_head(feature_shape: &[usize], layers: &[HeadLayer], seed: u64) -> Result<Graph> {
    let mut b = GraphBuilder::new("head", seed);
    let mut x = b.input(feature_shape);
    let (mut dense, mut dropout) = (0, 0);
    let numbered = |kind: &str, n: usize| if n == 0 { kind.to_string() } else { format!("{kind}_{n}") };
    for layer in layers {
        x = match *layer {
            HeadLayer::Flatten => b.flatten("flatten", x),
            HeadLayer::Dense { units, activation } => {
                dense += 1;
                b.dense(&numbered("dense", dense - 1), x, units, activation.into())?
            }
            HeadLayer::Dropout { rate } => {
                dropout += 1;
                b.dropout(&numbered("dropout", dropout - 1), x, rate)
            }
        };
    }
    Ok(b.build(x))
}

impl Classifier {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Class names in label-index order; empty until set.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn set_classes(&mut self, classes: Vec<String>) -> Result<()> {
        if !classes.is_empty() && classes.len() != self.num_classes() {
            return Err(Error::invalid(format!(
                "model has {} outputs but {} class names were given",
                self.num_classes(),
                classes.len()
            )));
        }
        self.classes = classes;
        Ok(())
    }

    pub fn backbone(&self) -> &Graph {
        &self.backbone
    }

    pub fn head(&self) -> &Graph {
        &self.head
    }

    pub fn backbone_mut(&mut self) -> &mut Graph {
        &mut self.backbone
    }

    pub fn head_mut(&mut self) -> &mut Graph {
        &mut self.head
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone.params().trainable_count() > 0
    }

    /// Freeze or unfreeze the backbone; normalisation statistics stay frozen either way.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        self.spec.backbone_trainable = trainable;
        self.backbone.params_mut().set_trainable(trainable);
    }

    /// Shape of the backbone feature map for one image.
    pub fn feature_shape(&self) -> &[usize] {
        self.backbone.output_shape()
    }

    /// Map `[0,1]` inputs into the backbone's input space.
    pub fn adapt_input(&self, mut x: Tensor) -> Tensor {
        if self.spec.input_scaling == InputScaling::Unit {
            return x;
        }
        match self.spec.backbone.native_scaling() {
            NativeScaling::SymmetricUnit => x.data_mut().iter_mut().for_each(|v| *v = *v * 2.0 - 1.0),
            NativeScaling::Caffe => {
                const BGR_MEAN: [f32; 3] = [103.939, 116.779, 123.68];
                for px in x.data_mut().chunks_exact_mut(3) {
                    let [r, g, b] = [px[0], px[1], px[2]];
                    px[0] = b * 255.0 - BGR_MEAN[0];
                    px[1] = g * 255.0 - BGR_MEAN[1];
                    px[2] = r * 255.0 - BGR_MEAN[2];
                }
            }
        }
        x
    }

    /// Backbone feature maps for a batch of `[0,1]` images.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        let mut parts = Vec::new();
        for start in (0..x.batch()).step_by(INFERENCE_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(x.batch())).collect();
            let chunk = self.adapt_input(x.gather_rows(&rows));
            parts.push(self.backbone.forward(&chunk)?);
        }
        if parts.is_empty() {
            let shape: Vec<usize> = std::iter::once(0).chain(self.feature_shape().iter().copied()).collect();
            return Ok(Tensor::zeros(&shape));
        }
        Ok(Tensor::concat_rows(&parts)?)
    }

    /// Class probabilities from precomputed backbone features.
    pub fn predict_features(&self, features: &Tensor) -> Result<Tensor> {
        if features.batch() == 0 {
            return Ok(Tensor::zeros(&[0, self.num_classes()]));
        }
        Ok(self.head.forward(features)?)
    }

    /// Class probabilities, one row per image; inference mode (no dropout).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_features(&self.features(x)?)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input_shape {
            return Err(Error::invalid(format!(
                "model expects images of shape {:?}, got batch {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Copy every parameter value from `other`, which must share the architecture.
    pub fn copy_weights_from(&mut self, other: &Classifier) -> Result<()> {
        copy_store(self.backbone.params_mut(), other.backbone.params())?;
        copy_store(self.head.params_mut(), other.head.params())
    }
}

fn copy_store(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for p in src.iter() {
        dst.assign(&p.name, &p.shape, &p.value)?;
    }
    Ok(())
}

/// One row of a parameter summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    /// Keras layer class, e.g. `Dense`.
    pub kind: String,
    /// Output shape without the batch dimension.
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub layers: Vec<LayerRow>,
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Parameter accounting with the backbone collapsed to a single row, followed by
/// every head layer.
pub fn count_parameters(model: &Classifier) -> ParamReport {
    let bb = model.backbone.params();
    let mut layers = vec![LayerRow {
        name: model.backbone.name().to_string(),
        kind: "Functional".into(),
        output_shape: model.backbone.output_shape().to_vec(),
        params: bb.total_count(),
        trainable: bb.trainable_count(),
    }];
    layers.extend(graph_rows(&model.head).into_iter().skip(1));
    let total = layers.iter().map(|r| r.params).sum();
    let trainable = layers.iter().map(|r| r.trainable).sum();
    ParamReport {
        layers,
        total,
        trainable,
        non_trainable: total - trainable,
    }
}

/// Layer-by-layer accounting of the backbone alone, input layer included.
pub fn backbone_layers(model: &Classifier) -> Vec<LayerRow> {
    graph_rows(&model.backbone)
}

fn graph_rows(g: &Graph) -> Vec<LayerRow> {
    g.nodes()
        .iter()
        .map(|node| {
            let ids = node.param_ids();
            let trainable = ids
                .iter()
                .map(|id| g.params().get(*id))
                .filter(|p| p.trainable)
                .map(|p| p.len())
                .sum();
            LayerRow {
                name: node.name.clone(),
                kind: node.kind().to_string(),
                output_shape: node.shape.clone(),
                params: g.node_param_count(node),
                trainable,
            }
        })
        .collect()
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl ParamReport {
    /// Plain-text summary in the familiar Keras layout.
    pub fn render(&self) -> String {
        let shape = |s: &[usize]| {
            let dims: Vec<String> = std::iter::once("None".to_string()).chain(s.iter().map(usize::to_string)).collect();
            format!("({})", dims.join(", "))
        };
        let rule = "_".repeat(65);
        let mut out = format!("{rule}\n{:<29}{:<26}{}\n{}\n", "Layer (type)", "Output Shape", "Param #", "=".repeat(65));
        for (i, row) in self.layers.iter().enumerate() {
            let label = format!("{} ({})", row.name, row.kind);
            out.push_str(&format!("{label:<29}{:<26}{}\n", shape(&row.output_shape), row.params));
            out.push_str(if i + 1 == self.layers.len() { "" } else { "\n" });
        }
        out.push_str(&format!("{}\n", "=".repeat(65)));
        out.push_str(&format!("Total params: {}\n", group_thousands(self.total)));
        out.push_str(&format!("Trainable params: {}\n", group_thousands(self.trainable)));
        out.push_str(&format!("Non-trainable params: {}\n{rule}\n", group_thousands(self.non_trainable)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(backbone: Backbone) -> ModelSpec {
        ModelSpec {
            backbone,
            pretrained: false,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn backbone_names_parse() {
        for b in Backbone::ALL {
            assert_eq!(b.as_str().parse::<Backbone>().unwrap(), b);
        }
        assert_eq!("ResNet101V2".parse::<Backbone>().unwrap(), Backbone::Resnet101V2);
        assert!("alexnet".parse::<Backbone>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(spec(Backbone::Vgg19).validate().is_ok());
        let bad = [
            ModelSpec {
                num_classes: 1,
                ..spec(Backbone::Vgg19)
            },
            ModelSpec {
                dropout_rate: 1.0,
                ..spec(Backbone::Vgg19)
            },
            ModelSpec {
                head: Some(default_head(40, 0.45)),
                ..spec(Backbone::Vgg19)
            },
            ModelSpec {
                input_shape: [160, 160, 1],
                ..spec(Backbone::Vgg19)
            },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Invalid(_))), "{s:?}");
        }
    }

    #[test]
    fn default_head_shape() {
        let head = default_head(50, 0.45);
        let dropouts: Vec<usize> = head
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, HeadLayer::Dropout { .. }))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(dropouts, [2, 4]);
        assert_eq!(spec(Backbone::Vgg19).head_widths(), [512, 512, 256, 50]);
    }

    #[test]
    fn group_thousands_formats() {
        assert_eq!(group_thousands(69_248_306), "69,248,306");
        assert_eq!(group_thousands(664), "664");
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(97_664), "97,664");
    }

    #[test]
    fn missing_weights_error_carries_a_hint() {
        let s = ModelSpec {
            weights_file: Some(PathBuf::from("/nonexistent/resnet.safetensors")),
            backbone: Backbone::Mobilenet,
            ..ModelSpec::default()
        };
        let err = build_model(&s, 0).unwrap_err();
        assert!(matches!(err, Error::WeightsUnavailable { .. }));
        assert!(err.to_string().contains(WEIGHTS_DIR_ENV));
    }

    #[test]
    fn native_scaling_maps_unit_range() {
        let mut s = spec(Backbone::Mobilenet);
        s.input_scaling = InputScaling::BackboneNative;
        s.input_shape = [32, 32, 3];
        let m = build_uninitialised(&s, 0).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m.adapt_input(x).data(), &[-1.0, 0.0, 1.0]);

        s.backbone = Backbone::Vgg19;
        let m = build_uninitialised(&s, 0).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = m.adapt_input(x);
        assert!((y.data()[0] + 103.939).abs() < 1e-4);
        assert!((y.data()[2] - (255.0 - 123.68)).abs() < 1e-4);
    }
}
