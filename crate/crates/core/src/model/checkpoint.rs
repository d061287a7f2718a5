//! Weight files. Checkpoints are safetensors files whose header metadata carries a
//! JSON architecture fingerprint under the `fingerprint` key; tensors are named
//! `backbone/<layer>/<role>` and `head/<layer>/<role>`. Exported pretrained
//! backbones use the same format with bare `<layer>/<role>` names.

use std::collections::HashMap;
use std::path::Path;

use barkid_nn::{Graph, Node, Op, ParamRole};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{build_uninitialised, Backbone, Classifier, HeadActivation, HeadLayer, InputScaling, ModelSpec};
use crate::error::{Error, Result};

const FORMAT: &str = "barkid-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintLayer {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    /// Layer settings that change behaviour without changing shape.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub format: String,
    pub backbone: Backbone,
    pub input_shape: [usize; 3],
    pub input_scaling: InputScaling,
    pub head_widths: Vec<usize>,
    pub dropout_rate: f32,
    pub num_classes: usize,
    pub classes: Vec<String>,
    /// Input layer, the backbone as one row, then each head layer.
    pub layers: Vec<FingerprintLayer>,
}

fn head_config(node: &Node) -> String {
    match &node.op {
        Op::Dense { units, activation, .. } => format!("units={units} activation={}", activation.as_str()),
        Op::Dropout { rate } => format!("rate={rate}"),
        _ => String::new(),
    }
}

impl Fingerprint {
    pub fn of(model: &Classifier) -> Self {
        let spec = model.spec();
        let scaling = match spec.input_scaling {
            InputScaling::Unit => "unit",
            InputScaling::BackboneNative => "backbone_native",
        };
        let mut layers = vec![
            FingerprintLayer {
                name: "input_layer".into(),
                kind: "InputLayer".into(),
                output_shape: spec.input_shape.to_vec(),
                config: format!("scaling={scaling}"),
            },
            FingerprintLayer {
                name: model.backbone().name().into(),
                kind: "Functional".into(),
                output_shape: model.backbone().output_shape().to_vec(),
                config: format!("params={}", model.backbone().params().total_count()),
            },
        ];
        layers.extend(model.head().nodes().iter().skip(1).map(|n| FingerprintLayer {
            name: n.name.clone(),
            kind: n.kind().into(),
            output_shape: n.shape.clone(),
            config: head_config(n),
        }));
        Fingerprint {
            format: FORMAT.into(),
            backbone: spec.backbone,
            input_shape: spec.input_shape,
            input_scaling: spec.input_scaling,
            head_widths: spec.head_widths(),
            dropout_rate: spec.dropout_rate,
            num_classes: spec.num_classes,
            classes: model.classes().to_vec(),
            layers,
        }
    }

    /// The spec that rebuilds this architecture. The backbone is marked trainable
    /// and not pretrained; the checkpoint supplies every weight.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let bad = |detail: String| Error::Format {
            path: Default::default(),
            detail,
        };
        let mut head = Vec::new();
        for layer in self.layers.iter().skip(2) {
            let setting = |key: &str| {
                layer
                    .config
                    .split_whitespace()
                    .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                    .ok_or_else(|| bad(format!("layer `{}` lacks `{key}`", layer.name)))
            };
            head.push(match layer.kind.as_str() {
                "Flatten" => HeadLayer::Flatten,
                "Dense" => HeadLayer::Dense {
                    units: setting("units")?.parse().map_err(|e| bad(format!("layer `{}`: {e}", layer.name)))?,
                    activation: match setting("activation")? {
                        "linear" => HeadActivation::Linear,
                        "relu" => HeadActivation::Relu,
                        "softmax" => HeadActivation::Softmax,
                        other => return Err(bad(format!("layer `{}` has unknown activation `{other}`", layer.name))),
                    },
                },
                "Dropout" => HeadLayer::Dropout {
                    rate: setting("rate")?.parse().map_err(|e| bad(format!("layer `{}`: {e}", layer.name)))?,
                },
                other => return Err(bad(format!("unexpected head layer kind `{other}`"))),
            });
        }
        Ok(ModelSpec {
            backbone: self.backbone,
            pretrained: false,
            input_shape: self.input_shape,
            head: Some(head),
            num_classes: self.num_classes,
            dropout_rate: self.dropout_rate,
            backbone_trainable: true,
            input_scaling: self.input_scaling,
            weights_file: None,
        })
    }

    /// Error naming the first layer where `self` (from a file) and `expected` differ.
    fn check_against(&self, expected: &Fingerprint) -> Result<()> {
        let describe = |l: &FingerprintLayer| format!("{} {:?} {}", l.kind, l.output_shape, l.config).trim_end().to_string();
        for (i, want) in expected.layers.iter().enumerate() {
            match self.layers.get(i) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(Error::ArchitectureMismatch {
                        layer: want.name.clone(),
                        detail: format!(
                            "checkpoint has `{}` {}, spec builds {}",
                            got.name,
                            describe(got),
                            describe(want)
                        ),
                    })
                }
                None => {
                    return Err(Error::ArchitectureMismatch {
                        layer: want.name.clone(),
                        detail: "checkpoint ends before this layer".into(),
                    })
                }
            }
        }
        if let Some(extra) = self.layers.get(expected.layers.len()) {
            return Err(Error::ArchitectureMismatch {
                layer: extra.name.clone(),
                detail: "checkpoint has layers beyond the spec's output".into(),
            });
        }
        Ok(())
    }
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write every parameter plus the architecture fingerprint. The file is written
/// to a sibling temporary path and renamed into place.
pub fn save_weights(model: &Classifier, path: &Path) -> Result<()> {
    let fingerprint = serde_json::to_string(&Fingerprint::of(model)).expect("fingerprint serialises");
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, g) in [("backbone", model.backbone()), ("head", model.head())] {
        for p in g.params().iter() {
            buffers.push((format!("{prefix}/{}", p.name), p.shape.clone(), to_bytes(&p.value)));
        }
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
            Ok((name.as_str(), view))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([("fingerprint".to_string(), fingerprint)]);
    let blob = safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &blob)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_fingerprint(path: &Path, bytes: &[u8]) -> Result<Fingerprint> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::format(path, format!("not a checkpoint: {e}")))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("fingerprint"))
        .ok_or_else(|| Error::format(path, "checkpoint has no architecture fingerprint"))?;
    let fp: Fingerprint =
        serde_json::from_str(raw).map_err(|e| Error::format(path, format!("bad fingerprint: {e}")))?;
    if fp.format != FORMAT {
        return Err(Error::format(path, format!("unsupported checkpoint format `{}`", fp.format)));
    }
    Ok(fp)
}

/// The architecture fingerprint stored in a checkpoint.
pub fn read_fingerprint(path: &Path) -> Result<Fingerprint> {
    parse_fingerprint(path, &read_file(path)?)
}

/// Rebuild the classifier described by `spec` and fill it from the checkpoint.
/// Nothing is returned unless every parameter was read successfully.
pub fn load_weights(spec: &ModelSpec, path: &Path) -> Result<Classifier> {
    let bytes = read_file(path)?;
    let fingerprint = parse_fingerprint(path, &bytes)?;
    let mut model = build_uninitialised(spec, 0)?;
    fingerprint.check_against(&Fingerprint::of(&model))?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, format!("corrupt checkpoint: {e}")))?;
    fill_graph(model.backbone_mut(), &tensors, "backbone/", path)?;
    fill_graph(model.head_mut(), &tensors, "head/", path)?;
    model.set_classes(fingerprint.classes)?;
    Ok(model)
}

/// Load a checkpoint using the architecture recorded in it.
pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let spec = read_fingerprint(path)?.to_spec().map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path, detail),
        other => other,
    })?;
    load_weights(&spec, path)
}

/// Load exported pretrained weights into a freshly built backbone.
pub(crate) fn load_backbone_weights(backbone: &mut Graph, path: &Path) -> Result<()> {
    let bytes = read_file(path)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, format!("corrupt weight file: {e}")))?;
    fill_graph(backbone, &tensors, "", path)
}

fn fill_graph(g: &mut Graph, tensors: &SafeTensors<'_>, prefix: &str, path: &Path) -> Result<()> {
    for p in g.params_mut().iter_mut() {
        let key = format!("{prefix}{}", p.name);
        // Keras 3 calls depthwise kernels plain `kernel`.
        let alias = (p.role == ParamRole::DepthwiseKernel).then(|| format!("{prefix}{}/kernel", p.layer));
        let view = tensors
            .tensor(&key)
            .or_else(|e| alias.as_deref().map_or(Err(e), |a| tensors.tensor(a)))
            .map_err(|_| Error::format(path, format!("missing tensor `{key}`")))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::format(path, format!("tensor `{key}` is {:?}, expected F32", view.dtype())));
        }
        if view.shape() != p.shape.as_slice() {
            return Err(Error::ArchitectureMismatch {
                layer: p.layer.clone(),
                detail: format!("`{key}` has shape {:?}, model expects {:?}", view.shape(), p.shape),
            });
        }
        p.value = to_f32(view.data());
    }
    Ok(())
}
