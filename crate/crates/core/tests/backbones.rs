//! Architecture parity with the Keras application models at 160×160×3.
//! Expected values were read off `model.summary()` of the Keras builds.

use barkid::model::{backbone_layers, build_model, count_parameters, Backbone, ModelSpec};

fn spec(backbone: Backbone) -> ModelSpec {
    ModelSpec {
        backbone,
        pretrained: false,
        ..ModelSpec::default()
    }
}

#[test]
fn backbone_shapes_and_counts_match_keras() {
    // (backbone, output shape, total, non-trainable)
    let expected = [
        (Backbone::Resnet101V2, [5, 5, 2048], 42_626_560, 97_664),
        (Backbone::Resnet101, [5, 5, 2048], 42_658_176, 105_344),
        (Backbone::Resnet50, [5, 5, 2048], 23_587_712, 53_120),
        (Backbone::Vgg19, [5, 5, 512], 20_024_384, 0),
        (Backbone::InceptionV3, [3, 3, 2048], 21_802_784, 34_432),
        (Backbone::Mobilenet, [5, 5, 1024], 3_228_864, 21_888),
    ];
    for (backbone, shape, total, frozen) in expected {
        let model = build_model(&spec(backbone), 0).unwrap();
        let bb = model.backbone().params();
        assert_eq!(model.feature_shape(), shape, "{backbone}");
        assert_eq!(bb.total_count(), total, "{backbone}");
        assert_eq!(bb.total_count() - bb.trainable_count(), frozen, "{backbone}");
    }
}

#[test]
fn keras_layer_names_are_reproduced() {
    let model = build_model(&spec(Backbone::Resnet101V2), 0).unwrap();
    let names: Vec<String> = backbone_layers(&model).into_iter().map(|r| r.name).collect();
    for want in ["conv1_conv", "pool1_pool", "conv2_block1_preact_bn", "conv2_block3_out", "max_pooling2d_2", "conv4_block23_3_conv", "post_relu"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert_eq!(model.backbone().name(), "resnet101v2");

    let model = build_model(&spec(Backbone::InceptionV3), 0).unwrap();
    let rows = backbone_layers(&model);
    let last_conv = rows.iter().rfind(|r| r.kind == "Conv2D").unwrap();
    assert_eq!(last_conv.name, "conv2d_93");
    assert!(rows.iter().any(|r| r.name == "concatenate_1"));
    assert!(rows.iter().any(|r| r.name == "mixed9_1"));
}

#[test]
fn frozen_backbone_leaves_only_the_head_trainable() {
    let mut s = spec(Backbone::Mobilenet);
    s.backbone_trainable = false;
    let report = count_parameters(&build_model(&s, 0).unwrap());
    let head: usize = report.layers[1..].iter().map(|r| r.params).sum();
    assert_eq!(report.trainable, head);
    assert_eq!(report.non_trainable, 3_228_864);
}

/// Compares feature maps against Keras for weights and inputs exported with
/// `tools/export_keras_weights.py <backbone> --random 7 --reference 2 --out DIR`.
/// Runs only when `BARKID_PARITY_DIR` points at such a directory.
#[test]
fn feature_maps_match_keras_when_fixtures_exist() {
    use barkid_nn::Tensor;
    use safetensors::SafeTensors;

    let Some(dir) = std::env::var_os("BARKID_PARITY_DIR").map(std::path::PathBuf::from) else {
        eprintln!("BARKID_PARITY_DIR not set; skipping");
        return;
    };
    let read = |bytes: &[u8], name: &str| -> Tensor {
        let st = SafeTensors::deserialize(bytes).unwrap();
        let v = st.tensor(name).unwrap();
        let data = v.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(v.shape(), data).unwrap()
    };
    for backbone in Backbone::ALL {
        let reference = dir.join(format!("{backbone}_reference.safetensors"));
        let Ok(bytes) = std::fs::read(&reference) else { continue };
        let model = build_model(
            &ModelSpec {
                backbone,
                weights_file: Some(dir.join(format!("{backbone}_notop.safetensors"))),
                ..ModelSpec::default()
            },
            0,
        )
        .unwrap();
        let want = read(&bytes, "output");
        let got = model.features(&read(&bytes, "input")).unwrap();
        assert_eq!(got.shape(), want.shape());
        let scale = want.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        let err = got.data().iter().zip(want.data()).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        eprintln!("{backbone}: max |Δ| = {err:.3e}, max |y| = {scale:.3e}");
        assert!(err <= 1e-4 * scale.max(1.0), "{backbone}: max |Δ| {err} vs scale {scale}");
    }
}
