#!/usr/bin/env python3
"""Export a Keras application backbone (include_top=False) to a safetensors file
that barkid can load as pretrained weights.

Tensors are named `<layer>/<weight>` exactly as Keras names them, e.g.
`conv1_conv/kernel` or `post_bn/moving_variance`. Run one backbone per process so
that auto-generated layer names (InceptionV3) start from zero.

    python tools/export_keras_weights.py resnet101_v2 --out ~/.cache/barkid/weights

With `--random SEED` the ImageNet download is skipped and every weight, including
normalisation statistics, is drawn at random; together with `--reference` this
produces fixtures for checking the Rust forward pass against Keras.
"""

import argparse
import os
import sys

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np
from safetensors.numpy import save_file

APPLICATIONS = {
    "resnet101_v2": "ResNet101V2",
    "resnet101": "ResNet101",
    "resnet50": "ResNet50",
    "vgg19": "VGG19",
    "inception_v3": "InceptionV3",
    "mobilenet": "MobileNet",
}


def build(name, size, pretrained):
    import keras

    ctor = getattr(keras.applications, APPLICATIONS[name])
    return ctor(include_top=False, weights="imagenet" if pretrained else None, input_shape=(size, size, 3))


def randomise(model, seed):
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        values = []
        for w in layer.weights:
            v = np.asarray(w.numpy())
            kind = w.name
            depthwise = type(layer).__name__ == "DepthwiseConv2D"
            if kind in ("kernel", "depthwise_kernel"):
                fan_in = int(np.prod(v.shape[:2])) if depthwise else int(np.prod(v.shape[:-1]))
                v = rng.normal(0.0, np.sqrt(2.0 / fan_in), v.shape)
            elif kind == "gamma":
                v = rng.uniform(0.8, 1.2, v.shape)
            elif kind == "moving_variance":
                v = rng.uniform(0.5, 1.5, v.shape)
            else:
                v = rng.uniform(-0.1, 0.1, v.shape)
            values.append(v.astype(np.float32))
        if values:
            layer.set_weights(values)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("backbone", choices=sorted(APPLICATIONS))
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--size", type=int, default=160, help="input height and width")
    ap.add_argument("--random", type=int, metavar="SEED", help="random weights instead of ImageNet")
    ap.add_argument("--reference", type=int, default=0, metavar="N",
                    help="also write N random [0,1] inputs and the Keras feature maps for them")
    args = ap.parse_args()

    model = build(args.backbone, args.size, pretrained=args.random is None)
    if args.random is not None:
        randomise(model, args.random)

    tensors = {}
    for layer in model.layers:
        for w in layer.weights:
            key = f"{layer.name}/{w.name}"
            if key in tensors:
                sys.exit(f"duplicate weight name {key}")
            tensors[key] = np.ascontiguousarray(np.asarray(w.numpy(), dtype=np.float32))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.backbone}_notop.safetensors")
    save_file(tensors, path, metadata={"source": f"keras.applications.{APPLICATIONS[args.backbone]}"})
    print(f"{path}: {len(tensors)} tensors, {sum(t.size for t in tensors.values()):,} values")

    if args.reference:
        rng = np.random.default_rng(12345)
        x = rng.uniform(0.0, 1.0, (args.reference, args.size, args.size, 3)).astype(np.float32)
        y = np.asarray(model(x, training=False), dtype=np.float32)
        ref = os.path.join(args.out, f"{args.backbone}_reference.safetensors")
        save_file({"input": x, "output": y}, ref)
        print(f"{ref}: output {y.shape}")


if __name__ == "__main__":
    main()
