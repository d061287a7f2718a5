//! Convolutional feature extractors, laid out layer for layer like the Keras
//! application models so that published weights load by name.

use std::collections::HashMap;

use barkid_nn::{Activation, Graph, GraphBuilder, NnError, NodeId, Pad, PadFill, Padding};

use super::Backbone;

/// Builds the headless backbone for `input` (h, w, c).
pub fn build(backbone: Backbone, input: [usize; 3], seed: u64) -> Result<Graph, NnError> {
    let mut b = GraphBuilder::new(backbone.keras_name(input), seed);
    let x = b.input(&input);
    let out = match backbone {
        Backbone::Resnet101V2 => resnet_v2(&mut b, x, [3, 4, 23, 3])?,
        Backbone::Resnet101 => resnet_v1(&mut b, x, [3, 4, 23, 3])?,
        Backbone::Resnet50 => resnet_v1(&mut b, x, [3, 4, 6, 3])?,
        Backbone::Vgg19 => vgg19(&mut b, x)?,
        Backbone::InceptionV3 => inception_v3(&mut b, x)?,
        Backbone::Mobilenet => mobilenet(&mut b, x)?,
    };
    Ok(b.build(out))
}

const RESNET_EPS: f32 = 1.001e-5;

fn pad(p: usize) -> Pad {
    Pad::Explicit(Padding::uniform(p))
}

fn resnet_stem(b: &mut GraphBuilder, x: NodeId, preact: bool) -> Result<NodeId, NnError> {
    let mut x = b.conv2d("conv1_conv", x, 64, (7, 7), (2, 2), pad(3), true, Activation::Linear)?;
    if !preact {
        x = b.batch_norm("conv1_bn", x, RESNET_EPS, true, true)?;
        x = b.activation("conv1_relu", x, Activation::Relu);
    }
    b.max_pool("pool1_pool", x, (3, 3), (2, 2), pad(1), PadFill::Zero)
}

fn resnet_v2(b: &mut GraphBuilder, x: NodeId, depths: [usize; 4]) -> Result<NodeId, NnError> {
    let mut x = resnet_stem(b, x, true)?;
    let mut shortcut_pools = 0;
    for (stage, (&blocks, filters)) in depths.iter().zip([64, 128, 256, 512]).enumerate() {
        let stride = if stage == 3 { 1 } else { 2 };
        for i in 1..=blocks {
            let name = format!("conv{}_block{i}", stage + 2);
            let s = if i == blocks { stride } else { 1 };
            x = block_v2(b, x, &name, filters, s, i == 1, &mut shortcut_pools)?;
        }
    }
    let x = b.batch_norm("post_bn", x, RESNET_EPS, true, true)?;
    Ok(b.activation("post_relu", x, Activation::Relu))
}

/// Pre-activation bottleneck.
fn block_v2(
    b: &mut GraphBuilder,
    x: NodeId,
    name: &str,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
    shortcut_pools: &mut usize,
) -> Result<NodeId, NnError> {
    let preact = b.batch_norm(&format!("{name}_preact_bn"), x, RESNET_EPS, true, true)?;
    let preact = b.activation(&format!("{name}_preact_relu"), preact, Activation::Relu);
    let shortcut = if conv_shortcut {
        b.conv2d(
            &format!("{name}_0_conv"),
            preact,
            4 * filters,
            (1, 1),
            (stride, stride),
            Pad::Valid,
            true,
            Activation::Linear,
        )?
    } else if stride > 1 {
        let pool_name = match *shortcut_pools {
            0 => "max_pooling2d".to_string(),
            n => format!("max_pooling2d_{n}"),
        };
        *shortcut_pools += 1;
        b.max_pool(&pool_name, x, (1, 1), (stride, stride), Pad::Valid, PadFill::Zero)?
    } else {
        x
    };
    let y = b.conv2d(&format!("{name}_1_conv"), preact, filters, (1, 1), (1, 1), Pad::Valid, false, Activation::Linear)?;
    let y = b.batch_norm(&format!("{name}_1_bn"), y, RESNET_EPS, true, true)?;
    let y = b.activation(&format!("{name}_1_relu"), y, Activation::Relu);
    let y = b.conv2d(
        &format!("{name}_2_conv"),
        y,
        filters,
        (3, 3),
        (stride, stride),
        pad(1),
        false,
        Activation::Linear,
    )?;
    let y = b.batch_norm(&format!("{name}_2_bn"), y, RESNET_EPS, true, true)?;
    let y = b.activation(&format!("{name}_2_relu"), y, Activation::Relu);
    let y = b.conv2d(&format!("{name}_3_conv"), y, 4 * filters, (1, 1), (1, 1), Pad::Valid, true, Activation::Linear)?;
    b.add(&format!("{name}_out"), &[shortcut, y])
}

fn resnet_v1(b: &mut GraphBuilder, x: NodeId, depths: [usize; 4]) -> Result<NodeId, NnError> {
    let mut x = resnet_stem(b, x, false)?;
    for (stage, (&blocks, filters)) in depths.iter().zip([64, 128, 256, 512]).enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        for i in 1..=blocks {
            let name = format!("conv{}_block{i}", stage + 2);
            let s = if i == 1 { stride } else { 1 };
            x = block_v1(b, x, &name, filters, s, i == 1)?;
        }
    }
    Ok(x)
}

/// Post-activation bottleneck.
fn block_v1(
    b: &mut GraphBuilder,
    x: NodeId,
    name: &str,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
) -> Result<NodeId, NnError> {
    let s = (stride, stride);
    let shortcut = if conv_shortcut {
        let c = b.conv2d(&format!("{name}_0_conv"), x, 4 * filters, (1, 1), s, Pad::Valid, true, Activation::Linear)?;
        b.batch_norm(&format!("{name}_0_bn"), c, RESNET_EPS, true, true)?
    } else {
        x
    };
    let y = b.conv2d(&format!("{name}_1_conv"), x, filters, (1, 1), s, Pad::Valid, true, Activation::Linear)?;
    let y = b.batch_norm(&format!("{name}_1_bn"), y, RESNET_EPS, true, true)?;
    let y = b.activation(&format!("{name}_1_relu"), y, Activation::Relu);
    let y = b.conv2d(&format!("{name}_2_conv"), y, filters, (3, 3), (1, 1), Pad::Same, true, Activation::Linear)?;
    let y = b.batch_norm(&format!("{name}_2_bn"), y, RESNET_EPS, true, true)?;
    let y = b.activation(&format!("{name}_2_relu"), y, Activation::Relu);
    let y = b.conv2d(&format!("{name}_3_conv"), y, 4 * filters, (1, 1), (1, 1), Pad::Valid, true, Activation::Linear)?;
    let y = b.batch_norm(&format!("{name}_3_bn"), y, RESNET_EPS, true, true)?;
    let sum = b.add(&format!("{name}_add"), &[shortcut, y])?;
    Ok(b.activation(&format!("{name}_out"), sum, Activation::Relu))
}

fn vgg19(b: &mut GraphBuilder, mut x: NodeId) -> Result<NodeId, NnError> {
    for (block, (convs, filters)) in [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)].into_iter().enumerate() {
        for i in 1..=convs {
            let name = format!("block{}_conv{i}", block + 1);
            x = b.conv2d(&name, x, filters, (3, 3), (1, 1), Pad::Same, true, Activation::Relu)?;
        }
        x = b.max_pool(&format!("block{}_pool", block + 1), x, (2, 2), (2, 2), Pad::Valid, PadFill::Zero)?;
    }
    Ok(x)
}

fn mobilenet(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, NnError> {
    const EPS: f32 = 1e-3;
    let x = b.conv2d("conv1", x, 32, (3, 3), (2, 2), Pad::Same, false, Activation::Linear)?;
    let x = b.batch_norm("conv1_bn", x, EPS, true, true)?;
    let mut x = b.activation("conv1_relu", x, Activation::Relu6);
    let blocks = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (i, (filters, stride)) in blocks.into_iter().enumerate() {
        let id = i + 1;
        // Strided blocks pad bottom/right only, then convolve without padding.
        let padding = if stride == 1 {
            Pad::Same
        } else {
            Pad::Explicit(Padding {
                top: 0,
                bottom: 1,
                left: 0,
                right: 1,
            })
        };
        let y = b.depthwise_conv2d(&format!("conv_dw_{id}"), x, (3, 3), (stride, stride), padding, false)?;
        let y = b.batch_norm(&format!("conv_dw_{id}_bn"), y, EPS, true, true)?;
        let y = b.activation(&format!("conv_dw_{id}_relu"), y, Activation::Relu6);
        let y = b.conv2d(&format!("conv_pw_{id}"), y, filters, (1, 1), (1, 1), Pad::Same, false, Activation::Linear)?;
        let y = b.batch_norm(&format!("conv_pw_{id}_bn"), y, EPS, true, true)?;
        x = b.activation(&format!("conv_pw_{id}_relu"), y, Activation::Relu6);
    }
    Ok(x)
}

/// Keras assigns unnamed layers `<kind>`, `<kind>_1`, `<kind>_2`, … in creation order.
#[derive(Default)]
struct AutoNames(HashMap<&'static str, usize>);

impl AutoNames {
    fn next(&mut self, kind: &'static str) -> String {
        let n = self.0.entry(kind).or_insert(0);
        let name = if *n == 0 {
            kind.to_string()
        } else {
            format!("{kind}_{n}")
        };
        *n += 1;
        name
    }
}

struct Inception<'a> {
    b: &'a mut GraphBuilder,
    names: AutoNames,
}

impl Inception<'_> {
    /// Bias-free convolution, scale-free batch norm, relu.
    fn conv_bn(&mut self, x: NodeId, filters: usize, kernel: (usize, usize), stride: usize, pad: Pad) -> Result<NodeId, NnError> {
        let conv = self.names.next("conv2d");
        let bn = self.names.next("batch_normalization");
        let act = self.names.next("activation");
        let y = self.b.conv2d(&conv, x, filters, kernel, (stride, stride), pad, false, Activation::Linear)?;
        let y = self.b.batch_norm(&bn, y, 1e-3, true, false)?;
        Ok(self.b.activation(&act, y, Activation::Relu))
    }

    fn conv(&mut self, x: NodeId, filters: usize, kernel: (usize, usize)) -> Result<NodeId, NnError> {
        self.conv_bn(x, filters, kernel, 1, Pad::Same)
    }

    fn max_pool(&mut self, x: NodeId, pad: Pad) -> Result<NodeId, NnError> {
        let name = self.names.next("max_pooling2d");
        self.b.max_pool(&name, x, (3, 3), (2, 2), pad, PadFill::Ignore)
    }

    fn avg_pool(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let name = self.names.next("average_pooling2d");
        self.b.avg_pool(&name, x, (3, 3), (1, 1), Pad::Same, PadFill::Ignore)
    }

    fn concat(&mut self, name: Option<&str>, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let name = name.map_or_else(|| self.names.next("concatenate"), str::to_string);
        self.b.concat(&name, parts)
    }
}

fn inception_v3(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, NnError> {
    let mut n = Inception {
        b,
        names: AutoNames::default(),
    };
    let x = n.conv_bn(x, 32, (3, 3), 2, Pad::Valid)?;
    let x = n.conv_bn(x, 32, (3, 3), 1, Pad::Valid)?;
    let x = n.conv(x, 64, (3, 3))?;
    let x = n.max_pool(x, Pad::Valid)?;
    let x = n.conv_bn(x, 80, (1, 1), 1, Pad::Valid)?;
    let x = n.conv_bn(x, 192, (3, 3), 1, Pad::Valid)?;
    let mut x = n.max_pool(x, Pad::Valid)?;

    // mixed0..2: 35x35-style blocks.
    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = n.conv(x, 64, (1, 1))?;
        let b5 = n.conv(x, 48, (1, 1))?;
        let b5 = n.conv(b5, 64, (5, 5))?;
        let b3 = n.conv(x, 64, (1, 1))?;
        let b3 = n.conv(b3, 96, (3, 3))?;
        let b3 = n.conv(b3, 96, (3, 3))?;
        let bp = n.avg_pool(x)?;
        let bp = n.conv(bp, pool_filters, (1, 1))?;
        x = n.concat(Some(&format!("mixed{i}")), &[b1, b5, b3, bp])?;
    }

    // mixed3: grid reduction.
    let b3 = n.conv_bn(x, 384, (3, 3), 2, Pad::Valid)?;
    let bd = n.conv(x, 64, (1, 1))?;
    let bd = n.conv(bd, 96, (3, 3))?;
    let bd = n.conv_bn(bd, 96, (3, 3), 2, Pad::Valid)?;
    let bp = n.max_pool(x, Pad::Valid)?;
    x = n.concat(Some("mixed3"), &[b3, bd, bp])?;

    // mixed4..7: factorised 7x7 blocks.
    for (i, width) in [128, 160, 160, 192].into_iter().enumerate() {
        let b1 = n.conv(x, 192, (1, 1))?;
        let b7 = n.conv(x, width, (1, 1))?;
        let b7 = n.conv(b7, width, (1, 7))?;
        let b7 = n.conv(b7, 192, (7, 1))?;
        let bd = n.conv(x, width, (1, 1))?;
        let bd = n.conv(bd, width, (7, 1))?;
        let bd = n.conv(bd, width, (1, 7))?;
        let bd = n.conv(bd, width, (7, 1))?;
        let bd = n.conv(bd, 192, (1, 7))?;
        let bp = n.avg_pool(x)?;
        let bp = n.conv(bp, 192, (1, 1))?;
        x = n.concat(Some(&format!("mixed{}", i + 4)), &[b1, b7, bd, bp])?;
    }

    // mixed8: grid reduction.
    let b3 = n.conv(x, 192, (1, 1))?;
    let b3 = n.conv_bn(b3, 320, (3, 3), 2, Pad::Valid)?;
    let b7 = n.conv(x, 192, (1, 1))?;
    let b7 = n.conv(b7, 192, (1, 7))?;
    let b7 = n.conv(b7, 192, (7, 1))?;
    let b7 = n.conv_bn(b7, 192, (3, 3), 2, Pad::Valid)?;
    let bp = n.max_pool(x, Pad::Valid)?;
    x = n.concat(Some("mixed8"), &[b3, b7, bp])?;

    // mixed9..10: expanded filter banks.
    for i in 0..2 {
        let b1 = n.conv(x, 320, (1, 1))?;
        let b3 = n.conv(x, 384, (1, 1))?;
        let b3a = n.conv(b3, 384, (1, 3))?;
        let b3b = n.conv(b3, 384, (3, 1))?;
        let b3 = n.concat(Some(&format!("mixed9_{i}")), &[b3a, b3b])?;
        let bd = n.conv(x, 448, (1, 1))?;
        let bd = n.conv(bd, 384, (3, 3))?;
        let bda = n.conv(bd, 384, (1, 3))?;
        let bdb = n.conv(bd, 384, (3, 1))?;
        let bd = n.concat(None, &[bda, bdb])?;
        let bp = n.avg_pool(x)?;
        let bp = n.conv(bp, 192, (1, 1))?;
        x = n.concat(Some(&format!("mixed{}", 9 + i)), &[b1, b3, bd, bp])?;
    }
    Ok(x)
}
