//! Layer graphs: construction, inference, taped training passes and reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::init::{fans, Init};
use crate::kernels::{self, PadFill, Padding, Window};
use crate::param::{Grads, ParamId, ParamRole, ParamStore};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    /// `min(max(x, 0), 6)`.
    Relu6,
    Softmax,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Softmax => "softmax",
        }
    }

    fn apply(self, t: &mut Tensor) {
        match self {
            Activation::Linear => {}
            Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Relu6 => t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0)),
            Activation::Softmax => *t = kernels::softmax_rows(t),
        }
    }

    /// Gradient w.r.t. the pre-activation, given the post-activation output `y`.
    fn backward(self, y: &Tensor, dy: Tensor) -> Tensor {
        match self {
            Activation::Linear => dy,
            Activation::Relu => {
                let mut d = dy;
                for (g, v) in d.data_mut().iter_mut().zip(y.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                d
            }
            Activation::Relu6 => {
                let mut d = dy;
                for (g, v) in d.data_mut().iter_mut().zip(y.data()) {
                    if *v <= 0.0 || *v >= 6.0 {
                        *g = 0.0;
                    }
                }
                d
            }
            Activation::Softmax => kernels::softmax_backward(y, &dy),
        }
    }
}

/// Spatial padding requested when adding a windowed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Valid,
    Same,
    Explicit(Padding),
}

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Conv2d {
        kernel: ParamId,
        bias: Option<ParamId>,
        win: Window,
        filters: usize,
        depthwise: bool,
        activation: Activation,
    },
    BatchNorm {
        gamma: Option<ParamId>,
        beta: Option<ParamId>,
        mean: ParamId,
        var: ParamId,
        eps: f32,
    },
    Activation(Activation),
    MaxPool {
        win: Window,
        fill: PadFill,
    },
    AvgPool {
        win: Window,
        fill: PadFill,
    },
    Add,
    Concat,
    Flatten,
    Dense {
        kernel: ParamId,
        bias: Option<ParamId>,
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f32,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output shape without the batch dimension.
    pub shape: Vec<usize>,
}

impl Node {
    /// Keras class name of the layer this node stands for.
    pub fn kind(&self) -> &'static str {
        match &self.op {
            Op::Input => "InputLayer",
            Op::Conv2d { depthwise: true, .. } => "DepthwiseConv2D",
            Op::Conv2d { .. } => "Conv2D",
            Op::BatchNorm { .. } => "BatchNormalization",
            Op::Activation(_) => "Activation",
            Op::MaxPool { .. } => "MaxPooling2D",
            Op::AvgPool { .. } => "AveragePooling2D",
            Op::Add => "Add",
            Op::Concat => "Concatenate",
            Op::Flatten => "Flatten",
            Op::Dense { .. } => "Dense",
            Op::Dropout { .. } => "Dropout",
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.op {
            Op::Conv2d { kernel, bias, .. } | Op::Dense { kernel, bias, .. } => {
                std::iter::once(*kernel).chain(*bias).collect()
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => gamma.iter().chain(beta.iter()).copied().chain([*mean, *var]).collect(),
            _ => Vec::new(),
        }
    }

    fn activation(&self) -> Option<Activation> {
        match &self.op {
            Op::Conv2d { activation, .. } | Op::Dense { activation, .. } => Some(*activation),
            Op::Activation(a) => Some(*a),
            _ => None,
        }
    }
}

pub struct GraphBuilder {
    name: String,
    nodes: Vec<Node>,
    params: ParamStore,
    seed: u64,
}

impl GraphBuilder {
    /// Parameters are initialised from sub-seeds of `seed` keyed by parameter name,
    /// so a layer's initial weights do not depend on what else is in the graph.
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            nodes: Vec::new(),
            params: ParamStore::new(),
            seed,
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    fn param(&mut self, layer: &str, role: ParamRole, shape: Vec<usize>, init: Init) -> Result<ParamId, NnError> {
        let len = shape.iter().product();
        let mut rng = rng_for(self.seed, &format!("{layer}/{}", role.as_str()));
        let value = init.sample(len, &mut rng);
        self.params.add(layer, role, shape, value)
    }

    fn spatial(&self, x: NodeId) -> Result<(usize, usize, usize), NnError> {
        match self.shape(x) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(NnError::Shape(format!("expected HWC input, got {s:?}"))),
        }
    }

    fn window(
        &self,
        name: &str,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
    ) -> Result<(Window, usize, usize), NnError> {
        let (h, w, _) = self.spatial(x)?;
        let pad = match pad {
            Pad::Valid => Padding::NONE,
            Pad::Same => Padding::same((h, w), kernel, stride),
            Pad::Explicit(p) => p,
        };
        let win = Window { kernel, stride, pad };
        let (oh, ow) = win
            .output_hw(h, w)
            .ok_or_else(|| NnError::Shape(format!("{name}: window {kernel:?} does not fit {h}x{w}")))?;
        Ok((win, oh, ow))
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push("input_layer", Op::Input, Vec::new(), shape.to_vec())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
        use_bias: bool,
        activation: Activation,
    ) -> Result<NodeId, NnError> {
        let (_, _, cin) = self.spatial(x)?;
        let (win, oh, ow) = self.window(name, x, kernel, stride, pad)?;
        let kshape = vec![kernel.0, kernel.1, cin, filters];
        let (fan_in, fan_out) = fans(&kshape);
        let k = self.param(name, ParamRole::Kernel, kshape, Init::GlorotUniform { fan_in, fan_out })?;
        let b = if use_bias {
            Some(self.param(name, ParamRole::Bias, vec![filters], Init::Zeros)?)
        } else {
            None
        };
        let op = Op::Conv2d {
            kernel: k,
            bias: b,
            win,
            filters,
            depthwise: false,
            activation,
        };
        Ok(self.push(name, op, vec![x], vec![oh, ow, filters]))
    }

    pub fn depthwise_conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
        use_bias: bool,
    ) -> Result<NodeId, NnError> {
        let (_, _, c) = self.spatial(x)?;
        let (win, oh, ow) = self.window(name, x, kernel, stride, pad)?;
        let kshape = vec![kernel.0, kernel.1, c, 1];
        let (fan_in, fan_out) = fans(&kshape);
        let k = self.param(name, ParamRole::DepthwiseKernel, kshape, Init::GlorotUniform { fan_in, fan_out })?;
        let b = if use_bias {
            Some(self.param(name, ParamRole::Bias, vec![c], Init::Zeros)?)
        } else {
            None
        };
        let op = Op::Conv2d {
            kernel: k,
            bias: b,
            win,
            filters: c,
            depthwise: true,
            activation: Activation::Linear,
        };
        Ok(self.push(name, op, vec![x], vec![oh, ow, c]))
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId, eps: f32, center: bool, scale: bool) -> Result<NodeId, NnError> {
        let c = *self.shape(x).last().unwrap();
        let gamma = if scale {
            Some(self.param(name, ParamRole::Gamma, vec![c], Init::Ones)?)
        } else {
            None
        };
        let beta = if center {
            Some(self.param(name, ParamRole::Beta, vec![c], Init::Zeros)?)
        } else {
            None
        };
        let mean = self.param(name, ParamRole::MovingMean, vec![c], Init::Zeros)?;
        let var = self.param(name, ParamRole::MovingVariance, vec![c], Init::Ones)?;
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        };
        Ok(self.push(name, op, vec![x], shape))
    }

    pub fn activation(&mut self, name: &str, x: NodeId, act: Activation) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(name, Op::Activation(act), vec![x], shape)
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        x: NodeId,
        size: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
        fill: PadFill,
    ) -> Result<NodeId, NnError> {
        let (_, _, c) = self.spatial(x)?;
        let (win, oh, ow) = self.window(name, x, size, stride, pad)?;
        Ok(self.push(name, Op::MaxPool { win, fill }, vec![x], vec![oh, ow, c]))
    }

    pub fn avg_pool(
        &mut self,
        name: &str,
        x: NodeId,
        size: (usize, usize),
        stride: (usize, usize),
        pad: Pad,
        fill: PadFill,
    ) -> Result<NodeId, NnError> {
        let (_, _, c) = self.spatial(x)?;
        let (win, oh, ow) = self.window(name, x, size, stride, pad)?;
        Ok(self.push(name, Op::AvgPool { win, fill }, vec![x], vec![oh, ow, c]))
    }

    pub fn add(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId, NnError> {
        let shape = self.shape(inputs[0]).to_vec();
        if inputs.iter().any(|i| self.shape(*i) != shape.as_slice()) {
            return Err(NnError::Shape(format!("{name}: add operands differ in shape")));
        }
        Ok(self.push(name, Op::Add, inputs.to_vec(), shape))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId, NnError> {
        let (h, w, _) = self.spatial(inputs[0])?;
        let mut c = 0;
        for &i in inputs {
            let (ih, iw, ic) = self.spatial(i)?;
            if (ih, iw) != (h, w) {
                return Err(NnError::Shape(format!("{name}: concat operands differ spatially")));
            }
            c += ic;
        }
        Ok(self.push(name, Op::Concat, inputs.to_vec(), vec![h, w, c]))
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> NodeId {
        let len = self.shape(x).iter().product();
        self.push(name, Op::Flatten, vec![x], vec![len])
    }

    pub fn dense(&mut self, name: &str, x: NodeId, units: usize, activation: Activation) -> Result<NodeId, NnError> {
        let fan_in = match self.shape(x) {
            [n] => *n,
            s => return Err(NnError::Shape(format!("{name}: dense input must be flat, got {s:?}"))),
        };
        let k = self.param(
            name,
            ParamRole::Kernel,
            vec![fan_in, units],
            Init::GlorotUniform { fan_in, fan_out: units },
        )?;
        let b = self.param(name, ParamRole::Bias, vec![units], Init::Zeros)?;
        let op = Op::Dense {
            kernel: k,
            bias: Some(b),
            units,
            activation,
        };
        Ok(self.push(name, op, vec![x], vec![units]))
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f32) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(name, Op::Dropout { rate }, vec![x], shape)
    }

    pub fn build(self, output: NodeId) -> Graph {
        Graph {
            name: self.name,
            nodes: self.nodes,
            params: self.params,
            output,
        }
    }
}

/// Where backpropagation starts.
#[derive(Clone, Debug)]
pub enum GradSeed {
    /// Gradient of the loss w.r.t. the graph output.
    Output(Tensor),
    /// Gradient w.r.t. the pre-softmax logits of a softmax output layer
    /// (skips the softmax Jacobian, e.g. `p − y` for cross-entropy).
    Logits(Tensor),
}

/// Activations recorded by a training-mode forward pass.
pub struct Tape {
    values: Vec<Option<Tensor>>,
    masks: Vec<Option<Vec<f32>>>,
    logits: Option<Tensor>,
    output: NodeId,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values[self.output].as_ref().expect("output recorded")
    }

    /// Pre-softmax values of the output layer, when it ends in a softmax.
    pub fn logits(&self) -> Option<&Tensor> {
        self.logits.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    name: String,
    nodes: Vec<Node>,
    params: ParamStore,
    output: NodeId,
}

impl Graph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn output_node(&self) -> &Node {
        &self.nodes[self.output]
    }

    /// Parameter count of one node.
    pub fn node_param_count(&self, node: &Node) -> usize {
        node.param_ids().iter().map(|p| self.params.get(*p).len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape().len() != self.input_shape().len() + 1 || &x.shape()[1..] != self.input_shape() {
            return Err(NnError::Shape(format!(
                "{}: expected input [N, {:?}], got {:?}",
                self.name,
                self.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn p(&self, id: ParamId) -> &[f32] {
        self.params.value(id)
    }

    /// Compute one node. Returns the output and, for softmax layers, the logits.
    fn eval(&self, id: NodeId, ins: &[&Tensor], dropout: Option<(&mut ChaCha8Rng, &mut Option<Vec<f32>>)>) -> (Tensor, Option<Tensor>) {
        let node = &self.nodes[id];
        let mut out = match &node.op {
            Op::Input => ins[0].clone(),
            Op::Conv2d {
                kernel,
                bias,
                win,
                filters,
                depthwise,
                ..
            } => {
                let b = bias.map(|b| self.p(b));
                if *depthwise {
                    kernels::depthwise_conv2d(ins[0], self.p(*kernel), b, win)
                } else {
                    kernels::conv2d(ins[0], self.p(*kernel), b, win, *filters)
                }
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => kernels::batch_norm(
                ins[0],
                gamma.map(|g| self.p(g)),
                beta.map(|b| self.p(b)),
                self.p(*mean),
                self.p(*var),
                *eps,
            ),
            Op::Activation(_) => ins[0].clone(),
            Op::MaxPool { win, fill } => kernels::max_pool(ins[0], win, *fill),
            Op::AvgPool { win, fill } => kernels::avg_pool(ins[0], win, *fill),
            Op::Add => {
                let mut acc = ins[0].clone();
                for t in &ins[1..] {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                acc
            }
            Op::Concat => concat_channels(ins),
            Op::Flatten => {
                let n = ins[0].batch();
                let len = ins[0].row_len();
                ins[0].clone().reshape(&[n, len]).expect("flatten preserves length")
            }
            Op::Dense {
                kernel, bias, units, ..
            } => kernels::dense(ins[0], self.p(*kernel), bias.map(|b| self.p(b)), *units),
            Op::Dropout { rate } => {
                let mut out = ins[0].clone();
                if let Some((rng, slot)) = dropout {
                    if *rate > 0.0 {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f32> = (0..out.len())
                            .map(|_| if rng.random::<f32>() < *rate { 0.0 } else { keep })
                            .collect();
                        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        *slot = Some(mask);
                    }
                }
                out
            }
        };
        let mut logits = None;
        if let Some(act) = node.activation() {
            if act == Activation::Softmax {
                logits = Some(out.clone());
            }
            act.apply(&mut out);
        }
        (out, logits)
    }

    /// Inference pass: dropout disabled, intermediate activations released as soon as
    /// their last consumer has run.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut remaining = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                remaining[i] += 1;
            }
        }
        remaining[self.output] += 1;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in 0..=self.output {
            let node = &self.nodes[id];
            let out = if id == 0 {
                x.clone()
            } else {
                let ins: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|i| values[*i].as_ref().expect("input computed"))
                    .collect();
                self.eval(id, &ins, None).0
            };
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    values[i] = None;
                }
            }
            values[id] = Some(out);
        }
        Ok(values[self.output].take().expect("output computed"))
    }

    /// Training-mode pass that records every activation for [`Graph::backward`].
    pub fn forward_train(&self, x: Tensor, rng: &mut ChaCha8Rng) -> Result<Tape, NnError> {
        self.check_input(&x)?;
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        let mut masks: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut logits = None;
        values[0] = Some(x);
        for id in 1..=self.output {
            let node = &self.nodes[id];
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| values[*i].as_ref().expect("input computed"))
                .collect();
            let mut mask = None;
            let (out, lg) = self.eval(id, &ins, Some((rng, &mut mask)));
            masks[id] = mask;
            if id == self.output {
                logits = lg;
            }
            values[id] = Some(out);
        }
        Ok(Tape {
            values,
            masks,
            logits,
            output: self.output,
        })
    }

    /// Which nodes need a gradient: anything downstream of a trainable parameter,
    /// or of the input when the caller wants the input gradient.
    fn requires_grad(&self, want_input_grad: bool) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let own = match node.op {
                Op::Input => want_input_grad,
                _ => node.param_ids().iter().any(|p| self.params.get(*p).trainable),
            };
            req[id] = own || node.inputs.iter().any(|i| req[*i]);
        }
        req
    }

    /// Reverse pass. Parameter gradients are accumulated into `grads`; the gradient
    /// w.r.t. the graph input is returned when `want_input_grad`.
    pub fn backward(
        &self,
        tape: Tape,
        seed: GradSeed,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>, NnError> {
        let Tape { mut values, masks, .. } = tape;
        let req = self.requires_grad(want_input_grad);
        let mut dys: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let (seed_grad, seed_is_logits) = match seed {
            GradSeed::Output(g) => (g, false),
            GradSeed::Logits(g) => {
                if self.output_node().activation() != Some(Activation::Softmax) {
                    return Err(NnError::Graph("logit seed requires a softmax output layer".into()));
                }
                (g, true)
            }
        };
        if seed_grad.shape() != values[self.output].as_ref().unwrap().shape() {
            return Err(NnError::Shape("seed gradient does not match the output shape".into()));
        }
        dys[self.output] = Some(seed_grad);
        let mut input_grad = None;

        for id in (0..=self.output).rev() {
            let Some(dy) = dys[id].take() else {
                values[id] = None;
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Input = node.op {
                if want_input_grad {
                    input_grad = Some(dy);
                }
                break;
            }
            if !req[id] {
                values[id] = None;
                continue;
            }
            let skip_act = id == self.output && seed_is_logits;
            let dz = match node.activation() {
                Some(act) if !skip_act => act.backward(values[id].as_ref().unwrap(), dy),
                _ => dy,
            };
            let need: Vec<bool> = node.inputs.iter().map(|i| req[*i]).collect();
            let input_grads = self.node_backward(node, &values, &masks[id], dz, &need, grads);
            for (k, g) in input_grads.into_iter().enumerate() {
                if let Some(g) = g {
                    let slot = &mut dys[node.inputs[k]];
                    match slot {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
            values[id] = None;
        }
        Ok(input_grad)
    }

    fn node_backward(
        &self,
        node: &Node,
        values: &[Option<Tensor>],
        mask: &Option<Vec<f32>>,
        dz: Tensor,
        need: &[bool],
        grads: &mut Grads,
    ) -> Vec<Option<Tensor>> {
        let input = |k: usize| values[node.inputs[k]].as_ref().expect("input activation recorded");
        match &node.op {
            Op::Input => vec![],
            Op::Conv2d {
                kernel,
                bias,
                win,
                depthwise,
                ..
            } => {
                let mut dk = grads.take(*kernel);
                let mut db = bias.and_then(|b| grads.take(b));
                let dx = if *depthwise {
                    kernels::depthwise_conv2d_backward(
                        input(0),
                        self.p(*kernel),
                        win,
                        &dz,
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                        need[0],
                    )
                } else {
                    kernels::conv2d_backward(
                        input(0),
                        self.p(*kernel),
                        win,
                        &dz,
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                        need[0],
                    )
                };
                grads.put(*kernel, dk);
                if let Some(b) = bias {
                    grads.put(*b, db);
                }
                vec![dx]
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let mut dg = gamma.and_then(|g| grads.take(g));
                let mut dbeta = beta.and_then(|b| grads.take(b));
                let dx = kernels::batch_norm_backward(
                    input(0),
                    gamma.map(|g| self.p(g)),
                    self.p(*mean),
                    self.p(*var),
                    *eps,
                    &dz,
                    dg.as_deref_mut(),
                    dbeta.as_deref_mut(),
                    need[0],
                );
                if let Some(g) = gamma {
                    grads.put(*g, dg);
                }
                if let Some(b) = beta {
                    grads.put(*b, dbeta);
                }
                vec![dx]
            }
            Op::Activation(_) => vec![Some(dz)],
            Op::MaxPool { win, fill } => vec![need[0].then(|| kernels::max_pool_backward(input(0), win, *fill, &dz))],
            Op::AvgPool { win, fill } => {
                vec![need[0].then(|| kernels::avg_pool_backward(input(0).shape(), win, *fill, &dz))]
            }
            Op::Add => need.iter().map(|n| n.then(|| dz.clone())).collect(),
            Op::Concat => {
                let widths: Vec<usize> = node.inputs.iter().map(|i| *self.nodes[*i].shape.last().unwrap()).collect();
                split_channels(&dz, &widths)
                    .into_iter()
                    .zip(need)
                    .map(|(g, n)| n.then_some(g))
                    .collect()
            }
            Op::Flatten => {
                let shape = input(0).shape().to_vec();
                vec![need[0].then(|| dz.reshape(&shape).expect("flatten preserves length"))]
            }
            Op::Dense { kernel, bias, .. } => {
                let mut dk = grads.take(*kernel);
                let mut db = bias.and_then(|b| grads.take(b));
                let dx = kernels::dense_backward(input(0), self.p(*kernel), &dz, dk.as_deref_mut(), db.as_deref_mut(), need[0]);
                grads.put(*kernel, dk);
                if let Some(b) = bias {
                    grads.put(*b, db);
                }
                vec![dx]
            }
            Op::Dropout { .. } => {
                let mut dx = dz;
                if let Some(m) = mask {
                    for (g, mv) in dx.data_mut().iter_mut().zip(m) {
                        *g *= mv;
                    }
                }
                vec![Some(dx)]
            }
        }
    }
}

fn concat_channels(ins: &[&Tensor]) -> Tensor {
    let (n, h, w, _) = ins[0].dims4();
    let widths: Vec<usize> = ins.iter().map(|t| t.dims4().3).collect();
    let c: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[n, h, w, c]);
    let od = out.data_mut();
    for px in 0..n * h * w {
        let mut off = px * c;
        for (t, &cw) in ins.iter().zip(&widths) {
            od[off..off + cw].copy_from_slice(&t.data()[px * cw..(px + 1) * cw]);
            off += cw;
        }
    }
    out
}

fn split_channels(t: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let (n, h, w, c) = t.dims4();
    let mut parts: Vec<Tensor> = widths.iter().map(|cw| Tensor::zeros(&[n, h, w, *cw])).collect();
    for px in 0..n * h * w {
        let mut off = px * c;
        for (p, &cw) in parts.iter_mut().zip(widths) {
            p.data_mut()[px * cw..(px + 1) * cw].copy_from_slice(&t.data()[off..off + cw]);
            off += cw;
        }
    }
    parts
}
