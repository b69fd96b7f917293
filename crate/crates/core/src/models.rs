//! CIFAR-adapted ResNet-18 and MobileNetV2 as explicit layer graphs.
//!
//! A [`ModelGraph`] is a topologically ordered list of [`Node`]s. Each node
//! reads one or two earlier values ([`Source`]) and produces one tensor.
//! Parameters and BN running statistics live in flat tables on the graph and
//! nodes refer to them by index, which keeps the optimizer and checkpoint
//! code oblivious to the architecture.
//!
//! Attention sits on the residual branch of every block, after the last BN
//! and before the shortcut addition. With `AttentionKind::None` no attention
//! nodes are emitted at all.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    conv_attention_backward, conv_attention_forward, se_backward, se_bottleneck_width, se_forward, AttentionError,
    AttentionKind, AttentionSpec, ConvAttentionParams, LcaFilters, SeParams,
};
use crate::tensor::{
    add_forward, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, global_avg_pool,
    global_avg_pool_backward, linear_backward, linear_forward, relu6_backward, relu6_forward, relu_backward,
    relu_forward, ConvSpec, Tensor, TensorError, BN_EPSILON, BN_MOMENTUM,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {found:?} does not match model input (N, {expected:?})")]
    InputShape { expected: [usize; 3], found: Vec<usize> },
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T> = core::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ResNet18,
    MobileNetV2,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::ResNet18, Arch::MobileNetV2];

    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet18 => "resnet18",
            Arch::MobileNetV2 => "mobilenetv2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for Arch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub attention: AttentionSpec,
    pub num_classes: usize,
    pub width_mult: f64,
}

impl ModelConfig {
    pub fn new(arch: Arch, attention: AttentionSpec) -> Self {
        Self {
            arch,
            attention,
            num_classes: 10,
            width_mult: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(ModelError::InvalidConfig("num_classes must be at least 1".into()));
        }
        if !(self.width_mult > 0.0) || !self.width_mult.is_finite() {
            return Err(ModelError::InvalidConfig(format!("width_mult must be positive, got {}", self.width_mult)));
        }
        self.attention.validate()?;
        Ok(())
    }
}

/// CIFAR input: 3 x 32 x 32.
pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

/// What a parameter is, which fixes its initializer and whether weight
/// decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    ConvWeight { fan_in: usize },
    ConvBias { fan_in: usize },
    BnGamma,
    BnBeta,
    LinearWeight { fan_in: usize },
    LinearBias { fan_in: usize },
    AttentionFc { fan_in: usize },
    AttentionTaps { taps: usize },
}

impl ParamRole {
    /// BN affine parameters and biases are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamRole::ConvWeight { .. }
                | ParamRole::LinearWeight { .. }
                | ParamRole::AttentionFc { .. }
                | ParamRole::AttentionTaps { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Non-learnable state (BN running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionParams {
    Se { fc1: usize, fc2: usize },
    Conv { taps: usize, groups: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv {
        spec: ConvSpec,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    Relu6,
    Attention {
        kind: AttentionKind,
        channels: usize,
        params: AttentionParams,
    },
    Add,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        weight: usize,
        bias: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::Attention { kind, .. } => kind.name(),
            Op::Add => "add",
            Op::GlobalAvgPool => "gap",
            Op::Linear { .. } => "linear",
        }
    }

    /// Parameter indices owned by this node.
    pub fn param_ids(&self) -> Vec<usize> {
        match *self {
            Op::Conv { weight, bias, .. } => core::iter::once(weight).chain(bias).collect(),
            Op::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Op::Attention { params: AttentionParams::Se { fc1, fc2 }, .. } => vec![fc1, fc2],
            Op::Attention { params: AttentionParams::Conv { taps, .. }, .. } => vec![taps],
            Op::Linear { weight, bias, .. } => vec![weight, bias],
            Op::Relu | Op::Relu6 | Op::Add | Op::GlobalAvgPool => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<Source>,
}

#[derive(Debug, Clone)]
struct Trace {
    input: Tensor,
    outputs: Vec<Tensor>,
    training: bool,
}

/// Parameter and buffer values, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ModelConfig,
    input_shape: [usize; 3],
    nodes: Vec<Node>,
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    seed: Option<u64>,
    bn_momentum: f64,
    bn_epsilon: f64,
    cache: Option<Trace>,
}

// ---------------------------------------------------------------------------
// Layouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetStage {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetLayout {
    pub stem_channels: usize,
    pub stages: Vec<ResNetStage>,
}

impl ResNetLayout {
    /// 3x3 stride-1 stem, no max-pool, four stages of two basic blocks.
    pub fn resnet18_cifar() -> Self {
        let stage = |channels, stride| ResNetStage {
            channels,
            blocks: 2,
            stride,
        };
        Self {
            stem_channels: 64,
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvertedResidualSetting {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MobileNetLayout {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub settings: Vec<InvertedResidualSetting>,
    pub last_channels: usize,
}

/// Rounds `value` to the nearest multiple of `divisor` without dropping
/// more than 10% below it.
pub fn make_divisible(value: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut rounded = ((value + d / 2.0) as usize / divisor * divisor).max(divisor);
    if (rounded as f64) < 0.9 * value {
        rounded += divisor;
    }
    rounded
}

impl MobileNetLayout {
    /// Standard `(t, c, n)` table with stem stride 1 and the second stage's
    /// stride reduced to 1, so 32x32 inputs reach 4x4 before pooling.
    pub fn cifar(width_mult: f64) -> Self {
        const TABLE: [(usize, usize, usize, usize); 7] = [
            (1, 16, 1, 1),
            (6, 24, 2, 1),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        Self {
            stem_channels: make_divisible(32.0 * width_mult, 8),
            stem_stride: 1,
            settings: TABLE
                .iter()
                .map(|&(t, c, n, s)| InvertedResidualSetting {
                    expansion: t,
                    channels: make_divisible(c as f64 * width_mult, 8),
                    repeats: n,
                    stride: s,
                })
                .collect(),
            last_channels: make_divisible(1280.0 * width_mult.max(1.0), 8),
        }
    }
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

struct GraphBuilder {
    attention: AttentionSpec,
    input_shape: [usize; 3],
    nodes: Vec<Node>,
    dims: Vec<[usize; 3]>,
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl GraphBuilder {
    fn new(attention: AttentionSpec, input_shape: [usize; 3]) -> Self {
        Self {
            attention,
            input_shape,
            nodes: Vec::new(),
            dims: Vec::new(),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn dims(&self, src: Source) -> [usize; 3] {
        match src {
            Source::Input => self.input_shape,
            Source::Node(i) => self.dims[i],
        }
    }

    fn param(&mut self, name: String, role: ParamRole, value: Tensor) -> usize {
        self.params.push(Parameter { name, role, value });
        self.params.len() - 1
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<Source>, dims: [usize; 3]) -> Source {
        self.nodes.push(Node { name, op, inputs });
        self.dims.push(dims);
        Source::Node(self.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, src: Source, out: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Result<Source> {
        let [c, h, w] = self.dims(src);
        let spec = ConvSpec::square(c, out, kernel, stride, padding).with_groups(groups);
        spec.validate()?;
        let (ho, wo) = spec.output_hw(h, w)?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = self.param(format!("{name}.weight"), ParamRole::ConvWeight { fan_in }, Tensor::zeros(&shape));
        Ok(self.push(name.to_string(), Op::Conv { spec, weight, bias: None }, vec![src], [out, ho, wo]))
    }

    fn bn(&mut self, name: &str, src: Source) -> Source {
        let d = self.dims(src);
        let c = d[0];
        let gamma = self.param(format!("{name}.weight"), ParamRole::BnGamma, Tensor::full(&[c], 1.0));
        let beta = self.param(format!("{name}.bias"), ParamRole::BnBeta, Tensor::zeros(&[c]));
        self.buffers.push(Buffer {
            name: format!("{name}.running_mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(Buffer {
            name: format!("{name}.running_var"),
            value: Tensor::full(&[c], 1.0),
        });
        let var = self.buffers.len() - 1;
        let op = Op::BatchNorm {
            channels: c,
            gamma,
            beta,
            mean: var - 1,
            var,
        };
        self.push(name.to_string(), op, vec![src], d)
    }

    fn unary(&mut self, name: &str, op: Op, src: Source) -> Source {
        let d = self.dims(src);
        self.push(name.to_string(), op, vec![src], d)
    }

    fn attention(&mut self, name: &str, src: Source) -> Result<Source> {
        let spec = self.attention;
        if spec.kind == AttentionKind::None {
            return Ok(src);
        }
        let d = self.dims(src);
        let c = d[0];
        spec.validate_for(c)?;
        let params = match spec.kind {
            AttentionKind::Se => {
                let width = se_bottleneck_width(c, spec.reduction);
                let fc1 = self.param(format!("{name}.fc1.weight"), ParamRole::AttentionFc { fan_in: c }, Tensor::zeros(&[width, c]));
                let fc2 = self.param(format!("{name}.fc2.weight"), ParamRole::AttentionFc { fan_in: width }, Tensor::zeros(&[c, width]));
                AttentionParams::Se { fc1, fc2 }
            }
            AttentionKind::Eca | AttentionKind::Lca => {
                let k = spec.kernel_size(c)?;
                let (groups, shape) = match (spec.kind, spec.lca_filters) {
                    (AttentionKind::Eca, _) => (1, vec![k]),
                    (_, LcaFilters::Shared) => (spec.groups, vec![k]),
                    (_, LcaFilters::PerGroup) => (spec.groups, vec![spec.groups, k]),
                };
                let taps = self.param(format!("{name}.conv.weight"), ParamRole::AttentionTaps { taps: k }, Tensor::zeros(&shape));
                AttentionParams::Conv { taps, groups }
            }
            AttentionKind::None => unreachable!(),
        };
        let op = Op::Attention {
            kind: spec.kind,
            channels: c,
            params,
        };
        Ok(self.push(name.to_string(), op, vec![src], d))
    }

    fn add(&mut self, name: &str, a: Source, b: Source) -> Result<Source> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(ModelError::InvalidConfig(format!("{name}: shortcut joins {:?} and {:?}", da, db)));
        }
        Ok(self.push(name.to_string(), Op::Add, vec![a, b], da))
    }

    fn gap(&mut self, name: &str, src: Source) -> Source {
        let c = self.dims(src)[0];
        self.push(name.to_string(), Op::GlobalAvgPool, vec![src], [c, 1, 1])
    }

    fn linear(&mut self, name: &str, src: Source, out: usize) -> Source {
        let cin = self.dims(src)[0];
        let weight = self.param(format!("{name}.weight"), ParamRole::LinearWeight { fan_in: cin }, Tensor::zeros(&[out, cin]));
        let bias = self.param(format!("{name}.bias"), ParamRole::LinearBias { fan_in: cin }, Tensor::zeros(&[out]));
        let op = Op::Linear {
            in_features: cin,
            out_features: out,
            weight,
            bias,
        };
        self.push(name.to_string(), op, vec![src], [out, 1, 1])
    }

    fn finish(self, config: ModelConfig) -> ModelGraph {
        ModelGraph {
            config,
            input_shape: self.input_shape,
            nodes: self.nodes,
            params: self.params,
            buffers: self.buffers,
            seed: None,
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
            cache: None,
        }
    }
}

fn check_input_shape(input_shape: [usize; 3]) -> Result<()> {
    if input_shape.iter().any(|&d| d == 0) {
        return Err(ModelError::InvalidConfig(format!("input shape {:?} has an empty dimension", input_shape)));
    }
    Ok(())
}

/// ResNet with post-activation basic blocks
/// (conv-BN-ReLU-conv-BN, attention, add, ReLU) and 1x1 projection shortcuts.
pub fn build_resnet(layout: &ResNetLayout, config: ModelConfig, input_shape: [usize; 3]) -> Result<ModelGraph> {
    config.validate()?;
    check_input_shape(input_shape)?;
    if layout.stages.is_empty() || layout.stages.iter().any(|s| s.blocks == 0 || s.stride == 0) {
        return Err(ModelError::InvalidConfig("every ResNet stage needs at least one block and stride >= 1".into()));
    }
    let mut b = GraphBuilder::new(config.attention, input_shape);
    let x = b.conv("conv1", Source::Input, layout.stem_channels, 3, 1, 1, 1)?;
    let x = b.bn("bn1", x);
    let mut x = b.unary("relu", Op::Relu, x);
    let mut cin = layout.stem_channels;
    for (si, stage) in layout.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let p = format!("layer{}.{}", si + 1, bi);
            let stride = if bi == 0 { stage.stride } else { 1 };
            let out = stage.channels;
            let h = b.conv(&format!("{p}.conv1"), x, out, 3, stride, 1, 1)?;
            let h = b.bn(&format!("{p}.bn1"), h);
            let h = b.unary(&format!("{p}.relu1"), Op::Relu, h);
            let h = b.conv(&format!("{p}.conv2"), h, out, 3, 1, 1, 1)?;
            let h = b.bn(&format!("{p}.bn2"), h);
            let h = b.attention(&format!("{p}.attn"), h)?;
            let shortcut = if stride != 1 || cin != out {
                let s = b.conv(&format!("{p}.shortcut.0"), x, out, 1, stride, 0, 1)?;
                b.bn(&format!("{p}.shortcut.1"), s)
            } else {
                x
            };
            let s = b.add(&format!("{p}.add"), h, shortcut)?;
            x = b.unary(&format!("{p}.relu2"), Op::Relu, s);
            cin = out;
        }
    }
    let x = b.gap("avgpool", x);
    b.linear("fc", x, config.num_classes);
    Ok(b.finish(config))
}

/// MobileNetV2 with inverted residual blocks
/// (1x1 expand-BN-ReLU6, 3x3 depthwise-BN-ReLU6, 1x1 project-BN, attention,
/// identity add when stride is 1 and widths match).
pub fn build_mobilenet(layout: &MobileNetLayout, config: ModelConfig, input_shape: [usize; 3]) -> Result<ModelGraph> {
    config.validate()?;
    check_input_shape(input_shape)?;
    let mut b = GraphBuilder::new(config.attention, input_shape);
    let x = b.conv("features.0.conv", Source::Input, layout.stem_channels, 3, layout.stem_stride, 1, 1)?;
    let x = b.bn("features.0.bn", x);
    let mut x = b.unary("features.0.relu6", Op::Relu6, x);
    let mut cin = layout.stem_channels;
    let mut index = 1;
    for setting in &layout.settings {
        if setting.expansion == 0 || setting.stride == 0 {
            return Err(ModelError::InvalidConfig("expansion and stride must be at least 1".into()));
        }
        for r in 0..setting.repeats {
            let p = format!("features.{index}");
            let stride = if r == 0 { setting.stride } else { 1 };
            let hidden = cin * setting.expansion;
            let mut h = x;
            if setting.expansion != 1 {
                h = b.conv(&format!("{p}.expand"), h, hidden, 1, 1, 0, 1)?;
                h = b.bn(&format!("{p}.expand_bn"), h);
                h = b.unary(&format!("{p}.expand_relu6"), Op::Relu6, h);
            }
            h = b.conv(&format!("{p}.dw"), h, hidden, 3, stride, 1, hidden)?;
            h = b.bn(&format!("{p}.dw_bn"), h);
            h = b.unary(&format!("{p}.dw_relu6"), Op::Relu6, h);
            h = b.conv(&format!("{p}.project"), h, setting.channels, 1, 1, 0, 1)?;
            h = b.bn(&format!("{p}.project_bn"), h);
            h = b.attention(&format!("{p}.attn"), h)?;
            x = if stride == 1 && cin == setting.channels {
                b.add(&format!("{p}.add"), h, x)?
            } else {
                h
            };
            cin = setting.channels;
            index += 1;
        }
    }
    let x = b.conv(&format!("features.{index}.conv"), x, layout.last_channels, 1, 1, 0, 1)?;
    let x = b.bn(&format!("features.{index}.bn"), x);
    let x = b.unary(&format!("features.{index}.relu6"), Op::Relu6, x);
    let x = b.gap("avgpool", x);
    b.linear("classifier", x, config.num_classes);
    Ok(b.finish(config))
}

pub fn build_resnet18_cifar(config: ModelConfig) -> Result<ModelGraph> {
    if config.arch != Arch::ResNet18 {
        return Err(ModelError::InvalidConfig(format!("expected arch resnet18, got {}", config.arch)));
    }
    if config.width_mult != 1.0 {
        return Err(ModelError::InvalidConfig("ResNet-18 supports width_mult 1.0 only".into()));
    }
    build_resnet(&ResNetLayout::resnet18_cifar(), config, CIFAR_INPUT)
}

pub fn build_mobilenetv2_cifar(config: ModelConfig) -> Result<ModelGraph> {
    if config.arch != Arch::MobileNetV2 {
        return Err(ModelError::InvalidConfig(format!("expected arch mobilenetv2, got {}", config.arch)));
    }
    config.validate()?;
    build_mobilenet(&MobileNetLayout::cifar(config.width_mult), config, CIFAR_INPUT)
}

/// Builds the CIFAR model named by `config.arch`.
pub fn build(config: ModelConfig) -> Result<ModelGraph> {
    match config.arch {
        Arch::ResNet18 => build_resnet18_cifar(config),
        Arch::MobileNetV2 => build_mobilenetv2_cifar(config),
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct NodeOutput {
    value: Tensor,
    running: Option<(usize, Tensor, usize, Tensor)>,
}

fn value<'a>(src: Source, input: &'a Tensor, outputs: &'a [Option<Tensor>]) -> &'a Tensor {
    match src {
        Source::Input => input,
        Source::Node(i) => outputs[i].as_ref().expect("value consumed before last use"),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_node(
    node: &Node,
    inputs: &[&Tensor],
    params: &[Parameter],
    buffers: &[Buffer],
    training: bool,
    momentum: f64,
    epsilon: f64,
) -> Result<NodeOutput> {
    let p = |i: usize| &params[i].value;
    let value = match node.op {
        Op::Conv { ref spec, weight, bias } => conv2d_forward(inputs[0], p(weight), bias.map(p), spec)?,
        Op::BatchNorm { gamma, beta, mean, var, .. } => {
            let mut rm = buffers[mean].value.clone();
            let mut rv = buffers[var].value.clone();
            let y = batchnorm_forward(inputs[0], p(gamma), p(beta), &mut rm, &mut rv, training, momentum, epsilon)?;
            return Ok(NodeOutput {
                value: y,
                running: training.then_some((mean, rm, var, rv)),
            });
        }
        Op::Relu => relu_forward(inputs[0]),
        Op::Relu6 => relu6_forward(inputs[0]),
        Op::Attention { params: AttentionParams::Se { fc1, fc2 }, .. } => {
            let se = SeParams {
                fc1: p(fc1).clone(),
                fc2: p(fc2).clone(),
            };
            se_forward(inputs[0], &se)?
        }
        Op::Attention { params: AttentionParams::Conv { taps, groups }, .. } => {
            conv_attention_forward(inputs[0], &ConvAttentionParams { taps: p(taps).clone(), groups })?
        }
        Op::Add => add_forward(inputs[0], inputs[1])?,
        Op::GlobalAvgPool => {
            let (n, c, _, _) = inputs[0].dims4("global_avg_pool")?;
            global_avg_pool(inputs[0])?.reshape(&[n, c, 1, 1])?
        }
        Op::Linear { in_features, weight, bias, .. } => {
            let n = inputs[0].shape()[0];
            let flat = inputs[0].clone().reshape(&[n, in_features])?;
            linear_forward(&flat, p(weight), Some(p(bias)))?
        }
    };
    Ok(NodeOutput { value, running: None })
}

impl ModelGraph {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Per-sample input shape `(C, H, W)`.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn attention_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Attention { .. })).count()
    }

    /// Residual links as `(shortcut source, add node index)`.
    pub fn shortcuts(&self) -> Vec<(Source, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Add)
            .map(|(i, n)| (n.inputs[1], i))
            .collect()
    }

    /// Static per-node output shapes for a batch of `batch` samples.
    pub fn output_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        let input = [batch, self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        for node in &self.nodes {
            let src = match node.inputs[0] {
                Source::Input => input.to_vec(),
                Source::Node(i) => shapes[i].clone(),
            };
            let shape = match node.op {
                Op::Conv { ref spec, .. } => {
                    let (ho, wo) = spec.output_hw(src[2], src[3]).expect("validated at build time");
                    vec![batch, spec.out_channels, ho, wo]
                }
                Op::GlobalAvgPool => vec![batch, src[1], 1, 1],
                Op::Linear { out_features, .. } => vec![batch, out_features],
                _ => src,
            };
            shapes.push(shape);
        }
        shapes
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.input_shape || s[0] == 0 {
            return Err(ModelError::InputShape {
                expected: self.input_shape,
                found: s.to_vec(),
            });
        }
        Ok(())
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![0; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for src in &node.inputs {
                if let Source::Node(j) = *src {
                    last[j] = i;
                }
            }
        }
        last
    }

    /// Eval-mode forward that keeps only live activations. Takes `&self`,
    /// so concurrent inference over a shared graph is fine.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let last = self.last_uses();
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| value(s, input, &outputs)).collect();
            let out = eval_node(node, &inputs, &self.params, &self.buffers, false, self.bn_momentum, self.bn_epsilon)?;
            drop(inputs);
            outputs[i] = Some(out.value);
            for src in &node.inputs {
                if let Source::Node(j) = *src {
                    if last[j] == i {
                        outputs[j] = None;
                    }
                }
            }
        }
        Ok(outputs.pop().flatten().expect("graph has an output node"))
    }

    /// Forward pass that caches every activation for [`ModelGraph::backward`].
    /// Training mode uses batch statistics and updates BN running estimates.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        self.check_input(input)?;
        self.cache = None;
        let mut outputs: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| value(s, input, &outputs)).collect();
            let out = eval_node(node, &inputs, &self.params, &self.buffers, training, self.bn_momentum, self.bn_epsilon)?;
            if let Some((mi, m, vi, v)) = out.running {
                self.buffers[mi].value = m;
                self.buffers[vi].value = v;
            }
            outputs.push(Some(out.value));
        }
        let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("all values kept")).collect();
        let logits = outputs.last().expect("graph has an output node").clone();
        self.cache = Some(Trace {
            input: input.clone(),
            outputs,
            training,
        });
        Ok(logits)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Backpropagates `grad_logits` through the cached forward pass.
    /// Returns one gradient per parameter, in [`ModelGraph::params`] order.
    pub fn backward(&self, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let trace = self.cache.as_ref().ok_or(ModelError::MissingCache)?;
        let out_shape = trace.outputs.last().map(|t| t.shape().to_vec()).unwrap_or_default();
        if grad_logits.shape() != out_shape.as_slice() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!("grad {:?} vs logits {:?}", grad_logits.shape(), out_shape),
            }));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut pending: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        *pending.last_mut().expect("graph has an output node") = Some(grad_logits.clone());

        let val = |s: Source| match s {
            Source::Input => &trace.input,
            Source::Node(i) => &trace.outputs[i],
        };
        let p = |i: usize| &self.params[i].value;

        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            let x = val(node.inputs[0]);
            let input_grads: Vec<Tensor> = match node.op {
                Op::Conv { ref spec, weight, bias } => {
                    let cg = conv2d_backward(x, p(weight), spec, &g)?;
                    grads[weight].add_assign(&cg.weights)?;
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        grads[b].add_assign(&gb)?;
                    }
                    vec![cg.input]
                }
                Op::BatchNorm { gamma, beta, mean, var, .. } => {
                    let bg = batchnorm_backward(
                        x,
                        p(gamma),
                        &self.buffers[mean].value,
                        &self.buffers[var].value,
                        trace.training,
                        self.bn_epsilon,
                        &g,
                    )?;
                    grads[gamma].add_assign(&bg.gamma)?;
                    grads[beta].add_assign(&bg.beta)?;
                    vec![bg.input]
                }
                Op::Relu => vec![relu_backward(x, &g)?],
                Op::Relu6 => vec![relu6_backward(x, &g)?],
                Op::Attention { params: AttentionParams::Se { fc1, fc2 }, .. } => {
                    let se = SeParams {
                        fc1: p(fc1).clone(),
                        fc2: p(fc2).clone(),
                    };
                    let sg = se_backward(x, &se, &g)?;
                    grads[fc1].add_assign(&sg.fc1)?;
                    grads[fc2].add_assign(&sg.fc2)?;
                    vec![sg.input]
                }
                Op::Attention { params: AttentionParams::Conv { taps, groups }, .. } => {
                    let params = ConvAttentionParams { taps: p(taps).clone(), groups };
                    let (gx, gt) = conv_attention_backward(x, &params, &g)?;
                    grads[taps].add_assign(&gt)?;
                    vec![gx]
                }
                Op::Add => vec![g.clone(), g],
                Op::GlobalAvgPool => {
                    let (n, c, _, _) = g.dims4("global_avg_pool_backward")?;
                    vec![global_avg_pool_backward(x.shape(), &g.reshape(&[n, c])?)?]
                }
                Op::Linear { in_features, weight, bias, .. } => {
                    let n = x.shape()[0];
                    let flat = x.clone().reshape(&[n, in_features])?;
                    let lg = linear_backward(&flat, p(weight), &g)?;
                    grads[weight].add_assign(&lg.weights)?;
                    grads[bias].add_assign(&lg.bias)?;
                    vec![lg.input.reshape(x.shape())?]
                }
            };
            for (src, gin) in node.inputs.iter().zip(input_grads) {
                if let Source::Node(j) = *src {
                    match &mut pending[j] {
                        Some(acc) => acc.add_assign(&gin)?,
                        slot @ None => *slot = Some(gin),
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Seeded initialization: He-normal (fan-in) convolutions, BN `γ=1, β=0`,
    /// fan-in uniform `(-1/√fan_in, 1/√fan_in)` for linear and SE layers,
    /// uniform `(-1/√k, 1/√k)` for 1D attention taps. Running statistics are
    /// reset to `(0, 1)`.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let uniform = |rng: &mut ChaCha8Rng, bound: f64| rng.gen_range(-bound..bound);
            match p.role {
                ParamRole::ConvWeight { fan_in } => {
                    let std = libm::sqrt(2.0 / fan_in as f64);
                    for v in p.value.data_mut() {
                        *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
                ParamRole::BnGamma => p.value.data_mut().fill(1.0),
                ParamRole::BnBeta => p.value.data_mut().fill(0.0),
                ParamRole::ConvBias { fan_in }
                | ParamRole::LinearWeight { fan_in }
                | ParamRole::LinearBias { fan_in }
                | ParamRole::AttentionFc { fan_in } => {
                    let bound = 1.0 / libm::sqrt(fan_in as f64);
                    for v in p.value.data_mut() {
                        *v = uniform(&mut rng, bound);
                    }
                }
                ParamRole::AttentionTaps { taps } => {
                    let bound = 1.0 / libm::sqrt(taps as f64);
                    for v in p.value.data_mut() {
                        *v = uniform(&mut rng, bound);
                    }
                }
            }
        }
        for b in &mut self.buffers {
            let fill = if b.name.ends_with("running_var") { 1.0 } else { 0.0 };
            b.value.data_mut().fill(fill);
        }
        self.seed = Some(seed);
        self.cache = None;
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            params: self.params.iter().map(|p| p.value.clone()).collect(),
            buffers: self.buffers.iter().map(|b| b.value.clone()).collect(),
        }
    }

    pub fn load_state(&mut self, state: ModelState) -> Result<()> {
        if state.params.len() != self.params.len() || state.buffers.len() != self.buffers.len() {
            return Err(ModelError::StateMismatch(format!(
                "expected {} params / {} buffers, got {} / {}",
                self.params.len(),
                self.buffers.len(),
                state.params.len(),
                state.buffers.len()
            )));
        }
        let targets = self
            .params
            .iter()
            .map(|p| (&p.name, p.value.shape()))
            .chain(self.buffers.iter().map(|b| (&b.name, b.value.shape())));
        for ((name, shape), t) in targets.zip(state.params.iter().chain(&state.buffers)) {
            if shape != t.shape() {
                return Err(ModelError::StateMismatch(format!("{name}: expected {:?}, got {:?}", shape, t.shape())));
            }
        }
        for (p, v) in self.params.iter_mut().zip(state.params) {
            p.value = v;
        }
        for (b, v) in self.buffers.iter_mut().zip(state.buffers) {
            b.value = v;
        }
        self.cache = None;
        Ok(())
    }

    /// Records the seed that produced externally loaded weights.
    pub fn set_seed(&mut self, seed: Option<u64>) {
        self.seed = seed;
    }
}
