//! Channel attention: squeeze-and-excitation (SE), efficient channel
//! attention (ECA) and lite channel attention (LCA).
//!
//! All three share the same skeleton: pool each channel to a scalar,
//! map the `(N, C)` descriptor to per-channel gates `s ∈ (0, 1)`, and
//! rescale the feature map channel-wise. They differ only in the mapping:
//!
//! * SE: two bias-free fully connected layers `C -> C/r -> C`, ReLU between,
//!   sigmoid after.
//! * ECA: one `k`-tap 1D convolution across the channel axis, sigmoid after.
//! * LCA: the same `k`-tap convolution, but the channel axis is cut into `g`
//!   contiguous segments and no tap crosses a segment boundary. By default a
//!   single filter is shared by all segments, so LCA carries exactly `k`
//!   parameters like ECA; [`LcaFilters::PerGroup`] gives each segment its own
//!   filter (`k * g` parameters).
//!
//! `k` comes from [`adaptive_kernel_size`].

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    channel_scale, channel_scale_backward, global_avg_pool, global_avg_pool_backward, grouped_conv1d,
    grouped_conv1d_backward, linear_backward, linear_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, Tensor, TensorError,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("invalid attention configuration: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = core::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    Eca,
    Lca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::None, Self::Se, Self::Eca, Self::Lca];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Se => "se",
            Self::Eca => "eca",
            Self::Lca => "lca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcaFilters {
    /// One `k`-tap filter reused inside every segment.
    #[default]
    Shared,
    /// One `k`-tap filter per segment.
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    /// SE reduction ratio `r`.
    pub reduction: usize,
    /// `γ` in the kernel-size rule.
    pub gamma: usize,
    /// `b` in the kernel-size rule.
    pub b_offset: usize,
    /// LCA segment count `g`.
    pub groups: usize,
    pub lca_filters: LcaFilters,
}

impl AttentionSpec {
    pub const fn new(kind: AttentionKind) -> Self {
        Self {
            kind,
            reduction: 16,
            gamma: 2,
            b_offset: 1,
            groups: 4,
            lca_filters: LcaFilters::Shared,
        }
    }

    pub const fn none() -> Self {
        Self::new(AttentionKind::None)
    }

    pub const fn se() -> Self {
        Self::new(AttentionKind::Se)
    }

    pub const fn eca() -> Self {
        Self::new(AttentionKind::Eca)
    }

    pub const fn lca() -> Self {
        Self::new(AttentionKind::Lca)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(AttentionError::InvalidSpec("reduction ratio must be at least 1".into()));
        }
        if self.groups == 0 {
            return Err(AttentionError::InvalidSpec("LCA groups must be at least 1".into()));
        }
        if self.gamma == 0 {
            return Err(AttentionError::InvalidSpec("gamma must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that the mechanism can sit on a `channels`-wide feature map.
    pub fn validate_for(&self, channels: usize) -> Result<()> {
        self.validate()?;
        if channels == 0 {
            return Err(AttentionError::InvalidSpec("channel count must be positive".into()));
        }
        if self.kind == AttentionKind::Lca && channels % self.groups != 0 {
            return Err(AttentionError::InvalidSpec(format!(
                "LCA needs channels ({channels}) divisible by groups ({})",
                self.groups
            )));
        }
        Ok(())
    }

    pub fn kernel_size(&self, channels: usize) -> Result<usize> {
        adaptive_kernel_size(channels, self.gamma, self.b_offset)
    }
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self::none()
    }
}

/// Odd kernel size from the channel count:
/// `t = trunc(|log2(C)/γ + b/γ|)`, bumped to `t + 1` when even.
pub fn adaptive_kernel_size(channels: usize, gamma: usize, b_offset: usize) -> Result<usize> {
    if channels < 1 {
        return Err(AttentionError::InvalidSpec("kernel size needs at least one channel".into()));
    }
    if gamma == 0 {
        return Err(AttentionError::InvalidSpec("gamma must be at least 1".into()));
    }
    let t = libm::fabs(libm::log2(channels as f64) / gamma as f64 + b_offset as f64 / gamma as f64) as usize;
    Ok(if t % 2 == 1 { t } else { t + 1 })
}

/// Hidden width of the SE bottleneck, `max(1, floor(C / r))`.
pub fn se_bottleneck_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Learnable parameters one attention block adds on a `channels`-wide map.
pub fn attention_param_count(spec: &AttentionSpec, channels: usize) -> usize {
    match spec.kind {
        AttentionKind::None => 0,
        AttentionKind::Se => 2 * se_bottleneck_width(channels, spec.reduction) * channels,
        AttentionKind::Eca => spec.kernel_size(channels).unwrap_or(0),
        AttentionKind::Lca => {
            let k = spec.kernel_size(channels).unwrap_or(0);
            match spec.lca_filters {
                LcaFilters::Shared => k,
                LcaFilters::PerGroup => k * spec.groups,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    /// `(C/r, C)`
    pub fc1: Tensor,
    /// `(C, C/r)`
    pub fc2: Tensor,
}

impl SeParams {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let w = se_bottleneck_width(channels, reduction);
        Self {
            fc1: Tensor::zeros(&[w, channels]),
            fc2: Tensor::zeros(&[channels, w]),
        }
    }
}

/// Taps for the ECA/LCA channel convolution: `[k]` shared or `[g, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvAttentionParams {
    pub taps: Tensor,
    pub groups: usize,
}

impl ConvAttentionParams {
    pub fn eca(taps: Tensor) -> Self {
        Self { taps, groups: 1 }
    }

    pub fn lca(taps: Tensor, groups: usize) -> Self {
        Self { taps, groups }
    }
}

fn check_channels(x: &Tensor, expected: usize, op: &str) -> Result<()> {
    let (_, c, _, _) = x.dims4("attention")?;
    if c != expected {
        return Err(AttentionError::Tensor(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("{op}: input has {c} channels, parameters expect {expected}"),
        }));
    }
    Ok(())
}

/// The SE gate `σ(W2 δ(W1 z))`, shape `(N, C)`.
pub fn se_scales(x: &Tensor, params: &SeParams) -> Result<Tensor> {
    check_channels(x, params.fc1.shape()[1], "se")?;
    let z = global_avg_pool(x)?;
    let h = relu_forward(&linear_forward(&z, &params.fc1, None)?);
    Ok(sigmoid_forward(&linear_forward(&h, &params.fc2, None)?))
}

pub fn se_forward(x: &Tensor, params: &SeParams) -> Result<Tensor> {
    let s = se_scales(x, params)?;
    Ok(channel_scale(x, &s)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeGrads {
    pub input: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

pub fn se_backward(x: &Tensor, params: &SeParams, upstream: &Tensor) -> Result<SeGrads> {
    check_channels(x, params.fc1.shape()[1], "se")?;
    let z = global_avg_pool(x)?;
    let pre1 = linear_forward(&z, &params.fc1, None)?;
    let h = relu_forward(&pre1);
    let s = sigmoid_forward(&linear_forward(&h, &params.fc2, None)?);

    let (mut gx, gs) = channel_scale_backward(x, &s, upstream)?;
    let gpre2 = sigmoid_backward(&s, &gs)?;
    let l2 = linear_backward(&h, &params.fc2, &gpre2)?;
    let gpre1 = relu_backward(&pre1, &l2.input)?;
    let l1 = linear_backward(&z, &params.fc1, &gpre1)?;
    gx.add_assign(&global_avg_pool_backward(x.shape(), &l1.input)?)?;
    Ok(SeGrads {
        input: gx,
        fc1: l1.weights,
        fc2: l2.weights,
    })
}

/// The ECA/LCA gate `σ(conv1d(z))`, shape `(N, C)`.
pub fn conv_attention_scales(x: &Tensor, params: &ConvAttentionParams) -> Result<Tensor> {
    let z = global_avg_pool(x)?;
    Ok(sigmoid_forward(&grouped_conv1d(&z, &params.taps, params.groups)?))
}

/// Efficient channel attention: one dense `k`-tap filter across channels.
pub fn eca_forward(x: &Tensor, taps: &Tensor) -> Result<Tensor> {
    conv_attention_forward(x, &ConvAttentionParams::eca(taps.clone()))
}

/// Lite channel attention: the `k`-tap filter restricted to `groups`
/// contiguous channel segments.
pub fn lca_forward(x: &Tensor, taps: &Tensor, groups: usize) -> Result<Tensor> {
    conv_attention_forward(x, &ConvAttentionParams::lca(taps.clone(), groups))
}

pub fn conv_attention_forward(x: &Tensor, params: &ConvAttentionParams) -> Result<Tensor> {
    let s = conv_attention_scales(x, params)?;
    Ok(channel_scale(x, &s)?)
}

/// Returns `(grad_input, grad_taps)`.
pub fn conv_attention_backward(x: &Tensor, params: &ConvAttentionParams, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = global_avg_pool(x)?;
    let s = sigmoid_forward(&grouped_conv1d(&z, &params.taps, params.groups)?);
    let (mut gx, gs) = channel_scale_backward(x, &s, upstream)?;
    let gpre = sigmoid_backward(&s, &gs)?;
    let (gz, gtaps) = grouped_conv1d_backward(&z, &params.taps, params.groups, &gpre)?;
    gx.add_assign(&global_avg_pool_backward(x.shape(), &gz)?)?;
    Ok((gx, gtaps))
}
