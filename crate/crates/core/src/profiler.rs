//! Analytical parameter and FLOPs accounting.
//!
//! Counting convention ([`FLOPS_CONVENTION`]):
//!
//! | node      | FLOPs per sample                                   |
//! |-----------|----------------------------------------------------|
//! | conv      | `Ho·Wo·Cout·(Cin/groups)·kh·kw` (1 MAC = 1 FLOP), plus `Ho·Wo·Cout` if biased |
//! | linear    | `Cout·Cin`                                         |
//! | bn        | 2 per output element                               |
//! | relu/relu6/add | 1 per element                                 |
//! | gap       | 1 per input element                                |
//! | ECA/LCA   | GAP + `k·C` + sigmoid `C` + scale `C·H·W`          |
//! | SE        | GAP + `2·w·C` + ReLU `w` + sigmoid `C` + scale `C·H·W`, `w = max(1, ⌊C/r⌋)` |
//!
//! BN running statistics are buffers and never counted as parameters.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{se_bottleneck_width, AttentionKind};
use crate::models::{AttentionParams, ModelGraph, Op, Source};

pub const FLOPS_CONVENTION: &str = "mac1-ew1/v1: conv/linear 1 MAC = 1 FLOP; bn 2/elem; relu, add, scale, sigmoid 1/elem; gap 1/input elem";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("cannot diff reports of different architectures ({0} vs {1})")]
    ArchMismatch(String, String),
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: [usize; 3], found: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: usize,
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub arch: String,
    pub attention: String,
    pub convention: String,
    pub input_shape: Option<[usize; 3]>,
    pub per_node: Vec<NodeProfile>,
    pub total_params: u64,
    pub total_flops: Option<u64>,
}

impl ProfileReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_millions(&self) -> Option<f64> {
        self.total_flops.map(|f| f as f64 / 1e6)
    }

    /// Sum of per-node params over attention nodes.
    pub fn attention_params(&self) -> u64 {
        self.per_node
            .iter()
            .filter(|n| AttentionKind::parse(&n.kind).is_some())
            .map(|n| n.params)
            .sum()
    }
}

fn node_params(graph: &ModelGraph, op: &Op) -> u64 {
    op.param_ids().iter().map(|&i| graph.params()[i].value.len() as u64).sum()
}

/// Parameter counts per node; FLOPs left empty.
pub fn count_params(graph: &ModelGraph) -> ProfileReport {
    let per_node: Vec<NodeProfile> = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| NodeProfile {
            node_id: i,
            name: n.name.clone(),
            kind: n.op.kind().to_string(),
            params: node_params(graph, &n.op),
            flops: None,
        })
        .collect();
    ProfileReport {
        arch: graph.config().arch.name().to_string(),
        attention: graph.config().attention.kind.name().to_string(),
        convention: FLOPS_CONVENTION.to_string(),
        input_shape: None,
        total_params: per_node.iter().map(|n| n.params).sum(),
        total_flops: None,
        per_node,
    }
}

/// Parameters and per-sample FLOPs for an input of shape `(C, H, W)`.
pub fn count_flops(graph: &ModelGraph, input_shape: [usize; 3]) -> Result<ProfileReport, ProfileError> {
    if input_shape != graph.input_shape() {
        return Err(ProfileError::InputShape {
            expected: graph.input_shape(),
            found: input_shape,
        });
    }
    let shapes = graph.output_shapes(1);
    let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
    let mut report = count_params(graph);
    for (entry, (i, node)) in report.per_node.iter_mut().zip(graph.nodes().iter().enumerate()) {
        let out = elems(&shapes[i]);
        let input_elems = match node.inputs[0] {
            Source::Input => input_shape.iter().product::<usize>() as u64,
            Source::Node(j) => elems(&shapes[j]),
        };
        let flops = match node.op {
            Op::Conv { ref spec, .. } => {
                let macs = out * (spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w) as u64;
                macs + if spec.has_bias { out } else { 0 }
            }
            Op::Linear { in_features, out_features, .. } => (in_features * out_features) as u64,
            Op::BatchNorm { .. } => 2 * out,
            Op::Relu | Op::Relu6 | Op::Add => out,
            Op::GlobalAvgPool => input_elems,
            Op::Attention { channels, params, .. } => {
                let c = channels as u64;
                let excite = match params {
                    AttentionParams::Se { fc1, .. } => {
                        let w = graph.params()[fc1].value.shape()[0] as u64;
                        debug_assert_eq!(w as usize, se_bottleneck_width(channels, graph.config().attention.reduction));
                        2 * w * c + w
                    }
                    AttentionParams::Conv { taps, .. } => {
                        let k = *graph.params()[taps].value.shape().last().unwrap_or(&0) as u64;
                        k * c
                    }
                };
                // pool + excitation + sigmoid + rescale
                out + excite + c + out
            }
        };
        entry.flops = Some(flops);
    }
    report.input_shape = Some(input_shape);
    report.total_flops = Some(report.per_node.iter().filter_map(|n| n.flops).sum());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDelta {
    pub arch: String,
    pub from: String,
    pub to: String,
    pub params_abs: i64,
    pub params_pct: f64,
    pub flops_abs: Option<i64>,
    pub flops_pct: Option<f64>,
}

/// `b - a`, absolute and as a percentage of `a`.
pub fn diff_reports(a: &ProfileReport, b: &ProfileReport) -> Result<ProfileDelta, ProfileError> {
    if a.arch != b.arch {
        return Err(ProfileError::ArchMismatch(a.arch.clone(), b.arch.clone()));
    }
    let pct = |base: u64, d: i64| if base == 0 { 0.0 } else { d as f64 * 100.0 / base as f64 };
    let params_abs = b.total_params as i64 - a.total_params as i64;
    let flops_abs = match (a.total_flops, b.total_flops) {
        (Some(x), Some(y)) => Some(y as i64 - x as i64),
        _ => None,
    };
    Ok(ProfileDelta {
        arch: a.arch.clone(),
        from: a.attention.clone(),
        to: b.attention.clone(),
        params_abs,
        params_pct: pct(a.total_params, params_abs),
        flops_abs,
        flops_pct: flops_abs.map(|d| pct(a.total_flops.unwrap_or(0), d)),
    })
}

/// `11.17`-style rendering at 0.01M.
pub fn format_millions(count: u64) -> String {
    format!("{:.2}", count as f64 / 1e6)
}
