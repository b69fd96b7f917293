//! Attention invariants as plain properties over generated inputs. The
//! proptest suite and the acceptance runner share them.

use chanatt_core::attention::*;
use chanatt_core::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub type ConvCase = (Tensor, Tensor, usize);

pub fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let len: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, len).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// `(x, taps, groups)` with `C` divisible by `groups`.
pub fn conv_attention_case() -> impl Strategy<Value = ConvCase> {
    (prop_oneof![Just(1usize), Just(2), Just(4)], 1usize..=4, 1usize..=2, 1usize..=3, prop_oneof![Just(1usize), Just(3), Just(5)]).prop_flat_map(
        |(g, per, n, hw, k)| (tensor(vec![n, g * per, hw, hw], -2.0, 2.0), tensor(vec![k], -1.0, 1.0), Just(g)),
    )
}

pub fn se_case() -> impl Strategy<Value = (Tensor, SeParams)> {
    (1usize..=16, 1usize..=8, 1usize..=2).prop_flat_map(|(c, r, n)| {
        let w = se_bottleneck_width(c, r);
        (tensor(vec![n, c, 2, 2], -1.0, 1.0), tensor(vec![w, c], -0.3, 0.3), tensor(vec![c, w], -0.3, 0.3))
            .prop_map(|(x, fc1, fc2)| (x, SeParams { fc1, fc2 }))
    })
}

pub fn conv_attention_shape_and_bounds((x, taps, g): ConvCase) -> std::result::Result<(), TestCaseError> {
    let p = ConvAttentionParams::lca(taps, g);
    let y = conv_attention_forward(&x, &p).unwrap();
    prop_assert_eq!(y.shape(), x.shape());
    let s = conv_attention_scales(&x, &p).unwrap();
    prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    Ok(())
}

pub fn se_shape_and_bounds((x, p): (Tensor, SeParams)) -> std::result::Result<(), TestCaseError> {
    let y = se_forward(&x, &p).unwrap();
    prop_assert_eq!(y.shape(), x.shape());
    prop_assert!(se_scales(&x, &p).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    Ok(())
}

pub fn zero_weights_halve((x, taps, g): ConvCase) -> std::result::Result<(), TestCaseError> {
    let half = x.map(|v| 0.5 * v);
    let zero = Tensor::zeros(taps.shape());
    prop_assert_eq!(&eca_forward(&x, &zero).unwrap(), &half);
    prop_assert_eq!(&lca_forward(&x, &zero, g).unwrap(), &half);
    let c = x.shape()[1];
    prop_assert_eq!(&se_forward(&x, &SeParams::zeros(c, 16)).unwrap(), &half);
    Ok(())
}

pub fn lca_one_group_is_eca((x, taps, _g): ConvCase) -> std::result::Result<(), TestCaseError> {
    let a = lca_forward(&x, &taps, 1).unwrap();
    let b = eca_forward(&x, &taps).unwrap();
    prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    Ok(())
}

/// Bumping one channel only moves the scales of its own segment.
pub fn lca_segments_independent(((x, taps, g), pick, bump): (ConvCase, usize, f64)) -> std::result::Result<(), TestCaseError> {
    let c = x.shape()[1];
    let seg = c / g;
    let target = pick % c;
    let mut moved = x.clone();
    let hw = x.shape()[2] * x.shape()[3];
    for v in &mut moved.data_mut()[target * hw..(target + 1) * hw] {
        *v += bump;
    }
    let p = ConvAttentionParams::lca(taps, g);
    let (s0, s1) = (conv_attention_scales(&x, &p).unwrap(), conv_attention_scales(&moved, &p).unwrap());
    for ch in 0..c {
        if ch / seg != target / seg {
            prop_assert_eq!(s0.data()[ch], s1.data()[ch]);
        }
    }
    Ok(())
}

pub fn locality_case() -> impl Strategy<Value = (ConvCase, usize, f64)> {
    (conv_attention_case(), 0usize..64, 0.1f64..3.0)
}

/// Runs every property for `cases` generated inputs each and returns the
/// name and message of the first failure.
#[allow(dead_code)]
pub fn run_all(cases: u32) -> std::result::Result<(), String> {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new(config);
    runner.run(&conv_attention_case(), conv_attention_shape_and_bounds).map_err(|e| format!("shape and bounds (ECA/LCA): {e}"))?;
    runner.run(&se_case(), se_shape_and_bounds).map_err(|e| format!("shape and bounds (SE): {e}"))?;
    runner.run(&conv_attention_case(), zero_weights_halve).map_err(|e| format!("zero weights: {e}"))?;
    runner.run(&conv_attention_case(), lca_one_group_is_eca).map_err(|e| format!("LCA(g=1) = ECA: {e}"))?;
    runner.run(&locality_case(), lca_segments_independent).map_err(|e| format!("segment locality: {e}"))?;
    Ok(())
}
