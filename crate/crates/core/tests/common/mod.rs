#![allow(dead_code)]

use chanatt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TRIALS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(out * weights)`, the scalar the checks differentiate.
pub fn project(out: &Tensor, weights: &Tensor) -> f64 {
    assert_eq!(out.shape(), weights.shape());
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Elementwise relative error. The denominator has a floor so entries whose
/// true derivative is zero are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `loss` with respect to every entry of `x`,
/// compared against `analytic`. Returns the worst relative error.
pub fn check(x: &Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPS;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - EPS;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Synthetic CIFAR-shaped records: each class has its own mean colour and a
/// coarse pattern, plus per-image noise.
pub fn synthetic_set(n: usize, split: chanatt_core::data::Split, seed: u64) -> chanatt_core::data::Cifar10Set {
    let mut rng = rng(seed);
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        for c in 0..3 {
            let base = 40.0 + 18.0 * label as f64 + 30.0 * c as f64 * ((label % 3) as f64 - 1.0);
            for y in 0..32 {
                for x in 0..32 {
                    let stripe = if ((y / (2 + label as usize % 4)) + x / 8) % 2 == 0 { 25.0 } else { -25.0 };
                    let v = base + stripe + rng.gen_range(-20.0..20.0);
                    pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    chanatt_core::data::Cifar10Set::new(pixels, labels, split).unwrap()
}
