//! Quantizer invariants over seeded random tensors, without a property
//! testing framework.

use dptq_core::quant::{calibrate, dequantize, fake_quantize_values, quantize, ScaleRule, Scheme};
use dptq_core::rng::Rng;
use dptq_core::Tensor;

pub const TENSORS: usize = 1000;

fn tensor(rng: &mut Rng, min_len: usize) -> Vec<f64> {
    let n = min_len + rng.below(64);
    let mag = 10f64.powf(rng.uniform_range(-2.0, 2.0));
    (0..n).map(|_| rng.uniform_range(-mag, mag)).collect()
}

fn scheme(rng: &mut Rng) -> Scheme {
    if rng.below(2) == 0 {
        Scheme::Symmetric
    } else {
        Scheme::Asymmetric
    }
}

fn max_error(x: &[f64], s: Scheme, bits: u32) -> f64 {
    let y = fake_quantize_values(x, s, bits, ScaleRule::extremes_for(s)).unwrap();
    x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn round_trip_within_half_step() {
    let mut rng = Rng::seeded(101);
    for case in 0..TENSORS {
        let x = tensor(&mut rng, 1);
        let s = scheme(&mut rng);
        let bits = 2 + rng.below(15) as u32;
        let spec = calibrate(&x, s, bits, ScaleRule::extremes_for(s)).unwrap();
        let back = dequantize(&quantize(&Tensor::vector(&x), &spec).unwrap());
        let (lo, hi) = spec.int_range();
        for (&v, &r) in x.iter().zip(back.data()) {
            let raw = v / spec.scale + spec.zero_point as f64;
            if raw > lo as f64 && raw < hi as f64 {
                assert!((v - r).abs() <= spec.scale / 2.0 * (1.0 + 1e-12), "case {case}: {v} -> {r}");
            }
        }
    }
}

pub fn refinement_never_hurts() {
    let mut rng = Rng::seeded(102);
    for case in 0..TENSORS {
        let x = tensor(&mut rng, 64);
        let s = scheme(&mut rng);
        let bits = 2 + rng.below(14) as u32;
        let (coarse, fine) = (max_error(&x, s, bits), max_error(&x, s, bits + 1));
        assert!(fine <= coarse * (1.0 + 1e-12) + 1e-15, "case {case}: b={bits} {coarse} -> {fine}");
    }
}

pub fn symmetric_negation() {
    let mut rng = Rng::seeded(103);
    for case in 0..TENSORS {
        let x = tensor(&mut rng, 1);
        let bits = 2 + rng.below(15) as u32;
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = fake_quantize_values(&x, Scheme::Symmetric, bits, ScaleRule::AbsMax).unwrap();
        let b = fake_quantize_values(&neg, Scheme::Symmetric, bits, ScaleRule::AbsMax).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| *p == -*q), "case {case}");
    }
}

pub fn fake_quantize_is_idempotent() {
    let mut rng = Rng::seeded(104);
    for case in 0..TENSORS {
        let x = tensor(&mut rng, 1);
        let s = scheme(&mut rng);
        let bits = 2 + rng.below(15) as u32;
        let rule = ScaleRule::extremes_for(s);
        let once = fake_quantize_values(&x, s, bits, rule).unwrap();
        let twice = fake_quantize_values(&once, s, bits, rule).unwrap();
        assert!(once.iter().zip(&twice).all(|(a, b)| a.to_bits() == b.to_bits()), "case {case}");
    }
}

pub fn all() {
    round_trip_within_half_step();
    refinement_never_hurts();
    symmetric_negation();
    fake_quantize_is_idempotent();
}
