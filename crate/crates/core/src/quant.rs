//! Uniform symmetric and asymmetric quantization.
//!
//! `quantize` maps reals to integers with `clamp(round(x / s) + z)`, and
//! `dequantize` maps back with `(q - z) * s`. Rounding is half-to-even and
//! granularity is per tensor (or per row for the dynamic activation path).
//!
//! Scales are normalized so that dequantized grid endpoints reproduce the
//! same `(s, z)` when recalibrated, which makes [`fake_quantize_values`]
//! idempotent bit for bit.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::math::{powi2, round_half_even};
use crate::tensor::Tensor;

/// Floor applied to every scale; keeps all-zero tensors well defined.
pub const SCALE_EPSILON: f64 = 1e-12;

/// Widest integer grid we simulate.
pub const MAX_BIT_WIDTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

/// How the clipping range is measured before it is divided into levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Largest magnitude (symmetric scheme).
    AbsMax,
    /// Smallest and largest value (asymmetric scheme).
    MinMax,
    /// q-th percentile of |x| (symmetric) or the central q-percent range
    /// of x (asymmetric), q in (50, 100].
    Percentile(f64),
}

impl ScaleRule {
    /// The extreme-value rule that pairs with `scheme`.
    pub fn extremes_for(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Symmetric => ScaleRule::AbsMax,
            Scheme::Asymmetric => ScaleRule::MinMax,
        }
    }
}

/// Fully resolved quantizer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: Scheme,
    pub bit_width: u32,
    pub scale_rule: ScaleRule,
    pub scale: f64,
    pub zero_point: i64,
}

impl QuantSpec {
    /// Inclusive integer range for this scheme and width.
    pub fn int_range(&self) -> (i64, i64) {
        int_range(self.scheme, self.bit_width)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bit_width)?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(contract("quantization scale must be positive and finite"));
        }
        let (lo, hi) = match self.scheme {
            Scheme::Symmetric => (0, 0),
            Scheme::Asymmetric => int_range(Scheme::Asymmetric, self.bit_width),
        };
        if self.zero_point < lo || self.zero_point > hi {
            return Err(contract("zero point outside the integer range"));
        }
        Ok(())
    }
}

/// Integer codes plus the parameters needed to map them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub values: Vec<i64>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

pub fn int_range(scheme: Scheme, bits: u32) -> (i64, i64) {
    match scheme {
        Scheme::Symmetric => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
        Scheme::Asymmetric => (0, (1i64 << bits) - 1),
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BIT_WIDTH).contains(&bits) {
        return Err(contract(alloc::format!(
            "bit width {bits} outside [2, {MAX_BIT_WIDTH}]"
        )));
    }
    Ok(())
}

/// Linear-interpolated percentile of `sorted` (ascending), `q` in [0, 100].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = crate::math::floor(pos) as usize;
    let hi = crate::math::ceil(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v
}

/// Scale and zero point for `x` under the given scheme, width and rule.
///
/// Symmetric: `s = absmax / (2^(b-1) - 1)`, `z = 0`.
/// Asymmetric: `s = (max - min) / (2^b - 1)` with the range widened to
/// contain zero, `z = clamp(round(-min / s), 0, 2^b - 1)`.
pub fn compute_scale(x: &[f64], scheme: Scheme, bits: u32, rule: ScaleRule) -> Result<(f64, i64)> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::Domain {
            op: "compute_scale",
            detail: "empty input".into(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "compute_scale",
            detail: "non-finite input".into(),
        });
    }
    match (scheme, rule) {
        (Scheme::Symmetric, ScaleRule::MinMax) | (Scheme::Asymmetric, ScaleRule::AbsMax) => {
            return Err(contract("scale rule does not match the quantization scheme"))
        }
        (_, ScaleRule::Percentile(q)) if !(q > 50.0 && q <= 100.0) => {
            return Err(contract("percentile must lie in (50, 100]"))
        }
        _ => {}
    }
    Ok(match scheme {
        Scheme::Symmetric => {
            let amax = match rule {
                ScaleRule::Percentile(q) => percentile_sorted(&sorted(x.iter().map(|v| v.abs())), q),
                _ => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            };
            (symmetric_scale(amax, bits), 0)
        }
        Scheme::Asymmetric => {
            let (lo, hi) = match rule {
                ScaleRule::Percentile(q) => {
                    let s = sorted(x.iter().copied());
                    (percentile_sorted(&s, 100.0 - q), percentile_sorted(&s, q))
                }
                _ => x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
            };
            asymmetric_scale(lo, hi, bits)
        }
    })
}

fn symmetric_scale(amax: f64, bits: u32) -> f64 {
    let levels = powi2(bits - 1) - 1.0;
    if amax == 0.0 {
        return SCALE_EPSILON;
    }
    // Rescaling on the grid endpoint must reproduce s, otherwise a second
    // pass over already-quantized values would pick a different grid.
    settle((amax / levels).max(SCALE_EPSILON), |s| ((levels * s) / levels).max(SCALE_EPSILON), |&s| (s, 0.0))
}

fn asymmetric_scale(lo: f64, hi: f64, bits: u32) -> (f64, i64) {
    let levels = powi2(bits) - 1.0;
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let span = hi - lo;
    if span == 0.0 {
        return (SCALE_EPSILON, 0);
    }
    let zero_point = |lo: f64, s: f64| round_half_even(-lo / s).clamp(0.0, levels);
    let s = (span / levels).max(SCALE_EPSILON);
    if bits <= EXACT_GRID_BITS {
        // With at most 53 - b significant bits in s every k*s, k < 2^b, is
        // exact, so recalibrating on quantized output returns (s, z) again.
        let s = round_up_significand(s, 53 - bits);
        return (s, zero_point(lo, s) as i64);
    }
    // Wider grids: same requirement on the endpoints (-z*s, (levels-z)*s),
    // approached by iteration.
    let step = |(s, z): (f64, f64)| {
        let glo = (-z) * s;
        let ghi = (levels - z) * s;
        let s2 = ((ghi - glo) / levels).max(SCALE_EPSILON);
        (s2, zero_point(glo, s2))
    };
    let (s, z) = settle((s, zero_point(lo, s)), step, |&(s, z)| (s, z));
    (s, z as i64)
}

/// Widest asymmetric grid whose scale is snapped to an exact grid. Beyond
/// this the snap would move the range end by more than 1/16 of a level.
const EXACT_GRID_BITS: u32 = 24;

/// Smallest value >= `s` (positive, normal) with at most `keep` significant bits.
fn round_up_significand(s: f64, keep: u32) -> f64 {
    let mask = (1u64 << (53 - keep)) - 1;
    let raw = s.to_bits();
    if raw & mask == 0 {
        s
    } else {
        f64::from_bits((raw | mask) + 1)
    }
}

/// Iterates `step` to a fixed point. Rounding can instead close a short
/// cycle; the smallest member by `key` is then returned, which is the same
/// whichever cycle member the iteration entered at.
fn settle<T: Copy + PartialEq>(start: T, step: impl Fn(T) -> T, key: impl Fn(&T) -> (f64, f64)) -> T {
    let mut seen = alloc::vec![start];
    let mut cur = start;
    for _ in 0..64 {
        let next = step(cur);
        if next == cur {
            return cur;
        }
        if let Some(pos) = seen.iter().position(|&v| v == next) {
            return seen[pos..]
                .iter()
                .copied()
                .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite scales"))
                .expect("cycle is non-empty");
        }
        seen.push(next);
        cur = next;
    }
    cur
}

/// Resolves a full [`QuantSpec`] for `x`.
pub fn calibrate(x: &[f64], scheme: Scheme, bits: u32, rule: ScaleRule) -> Result<QuantSpec> {
    let (scale, zero_point) = compute_scale(x, scheme, bits, rule)?;
    Ok(QuantSpec {
        scheme,
        bit_width: bits,
        scale_rule: rule,
        scale,
        zero_point,
    })
}

#[inline]
fn code(v: f64, spec: &QuantSpec, lo: f64, hi: f64) -> f64 {
    (round_half_even(v / spec.scale) + spec.zero_point as f64).clamp(lo, hi)
}

pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    if !x.all_finite() {
        return Err(Error::Domain {
            op: "quantize",
            detail: "non-finite input".into(),
        });
    }
    let (lo, hi) = spec.int_range();
    let (lo, hi) = (lo as f64, hi as f64);
    Ok(QuantizedTensor {
        values: x.data().iter().map(|&v| code(v, spec, lo, hi) as i64).collect(),
        spec: *spec,
        shape: x.shape().to_vec(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let s = q.spec.scale;
    let z = q.spec.zero_point;
    let data = q.values.iter().map(|&v| (v - z) as f64 * s).collect();
    Tensor::new(&q.shape, data).expect("quantized tensor shape is consistent")
}

/// Writes `dequantize(quantize(x))` into `out` and returns the spec used.
pub fn fake_quantize_into(
    x: &[f64],
    scheme: Scheme,
    bits: u32,
    rule: ScaleRule,
    out: &mut [f64],
) -> Result<QuantSpec> {
    let spec = calibrate(x, scheme, bits, rule)?;
    let (lo, hi) = spec.int_range();
    let (lo, hi) = (lo as f64, hi as f64);
    let z = spec.zero_point as f64;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (code(v, &spec, lo, hi) - z) * spec.scale;
    }
    Ok(spec)
}

/// `dequantize(quantize(x))` with parameters calibrated on `x` itself.
pub fn fake_quantize_values(x: &[f64], scheme: Scheme, bits: u32, rule: ScaleRule) -> Result<Vec<f64>> {
    let mut out = alloc::vec![0.0; x.len()];
    fake_quantize_into(x, scheme, bits, rule, &mut out)?;
    Ok(out)
}

/// Per-tensor fake quantization on the tape. The forward value is the
/// quantize/dequantize round trip; the backward pass is the identity.
pub fn fake_quantize(tape: &mut Tape, x: Var, scheme: Scheme, bits: u32, rule: ScaleRule) -> Result<Var> {
    let value = tape.value(x);
    let q = fake_quantize_values(value.data(), scheme, bits, rule)?;
    let q = Tensor::new(value.shape(), q)?;
    let q = tape.constant(q);
    tape.ste_passthrough(q, x)
}
