//! Minifloat quantizer with a real-valued learned exponent bias.
//!
//! The forward rule, per element:
//!
//! 1. `E_B = ceil(E0)`
//! 2. clamp to `[-x_max, x_max]`
//! 3. `scale = 2^(floor(log2|x_c|) - m)`
//! 4. `x_q = round_ties_even(x_c / scale) * scale`
//! 5. `x_q = 0` when `|x_q| < x_min`
//!
//! Step 5 flushes by threshold rather than to the nearest value, so inputs
//! just under `x_min` can map to zero even when `x_min` is closer.
//!
//! The backward rule is a straight-through estimator for the signal and a
//! saturation-boundary gradient for `E0`: only clamped elements depend on
//! the bias, through `d x_max / d E_B = -ln 2 * x_max`.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{ceil_log2, check_bias, exp2i, floor_log2, MinifloatFormat, QuantRange};

/// Gradient pass-through rule for the quantized signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteMode {
    /// `d x_q / d x = 1` everywhere.
    #[default]
    Identity,
    /// `d x_q / d x = 0` where `|x| > x_max`.
    ClipZero,
}

/// How an initial `E0` is derived from an observed maximum magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasInit {
    /// `2^(e-1) - ceil(log2(max / (2 - 2^-m)))`.
    #[default]
    Headroom,
    /// `2^e - 1 - ceil(log2(max / (2 - 2^-m)))`: the smallest `x_max >= max`.
    TightFit,
}

/// Learned exponent bias of one tensor role.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerState {
    pub format: MinifloatFormat,
    /// Real-valued bias; `None` until calibrated or set.
    pub e0: Option<f64>,
    pub learnable: bool,
    /// Accumulated `d loss / d E0` of the last backward pass.
    pub grad: f64,
}

impl QuantizerState {
    pub fn unset(format: MinifloatFormat) -> Self {
        Self { format, e0: None, learnable: false, grad: 0.0 }
    }

    pub fn fixed(format: MinifloatFormat, bias: i32) -> Self {
        Self { format, e0: Some(bias as f64), learnable: false, grad: 0.0 }
    }

    pub fn learned(format: MinifloatFormat, e0: f64) -> Self {
        Self { format, e0: Some(e0), learnable: true, grad: 0.0 }
    }

    pub fn e0(&self) -> Result<f64> {
        let e0 = self.e0.ok_or(Error::BiasUnset)?;
        if !e0.is_finite() {
            return Err(Error::Diverged(format!("exponent bias became {e0}")));
        }
        Ok(e0)
    }

    /// `E_B = ceil(E0)`, recomputed on every call.
    pub fn bias(&self) -> Result<i32> {
        integer_bias(self.e0()?)
    }

    pub fn range(&self) -> Result<QuantRange> {
        QuantRange::new(self.format, self.bias()?)
    }
}

/// `ceil(e0)` as an integer bias, rejecting non-finite or absurd values.
pub fn integer_bias(e0: f64) -> Result<i32> {
    if !e0.is_finite() {
        return Err(Error::Diverged(format!("exponent bias became {e0}")));
    }
    let b = e0.ceil();
    if b.abs() > crate::format::MAX_ABS_BIAS as f64 {
        return Err(Error::BiasOutOfRange(b as i64));
    }
    Ok(b as i32)
}

/// Quantizes one value against a precomputed range.
#[inline]
pub fn quantize_value(x: f64, m: u32, range: QuantRange) -> f64 {
    let xc = x.clamp(-range.x_max, range.x_max);
    // Anything below x_min / 2 rounds to at most 2 * |x_c| < x_min.
    if xc.abs() < 0.5 * range.x_min {
        return 0.0;
    }
    let scale = exp2i(floor_log2(xc) - m as i32);
    let q = (xc / scale).round_ties_even() * scale;
    if q.abs() < range.x_min {
        0.0
    } else {
        q
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index, value: x[index] }),
        None => Ok(()),
    }
}

/// Elementwise minifloat quantization with bias `ceil(e0)`.
pub fn quantize(x: &[f64], fmt: MinifloatFormat, e0: f64) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    quantize_in_place(&mut out, fmt, e0)?;
    Ok(out)
}

pub fn quantize_in_place(x: &mut [f64], fmt: MinifloatFormat, e0: f64) -> Result<()> {
    check_finite(x)?;
    let range = QuantRange::new(fmt, integer_bias(e0)?)?;
    let m = fmt.man_bits();
    for v in x.iter_mut() {
        *v = quantize_value(*v, m, range);
    }
    Ok(())
}

/// Backward pass of [`quantize`]: returns `(d loss / d x, d loss / d E0)`.
pub fn quantize_backward(
    grad_out: &[f64],
    x: &[f64],
    fmt: MinifloatFormat,
    e0: f64,
    ste: SteMode,
) -> Result<(Vec<f64>, f64)> {
    if grad_out.len() != x.len() {
        return Err(Error::Shape(format!(
            "quantizer gradient has {} elements, input has {}",
            grad_out.len(),
            x.len()
        )));
    }
    let range = QuantRange::new(fmt, integer_bias(e0)?)?;
    let mut grad_x = grad_out.to_vec();
    let grad_e0 = saturation_grad(&mut grad_x, x, range, ste);
    Ok((grad_x, grad_e0))
}

/// Applies the STE rule to `grad` in place and returns the bias gradient.
pub(crate) fn saturation_grad(grad: &mut [f64], x: &[f64], range: QuantRange, ste: SteMode) -> f64 {
    let dxmax = -LN_2 * range.x_max;
    let mut grad_e0 = 0.0;
    for (g, &xv) in grad.iter_mut().zip(x) {
        if xv.abs() > range.x_max {
            grad_e0 += *g * dxmax * xv.signum();
            if ste == SteMode::ClipZero {
                *g = 0.0;
            }
        }
    }
    grad_e0
}

/// Continuous-bias surrogate of [`quantize`]: `E_B = e0` as a real number,
/// so `x_min` and `x_max` vary smoothly. Saturated elements output
/// `±x_max(e0)` directly; others follow the usual rounding and flush. Its
/// derivative in `e0` is the gradient rule of [`quantize_backward`].
pub fn quantize_relaxed(x: &[f64], fmt: MinifloatFormat, e0: f64) -> Result<Vec<f64>> {
    check_finite(x)?;
    check_bias(e0.ceil() as i64)?;
    let m = fmt.man_bits() as i32;
    let x_min = match fmt.zero_encoding() {
        crate::format::ZeroEncoding::Point => (-e0).exp2() * (1.0 + exp2i(-m)),
        crate::format::ZeroEncoding::Binade => (1.0 - e0).exp2(),
    };
    let x_max = (fmt.max_exp_field() as f64 - e0).exp2() * (2.0 - exp2i(-m));
    let range = QuantRange { x_min, x_max };
    Ok(x
        .iter()
        .map(|&v| {
            if v.abs() > x_max {
                x_max.copysign(v)
            } else {
                quantize_value(v, fmt.man_bits(), range)
            }
        })
        .collect())
}

/// Initial `E0` from the largest magnitude seen during calibration.
pub fn init_exponent_bias(max_abs: f64, fmt: MinifloatFormat, mode: BiasInit) -> Result<f64> {
    if !(max_abs.is_finite() && max_abs > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "calibration maximum must be positive and finite, got {max_abs}"
        )));
    }
    let top_significand = 2.0 - exp2i(-(fmt.man_bits() as i32));
    let binades = ceil_log2(max_abs / top_significand) as i64;
    let e = fmt.exp_bits();
    let head = match mode {
        BiasInit::Headroom => 1i64 << (e - 1),
        BiasInit::TightFit => (1i64 << e) - 1,
    };
    let e0 = head - binades;
    check_bias(e0)?;
    Ok(e0 as f64)
}

/// Symmetric fixed-point baseline with a power-of-two range
/// `S = 2^ceil(log2(max_abs))` split into `2^(bits-1)` steps per sign.
pub fn fixed_point_quantize(x: &[f64], bits: u32, max_abs: f64) -> Result<Vec<f64>> {
    if !(2..=53).contains(&bits) {
        return Err(Error::InvalidArgument(format!("fixed-point width {bits} not in 2..=53")));
    }
    if !(max_abs.is_finite() && max_abs > 0.0) {
        return Err(Error::InvalidArgument(format!("fixed-point range {max_abs} must be positive")));
    }
    check_finite(x)?;
    let scale = 2f64.powi(ceil_log2(max_abs));
    let levels = exp2i(bits as i32 - 1);
    let step = scale / levels;
    Ok(x
        .iter()
        .map(|&v| (v / step).round_ties_even().clamp(-levels, levels - 1.0) * step)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::enumerate_values;
    use proptest::prelude::*;

    fn fmt(s: &str) -> MinifloatFormat {
        s.parse().unwrap()
    }

    fn q1(x: f64) -> f64 {
        quantize(&[x], fmt("E2M2"), 1.0).unwrap()[0]
    }

    #[test]
    fn e2m2_examples() {
        assert_eq!(q1(1.1), 1.0);
        assert_eq!(q1(8.0), 7.0);
        assert_eq!(q1(-8.0), -7.0);
        assert_eq!(q1(0.55), 0.0);
        assert_eq!(q1(0.0), 0.0);
        assert_eq!(q1(1.125), 1.0);
        assert_eq!(q1(1.375), 1.5);
        assert_eq!(q1(0.625), 0.625);
        // 0.6 is closer to x_min = 0.625 but rounds to 0.625 in its own binade
        assert_eq!(q1(0.6), 0.625);
    }

    #[test]
    fn bias_is_ceiling_of_e0() {
        let f = fmt("E2M2");
        assert_eq!(quantize(&[8.0], f, 0.2).unwrap(), quantize(&[8.0], f, 1.0).unwrap());
        assert_eq!(quantize(&[8.0], f, 0.0).unwrap()[0], 8.0);
        assert_eq!(quantize(&[20.0], f, 0.0).unwrap()[0], 14.0);
        let s = QuantizerState::learned(f, 0.01);
        assert_eq!(s.bias().unwrap(), 1);
        assert!(matches!(QuantizerState::unset(f).bias(), Err(Error::BiasUnset)));
    }

    #[test]
    fn rejects_non_finite() {
        let err = quantize(&[1.0, f64::NAN], fmt("E3M2"), 3.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(quantize(&[1.0], fmt("E3M2"), f64::INFINITY).is_err());
    }

    #[test]
    fn backward_examples() {
        let f = fmt("E2M2");
        let (gx, ge) = quantize_backward(&[1.0, 1.0], &[1.1, -3.0], f, 1.0, SteMode::Identity).unwrap();
        assert_eq!(gx, vec![1.0, 1.0]);
        assert_eq!(ge, 0.0);
        let (_, ge) = quantize_backward(&[1.0], &[8.0], f, 1.0, SteMode::Identity).unwrap();
        assert_eq!(ge, -LN_2 * 7.0);
        assert!((ge + 4.852).abs() < 1e-3);
        let (_, ge) = quantize_backward(&[1.0], &[-8.0], f, 1.0, SteMode::Identity).unwrap();
        assert_eq!(ge, LN_2 * 7.0);
        let (gx, _) = quantize_backward(&[2.0, 2.0], &[8.0, 1.0], f, 1.0, SteMode::ClipZero).unwrap();
        assert_eq!(gx, vec![0.0, 2.0]);
        assert!(quantize_backward(&[1.0], &[1.0, 2.0], f, 1.0, SteMode::Identity).is_err());
    }

    #[test]
    fn relaxed_matches_exact_at_integer_bias() {
        let f = fmt("E3M2");
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.173).collect();
        assert_eq!(quantize_relaxed(&xs, f, 2.0).unwrap(), quantize(&xs, f, 2.0).unwrap());
    }

    #[test]
    fn init_examples() {
        for s in ["E2M2", "E3M1", "E4M3", "E5M2"] {
            let f = fmt(s);
            let top = 2.0 - exp2i(-(f.man_bits() as i32));
            let e0 = init_exponent_bias(top, f, BiasInit::Headroom).unwrap();
            assert_eq!(e0, (1u32 << (f.exp_bits() - 1)) as f64);
        }
        let f = fmt("E3M2");
        assert_eq!(init_exponent_bias(3.5, f, BiasInit::Headroom).unwrap(), 3.0);
        assert_eq!(init_exponent_bias(3.5, f, BiasInit::TightFit).unwrap(), 6.0);
        assert_eq!(f.range(6).unwrap().x_max, 3.5);
        assert!(init_exponent_bias(0.0, f, BiasInit::Headroom).is_err());
        assert!(init_exponent_bias(f64::NAN, f, BiasInit::TightFit).is_err());
    }

    #[test]
    fn tight_fit_is_tightest() {
        let f = fmt("E3M2");
        for i in 1..2000 {
            let max_abs = i as f64 * 0.0137;
            let b = init_exponent_bias(max_abs, f, BiasInit::TightFit).unwrap() as i32;
            assert!(f.range(b).unwrap().x_max >= max_abs);
            assert!(f.range(b + 1).unwrap().x_max < max_abs);
        }
    }

    #[test]
    fn fixed_point_examples() {
        let s = 4.0; // 2^ceil(log2 3)
        let step = s / 32.0;
        assert_eq!(fixed_point_quantize(&[0.0], 6, 3.0).unwrap(), vec![0.0]);
        assert_eq!(fixed_point_quantize(&[s], 6, 3.0).unwrap(), vec![s * 31.0 / 32.0]);
        assert_eq!(fixed_point_quantize(&[-s], 6, 3.0).unwrap(), vec![-s]);
        assert_eq!(fixed_point_quantize(&[step * 0.49], 6, 3.0).unwrap(), vec![0.0]);
        assert_eq!(fixed_point_quantize(&[step * 0.5], 6, 3.0).unwrap(), vec![0.0]);
        assert_eq!(fixed_point_quantize(&[step * 1.5], 6, 3.0).unwrap(), vec![2.0 * step]);
        assert!(fixed_point_quantize(&[1.0], 1, 3.0).is_err());
        assert!(fixed_point_quantize(&[1.0], 6, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(xs in prop::collection::vec(-100.0f64..100.0, 1..64), e0 in -3.0f64..6.0) {
            let f = fmt("E3M2");
            let once = quantize(&xs, f, e0).unwrap();
            prop_assert_eq!(quantize(&once, f, e0).unwrap(), once);
        }

        #[test]
        fn monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, e0 in -2.0f64..5.0) {
            let f = fmt("E2M3");
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize(&[lo, hi], f, e0).unwrap();
            prop_assert!(q[0] <= q[1]);
        }

        #[test]
        fn outputs_in_value_set(xs in prop::collection::vec(-40.0f64..40.0, 1..64), bias in -2i32..5) {
            let f = fmt("E2M2:zb");
            let vals = enumerate_values(f, bias).unwrap();
            for q in quantize(&xs, f, bias as f64).unwrap() {
                prop_assert!(vals.binary_search_by(|v| v.total_cmp(&q)).is_ok(), "{} not in grid", q);
            }
        }
    }
}
