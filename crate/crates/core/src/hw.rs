//! Golden models of the minifloat multiplier and the hybrid
//! minifloat-by-minifloat into fixed-point multiply-accumulate unit.
//!
//! The multiplier keeps an `(e+1)`-bit exponent (the raw sum of the two
//! biased exponent fields) and truncates the exact `2m`-fractional-bit
//! significand product to 2 integer bits and `m+1` fractional bits. No
//! renormalization happens inside the multiplier; the fixed-point
//! conversion absorbs it.

use std::fmt::Write as _;

use crate::codec::is_zero_codeword;
use crate::error::{Error, Result};
use crate::format::{exp2i, Codeword, MinifloatFormat, ZeroEncoding};

/// Bit-level multiplier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MulResult {
    pub sign: bool,
    /// `E_a + E_b`, an `(e+1)`-bit field carrying bias `E_Ba + E_Bb`.
    pub exp_ext: u32,
    /// Significand product on a fixed grid with `m+1` fractional bits,
    /// `2^(m+1) <= mant_ext < 2^(m+3)` when non-zero.
    pub mant_ext: u32,
    pub is_zero: bool,
}

impl MulResult {
    /// Real value of the result given the sum of both operand biases.
    pub fn value(&self, fmt: MinifloatFormat, bias_sum: i32) -> f64 {
        if self.is_zero {
            return 0.0;
        }
        let frac = fmt.man_bits() as i32 + 1;
        let mag = self.mant_ext as f64 * exp2i(self.exp_ext as i32 - bias_sum - frac);
        if self.sign {
            -mag
        } else {
            mag
        }
    }
}

/// Hardware zero detection: binade encoding looks only at the exponent
/// field, point encoding also needs the mantissa bits.
pub fn zero_detect(c: Codeword, fmt: MinifloatFormat) -> bool {
    is_zero_codeword(c, fmt)
}

pub fn minifloat_mul_golden(a: Codeword, b: Codeword, fmt: MinifloatFormat) -> MulResult {
    let m = fmt.man_bits();
    let is_zero = zero_detect(a, fmt) || zero_detect(b, fmt);
    let sign = a.sign(fmt) ^ b.sign(fmt);
    let exp_ext = a.exp_field(fmt) + b.exp_field(fmt);
    let sig_a = (1u64 << m) | a.man_field(fmt) as u64;
    let sig_b = (1u64 << m) | b.man_field(fmt) as u64;
    // product has 2m fractional bits; keep m+1 of them
    let mant_ext = ((sig_a * sig_b) >> (m - 1)) as u32;
    MulResult { sign, exp_ext, mant_ext, is_zero }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    #[default]
    Saturate,
    Error,
}

/// Two's-complement accumulator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacConfig {
    pub width: u32,
    /// The accumulator LSB weighs `2^lsb_exp`.
    pub lsb_exp: i32,
    pub overflow: OverflowPolicy,
}

impl MacConfig {
    /// Default configuration: 32-bit saturating accumulator with the LSB at
    /// `2^-(E_Bx + E_Bw + m + 1)`, the finest grid any product lands on.
    pub fn for_format(fmt: MinifloatFormat, bias_x: i32, bias_w: i32) -> Self {
        Self {
            width: 32,
            lsb_exp: -(bias_x + bias_w + fmt.man_bits() as i32 + 1),
            overflow: OverflowPolicy::Saturate,
        }
    }

    pub fn with_width(self, width: u32) -> Self {
        Self { width, ..self }
    }

    pub fn with_policy(self, overflow: OverflowPolicy) -> Self {
        Self { overflow, ..self }
    }

    pub fn validate(&self, fmt: MinifloatFormat) -> Result<()> {
        if self.width < fmt.man_bits() + 3 || self.width > 64 {
            return Err(Error::InvalidArgument(format!(
                "accumulator width {} not in {}..=64",
                self.width,
                fmt.man_bits() + 3
            )));
        }
        Ok(())
    }

    fn bounds(&self) -> (i128, i128) {
        let half = 1i128 << (self.width - 1);
        (-half, half - 1)
    }
}

/// Integer image of a product on the accumulator grid.
pub fn to_fixed_point(r: MulResult, fmt: MinifloatFormat, bias_sum: i32, cfg: &MacConfig) -> Result<i64> {
    cfg.validate(fmt)?;
    if r.is_zero {
        return Ok(0);
    }
    // value = mant_ext * 2^(exp_ext - bias_sum - (m+1)); divide by 2^lsb_exp
    let shift = r.exp_ext as i64 - bias_sum as i64 - (fmt.man_bits() as i64 + 1) - cfg.lsb_exp as i64;
    if shift < 0 {
        return Err(Error::InvalidArgument(format!(
            "product exponent lies {} bits below the accumulator LSB",
            -shift
        )));
    }
    let mag = (r.mant_ext as i128).checked_shl(shift as u32).filter(|_| shift < 100);
    let (lo, hi) = cfg.bounds();
    let v = match mag {
        Some(mag) => {
            if r.sign {
                -mag
            } else {
                mag
            }
        }
        None => i128::MAX,
    };
    if v < lo || v > hi {
        return match cfg.overflow {
            OverflowPolicy::Saturate => Ok(v.clamp(lo, hi) as i64),
            OverflowPolicy::Error => Err(Error::Overflow { index: 0 }),
        };
    }
    Ok(v as i64)
}

/// Result of a hybrid dot product: raw accumulator and its real value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacOutput {
    pub acc: i64,
    pub value: f64,
    pub saturated: bool,
}

/// `sum_i x_i * w_i` with minifloat products accumulated in fixed point.
pub fn hybrid_mac_dot(
    x: &[Codeword],
    w: &[Codeword],
    fmt: MinifloatFormat,
    bias_x: i32,
    bias_w: i32,
    cfg: &MacConfig,
) -> Result<MacOutput> {
    if x.len() != w.len() {
        return Err(Error::Shape(format!("dot operands have lengths {} and {}", x.len(), w.len())));
    }
    cfg.validate(fmt)?;
    let (lo, hi) = cfg.bounds();
    let bias_sum = bias_x + bias_w;
    let mut acc: i128 = 0;
    let mut saturated = false;
    for (i, (&a, &b)) in x.iter().zip(w).enumerate() {
        let a = a.validate(fmt)?;
        let b = b.validate(fmt)?;
        let term = match to_fixed_point(minifloat_mul_golden(a, b, fmt), fmt, bias_sum, cfg) {
            Ok(t) => t,
            Err(Error::Overflow { .. }) => return Err(Error::Overflow { index: i }),
            Err(e) => return Err(e),
        };
        acc += term as i128;
        if acc < lo || acc > hi {
            match cfg.overflow {
                OverflowPolicy::Saturate => {
                    acc = acc.clamp(lo, hi);
                    saturated = true;
                }
                OverflowPolicy::Error => return Err(Error::Overflow { index: i }),
            }
        }
    }
    let acc = acc as i64;
    let value = acc as f64 * 2f64.powi(cfg.lsb_exp);
    Ok(MacOutput { acc, value, saturated })
}

/// Outcome of an exhaustive multiplier sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MulSweep {
    pub pairs: u64,
    pub exact: u64,
    /// Largest `|truncated - exact| / |exact|` over non-zero products.
    pub max_rel_error: f64,
    pub first_mismatch: Option<(Codeword, Codeword)>,
}

/// Checks every input pair of `fmt` against a floating-point reference:
/// the exact product of the decoded operands (exact in `f64` for
/// `m <= 23`) truncated toward zero on the `2^(exp_ext - bias_sum - m - 1)`
/// grid. Calls `sink` with every pair and its result.
pub fn sweep_multiplier<F>(fmt: MinifloatFormat, bias: i32, mut sink: F) -> Result<MulSweep>
where
    F: FnMut(Codeword, Codeword, &MulResult) -> Result<()>,
{
    crate::format::check_bias(bias as i64)?;
    let bias_sum = 2 * bias;
    let frac = fmt.man_bits() as i32 + 1;
    let mut out = MulSweep { pairs: 0, exact: 0, max_rel_error: 0.0, first_mismatch: None };
    for a in fmt.codewords() {
        for b in fmt.codewords() {
            let r = minifloat_mul_golden(a, b, fmt);
            sink(a, b, &r)?;
            let p = crate::codec::decode(a, fmt, bias) * crate::codec::decode(b, fmt, bias);
            let ok = if p == 0.0 {
                r.is_zero
            } else {
                let grid = exp2i(r.exp_ext as i32 - bias_sum - frac);
                let expect = (p.abs() / grid).floor();
                let rel = (r.value(fmt, bias_sum) - p).abs() / p.abs();
                out.max_rel_error = out.max_rel_error.max(rel);
                !r.is_zero && r.sign == (p < 0.0) && r.mant_ext as f64 == expect
            };
            out.pairs += 1;
            if ok {
                out.exact += 1;
            } else if out.first_mismatch.is_none() {
                out.first_mismatch = Some((a, b));
            }
        }
    }
    Ok(out)
}

/// Reference LUT counts for the multiplier on a Zynq UltraScale+ target,
/// indexed `[e-1][m-1]`.
const LUT_ZERO_BINADE: [[u32; 3]; 4] = [[4, 4, 6], [6, 6, 8], [8, 8, 10], [9, 9, 11]];
const LUT_ZERO_POINT: [[u32; 3]; 4] = [[4, 6, 8], [7, 7, 9], [7, 8, 11], [9, 10, 13]];

pub fn lut_cost(fmt: MinifloatFormat) -> Result<u32> {
    let (e, m) = (fmt.exp_bits() as usize, fmt.man_bits() as usize);
    if !(1..=4).contains(&e) || !(1..=3).contains(&m) {
        return Err(Error::NoLutEntry(fmt.to_string()));
    }
    Ok(match fmt.zero_encoding() {
        ZeroEncoding::Binade => LUT_ZERO_BINADE[e - 1][m - 1],
        ZeroEncoding::Point => LUT_ZERO_POINT[e - 1][m - 1],
    })
}

/// Plain-text LUT table, one row per format.
pub fn lut_report() -> String {
    let mut out = String::from("format  E_X=0  M_X=0&E_X=0\n");
    for e in 1..=4 {
        for m in 1..=3 {
            let zb = MinifloatFormat::new(e, m, ZeroEncoding::Binade).unwrap();
            let zp = zb.with_zero_encoding(ZeroEncoding::Point);
            let _ = writeln!(
                out,
                "E{e}M{m}    {:>5}  {:>11}",
                lut_cost(zb).unwrap(),
                lut_cost(zp).unwrap()
            );
        }
    }
    out
}

/// One testbench stimulus line: `a_bits b_bits sign exp_ext mant_ext is_zero`
/// in lowercase hexadecimal.
pub fn test_vector_line(a: Codeword, b: Codeword, r: &MulResult) -> String {
    format!(
        "{:x} {:x} {:x} {:x} {:x} {:x}",
        a.0, b.0, r.sign as u8, r.exp_ext, r.mant_ext, r.is_zero as u8
    )
}

/// Parses a line written by [`test_vector_line`].
pub fn parse_test_vector(line: &str) -> Result<(Codeword, Codeword, MulResult)> {
    let fields: Vec<u32> = line
        .split_whitespace()
        .map(|t| u32::from_str_radix(t, 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("bad test vector `{line}`: {e}")))?;
    let [a, b, sign, exp_ext, mant_ext, is_zero] = fields[..] else {
        return Err(Error::Parse(format!("test vector `{line}` needs 6 fields")));
    };
    Ok((
        Codeword(a),
        Codeword(b),
        MulResult { sign: sign != 0, exp_ext, mant_ext, is_zero: is_zero != 0 },
    ))
}
