//! Codeword <-> value conversion and value-set enumeration.

use crate::error::{Error, Result};
use crate::format::{check_bias, exp2i, floor_log2, Codeword, MinifloatFormat, ZeroEncoding};

/// True when the codeword decodes to zero under the format's zero encoding.
pub fn is_zero_codeword(c: Codeword, fmt: MinifloatFormat) -> bool {
    let exp = c.exp_field(fmt);
    match fmt.zero_encoding() {
        ZeroEncoding::Point => exp == 0 && c.man_field(fmt) == 0,
        ZeroEncoding::Binade => exp == 0,
    }
}

/// `(-1)^s * (1 + M_X / 2^m) * 2^(E_X - E_B)`, or zero when the zero rule
/// fires. The negative-zero pattern decodes to `+0.0`.
pub fn decode(c: Codeword, fmt: MinifloatFormat, bias: i32) -> f64 {
    debug_assert!((c.0 as u64) < fmt.codeword_count());
    if is_zero_codeword(c, fmt) {
        return 0.0;
    }
    let m = fmt.man_bits() as i32;
    let significand = ((1u32 << m) + c.man_field(fmt)) as f64;
    let magnitude = significand * exp2i(c.exp_field(fmt) as i32 - bias - m);
    if c.sign(fmt) {
        -magnitude
    } else {
        magnitude
    }
}

/// Inverse of [`decode`] over the value set. Zero maps to the all-zero
/// codeword; anything outside the value set is rejected.
pub fn encode(v: f64, fmt: MinifloatFormat, bias: i32) -> Result<Codeword> {
    check_bias(bias as i64)?;
    let not_repr = || Error::NotRepresentable { value: v, format: fmt.to_string(), bias };
    if v == 0.0 {
        return Ok(Codeword(0));
    }
    if !v.is_finite() {
        return Err(not_repr());
    }
    let m = fmt.man_bits() as i32;
    let k = floor_log2(v);
    let exp = k as i64 + bias as i64;
    if exp < 0 || exp > fmt.max_exp_field() as i64 {
        return Err(not_repr());
    }
    // |v| / 2^(k-m) lies in [2^m, 2^(m+1)); the mantissa must be integral.
    let scaled = v.abs() * 2f64.powi(m - k);
    if scaled.fract() != 0.0 {
        return Err(not_repr());
    }
    let man = scaled as u32 - (1u32 << m);
    let c = Codeword::from_fields(v < 0.0, exp as u32, man, fmt)?;
    if is_zero_codeword(c, fmt) || decode(c, fmt, bias) != v {
        return Err(not_repr());
    }
    Ok(c)
}

/// All distinct decoded values in increasing order.
pub fn enumerate_values(fmt: MinifloatFormat, bias: i32) -> Result<Vec<f64>> {
    check_bias(bias as i64)?;
    let mut values: Vec<f64> = fmt.codewords().map(|c| decode(c, fmt, bias)).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(s: &str) -> MinifloatFormat {
        s.parse().unwrap()
    }

    #[test]
    fn decode_examples() {
        let f = fmt("E2M2");
        assert_eq!(decode(Codeword(0), f, 1), 0.0);
        assert_eq!(decode(Codeword::from_fields(false, 1, 0b01, f).unwrap(), f, 1), 1.25);
        assert_eq!(decode(Codeword::from_fields(true, 3, 0b11, f).unwrap(), f, 1), -7.0);
        // negative zero pattern
        let nz = Codeword::from_fields(true, 0, 0, f).unwrap();
        assert_eq!(decode(nz, f, 1).to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn encode_examples() {
        let f = fmt("E2M2");
        assert_eq!(encode(0.0, f, 1).unwrap(), Codeword(0));
        assert_eq!(encode(-0.0, f, 1).unwrap(), Codeword(0));
        assert_eq!(encode(1.25, f, 1).unwrap(), Codeword::from_fields(false, 1, 1, f).unwrap());
        assert!(matches!(encode(1.3, f, 1), Err(Error::NotRepresentable { .. })));
        // 2^-E_B is the zero pattern under the point encoding
        assert!(encode(0.5, f, 1).is_err());
        assert!(encode(8.0, f, 1).is_err());
        assert!(encode(f64::NAN, f, 1).is_err());
        // subnormal-position values are zero under the binade encoding
        assert!(encode(0.625, fmt("E2M2:zb"), 1).is_err());
        assert!(encode(0.625, f, 1).is_ok());
    }

    #[test]
    fn e1m1_value_set() {
        // 16 codewords: E_X=0,M_X=0 is zero (both signs), the rest are normal.
        let vals = enumerate_values(fmt("E1M1"), 0).unwrap();
        assert_eq!(vals, vec![-3.0, -2.0, -1.5, 0.0, 1.5, 2.0, 3.0]);
        assert_eq!(vals.len() as u64, fmt("E1M1").distinct_values());
    }

    #[test]
    fn e2m2_value_set() {
        let vals = enumerate_values(fmt("E2M2"), 1).unwrap();
        assert_eq!(vals.len(), 31);
        assert_eq!(*vals.last().unwrap(), 7.0);
        assert_eq!(vals[16], 0.625);
    }

    #[test]
    fn value_set_is_sorted_and_symmetric() {
        for e in 1..=4 {
            for m in 1..=3 {
                for zero in [ZeroEncoding::Point, ZeroEncoding::Binade] {
                    let f = MinifloatFormat::new(e, m, zero).unwrap();
                    for bias in [-3, 0, 2, 7] {
                        let vals = enumerate_values(f, bias).unwrap();
                        assert!(vals.windows(2).all(|w| w[0] < w[1]));
                        let n = vals.len();
                        assert_eq!(n as u64, f.distinct_values());
                        for i in 0..n {
                            assert_eq!(vals[i], -vals[n - 1 - i]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_encoding_cardinality_gap() {
        for e in 1..=5 {
            for m in 1..=4 {
                let zp = enumerate_values(MinifloatFormat::new(e, m, ZeroEncoding::Point).unwrap(), 2)
                    .unwrap()
                    .len();
                let zb = enumerate_values(MinifloatFormat::new(e, m, ZeroEncoding::Binade).unwrap(), 2)
                    .unwrap()
                    .len();
                assert_eq!(zp - zb, 2 * ((1 << m) - 1));
            }
        }
    }
}
