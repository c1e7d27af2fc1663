//! EeMm minifloat format descriptors.
//!
//! A minifloat codeword packs a sign bit, an `e`-bit exponent field and an
//! `m`-bit mantissa field as `s | E_X | M_X` (sign in the MSB). There are no
//! infinities, NaNs or subnormals: every non-zero codeword is a normal number
//! `(-1)^s * 1.M_X * 2^(E_X - E_B)`. Which codewords decode to zero is set by
//! the [`ZeroEncoding`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent bias values are kept inside this window so every derived
/// quantity (`x_min`, `x_max`, grid steps) stays a normal `f64`.
pub const MAX_ABS_BIAS: i64 = 700;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroEncoding {
    /// Only `E_X = 0, M_X = 0` encodes zero.
    #[default]
    #[serde(alias = "zp")]
    Point,
    /// Every codeword with `E_X = 0` encodes zero.
    #[serde(alias = "zb")]
    Binade,
}

impl fmt::Display for ZeroEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZeroEncoding::Point => f.write_str("point"),
            ZeroEncoding::Binade => f.write_str("binade"),
        }
    }
}

impl FromStr for ZeroEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "point" | "zp" => Ok(ZeroEncoding::Point),
            "binade" | "zb" => Ok(ZeroEncoding::Binade),
            other => Err(Error::InvalidFormat(format!("unknown zero encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MinifloatFormat {
    e: u32,
    m: u32,
    zero: ZeroEncoding,
}

impl MinifloatFormat {
    pub fn new(e: u32, m: u32, zero: ZeroEncoding) -> Result<Self> {
        if !(1..=8).contains(&e) {
            return Err(Error::InvalidFormat(format!("exponent bits {e} not in 1..=8")));
        }
        if !(1..=23).contains(&m) {
            return Err(Error::InvalidFormat(format!("mantissa bits {m} not in 1..=23")));
        }
        if 1 + e + m > 32 {
            return Err(Error::InvalidFormat(format!("E{e}M{m} is wider than 32 bits")));
        }
        Ok(Self { e, m, zero })
    }

    pub fn exp_bits(&self) -> u32 {
        self.e
    }

    pub fn man_bits(&self) -> u32 {
        self.m
    }

    pub fn zero_encoding(&self) -> ZeroEncoding {
        self.zero
    }

    pub fn with_zero_encoding(self, zero: ZeroEncoding) -> Self {
        Self { zero, ..self }
    }

    /// Total codeword width `1 + e + m`.
    pub fn width(&self) -> u32 {
        1 + self.e + self.m
    }

    pub fn codeword_count(&self) -> u64 {
        1u64 << self.width()
    }

    pub fn max_exp_field(&self) -> u32 {
        (1 << self.e) - 1
    }

    /// IEEE-style default bias `2^(e-1) - 1`.
    pub fn ieee_bias(&self) -> i32 {
        (1i32 << (self.e - 1)) - 1
    }

    /// Number of distinct decoded values for any bias.
    pub fn distinct_values(&self) -> u64 {
        match self.zero {
            ZeroEncoding::Point => self.codeword_count() - 1,
            ZeroEncoding::Binade => self.codeword_count() - (2 * (1u64 << self.m) - 1),
        }
    }

    /// Every valid codeword in ascending bit order.
    pub fn codewords(&self) -> impl Iterator<Item = Codeword> {
        (0..self.codeword_count()).map(|b| Codeword(b as u32))
    }

    pub fn range(&self, bias: i32) -> Result<QuantRange> {
        QuantRange::new(*self, bias)
    }
}

impl fmt::Display for MinifloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}", self.e, self.m)?;
        if self.zero == ZeroEncoding::Binade {
            f.write_str(":zb")?;
        }
        Ok(())
    }
}

impl MinifloatFormat {
    /// Parses `E<e>M<m>` with an optional `:zb`/`:zp` suffix. Returns the
    /// format and whether the suffix was given explicitly.
    pub fn parse_with_suffix(s: &str) -> Result<(Self, bool)> {
        let s = s.trim();
        let (body, suffix) = match s.split_once(':') {
            Some((b, suf)) => (b, Some(suf)),
            None => (s, None),
        };
        let upper = body.to_ascii_uppercase();
        let bad = || Error::InvalidFormat(format!("expected E<e>M<m>[:zb], got `{s}`"));
        let rest = upper.strip_prefix('E').ok_or_else(bad)?;
        let (e_str, m_str) = rest.split_once('M').ok_or_else(bad)?;
        let e: u32 = e_str.parse().map_err(|_| bad())?;
        let m: u32 = m_str.parse().map_err(|_| bad())?;
        let zero = match suffix {
            Some(suf) => suf.parse()?,
            None => ZeroEncoding::Point,
        };
        Ok((Self::new(e, m, zero)?, suffix.is_some()))
    }
}

impl FromStr for MinifloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_suffix(s).map(|(f, _)| f)
    }
}

/// Raw codeword bits, `s | E_X | M_X` with the mantissa in the LSBs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Codeword(pub u32);

impl Codeword {
    pub fn from_fields(sign: bool, exp: u32, man: u32, fmt: MinifloatFormat) -> Result<Self> {
        if exp > fmt.max_exp_field() || man >= (1 << fmt.m) {
            return Err(Error::InvalidArgument(format!(
                "fields (E={exp}, M={man}) out of range for {fmt}"
            )));
        }
        Ok(Codeword(((sign as u32) << (fmt.e + fmt.m)) | (exp << fmt.m) | man))
    }

    pub fn validate(self, fmt: MinifloatFormat) -> Result<Self> {
        if (self.0 as u64) >= fmt.codeword_count() {
            return Err(Error::InvalidCodeword { bits: self.0, width: fmt.width() });
        }
        Ok(self)
    }

    pub fn sign(self, fmt: MinifloatFormat) -> bool {
        (self.0 >> (fmt.e + fmt.m)) & 1 == 1
    }

    pub fn exp_field(self, fmt: MinifloatFormat) -> u32 {
        (self.0 >> fmt.m) & ((1 << fmt.e) - 1)
    }

    pub fn man_field(self, fmt: MinifloatFormat) -> u32 {
        self.0 & ((1 << fmt.m) - 1)
    }
}

/// Saturation and flush thresholds for a format at an integer bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRange {
    pub x_min: f64,
    pub x_max: f64,
}

impl QuantRange {
    pub fn new(fmt: MinifloatFormat, bias: i32) -> Result<Self> {
        check_bias(bias as i64)?;
        let m = fmt.m as i32;
        let x_min = match fmt.zero {
            ZeroEncoding::Point => exp2i(-bias) * (1.0 + exp2i(-m)),
            ZeroEncoding::Binade => exp2i(1 - bias),
        };
        let x_max = exp2i(fmt.max_exp_field() as i32 - bias) * (2.0 - exp2i(-m));
        Ok(Self { x_min, x_max })
    }
}

pub(crate) fn check_bias(bias: i64) -> Result<()> {
    if bias.abs() > MAX_ABS_BIAS {
        return Err(Error::BiasOutOfRange(bias));
    }
    Ok(())
}

/// Exact `2^k` for `k` in the normal `f64` exponent range.
pub fn exp2i(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k), "2^{k} is not a normal f64");
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(|x|))` computed from the bit pattern, so it is exact at
/// binade boundaries. `x` must be finite and non-zero.
pub fn floor_log2(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = (bits >> 52) as i32;
    if biased == 0 {
        let frac = bits & ((1u64 << 52) - 1);
        -1023 - (frac.leading_zeros() as i32 - 12)
    } else {
        biased - 1023
    }
}

/// `ceil(log2(x))` for finite positive `x`, exact at powers of two.
pub fn ceil_log2(x: f64) -> i32 {
    let k = floor_log2(x);
    if x == exp2i_wide(k) {
        k
    } else {
        k + 1
    }
}

fn exp2i_wide(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        exp2i(k)
    } else {
        2f64.powi(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(s: &str) -> MinifloatFormat {
        s.parse().unwrap()
    }

    #[test]
    fn parses_format_strings() {
        assert_eq!(fmt("E3M2"), MinifloatFormat::new(3, 2, ZeroEncoding::Point).unwrap());
        assert_eq!(fmt("e3m2"), fmt("E3M2"));
        assert_eq!(fmt("E4M3:zb").zero_encoding(), ZeroEncoding::Binade);
        assert_eq!(fmt("E4M3:ZP").zero_encoding(), ZeroEncoding::Point);
        assert_eq!(fmt("E3M2:zb").to_string(), "E3M2:zb");
        assert!("E0M2".parse::<MinifloatFormat>().is_err());
        assert!("E9M2".parse::<MinifloatFormat>().is_err());
        assert!("E8M24".parse::<MinifloatFormat>().is_err());
        assert!("E3".parse::<MinifloatFormat>().is_err());
        assert!("E3M2:xx".parse::<MinifloatFormat>().is_err());
        assert!("E8M23".parse::<MinifloatFormat>().is_ok());
    }

    #[test]
    fn field_slicing() {
        let f = fmt("E2M2");
        let c = Codeword::from_fields(true, 3, 0b11, f).unwrap();
        assert_eq!(c.0, 0b1_11_11);
        assert!(c.sign(f));
        assert_eq!(c.exp_field(f), 3);
        assert_eq!(c.man_field(f), 3);
        assert!(Codeword(0b100000).validate(f).is_err());
    }

    #[test]
    fn e2m2_range() {
        let r = fmt("E2M2").range(1).unwrap();
        assert_eq!(r.x_min, 0.625);
        assert_eq!(r.x_max, 7.0);
        let r = fmt("E2M2:zb").range(1).unwrap();
        assert_eq!(r.x_min, 1.0);
        assert_eq!(r.x_max, 7.0);
    }

    #[test]
    fn log2_helpers_are_exact() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.999_999_999_999), -1);
        assert_eq!(floor_log2(-8.0), 3);
        assert_eq!(floor_log2(f64::MIN_POSITIVE / 4.0), -1024);
        assert_eq!(ceil_log2(2.0), 1);
        assert_eq!(ceil_log2(2.000_000_001), 2);
        assert_eq!(ceil_log2(0.75), 0);
    }
}
