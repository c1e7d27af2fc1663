//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export has a plain Rust counterpart returning `Result<_, String>`
//! so the logic is testable off the browser.

use minifloat_qat::codec::enumerate_values;
use minifloat_qat::format::{MinifloatFormat, QuantRange};
use minifloat_qat::hw::{minifloat_mul_golden, MulResult};
use minifloat_qat::quant::{integer_bias, quantize};
use minifloat_qat::codec::decode;
use wasm_bindgen::prelude::*;

const MAX_CURVE_POINTS: usize = 20_000;
const MAX_MUL_BITS: u32 = 8;

fn parse(fmt: &str) -> Result<MinifloatFormat, String> {
    MinifloatFormat::parse_with_suffix(fmt.trim()).map(|(f, _)| f).map_err(|e| e.to_string())
}

/// Sorted distinct values of `fmt` at integer bias `bias`.
pub fn grid(fmt: &str, bias: i32) -> Result<Vec<f64>, String> {
    let fmt = parse(fmt)?;
    if fmt.width() > 12 {
        return Err(format!("{fmt} has too many values to list"));
    }
    enumerate_values(fmt, bias).map_err(|e| e.to_string())
}

/// `[x_min, x_max, value count, integer bias]` for a real-valued `e0`.
pub fn range_summary(fmt: &str, e0: f64) -> Result<Vec<f64>, String> {
    let fmt = parse(fmt)?;
    let bias = integer_bias(e0).map_err(|e| e.to_string())?;
    let r = QuantRange::new(fmt, bias).map_err(|e| e.to_string())?;
    Ok(vec![r.x_min, r.x_max, fmt.distinct_values() as f64, bias as f64])
}

/// Quantizer output over `n` evenly spaced inputs in `[lo, hi]`.
pub fn curve(fmt: &str, e0: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    let fmt = parse(fmt)?;
    if !(2..=MAX_CURVE_POINTS).contains(&n) || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(format!("need lo < hi and 2..={MAX_CURVE_POINTS} points"));
    }
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    quantize(&xs, fmt, e0).map_err(|e| e.to_string())
}

/// Relative truncation error of the hardware multiplier for every pair of
/// codewords, row-major by first operand. Pairs with a zero product are NaN.
pub fn mul_errors(fmt: &str, bias: i32) -> Result<Vec<f64>, String> {
    let fmt = parse(fmt)?;
    if fmt.width() > MAX_MUL_BITS {
        return Err(format!("{fmt} is wider than {MAX_MUL_BITS} bits"));
    }
    let words: Vec<_> = fmt.codewords().collect();
    let mut out = Vec::with_capacity(words.len() * words.len());
    for &a in &words {
        for &b in &words {
            let exact = decode(a, fmt, bias) * decode(b, fmt, bias);
            let r: MulResult = minifloat_mul_golden(a, b, fmt);
            out.push(if exact == 0.0 { f64::NAN } else { (r.value(fmt, 2 * bias) - exact).abs() / exact.abs() });
        }
    }
    Ok(out)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn value_grid(fmt: &str, bias: i32) -> Result<Vec<f64>, JsError> {
    js(grid(fmt, bias))
}

#[wasm_bindgen]
pub fn format_range(fmt: &str, e0: f64) -> Result<Vec<f64>, JsError> {
    js(range_summary(fmt, e0))
}

#[wasm_bindgen]
pub fn quantize_curve(fmt: &str, e0: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    js(curve(fmt, e0, lo, hi, n))
}

#[wasm_bindgen]
pub fn multiplier_error(fmt: &str, bias: i32) -> Result<Vec<f64>, JsError> {
    js(mul_errors(fmt, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e2m2_grid() {
        let g = grid("E2M2", 1).unwrap();
        assert_eq!(g.len(), 31);
        assert_eq!(g[16], 0.625);
        assert_eq!(*g.last().unwrap(), 7.0);
        assert_eq!(range_summary("E2M2", 0.4).unwrap(), vec![0.625, 7.0, 31.0, 1.0]);
    }

    #[test]
    fn curve_saturates_and_flushes() {
        let c = curve("E2M2", 1.0, -10.0, 10.0, 201).unwrap();
        assert_eq!(c[0], -7.0);
        assert_eq!(c[100], 0.0);
        assert_eq!(c[200], 7.0);
        assert!(curve("E2M2", 1.0, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn multiplier_errors_are_bounded() {
        let errs = mul_errors("E3M2", 3).unwrap();
        assert_eq!(errs.len(), 64 * 64);
        assert!(errs.iter().filter(|e| !e.is_nan()).all(|&e| e < 0.25));
        assert!(errs[0].is_nan());
        assert!(mul_errors("E4M4", 7).is_err());
    }
}
