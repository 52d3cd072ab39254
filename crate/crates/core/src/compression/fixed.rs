use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOTAL_BITS: u8 = 8;

/// Signed 8-bit fixed point: `integer_bits` (sign included) plus
/// `8 - integer_bits` fractional bits. Rounds half to even and saturates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatRepr", into = "FormatRepr")]
pub struct FixedPointFormat {
    integer_bits: u8,
}

#[derive(Serialize, Deserialize)]
struct FormatRepr {
    integer_bits: u8,
    fractional_bits: u8,
}

impl TryFrom<FormatRepr> for FixedPointFormat {
    type Error = Error;

    fn try_from(r: FormatRepr) -> Result<Self> {
        if r.integer_bits.checked_add(r.fractional_bits) != Some(TOTAL_BITS) {
            return Err(Error::InvalidArgument(format!(
                "format Q{}.{} is not 8 bits wide",
                r.integer_bits, r.fractional_bits
            )));
        }
        FixedPointFormat::new(r.integer_bits)
    }
}

impl From<FixedPointFormat> for FormatRepr {
    fn from(f: FixedPointFormat) -> Self {
        FormatRepr {
            integer_bits: f.integer_bits(),
            fractional_bits: f.fractional_bits(),
        }
    }
}

impl Default for FixedPointFormat {
    /// Q3.5: range [-4, 3.96875], resolution 1/32.
    fn default() -> Self {
        FixedPointFormat { integer_bits: 3 }
    }
}

impl FixedPointFormat {
    pub fn new(integer_bits: u8) -> Result<Self> {
        if !(1..=7).contains(&integer_bits) {
            return Err(Error::InvalidArgument(format!(
                "integer bits must be in 1..=7, got {integer_bits}"
            )));
        }
        Ok(FixedPointFormat { integer_bits })
    }

    pub fn integer_bits(self) -> u8 {
        self.integer_bits
    }

    pub fn fractional_bits(self) -> u8 {
        TOTAL_BITS - self.integer_bits
    }

    /// `2^fractional_bits`.
    pub fn scale(self) -> f64 {
        f64::from(1u32 << self.fractional_bits())
    }

    pub fn min_value(self) -> f64 {
        f64::from(i8::MIN) / self.scale()
    }

    pub fn max_value(self) -> f64 {
        f64::from(i8::MAX) / self.scale()
    }

    /// Integer bits in the high nibble, fractional bits in the low nibble.
    pub fn nibbles(self) -> u8 {
        (self.integer_bits << 4) | self.fractional_bits()
    }

    pub fn from_nibbles(b: u8) -> Result<Self> {
        FormatRepr {
            integer_bits: b >> 4,
            fractional_bits: b & 0x0f,
        }
        .try_into()
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.integer_bits, self.fractional_bits())
    }
}

/// Parses `I.F`, e.g. `3.5`.
impl FromStr for FixedPointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected a format like 3.5, got {s:?}"));
        let (i, f) = s.trim().trim_start_matches(['Q', 'q']).split_once('.').ok_or_else(bad)?;
        FormatRepr {
            integer_bits: i.parse().map_err(|_| bad())?,
            fractional_bits: f.parse().map_err(|_| bad())?,
        }
        .try_into()
    }
}

pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i64::from(i8::MIN), i64::from(i8::MAX)) as i8
}

pub fn quantize_value(x: f64, fmt: FixedPointFormat) -> i8 {
    let scaled = (x * fmt.scale()).round_ties_even();
    if scaled.is_nan() {
        return 0;
    }
    scaled.clamp(f64::from(i8::MIN), f64::from(i8::MAX)) as i8
}

pub fn dequantize(q: i8, fmt: FixedPointFormat) -> f64 {
    f64::from(q) / fmt.scale()
}

/// `v / 2^shift` rounded half to even.
pub fn shift_round_even(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let q = v >> shift;
    let rem = v - (q << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// `num / den` rounded half to even, `den > 0`.
pub fn div_round_even(num: i64, den: i64) -> i64 {
    let q = num.div_euclid(den);
    let r2 = 2 * num.rem_euclid(den);
    if r2 > den || (r2 == den && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q35() -> FixedPointFormat {
        FixedPointFormat::default()
    }

    #[test]
    fn examples() {
        assert_eq!(quantize_value(0.1, q35()), 3);
        assert_eq!(dequantize(3, q35()), 0.09375);
        assert_eq!(quantize_value(4.0, q35()), 127);
        assert_eq!(dequantize(127, q35()), 3.96875);
        assert_eq!(quantize_value(0.046875, q35()), 2);
        assert_eq!(quantize_value(0.015625, q35()), 0);
        assert_eq!(quantize_value(-0.046875, q35()), -2);
        assert_eq!(quantize_value(-5.0, q35()), -128);
        assert_eq!(quantize_value(f64::NAN, q35()), 0);
    }

    #[test]
    fn format_parsing_and_nibbles() {
        let f: FixedPointFormat = "3.5".parse().unwrap();
        assert_eq!(f, q35());
        assert_eq!(f.nibbles(), 0x35);
        assert_eq!(FixedPointFormat::from_nibbles(0x26).unwrap().to_string(), "2.6");
        assert!("4.5".parse::<FixedPointFormat>().is_err());
        assert!("0.8".parse::<FixedPointFormat>().is_err());
        assert!("x".parse::<FixedPointFormat>().is_err());
        assert!(FixedPointFormat::from_nibbles(0x00).is_err());
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(json, r#"{"integer_bits":3,"fractional_bits":5}"#);
        assert_eq!(serde_json::from_str::<FixedPointFormat>(&json).unwrap(), f);
        assert!(serde_json::from_str::<FixedPointFormat>(r#"{"integer_bits":3,"fractional_bits":4}"#).is_err());
    }

    #[test]
    fn range() {
        assert_eq!(q35().min_value(), -4.0);
        assert_eq!(q35().max_value(), 4.0 - 1.0 / 32.0);
    }

    #[test]
    fn integer_rounding_helpers() {
        assert_eq!(shift_round_even(16 * 16, 5), 8);
        assert_eq!(shift_round_even(48, 5), 2); // 1.5 → 2
        assert_eq!(shift_round_even(80, 5), 2); // 2.5 → 2
        assert_eq!(shift_round_even(-48, 5), -2);
        assert_eq!(shift_round_even(-80, 5), -2);
        assert_eq!(shift_round_even(-81, 5), -3);
        assert_eq!(div_round_even(5, 2), 2);
        assert_eq!(div_round_even(7, 2), 4);
        assert_eq!(div_round_even(-5, 2), -2);
    }

    proptest! {
        #[test]
        fn roundtrip_error_bound(x in -4.0f64..3.96875, ib in 1u8..=7) {
            let f = FixedPointFormat::new(ib).unwrap();
            let x = x.clamp(f.min_value(), f.max_value());
            let err = (dequantize(quantize_value(x, f), f) - x).abs();
            prop_assert!(err <= 0.5 / f.scale());
        }

        #[test]
        fn monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo, q35()) <= quantize_value(hi, q35()));
        }

        #[test]
        fn idempotent(q in any::<i8>(), ib in 1u8..=7) {
            let f = FixedPointFormat::new(ib).unwrap();
            prop_assert_eq!(quantize_value(dequantize(q, f), f), q);
        }

        #[test]
        fn shift_matches_float_rounding(v in -1_000_000i64..1_000_000, s in 0u32..12) {
            let exact = v as f64 / (1u64 << s) as f64;
            prop_assert_eq!(shift_round_even(v, s), exact.round_ties_even() as i64);
            prop_assert_eq!(div_round_even(v, 1 << s), exact.round_ties_even() as i64);
        }
    }
}
