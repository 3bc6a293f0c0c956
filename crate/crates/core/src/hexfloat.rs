//! C99-style hexadecimal float text (`0x1.921fb54442d18p+1`), the same
//! spelling Python's `float.hex` produces. Round-trips every finite `f64`
//! bit-exactly.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid hex float {text:?}: {reason}")]
pub struct HexFloatError {
    pub text: String,
    pub reason: &'static str,
}

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let biased = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & FRAC_MASK;
    match (biased, frac) {
        (0, 0) => format!("{sign}0x0.0p+0"),
        (0, _) => format!("{sign}0x0.{frac:013x}p-1022"),
        _ => format!("{sign}0x1.{frac:013x}p{:+}", biased - 1023),
    }
}

pub fn parse(text: &str) -> Result<f64, HexFloatError> {
    let err = |reason| HexFloatError {
        text: text.to_string(),
        reason,
    };
    let (negative, body) = match text.as_bytes().first() {
        Some(b'-') => (true, &text[1..]),
        Some(b'+') => (false, &text[1..]),
        _ => (false, text),
    };
    let signed = |v: f64| if negative { -v } else { v };
    match body {
        "inf" => return Ok(signed(f64::INFINITY)),
        "nan" => return Ok(f64::NAN),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(|| err("missing 0x prefix"))?;
    let (digits, exp) = body
        .split_once(['p', 'P'])
        .ok_or_else(|| err("missing binary exponent"))?;
    let exp: i64 = exp.parse().map_err(|_| err("bad exponent"))?;
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err("no digits"));
    }

    let mut mant: u128 = 0;
    let mut scale = exp;
    for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
        let d = c.to_digit(16).ok_or_else(|| err("non-hex digit"))?;
        if mant >> 120 != 0 {
            return Err(err("too many significant digits"));
        }
        mant = (mant << 4) | d as u128;
        if i >= int_part.len() {
            scale -= 4;
        }
    }
    if mant == 0 {
        return Ok(signed(0.0));
    }

    // Normalize so the leading bit sits at position 52.
    let top = 127 - mant.leading_zeros() as i64;
    let mut e = scale + top;
    let shift = top - FRAC_BITS as i64;
    let mut m = if shift > 0 {
        if mant & ((1u128 << shift) - 1) != 0 {
            return Err(err("not exactly representable"));
        }
        (mant >> shift) as u64
    } else {
        (mant << (-shift)) as u64
    };
    if e > 1023 {
        return Err(err("overflow"));
    }
    if e < -1022 {
        let sub = -1022 - e;
        if sub > 52 || m & ((1u64 << sub) - 1) != 0 {
            return Err(err("not exactly representable"));
        }
        m >>= sub;
        e = -1023;
    }
    let biased = (e + 1023) as u64;
    let bits = (biased << FRAC_BITS) | (m & FRAC_MASK);
    Ok(signed(f64::from_bits(bits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_python_float_hex() {
        let cases = [
            (1.0, "0x1.0000000000000p+0"),
            (0.1, "0x1.999999999999ap-4"),
            (-2.5, "-0x1.4000000000000p+1"),
            (5e-324, "0x0.0000000000001p-1022"),
            (2.2250738585072014e-308, "0x1.0000000000000p-1022"),
            (f64::MAX, "0x1.fffffffffffffp+1023"),
            (0.0, "0x0.0p+0"),
            (-0.0, "-0x0.0p+0"),
            (std::f64::consts::PI, "0x1.921fb54442d18p+1"),
            (1e-310, "0x0.012688b70e62bp-1022"),
        ];
        for (v, s) in cases {
            assert_eq!(format(v), s);
            assert_eq!(parse(s).unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn parses_non_canonical_spellings() {
        assert_eq!(parse("0x1p-1").unwrap(), 0.5);
        assert_eq!(parse("0x3.0p+0").unwrap(), 3.0);
        assert_eq!(parse("0x.8p1").unwrap(), 1.0);
        assert!(parse("1.0").is_err());
        assert!(parse("0x1.0").is_err());
        assert!(parse("0x1.g0p0").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_finite_value(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(parse(&format(v)).unwrap().to_bits(), bits);
        }
    }
}
