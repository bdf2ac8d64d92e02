//! Bit-exact text encoding of `f64` as C99-style hexadecimal floats
//! (`0x1.8p+1`, `-0x0.0000000000001p-1022`, `inf`, `-inf`, `nan`), plus serde
//! adapters for scalars, vectors and row-major matrices.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn encode(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        if mant == 0 {
            return format!("{sign}0x0p+0");
        }
        return format!("{sign}0x0.{mant:013x}p-1022");
    }
    let e = exp - 1023;
    let esign = if e < 0 { '-' } else { '+' };
    if mant == 0 {
        format!("{sign}0x1p{esign}{}", e.abs())
    } else {
        let digits = format!("{mant:013x}");
        format!("{sign}0x1.{}p{esign}{}", digits.trim_end_matches('0'), e.abs())
    }
}

pub fn decode(s: &str) -> Option<f64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let signed = |v: f64| if neg { -v } else { v };
    match body {
        "nan" => return (!neg).then_some(f64::NAN),
        "inf" => return Some(signed(f64::INFINITY)),
        _ => {}
    }
    let body = body.strip_prefix("0x")?;
    let (mantissa, exponent) = body.split_once('p')?;
    let exponent: i32 = exponent.parse().ok()?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let frac_bits = if frac.is_empty() { 0 } else { u64::from_str_radix(&format!("{frac:0<13}"), 16).ok()? };
    let bits = match lead {
        "1" => {
            let e = exponent + 1023;
            if !(1..=2046).contains(&e) {
                return None;
            }
            ((e as u64) << 52) | frac_bits
        }
        "0" if frac_bits == 0 && exponent == 0 => 0,
        "0" if exponent == -1022 => frac_bits,
        _ => return None,
    };
    Some(signed(f64::from_bits(bits)))
}

fn decode_de<E: serde::de::Error>(s: &str) -> Result<f64, E> {
    decode(s).ok_or_else(|| E::custom(format!("invalid hex float {s:?}")))
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&encode(*v))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    decode_de(&String::deserialize(d)?)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_some(&encode(*x)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<String>::deserialize(d)?.map(|s| decode_de(&s)).transpose()
    }
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&encode(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|s| decode_de(s)).collect()
    }
}

pub mod matrix {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for row in v {
            seq.serialize_element(&row.iter().map(|x| encode(*x)).collect::<Vec<_>>())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Vec<String>>::deserialize(d)?;
        let out: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|s| decode_de(s)).collect::<Result<_, _>>()).collect::<Result<_, _>>()?;
        if out.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(D::Error::custom("ragged matrix"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_encodings() {
        assert_eq!(encode(1.0), "0x1p+0");
        assert_eq!(encode(3.0), "0x1.8p+1");
        assert_eq!(encode(-0.5), "-0x1p-1");
        assert_eq!(encode(0.0), "0x0p+0");
        assert_eq!(encode(-0.0), "-0x0p+0");
        assert_eq!(encode(f64::MIN_POSITIVE / 2.0), "0x0.8000000000000p-1022");
        assert_eq!(encode(f64::INFINITY), "inf");
    }

    #[test]
    fn round_trips_bits() {
        for v in [
            0.1,
            -1e-300,
            f64::MAX,
            f64::MIN_POSITIVE,
            f64::from_bits(1),
            -0.0,
            std::f64::consts::PI,
            f64::NEG_INFINITY,
        ] {
            assert_eq!(decode(&encode(v)).unwrap().to_bits(), v.to_bits(), "{v}");
        }
        assert!(decode("nan").unwrap().is_nan());
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "1.0", "0x2p+0", "0x1.zp+0", "0x1p+5000", "0x1.00000000000000p+0", "-nan"] {
            assert!(decode(s).is_none(), "{s}");
        }
    }
}
