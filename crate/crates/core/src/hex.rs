//! Serde adapters for big integers.
//!
//! Every group element and exponent crosses the wire as a lowercase,
//! big-endian hexadecimal string with no leading zeros (`"0"` for zero).
//! Parsing is strict: anything that would not round-trip byte-for-byte is
//! rejected.

use num_bigint::BigUint;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn encode(value: &BigUint) -> String {
    value.to_str_radix(16)
}

pub fn decode(text: &str) -> Option<BigUint> {
    if text.is_empty() || text.len() > 1 && text.starts_with('0') {
        return None;
    }
    if !text.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    BigUint::parse_bytes(text.as_bytes(), 16)
}

pub fn serialize<S: Serializer>(value: &BigUint, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&encode(value))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<BigUint, D::Error> {
    let text = String::deserialize(deserializer)?;
    decode(&text).ok_or_else(|| D::Error::custom(format!("non-canonical hex integer {text:?}")))
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(values: &[BigUint], serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(values.len()))?;
        for value in values {
            seq.serialize_element(&encode(value))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<BigUint>, D::Error> {
        let texts = Vec::<String>::deserialize(deserializer)?;
        texts.iter().map(|t| decode(t).ok_or_else(|| D::Error::custom(format!("non-canonical hex integer {t:?}")))).collect()
    }
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Option<BigUint>, serializer: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => serializer.serialize_some(&encode(v)),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<BigUint>, D::Error> {
        Option::<String>::deserialize(deserializer)?
            .map(|t| decode(&t).ok_or_else(|| D::Error::custom(format!("non-canonical hex integer {t:?}"))))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_forms() {
        assert_eq!(encode(&BigUint::from(0u32)), "0");
        assert_eq!(encode(&BigUint::from(255u32)), "ff");
        assert_eq!(decode("ff"), Some(BigUint::from(255u32)));
        assert_eq!(decode("0"), Some(BigUint::from(0u32)));
        assert_eq!(decode("0ff"), None);
        assert_eq!(decode("FF"), None);
        assert_eq!(decode(""), None);
        assert_eq!(decode("xyz"), None);
    }
}
