//! `f64` fields serialized as shortest round-trip decimal strings, so report
//! bytes do not depend on a JSON library's float printer.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn to_string(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("invalid decimal {s:?}: {e}"))
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&to_string(*v))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    parse(&String::deserialize(d)?).map_err(D::Error::custom)
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&to_string(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| parse(s).map_err(D::Error::custom))
            .collect()
    }
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_some(&to_string(*x)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| parse(&s).map_err(D::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for v in [0.0, -0.0, 1.0, 0.1, 1e-10, 1e300, -2.75, f64::MIN_POSITIVE, f64::INFINITY] {
            assert_eq!(parse(&to_string(v)).unwrap().to_bits(), v.to_bits());
        }
        assert!(parse(&to_string(f64::NAN)).unwrap().is_nan());
        assert_eq!(to_string(2.75), "2.75");
    }
}
