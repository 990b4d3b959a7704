//! Serde adapter for `f64` fields that may hold `±inf` or `NaN`, which JSON
//! numbers cannot represent. Finite values stay numbers; the others become
//! the strings `"inf"`, `"-inf"` and `"nan"`.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Number(f64),
    Text(String),
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Repr::deserialize(d)? {
        Repr::Number(v) => Ok(v),
        Repr::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(de::Error::custom(format!("not a float: {other}"))),
        },
    }
}

/// The same encoding for `Vec<f64>`.
pub mod vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&Wrapped(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let items: Vec<Wrapped> = Vec::deserialize(d)?;
        Ok(items.into_iter().map(|w| w.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Serialize, Deserialize)]
    struct S {
        #[serde(with = "super")]
        a: f64,
        #[serde(with = "super::vec")]
        b: Vec<f64>,
    }

    #[test]
    fn roundtrip() {
        let s = S {
            a: f64::NEG_INFINITY,
            b: vec![1.5, f64::INFINITY, f64::NAN],
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"a":"-inf","b":[1.5,"inf","nan"]}"#);
        let back: S = serde_json::from_str(&json).unwrap();
        assert_eq!(back.a, f64::NEG_INFINITY);
        assert_eq!(back.b[0], 1.5);
        assert!(back.b[2].is_nan());
    }
}
