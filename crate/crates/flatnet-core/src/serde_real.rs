//! Serde helpers encoding reals as decimal text with 17 significant digits.
//!
//! Text encoding keeps model files byte-stable across save/load cycles and
//! round-trips every finite `f64` exactly.

use serde::{Deserialize, Deserializer, Serializer};

pub(crate) fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&crate::dataset::format_real(*v))
}

pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let text = String::deserialize(d)?;
    text.parse::<f64>().map_err(|_| serde::de::Error::custom(format!("not a real number: `{text}`")))
}

pub(crate) mod vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub(crate) fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let text: Vec<String> = v.iter().map(|x| crate::dataset::format_real(*x)).collect();
        serde::Serialize::serialize(&text, s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text: Vec<String> = Vec::deserialize(d)?;
        text.iter()
            .map(|t| t.parse::<f64>().map_err(|_| serde::de::Error::custom(format!("not a real number: `{t}`"))))
            .collect()
    }
}
