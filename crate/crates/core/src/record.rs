//! Per-position result records and their serialized form.

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

/// Attribution-score bucket used by reports and plots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Negative,
    NearZero,
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Negative, Bucket::NearZero, Bucket::High];

    /// `near_zero` iff `lo <= a <= hi`.
    pub fn classify(a_mu: f64, band: (f64, f64)) -> Bucket {
        if a_mu < band.0 {
            Bucket::Negative
        } else if a_mu > band.1 {
            Bucket::High
        } else {
            Bucket::NearZero
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Negative => "negative",
            Bucket::NearZero => "near_zero",
            Bucket::High => "high",
        }
    }
}

/// A replacement token shown next to a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token_id: TokenId,
    pub prob: f64,
}

/// Everything computed for one attributed prompt position. Values in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub position: usize,
    pub token_id: TokenId,
    pub token_text: String,
    #[serde(with = "float_repr")]
    pub a_mu: f64,
    #[serde(with = "float_repr")]
    pub s_p: f64,
    #[serde(with = "float_repr")]
    pub s_pr: f64,
    #[serde(with = "float_repr")]
    pub kl_mu: f64,
    pub bucket: Bucket,
    #[serde(with = "float_repr")]
    pub truncation_bound: f64,
    /// Replacement tokens that entered the sums.
    pub replacement_count: usize,
    /// Special tokens left out of the sums on request.
    pub excluded_special: Vec<TokenId>,
    /// KL was evaluated on the union of truncated supports.
    pub kl_support_renormalized: bool,
    /// Prompt-only contextual distribution, entries with prob >= 0.005.
    pub candidates_p: Vec<Candidate>,
    /// Prompt+response contextual distribution, entries with prob >= 0.005.
    pub candidates_pr: Vec<Candidate>,
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`
/// so JSON output stays valid.
pub mod float_repr {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

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

    struct FloatVisitor;

    impl Visitor<'_> for FloatVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("unexpected float string '{v}'"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(FloatVisitor)
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] f64);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_band_is_inclusive() {
        let band = (-0.1, 0.1);
        assert_eq!(Bucket::classify(0.05, band), Bucket::NearZero);
        assert_eq!(Bucket::classify(0.1, band), Bucket::NearZero);
        assert_eq!(Bucket::classify(-0.1, band), Bucket::NearZero);
        assert_eq!(Bucket::classify(0.1000001, band), Bucket::High);
        assert_eq!(Bucket::classify(-0.5, band), Bucket::Negative);
    }

    #[test]
    fn non_finite_floats_serialize_as_strings() {
        #[derive(Serialize, Deserialize, Debug)]
        struct W(#[serde(with = "float_repr")] f64);
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&W(-1.5)).unwrap(), "-1.5");
        let w: W = serde_json::from_str("\"-inf\"").unwrap();
        assert_eq!(w.0, f64::NEG_INFINITY);
        let w: W = serde_json::from_str("2").unwrap();
        assert_eq!(w.0, 2.0);
    }
}
