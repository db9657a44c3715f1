//! JSON report helpers. Floats are written with 6 significant digits;
//! integer counts are written exactly.

use serde::{Serialize, Serializer};

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

pub fn sig6<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig6(*x))
}

pub fn sig6_vec<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    xs.iter().map(|&x| round_sig6(x)).collect::<Vec<_>>().serialize(s)
}

pub fn sig6_opt<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    x.map(round_sig6).serialize(s)
}

/// Serializes a `u128` as a JSON number.
pub fn exact_u128<S: Serializer>(x: &u128, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u128(*x)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}
