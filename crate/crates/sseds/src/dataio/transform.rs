//! Discretization of raw numeric features into categorical buckets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bucket reserved for negative raw values.
pub const NEGATIVE_BUCKET: i64 = i64::MIN;

/// Which logarithm the squared-log bucketing uses. The Criteo-winner trick
/// is floor(ln(x)^2); base-2 is provided as an alternative convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NumericTransform {
    #[default]
    SquaredLn,
    SquaredLog2,
}

/// Map a raw numeric value to an integer bucket token.
///
/// Values <= 2 bucket by identity (floor); values > 2 bucket by the squared
/// log. Negative values land in a dedicated sentinel bucket.
pub fn transform_numeric(x: f64, kind: NumericTransform) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::data(format!("invalid numeric: {x}")));
    }
    if x < 0.0 {
        return Ok(NEGATIVE_BUCKET);
    }
    if x <= 2.0 {
        return Ok(x.floor() as i64);
    }
    let l = match kind {
        NumericTransform::SquaredLn => x.ln(),
        NumericTransform::SquaredLog2 => x.log2(),
    };
    Ok((l * l).floor() as i64)
}

/// Render a bucket as the token string used for vocabulary building.
pub fn bucket_token(bucket: i64) -> String {
    if bucket == NEGATIVE_BUCKET {
        "neg".to_string()
    } else {
        bucket.to_string()
    }
}
