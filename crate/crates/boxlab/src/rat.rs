//! Exact rational scalar type and the handful of combinatorial helpers the
//! rest of the crate leans on.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact probability scalar used throughout the crate.
pub type Rat = BigRational;

/// Errors raised while parsing the `"num/den"` wire form of a rational.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RatParseError {
    #[error("empty rational literal")]
    Empty,
    #[error("malformed rational literal `{0}`")]
    Malformed(String),
    #[error("zero denominator in rational literal `{0}`")]
    ZeroDenominator(String),
}

/// Builds `num/den` from machine integers. Panics on `den == 0`.
pub fn rat(num: i64, den: i64) -> Rat {
    assert!(den != 0, "rational denominator must be nonzero");
    Rat::new(BigInt::from(num), BigInt::from(den))
}

/// Builds the integer rational `n/1`.
pub fn rat_int(n: i64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

/// Parses `"p/q"` or a bare integer `"p"` into a reduced rational.
pub fn parse_rat(s: &str) -> Result<Rat, RatParseError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(RatParseError::Empty);
    }
    let mut parts = s.splitn(2, '/');
    let num_str = parts.next().unwrap();
    let num: BigInt = num_str
        .parse()
        .map_err(|_| RatParseError::Malformed(s.to_string()))?;
    match parts.next() {
        None => Ok(Rat::from_integer(num)),
        Some(den_str) => {
            let den: BigInt = den_str
                .parse()
                .map_err(|_| RatParseError::Malformed(s.to_string()))?;
            if den.is_zero() {
                return Err(RatParseError::ZeroDenominator(s.to_string()));
            }
            Ok(Rat::new(num, den))
        }
    }
}

/// Formats a rational as `"num/den"` in lowest terms, always with an explicit
/// denominator so the wire form round-trips bit-for-bit.
pub fn format_rat(r: &Rat) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Nearest `f64` for reporting and quadrature comparisons.
pub fn rat_to_f64(r: &Rat) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Fall back to a quotient of truncated parts for out-of-range bigints.
        let n = r.numer().to_f64().unwrap_or(f64::MAX);
        let d = r.denom().to_f64().unwrap_or(f64::MAX);
        n / d
    })
}

/// `r^k` for a nonnegative machine exponent.
pub fn rat_pow(r: &Rat, k: usize) -> Rat {
    let mut acc = Rat::one();
    for _ in 0..k {
        acc *= r;
    }
    acc
}

/// Binomial coefficient `C(n, k)` as an exact integer; zero when `k > n`.
pub fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    num::integer::binomial(BigInt::from(n), BigInt::from(k))
}

/// Multinomial coefficient `(sum parts)! / prod(parts!)`, computed as a
/// telescoping product of binomials so intermediate values stay integral.
pub fn multinomial(parts: &[usize]) -> BigInt {
    let mut total = 0usize;
    let mut acc = BigInt::one();
    for &p in parts {
        total += p;
        acc *= binomial(total, p);
    }
    acc
}

/// Absolute value helper (spelled out so call sites read as math).
pub fn rat_abs(r: &Rat) -> Rat {
    r.abs()
}

/// Serde adapter serializing a rational as its `"num/den"` wire string.
/// Use with `#[serde(with = "serde_rat")]`.
pub mod serde_rat {
    use super::{format_rat, parse_rat, Rat};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rat, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_rat(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Rat, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_rat(&s).map_err(serde::de::Error::custom)
    }
}
