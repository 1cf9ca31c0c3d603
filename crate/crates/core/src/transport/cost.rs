//! Simulated-time cost model.
//!
//! Costs are exact rationals so a measured latency can be compared with its
//! closed form without floating-point drift.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// Exact simulated time, in abstract units.
pub type Cost = Ratio<i128>;

/// Per-operation charges.
///
/// `put`/`get` cost `alpha + beta * bytes`, `flush` costs `gamma`, a ping
/// costs `delta`. A compare-and-swap moves one 8-byte word and is charged like
/// an 8-byte put. Other control messages cost `alpha`. Lock, unlock and
/// collective calls are free: passive-target implementations fold lock
/// acquisition into the first access.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(with = "decimal")]
    pub alpha: Cost,
    #[serde(with = "decimal")]
    pub beta: Cost,
    #[serde(with = "decimal")]
    pub gamma: Cost,
    #[serde(with = "decimal")]
    pub delta: Cost,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            alpha: Cost::from_integer(1),
            beta: Cost::new(1, 100),
            gamma: Cost::from_integer(1),
            delta: Cost::from_integer(1),
        }
    }
}

impl CostModel {
    pub fn transfer(&self, bytes: usize) -> Cost {
        self.alpha + self.beta * Cost::from_integer(bytes as i128)
    }
}

/// Decimal literal that converts exactly to a rational, e.g. `0.01` or `12`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decimal(pub Cost);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("not a non-negative decimal number: {0:?}")]
pub struct ParseDecimalError(pub String);

impl FromStr for Decimal {
    type Err = ParseDecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseDecimalError(s.to_string());
        let t = s.trim();
        if t.is_empty() {
            return Err(err());
        }
        let (int, frac) = match t.split_once('.') {
            Some((i, f)) => (i, f),
            None => (t, ""),
        };
        if (int.is_empty() && frac.is_empty())
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 30
        {
            return Err(err());
        }
        let digits = format!("{int}{frac}");
        let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
        let denom = 10i128.checked_pow(frac.len() as u32).ok_or_else(err)?;
        Ok(Decimal(Cost::new(numer, denom)))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_cost(&self.0))
    }
}

/// Renders a cost as a terminating decimal when possible, otherwise as `n/d`.
pub fn format_cost(c: &Cost) -> String {
    let (n, d) = (*c.numer(), *c.denom());
    let mut rest = d;
    let (mut twos, mut fives) = (0u32, 0u32);
    while rest % 2 == 0 {
        rest /= 2;
        twos += 1;
    }
    while rest % 5 == 0 {
        rest /= 5;
        fives += 1;
    }
    if rest != 1 {
        return format!("{n}/{d}");
    }
    let places = twos.max(fives);
    let scaled = n * (10i128.pow(places) / d);
    if places == 0 {
        return scaled.to_string();
    }
    let sign = if scaled < 0 { "-" } else { "" };
    let abs = scaled.unsigned_abs();
    let p = 10u128.pow(places);
    let frac = format!("{:0width$}", abs % p, width = places as usize);
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}{}", abs / p)
    } else {
        format!("{sign}{}.{frac}", abs / p)
    }
}

pub fn cost_to_f64(c: &Cost) -> f64 {
    *c.numer() as f64 / *c.denom() as f64
}

mod decimal {
    use super::{format_cost, Cost, Decimal};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &Cost, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_cost(c))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Cost, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => t.parse::<Decimal>().map(|x| x.0).map_err(serde::de::Error::custom),
            Raw::Int(i) => Ok(Cost::from_integer(i as i128)),
        }
    }
}
