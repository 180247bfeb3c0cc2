//! Positional encodings: absolute sinusoids added at the embedding, and
//! rotary, ALiBi and relative variants injected inside attention.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PeKind {
    #[default]
    None,
    Sincos,
    Relative,
    Rotary,
    Alibi,
}

impl PeKind {
    pub const ALL: [PeKind; 5] = [PeKind::None, PeKind::Sincos, PeKind::Relative, PeKind::Rotary, PeKind::Alibi];

    pub fn name(self) -> &'static str {
        match self {
            PeKind::None => "none",
            PeKind::Sincos => "sincos",
            PeKind::Relative => "relative",
            PeKind::Rotary => "rotary",
            PeKind::Alibi => "alibi",
        }
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown positional encoding {s:?} (none|sincos|relative|rotary|alibi)")))
    }
}

fn frequency(k: usize, d: usize) -> f64 {
    1.0 / 10000f64.powf((2 * k) as f64 / d as f64)
}

/// Sinusoid of width `d` at a (possibly negative) position: column `2k` is
/// `sin(p·ω_k)` and column `2k+1` is `cos(p·ω_k)` with `ω_k = 10000^{−2k/d}`.
pub fn sinusoid(p: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let angle = p * frequency(c / 2, d);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `T×D` absolute table, row `p` for position `p`.
pub fn sincos_table(t: usize, d: usize) -> Vec<f64> {
    (0..t).flat_map(|p| sinusoid(p as f64, d)).collect()
}

/// `(2T−1)×D` table whose row `r` encodes the signed distance `r − (T−1)`.
pub fn relative_table(t: usize, d: usize) -> Vec<f64> {
    (0..2 * t - 1)
        .flat_map(|r| sinusoid(r as f64 - (t as f64 - 1.0), d))
        .collect()
}

/// Rotation tables of shape `T × width/2` for rotary encodings within
/// blocks of `width` columns.
pub fn rotary_tables(t: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let half = width / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for p in 0..t {
        for k in 0..half {
            let angle = p as f64 * frequency(k, width);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Head slopes `2^{−8m/M}` for `m = 1..=M`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|m| 2f64.powf(-8.0 * m as f64 / heads as f64))
        .collect()
}

/// `T×T` bias `−slope·|i − n|`.
pub fn alibi_bias(t: usize, slope: f64) -> Vec<f64> {
    (0..t * t)
        .map(|k| -slope * (k / t).abs_diff(k % t) as f64)
        .collect()
}
