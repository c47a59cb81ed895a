use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Closed interval of valid pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ValueRange {
    lo: f64,
    hi: f64,
}

impl ValueRange {
    /// MNIST convention.
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    /// CIFAR convention, raw 8-bit intensities.
    pub const BYTE: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };
    pub const UNBOUNDED: ValueRange = ValueRange {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(invalid(format!("value range needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

impl TryFrom<[f64; 2]> for ValueRange {
    type Error = crate::error::Error;

    fn try_from([lo, hi]: [f64; 2]) -> Result<Self> {
        Self::new(lo, hi)
    }
}

impl From<ValueRange> for [f64; 2] {
    fn from(r: ValueRange) -> Self {
        [r.lo, r.hi]
    }
}
