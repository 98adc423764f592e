//! Fixed-point scale factors and integer rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::round_half_even;

/// A real scale `r = multiplier * 2^-(31 + shift)` with the multiplier
/// normalized to `[2^30, 2^31)`. Ratios below one have `shift >= 0`;
/// a negative shift encodes ratios in `[1, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointRequant {
    pub multiplier: i32,
    pub shift: i32,
}

pub const MIN_SHIFT: i32 = -31;
pub const MAX_SHIFT: i32 = 62;

impl FixedPointRequant {
    /// Encodes `r` in `[2^-63, 2^31)`. The relative encoding error is at
    /// most 2^-31.
    pub fn from_real(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Requant(r));
        }
        // r = f * 2^-shift with f in [0.5, 1).
        let mut shift = 0i32;
        let mut f = r;
        while f < 0.5 && shift <= MAX_SHIFT {
            f *= 2.0;
            shift += 1;
        }
        while f >= 1.0 && shift >= MIN_SHIFT {
            f *= 0.5;
            shift -= 1;
        }
        // f * 2^31 is exact; only the rounding to an integer loses bits.
        let mut m = round_half_even(f * 2f64.powi(31)) as i64;
        if m == 1 << 31 {
            m = 1 << 30;
            shift -= 1;
        }
        if !(MIN_SHIFT..=MAX_SHIFT).contains(&shift) {
            return Err(Error::Requant(r));
        }
        Ok(Self {
            multiplier: m as i32,
            shift,
        })
    }

    pub fn is_valid(self) -> bool {
        self.multiplier >= 1 << 30 && (MIN_SHIFT..=MAX_SHIFT).contains(&self.shift)
    }

    pub fn to_real(self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-(31 + self.shift))
    }

    /// `round_half_even(acc * r)` computed exactly in integers, saturated
    /// to the `i64` range.
    #[inline]
    pub fn apply(self, acc: i64) -> i64 {
        shift_round(acc as i128 * self.multiplier as i128, (31 + self.shift) as u32)
    }
}

/// `round_half_even(p / 2^s)`, saturated to the `i64` range.
#[inline]
pub fn shift_round(p: i128, s: u32) -> i64 {
    let q = if s == 0 {
        p
    } else {
        let q = p >> s;
        let rem = p - (q << s);
        let half = 1i128 << (s - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q + 1
        } else {
            q
        }
    };
    q.clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

/// Requantization of a sum of two differently scaled integers:
/// `round_half_even(a * ra + b * rb)`, exact for `|a|, |b| < 2^40` when
/// the shifts differ by at most 48.
#[inline]
pub fn apply_sum(a: i64, ra: FixedPointRequant, b: i64, rb: FixedPointRequant) -> i64 {
    let s = ra.shift.max(rb.shift);
    let pa = (a as i128 * ra.multiplier as i128) << (s - ra.shift);
    let pb = (b as i128 * rb.multiplier as i128) << (s - rb.shift);
    shift_round(pa + pb, (31 + s) as u32)
}
