//! Rounding of f64 values onto reduced-precision FP32 grids.
//!
//! A grid of `b` bits is the set of FP32 values whose lowest `32 - b` mantissa
//! bits are zero: sign, all 8 exponent bits and the top `b - 9` mantissa bits
//! survive. Everything here works directly on the IEEE-754 bit patterns of the
//! f64 inputs, so results are exact and identical on every platform.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Smallest supported rounding amount (one kept mantissa bit).
pub const MIN_GRID_BITS: u32 = 10;
/// Largest supported rounding amount (the full FP32 grid).
pub const MAX_GRID_BITS: u32 = 32;

const F32_MIN_NORMAL_EXP: i32 = -126;
const F32_MAX_EXP: i32 = 127;
const F64_FRAC_BITS: i32 = 52;
const F64_FRAC_MASK: u64 = (1 << 52) - 1;
const F64_IMPLICIT_BIT: u64 = 1 << 52;
const F64_EXP_BIAS: i32 = 1023;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum RoundError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("value {0:e} is out of representable range")]
    OutOfRange(f64),
    #[error("rounding amount {0} outside [{MIN_GRID_BITS}, {MAX_GRID_BITS}]")]
    InvalidBits(u32),
    #[error("invalid rounding direction code {0}")]
    InvalidDirection(u8),
    #[error("threshold {0} must be finite and non-negative")]
    InvalidThreshold(f64),
}

/// `2^exp` for exponents inside the normal f64 range.
pub(crate) fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + F64_EXP_BIAS) as u64) << F64_FRAC_BITS)
}

/// Unbiased binary exponent of a normal f64, `None` for zero and subnormals.
fn unbiased_exponent(bits: u64) -> Option<i32> {
    let biased = ((bits >> F64_FRAC_BITS) & 0x7ff) as i32;
    (biased != 0).then_some(biased - F64_EXP_BIAS)
}

/// Returns `2^E` where `E` is the binary exponent of `x`, floored at `2^-126`.
///
/// Zero (and anything below the FP32 normal range) maps to `2^-126`, so the
/// threshold test never divides by or compares against a zero scale.
pub fn exponent_scale(x: f64) -> Result<f64, RoundError> {
    if !x.is_finite() {
        return Err(RoundError::NonFinite(x));
    }
    let exp = unbiased_exponent(x.to_bits()).unwrap_or(F32_MIN_NORMAL_EXP);
    Ok(pow2(exp.max(F32_MIN_NORMAL_EXP)))
}

/// A value that lies exactly on some reduced-precision grid.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GridValue(f64);

impl GridValue {
    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<GridValue> for f64 {
    fn from(v: GridValue) -> f64 {
        v.0
    }
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Ternary rounding decision recorded by the trainer for one output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum RoundingDirection {
    /// The trainer's value rounded down.
    Down = 0,
    /// Close enough to the grid that the auditor should round on its own.
    Ignore = 1,
    /// The trainer's value rounded up.
    Up = 2,
}

impl RoundingDirection {
    pub const ALL: [RoundingDirection; 3] = [Self::Down, Self::Ignore, Self::Up];

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for RoundingDirection {
    type Error = RoundError;

    fn try_from(code: u8) -> Result<Self, RoundError> {
        match code {
            0 => Ok(Self::Down),
            1 => Ok(Self::Ignore),
            2 => Ok(Self::Up),
            other => Err(RoundError::InvalidDirection(other)),
        }
    }
}

/// Where a non-negative magnitude sits between its two grid neighbours.
#[derive(Debug, Clone, Copy)]
enum Bracket {
    Exact(f64),
    Between {
        lo: f64,
        hi: f64,
        /// Ordering of `mag - lo` against `hi - mag`.
        nearer: Ordering,
        lo_even: bool,
    },
}

/// A reduced-precision FP32 grid keeping `bits` leading bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    bits: u32,
}

impl Grid {
    pub fn new(bits: u32) -> Result<Self, RoundError> {
        if (MIN_GRID_BITS..=MAX_GRID_BITS).contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(RoundError::InvalidBits(bits))
        }
    }

    /// The full FP32 grid.
    pub fn fp32() -> Self {
        Self {
            bits: MAX_GRID_BITS,
        }
    }

    #[inline]
    pub fn bits(self) -> u32 {
        self.bits
    }

    #[inline]
    fn kept_mantissa_bits(self) -> i32 {
        self.bits as i32 - 9
    }

    /// Local grid spacing for values whose exponent scale is `scale`.
    pub fn epsilon(self, scale: f64) -> f64 {
        scale * pow2(9 - self.bits as i32)
    }

    /// Exponent of the grid step for values with unbiased exponent `exp`.
    fn step_exponent(self, exp: i32) -> i32 {
        exp.max(F32_MIN_NORMAL_EXP) - self.kept_mantissa_bits()
    }

    fn bracket(self, mag: f64) -> Bracket {
        debug_assert!(mag >= 0.0 && mag.is_finite());
        let bits = mag.to_bits();
        let Some(exp) = unbiased_exponent(bits) else {
            // Zero or an f64 subnormal: far below half of the smallest step.
            if mag == 0.0 {
                return Bracket::Exact(0.0);
            }
            return Bracket::Between {
                lo: 0.0,
                hi: pow2(self.step_exponent(F32_MIN_NORMAL_EXP)),
                nearer: Ordering::Less,
                lo_even: true,
            };
        };

        let step_exp = self.step_exponent(exp);
        let dropped = step_exp - (exp - F64_FRAC_BITS);
        debug_assert!(dropped > 0);

        if dropped <= F64_FRAC_BITS {
            let mask = (1u64 << dropped) - 1;
            let rem = bits & mask;
            if rem == 0 {
                return Bracket::Exact(mag);
            }
            let lo_bits = bits & !mask;
            // A carry out of the mantissa bumps the exponent, which is exactly
            // the next grid value.
            let hi_bits = lo_bits + (1u64 << dropped);
            let significand = (bits & F64_FRAC_MASK) | F64_IMPLICIT_BIT;
            Bracket::Between {
                lo: f64::from_bits(lo_bits),
                hi: f64::from_bits(hi_bits),
                nearer: rem.cmp(&(1u64 << (dropped - 1))),
                lo_even: (significand >> dropped) & 1 == 0,
            }
        } else {
            // Magnitude below one grid step: neighbours are 0 and the step.
            let nearer = match exp.cmp(&(step_exp - 1)) {
                Ordering::Less => Ordering::Less,
                _ if bits & F64_FRAC_MASK == 0 => Ordering::Equal,
                _ => Ordering::Greater,
            };
            Bracket::Between {
                lo: 0.0,
                hi: pow2(step_exp),
                nearer,
                lo_even: true,
            }
        }
    }

    fn check_range(v: f64, input: f64) -> Result<f64, RoundError> {
        match unbiased_exponent(v.to_bits()) {
            Some(exp) if exp > F32_MAX_EXP => Err(RoundError::OutOfRange(input)),
            _ => Ok(v),
        }
    }

    /// Rounds `x` to the nearest grid value, ties to an even kept mantissa.
    pub fn round(self, x: f64) -> Result<GridValue, RoundError> {
        if !x.is_finite() {
            return Err(RoundError::NonFinite(x));
        }
        let mag = match self.bracket(x.abs()) {
            Bracket::Exact(v) => v,
            Bracket::Between {
                lo,
                hi,
                nearer,
                lo_even,
            } => match nearer {
                Ordering::Less => lo,
                Ordering::Greater => hi,
                Ordering::Equal if lo_even => lo,
                Ordering::Equal => hi,
            },
        };
        let mag = Self::check_range(mag, x)?;
        // Zero is always stored as +0 so checkpoint hashes never see -0.
        if mag == 0.0 {
            return Ok(GridValue(0.0));
        }
        Ok(GridValue(if x.is_sign_negative() { -mag } else { mag }))
    }

    /// Largest grid value `<= x` and smallest grid value `>= x`.
    pub fn neighbors(self, x: f64) -> Result<(GridValue, GridValue), RoundError> {
        if !x.is_finite() {
            return Err(RoundError::NonFinite(x));
        }
        let (lo, hi) = match self.bracket(x.abs()) {
            Bracket::Exact(v) => (v, v),
            Bracket::Between { lo, hi, .. } => (lo, hi),
        };
        let hi = Self::check_range(hi, x)?;
        if x.is_sign_negative() {
            Ok((GridValue(-hi + 0.0), GridValue(-lo + 0.0)))
        } else {
            Ok((GridValue(lo), GridValue(hi)))
        }
    }

    /// Smallest grid value strictly above `x`.
    pub fn next_up(self, x: f64) -> Result<GridValue, RoundError> {
        let (_, hi) = self.neighbors(x)?;
        if hi.get() > x {
            return Ok(hi);
        }
        // A quarter step stays below the next grid value even where the
        // spacing halves at a binade boundary.
        let nudge = 0.25 * self.epsilon(exponent_scale(x)?);
        Ok(self.neighbors(x + nudge)?.1)
    }

    pub fn contains(self, x: f64) -> bool {
        x.is_finite()
            && matches!(self.bracket(x.abs()), Bracket::Exact(_))
            && Self::check_range(x.abs(), x).is_ok()
    }

    /// Undoes the auditor's own rounding choice when the trainer logged the
    /// opposite one.
    pub fn reverse(self, x: f64, dir: RoundingDirection) -> Result<GridValue, RoundError> {
        let nearest = self.round(x)?;
        match dir {
            RoundingDirection::Down if x < nearest.get() => Ok(self.neighbors(x)?.0),
            RoundingDirection::Up if x > nearest.get() => Ok(self.neighbors(x)?.1),
            _ => Ok(nearest),
        }
    }
}

/// Grid plus the relative logging threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundingParams {
    pub grid: Grid,
    pub tau: f64,
}

impl RoundingParams {
    pub fn new(grid: Grid, tau: f64) -> Result<Self, RoundError> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(RoundError::InvalidThreshold(tau));
        }
        Ok(Self { grid, tau })
    }

    /// The decision the trainer logs for `x`.
    pub fn direction(&self, x: f64) -> Result<RoundingDirection, RoundError> {
        let nearest = self.grid.round(x)?.get();
        let limit = exponent_scale(x)? * self.tau;
        let distance = (x - nearest).abs();
        Ok(if distance > limit && x < nearest {
            RoundingDirection::Up
        } else if distance > limit && x > nearest {
            RoundingDirection::Down
        } else {
            RoundingDirection::Ignore
        })
    }
}

/// Lower end of the threshold search bracket, `0.25 * 2^-23`.
pub fn tau_lower_bound() -> f64 {
    0.25 * pow2(-23)
}

/// Upper end of the threshold search bracket, `0.5 * 2^(9 - b)`.
pub fn tau_upper_bound(grid: Grid) -> f64 {
    0.5 * grid.epsilon(1.0)
}
