//! Half-precision rounding for the reweighting overflow demonstration.
//!
//! Values go through IEEE binary16 (round to nearest even) and come back as
//! f64, so both the dynamic range and the 11-bit significand are modelled.

use half::f16;

pub const HALF_MAX: f64 = 65504.0;

/// Rounds `x` to the nearest binary16 value; overflow becomes ±∞.
pub fn to_half(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_boundary() {
        assert_eq!(to_half(HALF_MAX), HALF_MAX);
        assert_eq!(to_half(-HALF_MAX), -HALF_MAX);
        assert_eq!(f16::MAX.to_f64(), HALF_MAX);
        assert!(to_half(65536.0).is_infinite());
        assert!(to_half(-1e9).is_infinite() && to_half(-1e9) < 0.0);
    }

    #[test]
    fn significand_rounding() {
        assert_eq!(to_half(1.0 + 1.0 / 4096.0), 1.0);
        assert_eq!(to_half(1.0 + 1.0 / 1024.0), 1.0 + 1.0 / 1024.0);
        assert_eq!(to_half(0.99999), 1.0);
    }
}
