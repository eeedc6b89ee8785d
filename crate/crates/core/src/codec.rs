//! Float <-> integer-bin codec.
//!
//! Coordinates in `[lower, upper]` map onto the `R + 1` bin indices `0..=R`
//! with bin width `w = (upper - lower) / R`; bin `i` decodes to
//! `lower + i * w`. Integers up to a few thousand tokenize as single
//! tokens in common vocabularies, which is the point of the encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Bin = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct DiscretizationSpec {
    lower: f64,
    upper: f64,
    resolution: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    lower: f64,
    upper: f64,
    resolution: u32,
}

impl TryFrom<RawSpec> for DiscretizationSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        DiscretizationSpec::new(raw.lower, raw.upper, raw.resolution)
    }
}

impl From<DiscretizationSpec> for RawSpec {
    fn from(s: DiscretizationSpec) -> Self {
        RawSpec { lower: s.lower, upper: s.upper, resolution: s.resolution }
    }
}

impl Default for DiscretizationSpec {
    /// `[-3, 3]` with 1000 bins.
    fn default() -> Self {
        Self { lower: -3.0, upper: 3.0, resolution: 1000 }
    }
}

impl DiscretizationSpec {
    pub fn new(lower: f64, upper: f64, resolution: u32) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::invalid("discretization", format!("need finite {lower} < {upper}")));
        }
        if resolution < 2 {
            return Err(Error::invalid("discretization", format!("resolution {resolution} < 2")));
        }
        if (upper - lower) / f64::from(resolution) <= 0.0 {
            return Err(Error::invalid("discretization", "bin width underflows"));
        }
        Ok(Self { lower, upper, resolution })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper - self.lower) / f64::from(self.resolution)
    }

    /// Digits needed to print the largest bin.
    pub fn max_digits(&self) -> usize {
        self.resolution.to_string().len()
    }

    /// Nearest bin, rounding halves away from zero, clamped to `0..=R`.
    pub fn encode(&self, x: f64) -> Result<Bin> {
        if !x.is_finite() {
            return Err(Error::NonFinite { index: 0, value: x });
        }
        let r = f64::from(self.resolution);
        let scaled = ((x - self.lower) * r / (self.upper - self.lower)).round();
        Ok(scaled.clamp(0.0, r) as Bin)
    }

    /// Bin centre; bins above `R` decode as `R`.
    pub fn decode(&self, bin: Bin) -> f64 {
        self.decode_checked(i64::from(bin)).0
    }

    /// Clamps an arbitrary integer into `0..=R` and decodes it; the flag is
    /// set when clamping was needed.
    pub fn decode_checked(&self, bin: i64) -> (f64, bool) {
        let (b, clamped) = self.clamp_bin(bin);
        (self.lower + f64::from(b) * self.bin_width(), clamped)
    }

    pub fn clamp_bin(&self, bin: i64) -> (Bin, bool) {
        let c = bin.clamp(0, i64::from(self.resolution));
        (c as Bin, c != bin)
    }

    pub fn encode_vector(&self, x: &[f64]) -> Result<Vec<Bin>> {
        x.iter()
            .enumerate()
            .map(|(index, &v)| self.encode(v).map_err(|_| Error::NonFinite { index, value: v }))
            .collect()
    }

    pub fn decode_vector(&self, bins: &[Bin]) -> Vec<f64> {
        bins.iter().map(|&b| self.decode(b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spec() -> DiscretizationSpec {
        DiscretizationSpec::default()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn transcript_values() {
        let s = spec();
        assert_eq!(s.encode(-0.61939515).unwrap(), 397);
        assert_eq!(s.encode(0.2329004).unwrap(), 539);
        assert_eq!(s.encode(-3.0).unwrap(), 0);
        assert!(close(s.decode(413), -0.522));
        assert!(close(s.decode(543), 0.258));
        assert!(close(s.decode(1000), 3.0));
        let v = s.decode_vector(&[397, 539]);
        assert!(close(v[0], -0.618) && close(v[1], 0.234));
        assert_eq!(s.encode_vector(&[-0.61939515, 0.2329004]).unwrap(), vec![397, 539]);
    }

    #[test]
    fn rejects_bad_specs_and_inputs() {
        assert!(DiscretizationSpec::new(1.0, -1.0, 10).is_err());
        assert!(DiscretizationSpec::new(-1.0, 1.0, 1).is_err());
        assert!(spec().encode(f64::NAN).is_err());
        assert!(matches!(
            spec().encode_vector(&[0.0, f64::INFINITY]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn out_of_range_clamps() {
        let s = spec();
        assert_eq!(s.encode(10.0).unwrap(), 1000);
        assert_eq!(s.encode(-10.0).unwrap(), 0);
        assert_eq!(s.decode_checked(1001), (3.0, true));
        assert_eq!(s.decode_checked(-4), (-3.0, true));
        assert_eq!(s.decode_checked(500).1, false);
    }

    #[test]
    fn halves_round_away_from_zero() {
        // [0, 10] with 10 bins: 0.5 sits exactly between bins 0 and 1
        let s = DiscretizationSpec::new(0.0, 10.0, 10).unwrap();
        assert_eq!(s.encode(0.5).unwrap(), 1);
        assert_eq!(s.encode(2.5).unwrap(), 3);
    }

    proptest! {
        #[test]
        fn encode_inverts_decode(r in 2u32..20_000, frac in 0.0f64..=1.0) {
            let s = DiscretizationSpec::new(-3.0, 3.0, r).unwrap();
            let bin = (frac * f64::from(r)).floor() as Bin;
            prop_assert_eq!(s.encode(s.decode(bin)).unwrap(), bin);
        }

        #[test]
        fn round_trip_within_half_bin(x in -3.0f64..=3.0) {
            let s = spec();
            let back = s.decode(s.encode(x).unwrap());
            prop_assert!((back - x).abs() <= s.bin_width() / 2.0 + 1e-12);
            prop_assert_eq!(s.encode(back).unwrap(), s.encode(x).unwrap());
        }
    }
}
