//! Working resolutions and their patch grids.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// An input resolution together with the patch size used to tokenize it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ScaleSpec {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(config_err!(
                "scale {height}x{width} with patch {patch} must be nonzero"
            ));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(config_err!(
                "scale {height}x{width} is not divisible by patch {patch}"
            ));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn token_count(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// The next scale up: both sides doubled.
    pub fn doubled(&self) -> Self {
        Self {
            height: self.height * 2,
            width: self.width * 2,
            patch: self.patch,
        }
    }
}

/// Four scales `s1 < s2 < s3 < s4`, each adjacent pair doubling both sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScaleSequenceDoc", into = "ScaleSequenceDoc")]
pub struct ScaleSequence {
    scales: [ScaleSpec; 4],
}

pub const SCALE_COUNT: usize = 4;

impl ScaleSequence {
    /// Builds the sequence by halving `(height, width)` of the largest scale.
    pub fn from_largest(height: usize, width: usize, patch: usize) -> Result<Self> {
        let div = 1 << (SCALE_COUNT - 1);
        if height % div != 0 || width % div != 0 {
            return Err(config_err!(
                "largest scale {height}x{width} cannot be halved {} times",
                SCALE_COUNT - 1
            ));
        }
        let s1 = ScaleSpec::new(height / div, width / div, patch)?;
        let s2 = s1.doubled();
        let s3 = s2.doubled();
        let s4 = s3.doubled();
        Ok(Self {
            scales: [s1, s2, s3, s4],
        })
    }

    pub fn from_scales(scales: [ScaleSpec; 4]) -> Result<Self> {
        for s in &scales {
            ScaleSpec::new(s.height, s.width, s.patch)?;
        }
        for pair in scales.windows(2) {
            if pair[1] != pair[0].doubled() {
                return Err(config_err!(
                    "scales {:?} -> {:?} do not double both sides",
                    pair[0],
                    pair[1]
                ));
            }
        }
        Ok(Self { scales })
    }

    /// (4,16) (8,32) (16,64) (32,128) with 4-pixel patches.
    pub fn default_text() -> Self {
        Self::from_largest(32, 128, 4).expect("default scales are valid")
    }

    /// Scale `s_k` for `k` in `1..=4`.
    pub fn scale(&self, k: usize) -> ScaleSpec {
        self.scales[k - 1]
    }

    pub fn scales(&self) -> &[ScaleSpec; 4] {
        &self.scales
    }

    pub fn largest(&self) -> ScaleSpec {
        self.scales[SCALE_COUNT - 1]
    }

    pub fn patch(&self) -> usize {
        self.scales[0].patch
    }

    /// Adjacent pair `(s_k, s_{k+1})` for `k` in `1..=3`.
    pub fn pair(&self, k: usize) -> (ScaleSpec, ScaleSpec) {
        assert!((1..SCALE_COUNT).contains(&k), "pair index {k} out of 1..=3");
        (self.scales[k - 1], self.scales[k])
    }
}

impl Default for ScaleSequence {
    fn default() -> Self {
        Self::default_text()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleSequenceDoc {
    largest: [usize; 2],
    patch: usize,
}

impl TryFrom<ScaleSequenceDoc> for ScaleSequence {
    type Error = crate::error::Error;
    fn try_from(doc: ScaleSequenceDoc) -> Result<Self> {
        Self::from_largest(doc.largest[0], doc.largest[1], doc.patch)
    }
}

impl From<ScaleSequence> for ScaleSequenceDoc {
    fn from(seq: ScaleSequence) -> Self {
        let s4 = seq.largest();
        Self {
            largest: [s4.height, s4.width],
            patch: s4.patch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sequence_matches_text_resolutions() {
        let seq = ScaleSequence::default();
        let dims: Vec<_> = seq.scales().iter().map(|s| (s.height, s.width)).collect();
        assert_eq!(dims, vec![(4, 16), (8, 32), (16, 64), (32, 128)]);
        let counts: Vec<_> = seq.scales().iter().map(|s| s.token_count()).collect();
        assert_eq!(counts, vec![4, 16, 64, 256]);
        assert_eq!(seq.largest().grid(), (8, 32));
    }

    #[test]
    fn indivisible_scales_are_rejected() {
        assert!(ScaleSpec::new(6, 16, 4).is_err());
        assert!(ScaleSequence::from_largest(36, 128, 4).is_err());
        let s = ScaleSpec::new(4, 16, 4).unwrap();
        let bad = [s, s.doubled(), s.doubled(), s.doubled().doubled()];
        assert!(ScaleSequence::from_scales(bad).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let seq = ScaleSequence::default();
        let json = serde_json::to_string(&seq).unwrap();
        assert_eq!(json, r#"{"largest":[32,128],"patch":4}"#);
        let back: ScaleSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, seq);
    }
}
