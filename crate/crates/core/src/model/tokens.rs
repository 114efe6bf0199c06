use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::params::Matrix;

/// Encoder or decoder activations: an optional `[CLS]` vector plus `N` patch
/// vectors laid out row-major on `grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub cls: Option<Vec<f64>>,
    pub tokens: Matrix,
    pub grid: (usize, usize),
    /// Original grid positions of each row when only a subset of the grid is
    /// present (visible-token encoding). `None` means the full grid in order.
    pub positions: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn new(tokens: Matrix, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != tokens.nrows() {
            return Err(contract_err!(
                "grid {:?} does not hold {} tokens",
                grid,
                tokens.nrows()
            ));
        }
        Ok(Self {
            cls: None,
            tokens,
            grid,
            positions: None,
        })
    }

    pub fn with_cls(mut self, cls: Vec<f64>) -> Self {
        self.cls = Some(cls);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// Rows including the `[CLS]` vector.
    pub fn rows_with_cls(&self) -> usize {
        self.len() + usize::from(self.cls.is_some())
    }

    /// Drops the `[CLS]` vector.
    pub fn patch_tokens(&self) -> TokenSequence {
        TokenSequence {
            cls: None,
            ..self.clone()
        }
    }
}

/// Which patch positions of a view are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub flags: Vec<bool>,
    pub ratio: f64,
}

/// `ceil(ratio · n)`, computed so that products landing on an integer up to
/// rounding noise (e.g. 0.8·10) are not bumped up.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    let exact = ratio * n_tokens as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

impl MaskPattern {
    /// Masks exactly `ceil(ratio · n_tokens)` positions chosen uniformly
    /// without replacement.
    pub fn random(n_tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(config_err!("mask ratio {ratio} must lie in (0, 1)"));
        }
        let count = masked_count(n_tokens, ratio);
        let mut flags = vec![false; n_tokens];
        for i in sample(rng, n_tokens, count).into_iter() {
            flags[i] = true;
        }
        Ok(Self { flags, ratio })
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        let ratio = if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
        };
        Self { flags, ratio }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Unmasked positions in ascending order.
    pub fn visible_positions(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i]).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }
}
