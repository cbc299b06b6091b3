//! Channel layout of the toy residual stream.
//!
//! The stream is split into two halves, one per attention head, because
//! with a near-identity value projection each head can only move what lives
//! in its own half:
//!
//! * first half: object semantics (one orthonormal direction per object
//!   word, scaled) followed by eight token features;
//! * second half: the mention-history mirror of the semantic block followed
//!   by eight derived channels written by attention and the MLP.
//!
//! Whatever is left over in each half is unused and only carries noise.

pub const FEATURES_PER_HALF: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub n_obj: usize,
    pub half: usize,
    pub d: usize,
}

impl Layout {
    pub fn new(n_obj: usize, d: usize) -> Self {
        Self {
            n_obj,
            half: d / 2,
            d,
        }
    }

    pub fn sem(&self, k: usize) -> usize {
        k
    }
    pub fn obj(&self) -> usize {
        self.n_obj
    }
    pub fn one(&self) -> usize {
        self.n_obj + 1
    }
    pub fn text(&self) -> usize {
        self.n_obj + 2
    }
    pub fn punct(&self) -> usize {
        self.n_obj + 3
    }
    pub fn question(&self) -> usize {
        self.n_obj + 4
    }
    pub fn sink(&self) -> usize {
        self.n_obj + 5
    }
    pub fn answer(&self) -> usize {
        self.n_obj + 6
    }
    pub fn background(&self) -> usize {
        self.n_obj + 7
    }

    pub fn hist(&self, k: usize) -> usize {
        self.half + k
    }
    pub fn sink_mirror(&self) -> usize {
        self.half + self.n_obj
    }
    pub fn obj_mirror(&self) -> usize {
        self.half + self.n_obj + 1
    }
    pub fn yes_evidence(&self) -> usize {
        self.half + self.n_obj + 2
    }
    pub fn no_evidence(&self) -> usize {
        self.half + self.n_obj + 3
    }
    pub fn eos_pressure(&self) -> usize {
        self.half + self.n_obj + 4
    }
    pub fn object_text(&self) -> usize {
        self.half + self.n_obj + 5
    }
    pub fn punct_mirror(&self) -> usize {
        self.half + self.n_obj + 6
    }

    /// Channels that may carry random perturbations without disturbing any
    /// circuit: semantics, history and the unused tails of both halves.
    pub fn noisy(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_obj)
            .chain(self.n_obj + FEATURES_PER_HALF..self.half)
            .chain(self.half..self.half + self.n_obj)
            .chain(self.half + self.n_obj + FEATURES_PER_HALF..self.d)
    }

    /// Unused channels only.
    pub fn spare(&self) -> impl Iterator<Item = usize> + '_ {
        (self.n_obj + FEATURES_PER_HALF..self.half).chain(self.half + self.n_obj + FEATURES_PER_HALF..self.d)
    }
}
