//! Splittable, seedable random streams.
//!
//! Every stochastic operation in this crate derives its randomness from a
//! [`SeedTree`] path instead of sharing one sequential generator. Splitting
//! by index (repetition, pixel, frame, epoch) makes results independent of
//! worker count and iteration order: the stream for path `(seed, 3, 17)` is
//! the same whether it is drawn first, last, or on another thread.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-avalanche mixing of a 64-bit word.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in a tree of deterministic random streams.
///
/// `child(i)` derives an independent subtree for index `i`; `rng()` yields
/// the stream at the current node. Identical paths always produce identical
/// streams, and distinct paths produce streams that are independent for all
/// practical purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    state: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { state: mix(seed) }
    }

    /// Derive the subtree for `index`. Never equals `self`, and distinct
    /// indices yield distinct states.
    pub fn child(&self, index: u64) -> Self {
        SeedTree {
            state: mix(self.state ^ mix(index.wrapping_add(0xA076_1D64_78BD_642F))),
        }
    }

    /// The random stream at this node.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }

    /// Internal state, for recording in artifacts so a derived node can be
    /// resumed later with [`SeedTree::from_value`].
    pub fn value(&self) -> u64 {
        self.state
    }

    /// Resume a node previously captured with [`SeedTree::value`]. Unlike
    /// [`SeedTree::new`] this applies no mixing.
    pub fn from_value(value: u64) -> Self {
        SeedTree { state: value }
    }
}
