//! Splittable seed streams.
//!
//! Every random draw in the crate goes through a [`SeedStream`]. A stream is
//! a `(seed, path)` pair; splitting hashes the child index into the path, so
//! the random numbers a task sees depend only on its position in the task
//! tree and never on how tasks are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
    path: u64,
}

// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed, path: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream `index`. Distinct indices give independent streams.
    pub fn split(&self, index: u64) -> Self {
        SeedStream {
            seed: self.seed,
            path: mix(self.path ^ mix(index.wrapping_add(1))),
        }
    }

    /// Child stream keyed by a label, for named sub-tasks.
    pub fn split_named(&self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        self.split(h)
    }

    /// A ChaCha8 generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed));
        rng.set_stream(self.path);
        rng
    }
}
