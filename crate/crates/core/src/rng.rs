//! Named, counter-addressed random substreams.
//!
//! Every random draw in training is taken from a generator keyed by
//! `(seed, stream, step, index)`. Resuming at step `n` therefore only needs
//! the seed and the step counter, and parallel workers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Data,
    Negatives,
    Gumbel,
    Dropout,
    Mask,
    Synth,
}

impl Stream {
    fn tag(self) -> u8 {
        match self {
            Stream::Init => 0,
            Stream::Data => 1,
            Stream::Negatives => 2,
            Stream::Gumbel => 3,
            Stream::Dropout => 4,
            Stream::Mask => 5,
            Stream::Synth => 6,
        }
    }
}

/// Inference paths draw no randomness; this panics if one ever does.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference drew a random number")
    }
}

pub fn substream(seed: u64, stream: Stream, step: u64, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"vqw2v-rng");
    h.update(seed.to_le_bytes());
    h.update([stream.tag()]);
    h.update(step.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
