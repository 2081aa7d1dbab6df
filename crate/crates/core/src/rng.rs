//! Seeded, platform-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed plus a counter of streams handed out so far.
///
/// Each call to [`RngState::next_stream`] yields an independent ChaCha8
/// stream, so the same seed and the same sequence of calls reproduce every
/// draw on every platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn next_stream(&mut self) -> ChaCha8Rng {
        let rng = self.stream_at(self.stream);
        self.stream += 1;
        rng
    }

    /// Stream with a fixed id, independent of the counter.
    pub fn stream_at(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// A child state whose streams do not collide with this one's.
    pub fn derive(&self, label: u64) -> RngState {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03);
        RngState::new(mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngState::new(11);
        let mut b = RngState::new(11);
        let xa: Vec<u64> = (0..4).map(|_| a.next_stream().gen()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_stream().gen()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa[0], xa[1]);
    }

    #[test]
    fn derived_states_differ() {
        let s = RngState::new(3);
        assert_ne!(s.derive(1).stream_at(0).gen::<u64>(), s.derive(2).stream_at(0).gen::<u64>());
    }
}
