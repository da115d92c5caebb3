//! Master-seed fan-out into independent, named random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Derives a 32-byte seed for stream `label` from `master`.
pub fn derive_seed(master: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(b"/");
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, label))
}

/// Exact position of a ChaCha stream, serialisable for checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a = stream(7, "init");
        let mut b = stream(7, "shuffle");
        let mut a2 = stream(7, "init");
        let x: u64 = a.random();
        assert_ne!(x, b.random::<u64>());
        assert_eq!(x, a2.random::<u64>());
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let mut r = stream(1, "pool");
        for _ in 0..13 {
            let _: u32 = r.random();
        }
        let mut back = RngState::capture(&r).restore().unwrap();
        for _ in 0..20 {
            assert_eq!(r.random::<u64>(), back.random::<u64>());
        }
    }
}
