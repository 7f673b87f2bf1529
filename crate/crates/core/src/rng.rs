//! Seed derivation for independent, order-free random streams.
//!
//! Every consumer of randomness (channel rounds, client minibatches, data
//! synthesis, noise injection) gets its own ChaCha stream keyed by the
//! experiment seed, a domain tag, and two indices. Streams never depend on
//! how many draws another consumer made or in which order workers ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Channel = 0x43_48_41_4e,
    ClientPersonal = 0x50_45_52_53,
    ClientGlobal = 0x47_4c_4f_42,
    Synth = 0x53_59_4e_54,
    Partition = 0x50_41_52_54,
    LabelNoise = 0x4e_4f_49_53,
    Problem = 0x50_52_4f_42,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut state = seed;
    let mut mix = splitmix64(&mut state);
    for word in [domain as u64, a, b] {
        state ^= word.wrapping_mul(0xd6e8_feb8_6659_fd93);
        mix ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key[..8]
        .iter_mut()
        .zip(mix.to_le_bytes())
        .for_each(|(k, m)| *k ^= m);
    ChaCha8Rng::from_seed(key)
}
