//! Stable sub-seed derivation.
//!
//! Every random stream in the pipeline is keyed by a master seed plus a task
//! identifier, so results never depend on scheduling order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed and an ordered list of key parts.
pub fn derive(master: u64, parts: &[&dyn KeyPart]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix(master);
    for part in parts {
        part.feed(&mut h);
        // separator so ("ab","c") != ("a","bc")
        h = (h ^ 0xff).wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

pub fn rng(master: u64, parts: &[&dyn KeyPart]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, parts))
}

pub trait KeyPart {
    fn feed(&self, h: &mut u64);
}

fn feed_bytes(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
}

impl KeyPart for str {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, self.as_bytes());
    }
}

impl KeyPart for &str {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, self.as_bytes());
    }
}

impl KeyPart for String {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, self.as_bytes());
    }
}

impl KeyPart for u64 {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, &self.to_le_bytes());
    }
}

impl KeyPart for usize {
    fn feed(&self, h: &mut u64) {
        feed_bytes(h, &(*self as u64).to_le_bytes());
    }
}
