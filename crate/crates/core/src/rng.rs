//! Portable pseudo-random streams.
//!
//! Every random draw in the crate goes through [`Rng`], which wraps
//! xoshiro256++ seeded by SplitMix64 expansion of a 64-bit seed. The derived
//! draws are defined here rather than borrowed from `rand` so the streams can
//! be reproduced outside Rust:
//!
//! * uniform `f64` in `[0, 1)`: `(next_u64() >> 11) * 2^-53`
//! * bounded integer in `[0, n)`: rejection sampling on `next_u64() % n`
//!   with the zone `u64::MAX - (u64::MAX % n)`
//! * standard normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`, one
//!   value per pair of uniforms
//! * shuffle: Fisher–Yates from the back, `j = below(i + 1)`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derives an independent seed from a parent seed and a list of labels.
///
/// The first eight bytes of SHA-256 over the parent seed followed by each
/// label (length-prefixed), read little-endian.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Serde adapter for seeds. TOML integers are signed 64-bit, so seeds above
/// `i64::MAX` are written as decimal strings; either form is accepted on read.
pub mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(|_| de::Error::custom(format!("invalid seed {t:?}"))),
        }
    }
}
