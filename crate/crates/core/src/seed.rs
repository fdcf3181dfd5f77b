//! Reproducible per-replica random streams.
//!
//! `(replica, role)` is packed injectively into a 64-bit word and pushed
//! through a bijective mixer keyed by the master seed, so distinct pairs never
//! collide under one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// The generator behind every simulation stream.
pub type SimRng = ChaCha12Rng;

/// Independent purposes a replica draws randomness for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Schedule,
    Marks,
    Jumps,
    Init,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Schedule, Role::Marks, Role::Jumps, Role::Init];

    fn tag(self) -> u64 {
        match self {
            Role::Schedule => 0,
            Role::Marks => 1,
            Role::Jumps => 2,
            Role::Init => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Schedule => "schedule",
            Role::Marks => "marks",
            Role::Jumps => "jumps",
            Role::Init => "init",
        }
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `role` of replica `replica` under `master`.
pub fn derive_seed(master: u64, replica: u64, role: Role) -> u64 {
    let key = mix64(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let packed = (replica << 2) | role.tag();
    mix64(mix64(packed ^ key).wrapping_add(key))
}

pub fn rng_for(master: u64, replica: u64, role: Role) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, replica, role))
}

/// Human-readable statement of the derivation rule, echoed into manifests.
pub const DERIVATION_RULE: &str = "seed = mix(mix((replica << 2 | role) ^ k) + k), k = mix(master + golden), \
     mix = splitmix64 finalizer, roles schedule=0 marks=1 jumps=2 init=3; ChaCha12";

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn stable_and_role_separated() {
        let a = derive_seed(17, 0, Role::Schedule);
        assert_eq!(a, derive_seed(17, 0, Role::Schedule));
        assert_ne!(a, derive_seed(17, 0, Role::Marks));
        assert_ne!(a, derive_seed(18, 0, Role::Schedule));
    }

    #[test]
    fn million_pairs_do_not_collide() {
        let mut seen = HashSet::with_capacity(1_000_000);
        for replica in 0..250_000u64 {
            for role in Role::ALL {
                assert!(seen.insert(derive_seed(2024, replica, role)));
            }
        }
        assert_eq!(seen.len(), 1_000_000);
    }
}
