//! Seed derivation. Every randomized component gets its own ChaCha stream
//! derived from (master seed, stable label), so adding or reordering
//! components never shifts another component's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the label, mixed with the master seed via splitmix64.
pub fn label_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

/// Deterministic child RNG for a labelled component.
pub fn child_rng(master: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(label_seed(master, label))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn labels_and_masters_separate_streams() {
        let mut a = child_rng(7, "link:x->y");
        let mut b = child_rng(7, "link:y->x");
        let mut c = child_rng(8, "link:x->y");
        let (xa, xb, xc) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
        // Same inputs reproduce.
        assert_eq!(child_rng(7, "link:x->y").next_u64(), xa);
    }
}
