//! Deterministic derivation of independent RNG streams from one seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

/// Seed for a two-level sub-stream, e.g. (epoch, batch).
pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, 0), derive(1, 1));
        assert_ne!(derive2(1, 0, 1), derive2(1, 1, 0));
        assert_eq!(derive(7, 3), derive(7, 3));
    }
}
