//! Counter-based random numbers for dropout.
//!
//! A mask element is a pure function of (seed, op index, element index), so
//! masks do not depend on thread scheduling or call order across tapes.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix several words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Uniform in [0, 1) for the given counter triple.
#[inline]
pub fn uniform(seed: u64, op: u64, element: u64) -> f64 {
    let bits = splitmix64(seed ^ splitmix64(op ^ splitmix64(element)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_in_unit_interval_and_roughly_flat() {
        let n = 100_000;
        let mut below_half = 0;
        for i in 0..n {
            let u = uniform(7, 3, i);
            assert!((0.0..1.0).contains(&u));
            if u < 0.5 {
                below_half += 1;
            }
        }
        let frac = below_half as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn streams_differ_by_key() {
        assert_ne!(uniform(1, 0, 0), uniform(2, 0, 0));
        assert_ne!(uniform(1, 0, 0), uniform(1, 1, 0));
        assert_eq!(uniform(1, 2, 3), uniform(1, 2, 3));
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
    }
}
