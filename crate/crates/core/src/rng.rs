//! Counter-based deterministic random values.
//!
//! Every draw is a pure function of (seed, tensor name, element index), so
//! stochastic transforms produce identical results no matter how work is
//! split across threads.

/// splitmix64 finalizer: a strong 64-bit bijective mixer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_key(name: &str) -> u64 {
    // FNV-1a, then mixed; collisions only perturb which stream a tensor gets.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix(h)
}

/// Per-tensor stream of index-addressable random values.
#[derive(Debug, Clone, Copy)]
pub struct ElementRng {
    key: u64,
}

impl ElementRng {
    pub fn new(seed: u64, tensor_name: &str) -> Self {
        Self {
            key: mix(mix(seed) ^ name_key(tensor_name)),
        }
    }

    #[inline]
    fn word(&self, index: u64, salt: u64) -> u64 {
        mix(mix(self.key ^ index).wrapping_add(salt))
    }

    /// Uniform draw in [0, 1) for one element.
    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        (self.word(index, 0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw for one element (Box-Muller).
    pub fn normal(&self, index: u64) -> f64 {
        let u1 = (self.word(index, 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.word(index, 2) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Derive a sub-seed for a transform that was not given an explicit one.
pub fn derive_seed(seed: u64, term_index: usize, op_index: usize) -> u64 {
    mix(mix(seed) ^ ((term_index as u64) << 32 | op_index as u64))
}
