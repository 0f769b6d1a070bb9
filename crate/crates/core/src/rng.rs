//! Counter-based random number streams.
//!
//! Every draw is a pure function of `(seed, domain, indices...)`, so a
//! particle's trajectory never depends on how many particles run, which
//! worker evaluates it, or in what order draws happen. Fixing the seed
//! turns the whole stochastic objective into a deterministic function of
//! the policy parameters.
//!
//! The mixer is the splitmix64 finalizer applied as a tiny sponge over the
//! index words; normals come from Box-Muller on two derived uniforms.

/// Purpose tags keeping unrelated draw families in disjoint streams.
pub mod domain {
    pub const INIT_STATE: u64 = 1;
    pub const DYNAMICS: u64 = 2;
    pub const GR_RESAMPLE: u64 = 3;
    pub const OBSERVE: u64 = 4;
    pub const RANDOM_ACTION: u64 = 5;
    pub const POLICY_INIT: u64 = 6;
    pub const GP_RESTART: u64 = 7;
    pub const SCAN_DIRECTION: u64 = 8;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed counter RNG. Cheap to copy; all methods are `&self`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sub-stream whose draws are disjoint from the parent's.
    pub fn derive(&self, tag: u64) -> CounterRng {
        CounterRng { seed: mix64(self.seed ^ mix64(tag ^ 0xA5A5_5A5A_C3C3_3C3C)) }
    }

    fn word(&self, ix: &[u64]) -> u64 {
        let mut h = mix64(self.seed);
        for &w in ix {
            h = mix64(h ^ w);
        }
        h
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&self, ix: &[u64]) -> f64 {
        let bits = self.word(ix);
        ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&self, ix: &[u64], lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform(ix)
    }

    /// Standard normal draw (Box-Muller, cosine branch).
    pub fn normal(&self, ix: &[u64]) -> f64 {
        let mut key = Vec::with_capacity(ix.len() + 1);
        key.extend_from_slice(ix);
        key.push(0);
        let u1 = self.uniform(&key);
        *key.last_mut().unwrap() = 1;
        let u2 = self.uniform(&key);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
