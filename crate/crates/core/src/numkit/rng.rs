//! Portable seeded generator.
//!
//! The stream is xoshiro256** whose four state words are filled by four
//! successive outputs of splitmix64 started at the seed:
//!
//! ```text
//! splitmix64(x):  x += 0x9E3779B97F4A7C15
//!                 z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//!                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                 return z ^ (z >> 31)
//! next():         r  = rotl(s1 * 5, 7) * 9
//!                 t  = s1 << 17
//!                 s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!                 s2 ^= t;  s3 = rotl(s3, 45)
//!                 return r
//! ```
//!
//! All arithmetic wraps modulo 2^64. Floats in `[0, 1)` take the top 53 bits:
//! `(next() >> 11) * 2^-53`. Integers below `n` use rejection of the low
//! `2^64 mod n` values, so they are exactly uniform.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(GOLDEN);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** seeded through splitmix64. Not shared between threads: fork
/// children with [`Rng::fork`] instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { s }
    }

    /// Restores a generator from [`Rng::state`]. An all-zero state is a fixed
    /// point of xoshiro and is replaced by the state of `Rng::new(0)`.
    pub fn from_state(s: [u64; 4]) -> Self {
        if s == [0; 4] {
            return Rng::new(0);
        }
        Rng { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "Rng::below called with n = 0");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// Standard normal draw (Box-Muller, one output per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Child generator seeded from one draw of the parent.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Child generator derived from the current state and `tag` without
    /// advancing `self`.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut x = self.s[0] ^ self.s[1].rotate_left(17) ^ self.s[2].rotate_left(31);
        x ^= self.s[3].rotate_left(47) ^ tag.wrapping_mul(GOLDEN);
        Rng::new(splitmix64(&mut x))
    }
}
