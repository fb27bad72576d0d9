//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so any position
//! in any stream can be addressed without generating the prefix before it.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;
const COUNTER_OFFSET: u64 = 0x632B_E59B_D9B4_E019;

#[inline]
const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn stream_key(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN).wrapping_add(stream.wrapping_mul(STREAM_MUL)))
}

/// Raw 64 random bits at a fixed address.
#[inline]
pub fn bits_at(seed: u64, stream: u64, counter: u64) -> u64 {
    let key = stream_key(seed, stream);
    mix64(mix64(key ^ counter.wrapping_add(COUNTER_OFFSET)).wrapping_add(key))
}

/// Uniform value in the open interval (0, 1) at a fixed address.
#[inline]
pub fn uniform_at(seed: u64, stream: u64, counter: u64) -> f64 {
    ((bits_at(seed, stream, counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal value number `index` of a stream (Box-Muller over words
/// `2*index` and `2*index + 1`).
#[inline]
pub fn gaussian_at(seed: u64, stream: u64, index: u64) -> f64 {
    let u1 = uniform_at(seed, stream, index.wrapping_mul(2));
    let u2 = uniform_at(seed, stream, index.wrapping_mul(2).wrapping_add(1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A cursor over one `(seed, stream)` pair.
///
/// Sequential draws advance `counter`; Gaussian draws consume two words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    pub seed: u64,
    pub stream_id: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Child generator on a derived stream, independent of this one.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(
            bits_at(self.seed, self.stream_id, u64::MAX - tag),
            tag.wrapping_mul(GOLDEN),
        )
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = bits_at(self.seed, self.stream_id, self.counter);
        self.counter += 1;
        out
    }

    pub fn next_uniform(&mut self) -> f64 {
        let out = uniform_at(self.seed, self.stream_id, self.counter);
        self.counter += 1;
        out
    }

    pub fn next_gaussian(&mut self) -> f64 {
        // Align to an even word so sequential and addressed draws coincide.
        let index = self.counter.div_ceil(2);
        self.counter = 2 * index + 2;
        gaussian_at(self.seed, self.stream_id, index)
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_uniform() < p
    }
}

/// `count` i.i.d. standard normal draws, continuing from the rng's cursor.
pub fn seeded_gaussian(rng: &mut SeededRng, count: usize) -> Vec<f32> {
    (0..count).map(|_| rng.next_gaussian() as f32).collect()
}
