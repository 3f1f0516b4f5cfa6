//! Deterministic random number generation.
//!
//! Every stochastic decision in the crate (init, masking, dropout, shuffles,
//! probe subsampling) draws from [`DeterministicRng`]. The generator is a
//! ChaCha8 stream keyed by `(seed, stream)`: the same pair plus the same call
//! sequence yields the same outputs on every platform. Independent concerns
//! get independent streams via [`DeterministicRng::fork`], so e.g. adding a
//! dropout call never shifts the masking draws of the next epoch.
//!
//! Float transforms go through `libm` rather than the platform math library
//! so sampled values are bit-identical everywhere.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const TWO_PI: f64 = std::f64::consts::TAU;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub struct DeterministicRng {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    cached_normal: Option<f64>,
}

impl DeterministicRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        DeterministicRng {
            rng,
            seed,
            stream,
            cached_normal: None,
        }
    }

    /// Child generator for substream `k`, independent of this generator's
    /// position. Same `(seed, stream, k)` always yields the same child.
    pub fn fork(&self, k: u64) -> Self {
        let child = splitmix64(self.stream ^ splitmix64(k));
        Self::with_stream(self.seed, child)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = TWO_PI * u2;
        self.cached_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let mask = u64::MAX >> (n - 1).leading_zeros().min(63);
        loop {
            let v = self.next_u64() & mask;
            if v < n {
                return v;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// A random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = DeterministicRng::new(7);
        let mut b = DeterministicRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = DeterministicRng::new(7);
        let mut b = DeterministicRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal(), b.normal());
            assert_eq!(a.uniform(), b.uniform());
        }
    }

    #[test]
    fn streams_are_independent_of_parent_position() {
        let parent = DeterministicRng::new(3);
        let mut c1 = parent.fork(5);
        let mut parent2 = DeterministicRng::new(3);
        parent2.next_u64();
        parent2.normal();
        let mut c2 = parent2.fork(5);
        for _ in 0..50 {
            assert_eq!(c1.next_u64(), c2.next_u64());
        }
        // Distinct fork keys give distinct sequences.
        let mut d = parent.fork(6);
        let mut e = parent.fork(5);
        assert_ne!(
            (0..8).map(|_| d.next_u64()).collect::<Vec<_>>(),
            (0..8).map(|_| e.next_u64()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = DeterministicRng::new(11);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "normal var {var}");

        let mut hist = [0usize; 10];
        for _ in 0..n {
            hist[(rng.uniform() * 10.0) as usize] += 1;
        }
        for count in hist {
            let frac = count as f64 / n as f64;
            assert!((frac - 0.1).abs() < 0.01, "uniform bucket {frac}");
        }
    }

    #[test]
    fn below_is_in_range_and_hits_everything() {
        let mut rng = DeterministicRng::new(2);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = DeterministicRng::new(9);
        let perm = rng.permutation(100);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
