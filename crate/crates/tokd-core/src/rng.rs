//! Counter-based deterministic random number generator.
//!
//! Output depends only on (seed, stream, call index), so parallel consumers
//! can derive independent streams and produce identical results regardless of
//! scheduling. The mixer is the SplitMix64 finalizer over a keyed counter.

const STREAM_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const COUNTER_GAMMA: u64 = 0xbf58_476d_1ce4_e5b9;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng {
            seed,
            stream,
            counter: 0,
        }
    }

    /// Independent stream sharing this generator's seed.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(self.seed, self.stream.wrapping_mul(STREAM_GAMMA) ^ stream)
    }

    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.counter)
    }

    pub fn restore(seed: u64, stream: u64, counter: u64) -> Self {
        Rng {
            seed,
            stream,
            counter,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self
            .seed
            .wrapping_add(self.stream.wrapping_mul(STREAM_GAMMA))
            .wrapping_add(c.wrapping_mul(COUNTER_GAMMA)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // modulo bias is negligible for n << 2^64
        self.next_u64() % n
    }

    /// Sample k distinct indices from 0..n (Fisher-Yates prefix).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_instances() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::new(7, 0);
        let mut b = Rng::new(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn restore_resumes_sequence() {
        let mut a = Rng::new(42, 0);
        for _ in 0..10 {
            a.next_u64();
        }
        let (s, st, c) = a.state();
        let mut b = Rng::restore(s, st, c);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_mean_reasonable() {
        let mut r = Rng::new(1, 0);
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(2, 0);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sample_indices_distinct() {
        let mut r = Rng::new(3, 0);
        let s = r.sample_indices(10, 5);
        let mut t = s.clone();
        t.sort_unstable();
        t.dedup();
        assert_eq!(t.len(), 5);
        assert!(s.iter().all(|&i| i < 10));
    }
}
