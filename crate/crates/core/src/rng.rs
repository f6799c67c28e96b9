//! Deterministic, splittable random streams.
//!
//! A stream is identified by a seed and a lineage (the split path, e.g.
//! `[experiment, particle]`). The pair is hashed into a ChaCha8 key, so streams
//! with distinct lineages are independent and replay identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Lag, MutationShape, MutationSpec};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub lineage: Vec<u64>,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, lineage: &[u64]) -> Self {
        StreamKey {
            seed,
            lineage: lineage.to_vec(),
        }
    }

    pub fn root(seed: u64) -> Self {
        StreamKey::new(seed, &[])
    }

    /// Key of the `index`-th child stream.
    pub fn child(&self, index: u64) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(index);
        StreamKey {
            seed: self.seed,
            lineage,
        }
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = splitmix64(self.seed);
        // length-prefixed so that [a] and [a, 0] differ
        h = splitmix64(h ^ self.lineage.len() as u64);
        for &l in &self.lineage {
            h = splitmix64(h ^ splitmix64(l.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in out.chunks_exact_mut(8).enumerate() {
            h = splitmix64(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        out
    }

    pub fn stream(&self) -> Stream {
        Stream {
            rng: ChaCha8Rng::from_seed(self.digest()),
        }
    }
}

/// A random stream; a value type owned by exactly one worker.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on `(0, 1]`, safe to take the logarithm of.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.rng.random::<f64>()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.normal()).collect()
    }

    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Exponential waiting time by inverse CDF, `-ln(U) / rate`.
    pub fn next_proposal_clock(&mut self, rate: f64) -> Result<f64> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Domain(format!(
                "proposal rate must be positive and finite, got {rate}"
            )));
        }
        Ok(exp_from_uniform(self.uniform_open0(), rate))
    }

    /// Draws `w ~ nu / nu(R^d)`.
    pub fn draw_mutation(&mut self, mutation: &MutationSpec, dim: usize) -> Lag {
        let mut w = Lag::zeros(dim);
        loop {
            for c in w.iter_mut() {
                *c = mutation.tau * self.normal();
            }
            match mutation.shape {
                MutationShape::Gaussian => return w,
                MutationShape::TiltedGaussian { .. } => {
                    if self.uniform() < w.norm().min(1.0) {
                        return w;
                    }
                }
            }
        }
    }
}

/// `-ln(u) / rate` for `u` in `(0, 1]`.
#[inline]
pub fn exp_from_uniform(u: f64, rate: f64) -> f64 {
    -u.ln() / rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_var;

    #[test]
    fn same_key_replays() {
        let k = StreamKey::new(42, &[3, 1]);
        assert_eq!(k.stream().gaussian(100), k.stream().gaussian(100));
        assert!(k.stream().gaussian(0).is_empty());
    }

    #[test]
    fn lineage_prefixes_differ() {
        let a = StreamKey::new(7, &[1]).stream().gaussian(4);
        let b = StreamKey::new(7, &[1, 0]).stream().gaussian(4);
        let c = StreamKey::new(8, &[1]).stream().gaussian(4);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let xs = StreamKey::root(1).stream().gaussian(n);
        let (m, v) = mean_var(&xs);
        let se_m = (1.0 / n as f64).sqrt();
        let se_v = (2.0 / n as f64).sqrt();
        assert!(m.abs() < 4.0 * se_m, "mean {m}");
        assert!((v - 1.0).abs() < 4.0 * se_v, "var {v}");
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let n = 100_000;
        let a = StreamKey::new(9, &[0]).stream().gaussian(n);
        let b = StreamKey::new(9, &[1]).stream().gaussian(n);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn proposal_clock_mean_and_scaling() {
        let n = 100_000;
        let mut s = StreamKey::root(2).stream();
        let xs: Vec<f64> = (0..n).map(|_| s.next_proposal_clock(1.0).unwrap()).collect();
        let (m, _) = mean_var(&xs);
        assert!((m - 1.0).abs() < 4.0 / (n as f64).sqrt());

        let mut s1 = StreamKey::root(3).stream();
        let mut s2 = StreamKey::root(3).stream();
        for _ in 0..1000 {
            let a = s1.next_proposal_clock(1.0).unwrap();
            let b = s2.next_proposal_clock(2.0).unwrap();
            assert_eq!(b, a / 2.0);
        }
        assert!(s1.next_proposal_clock(0.0).is_err());
        assert!(s1.next_proposal_clock(-1.0).is_err());
    }

    #[test]
    fn mutation_draws() {
        let n = 100_000;
        let mut s = StreamKey::root(4).stream();
        let spec = MutationSpec::gaussian(1.0, 1.0);
        let xs: Vec<f64> = (0..n).map(|_| s.draw_mutation(&spec, 1)[0]).collect();
        let (_, v) = mean_var(&xs);
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());

        let pairs: Vec<Lag> = (0..n).map(|_| s.draw_mutation(&spec, 2)).collect();
        let corr = pairs.iter().map(|w| w[0] * w[1]).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());

        let a: Vec<f64> = (0..10)
            .map(|_| StreamKey::root(5).stream().draw_mutation(&spec, 1)[0])
            .collect();
        assert!(a.iter().all(|&x| x == a[0]));
    }
}
