//! Seeded, splittable randomness.
//!
//! Every stream is a ChaCha8 keystream keyed by the master seed and selected
//! by a 64-bit stream id, so a stream's output depends only on
//! `(master_seed, stream_id, call sequence)`. Child streams are addressed by
//! label and never consume state from the parent.

use rand::distr::Open01;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent stream derived from this stream's id and `label`.
    pub fn child(&self, label: u64) -> Rng {
        let id = splitmix64(self.stream_id ^ splitmix64(label.wrapping_add(0xA5A5_5A5A)));
        Rng::new(self.master_seed, id)
    }

    /// Uniform on the open interval (0, 1); both endpoints are excluded.
    pub fn uniform_open(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    pub fn uniform_f32(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        (self.uniform_open() as f32) < p
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `-ln(-ln u)` for `u` in (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f32 {
    (-(-u.ln()).ln()) as f32
}

/// `n` standard Gumbel draws.
pub fn sample_gumbel(rng: &mut Rng, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_gumbel needs n >= 1".into()));
    }
    let data = (0..n).map(|_| gumbel_from_uniform(rng.uniform_open())).collect();
    Tensor::new(vec![n], data)
}

/// Logistic noise `ln(u/(1-u))`, the reparameterised source of a relaxed Bernoulli.
pub fn logistic_from_uniform(u: f64) -> f32 {
    (u / (1.0 - u)).ln() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_at_half() {
        let g = gumbel_from_uniform(0.5);
        assert!((g - 0.366_512_9).abs() < 1e-6, "{g}");
    }

    #[test]
    fn gumbel_monotone_towards_one() {
        let us = [0.1, 0.5, 0.9, 0.999, 1.0 - 1e-12];
        let gs: Vec<f32> = us.iter().map(|&u| gumbel_from_uniform(u)).collect();
        assert!(gs.windows(2).all(|w| w[0] < w[1]));
        assert!(gs[4] > 25.0);
    }

    #[test]
    fn gumbel_deterministic_and_rejects_zero() {
        let a = sample_gumbel(&mut Rng::new(7, 3), 64).unwrap();
        let b = sample_gumbel(&mut Rng::new(7, 3), 64).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        let c = sample_gumbel(&mut Rng::new(7, 4), 64).unwrap();
        assert_ne!(a, c);
        assert!(sample_gumbel(&mut Rng::new(7, 3), 0).is_err());
    }

    #[test]
    fn child_streams_ignore_parent_consumption() {
        let parent = Rng::new(11, 0);
        let mut used = parent.clone();
        for _ in 0..100 {
            used.next_u64();
        }
        let mut a = parent.child(5);
        let mut b = used.child(5);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(parent.child(5).next_u64(), parent.child(6).next_u64());
    }

    #[test]
    fn uniform_open_stays_inside() {
        let mut rng = Rng::new(1, 1);
        for _ in 0..10_000 {
            let u = rng.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(3, 9).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
