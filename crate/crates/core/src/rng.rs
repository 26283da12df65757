//! Splittable, counter-based random streams.
//!
//! Every stochastic operation takes an explicit [`RngStream`]. Child streams are
//! derived from the parent's key and a tag, never from the parent's position, so
//! a stream's output depends only on the seed and the derivation path.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable 64-bit tag for a textual label.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(splitmix64(seed))
    }

    fn from_key(key: u64) -> Self {
        let mut bytes = [0u8; 32];
        let mut k = key;
        for chunk in bytes.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        Self {
            key,
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Child stream for `tag`; independent of how much of `self` was consumed.
    pub fn derive(&self, tag: u64) -> RngStream {
        Self::from_key(splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x51_7C_C1_B7_27_22_0A_95))))
    }

    pub fn derive_str(&self, label: &str) -> RngStream {
        self.derive(tag(label))
    }

    /// Shorthand for `derive_str(label).derive(index)`.
    pub fn child(&self, label: &str, index: u64) -> RngStream {
        self.derive_str(label).derive(index)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_ignores_parent_position() {
        let a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..10 {
            b.uniform();
        }
        let mut ca = a.derive(3);
        let mut cb = b.derive(3);
        assert_eq!(ca.next_u64(), cb.next_u64());
    }

    #[test]
    fn distinct_tags_give_distinct_streams() {
        let root = RngStream::new(1);
        assert_ne!(root.derive(1).next_u64(), root.derive(2).next_u64());
        assert_ne!(root.child("a", 0).next_u64(), root.child("b", 0).next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = RngStream::new(3);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
