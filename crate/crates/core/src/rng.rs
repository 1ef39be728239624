//! Seeded scalar stream built on splitmix64.
//!
//! The stream only uses integer arithmetic and IEEE operations with a single
//! rounding, so a seed produces the same values on every platform.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare_normal: None }
    }

    /// Independent stream for a named purpose, derived from the base seed.
    pub fn derive(seed: u64, label: &str) -> Self {
        // FNV-1a over the label, folded into the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut base = Rng::new(seed ^ h);
        Rng::new(base.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, dims: &[usize], mean: f64, std: f64) -> Tensor<T> {
        Tensor::from_fn(dims, |_| T::from_f64(mean + std * self.normal()))
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(dims, |_| T::from_f64(lo + (hi - lo) * self.uniform()))
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize
    }
}
