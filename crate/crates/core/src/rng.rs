//! Seeded random streams.
//!
//! Every random draw in a run descends from one root seed. Independent
//! consumers get their own stream via [`derive`], so adding draws in one
//! place never shifts the numbers seen by another.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

/// Snapshot of a [`Rng64`] sufficient to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the root `seed`.
pub fn derive(seed: u64, stream: u64) -> Rng64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn snapshot(r: &Rng64) -> RngState {
    RngState { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos() }
}

pub fn restore(s: &RngState) -> Rng64 {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

pub fn normal_vec<T: Scalar>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    Tensor::from_vec(shape, normal_vec(rng, n))
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}
