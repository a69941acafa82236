use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Real, Tensor};

/// Portable, seedable generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a tag, so that e.g.
/// epoch shuffles do not depend on how many draws earlier epochs made.
pub fn derived_rng(seed: u64, tag: u64) -> Rng {
    let mut base = seeded_rng(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    seeded_rng(base.random())
}

/// Normal(0, std) draw rejected outside ±2 std.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn truncated_normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(truncated_normal(rng, std))).collect();
    Tensor::new(shape, data).expect("positive shape")
}
