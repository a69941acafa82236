//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Layout is row-major throughout and images are NCHW. Broadcasting is
//! limited to scalar-with-tensor (`add`/`sub`/`mul`) and explicit
//! [`Graph::bias_add`]. Values are checked for finiteness after every
//! primitive, so a NaN surfaces as an error at the op that produced it.
//!
//! ```
//! use crowd_count::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq, 0).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
mod init;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use init::{derived_rng, seeded_rng, truncated_normal, truncated_normal_tensor, Rng};
pub use tensor::{Real, Tensor};

/// Enables flush-to-zero and denormals-are-zero on the calling thread.
/// Deep, small-initialized networks push gradients into the subnormal range,
/// where x86 arithmetic slows down by two orders of magnitude.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) control bits are set.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
