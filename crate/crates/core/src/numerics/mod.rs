//! Dense `f64` tensors, forward kernels with MAC accounting, a reverse-mode
//! tape and the `LATT` checkpoint container.

pub mod checkpoint;
pub mod ops;
mod tape;
mod tensor;

pub use ops::{conv2d, dense, mac_total, reset_mac_counter, softmax};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::rng::XorShift64Star;

/// Uniform initialisation in `±sqrt(1/fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut XorShift64Star) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect())
        .expect("shape has positive extents")
}
