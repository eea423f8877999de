//! Dense linear algebra, positional encodings and the seeded generator.

pub mod math;
mod rng;
mod rope;
mod tensor;

pub use rng::Rng;
pub use rope::{grid_coords, rope_1d, rope_2d, rotate_head, rotate_head_2d, DEFAULT_THETA};
pub(crate) use tensor::rms_norm_into;
pub use tensor::{
    matmul, matmul_counted, rms_norm, rms_norm_rows, softmax_in_place, softmax_rows, FlopCounter,
    Tensor,
};
