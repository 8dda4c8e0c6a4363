//! Minimal differentiable tensor layer: a tape, the primitive ops the
//! blocks need, and a finite-difference gradient checker.

mod conv;
pub mod gradcheck;
mod graph;
mod norm;
mod ops;
mod resample;
mod tensor;

pub use conv::conv2d;
pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Backward, Gradients, Graph, KinkSignature, Var};
pub use norm::{batch_norm, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{
    add, concat_channels, global_avg_pool, pixel_shuffle2, pixel_shuffle2_tensor, pixel_unshuffle2_tensor, relu, scale,
    scale_channels, sigmoid, weighted_sum,
};
pub use resample::{bilinear_up2, max_pool2};
pub(crate) use resample::{linear_taps, resize_plane};
pub use tensor::{Shape4, Tensor4};
