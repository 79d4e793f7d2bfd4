//! Minimal differentiable building blocks over `f64`.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod roi_align;

pub use layers::{gemm, relu_backward, relu_inplace, Conv2d, ConvCache, Linear};
pub use loss::{bce_with_logit, cross_entropy, sigmoid, smooth_l1, smooth_l1_4, softmax, SMOOTH_L1_BETA};
pub use optim::Sgd;
pub use params::{ParamLayout, ParamSpec, ParamVec};
pub use roi_align::{RoiAlign, RoiTaps};
