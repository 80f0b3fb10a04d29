//! Minimal dense-tensor engine: NHWC tensors, the layer vocabulary used by the
//! detector branches, detection losses and Adam. Backward passes are written
//! by hand per layer; networks compose them in reverse order.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod params;
pub mod resize;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache, ConvSpec, Padding};
pub use layers::{Conv, ConvStack};
pub use loss::{focal_loss, l2_loss};
pub use params::{Grads, Group, ParamId, ParamStore};
pub use resize::{resize_bilinear, resize_bilinear_backward};
pub use tensor::{Real, Tensor};
