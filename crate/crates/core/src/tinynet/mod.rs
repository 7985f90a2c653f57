//! From-scratch 3D U-Net: kernels, forward/backward, optimizer, training,
//! gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod train;
pub mod unet;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::Real;
pub use optim::{AdamConfig, OptimizerState};
pub use train::{train_epochs, EpochLog, Sample, TrainConfig};
pub use unet::{ConvLayer, ForwardCache, Tensor, UNetConfig, UNetGrads, UNetParams};
