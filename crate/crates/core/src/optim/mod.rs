//! Loss, optimizer, density control, smoothing filter and the training loop.

pub mod adam;
pub mod density;
pub mod filter;
pub mod loss;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState, GroupRates};
pub use density::{densify_and_prune, reset_opacity, DensifyConfig, DensifyEvent, DensifyStats};
pub use filter::gaussian_3d_filter;
pub use loss::{loss, loss_with_grad, psnr, ssim, LossConfig};
pub use train::{evaluate_views, init_state, train, train_from, LearningRates, MetricsRecord, TrainConfig, TrainObserver, TrainResult, TrainState};
