//! Discrete-time DDPM machinery.

mod checkpoint;
mod gaussian;
mod net;
mod sampling;
mod schedule;

pub use checkpoint::{
    from_checkpoint_str, load_checkpoint, save_checkpoint, to_checkpoint_string, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub(crate) use gaussian::log_density_slice;
pub use gaussian::{
    forward_diffuse, gaussian_log_density, model_reverse_params, posterior_params, reverse_mean,
    GaussianParams,
};
pub use net::{time_embedding, time_features, DenoiserNet, FnPredictor, NetConfig, NoisePredictor};
pub use sampling::{
    ddpm_sample, pretrain_loss, pretrain_loss_graph, pretrain_loss_with, pretrain_step, NoiseDraw,
};
pub use schedule::{NoiseSchedule, VARIANCE_FLOOR};
