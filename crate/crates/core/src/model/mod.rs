//! The toy diffusion model: noise schedule, U-Net ε-predictor with
//! observable attention, and the weight checkpoint container.

mod checkpoint;
mod hooks;
mod params;
mod schedule;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use hooks::{AttentionHook, HookAction, LayerId, LayerInfo, LayerPosition, PassHook};
pub use params::{BoundParams, ParamStore};
pub use schedule::{
    build_noise_schedule, q_sample, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN,
    DEFAULT_T_TRAIN,
};
pub use unet::{unet_forward, HookSet, UNetConfig, UNetWeights, IMAGE_CHANNELS, IMAGE_SIZE};

#[cfg(test)]
pub(crate) use unet::population_std;
