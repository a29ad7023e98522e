//! Streaming per-category moments and the closed-form latent semantic
//! augmentation loss.

mod augment;
mod stats;

pub use augment::{
    isda_bound_single, isda_upper_bound_loss, latent_labels, linear_ce, mc_expected_ce, psd_factor, sample_augmented,
    AugSchedule, McEstimate, PSD_TOLERANCE,
};
pub use stats::{CategoryStats, Moments};
