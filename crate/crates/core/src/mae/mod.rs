//! Masked-autoencoder priors: a whole-image convolutional MAE whose encoder
//! is embedded in the unfolding network, and a token MAE over joint
//! spatial-spectral patches whose encoder defines a consistency loss.

mod conv_mae;
mod mask;
mod token_mae;

pub use conv_mae::{ConvEncoder, ConvMae, ConvMaeConfig, ENCODER_PREFIX};
pub use mask::{
    apply_spatial_mask, make_spatial_mask, make_spatial_spectral_mask, token_count, SpatialMaskSpec,
    SpatialSpectralMaskSpec,
};
pub use token_mae::{patchify_index, ss_consistency_loss, TokenMae, TokenMaeConfig, TransformerBlock};
