//! Encoder (stimulus -> voxels) and decoder (voxels -> stimulus) networks and
//! their losses.

mod losses;
mod networks;

pub use losses::{
    encoder_loss, encoder_loss_grad, encoder_loss_terms, image_loss, image_loss_batch, total_variation,
    total_variation_gradient, tv_regularizer, EncoderLossConfig, EncoderLossTerms, ImageLossConfig, ImageLossTerms,
    COS_EPS,
};
pub(crate) use networks::{to_columns, to_rows};
pub use networks::{Decoder, DecoderConfig, Encoder, EncoderConfig, StimulusEncoder, DECODER_KIND, ENCODER_KIND};
