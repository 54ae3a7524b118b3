//! Recognition feature extractors and the block-wise perceptual loss.

mod extractor;
mod loss;
mod pretrain;

pub use extractor::{ExtractorConfig, FeatureExtractor, FeaturePyramid, CHECKPOINT_KIND};
pub use loss::{
    block_cosine, channel_normalize, normalized_batch, normalized_loss, perceptual_loss, perceptual_loss_batch,
    pyramid_loss, NormalizedPyramid, PerceptualConfig, NORM_EPS,
};
pub use pretrain::{accuracy, classification_dataset, pretrain_classifier, PretrainConfig, PretrainReport};
