//! Comparison embeddings: t-SNE of pixels, of pretrained-network features,
//! and of SimCLR representations.

mod features;
mod pca;
mod pretrained;
mod tsne;

pub use features::{pixel_features, FeatureMatrix, FeatureProvenance};
pub use pca::{pca_fit, pca_reduce, Pca};
pub use pretrained::{load_pretrained, pretrained_features, PretrainedVariant, CROP_TO, IMAGENET_MEAN, IMAGENET_STD, RESIZE_TO};
pub use tsne::{tsne_coords, tsne_embed, LearningRate, Repulsion, TsneInit, TsneSettings};

use crate::augment::{AugmentationConfig, Augmenter};
use crate::data::ImageDataset;
use crate::error::Result;
use crate::network::{build_model, ModelConfig};
use crate::objective::LossConfig;
use crate::seeding::derive_seed;
use crate::training::{train_stage, TrainConfig, TrainRunRecord};

/// Default SimCLR schedule: 1000 epochs of cosine InfoNCE at temperature 1/2.
pub fn simclr_train_config() -> TrainConfig {
    TrainConfig {
        stage_epochs: [1000, 0, 0],
        losses: [LossConfig::cosine(0.5); 3],
        ..TrainConfig::default()
    }
}

/// Trains the encoder with the cosine InfoNCE loss for
/// `train_cfg.stage_epochs[0]` epochs and returns the representation `h`
/// of every unaugmented image.
pub fn train_simclr(
    ds: &ImageDataset,
    aug_cfg: &AugmentationConfig,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(FeatureMatrix, TrainRunRecord)> {
    let mut cfg = train_cfg.clone();
    cfg.losses[0] = LossConfig::cosine(train_cfg.losses[0].temperature);
    let model_cfg = ModelConfig {
        out_dim: cfg.stage1_out_dim,
        ..model_cfg.clone()
    };
    let mut model = build_model(model_cfg, derive_seed(cfg.seed, &[5]))?;
    let images = ds.unit_images();
    let augmenter = Augmenter::for_dataset(aug_cfg.clone(), ds)?;
    let record = train_stage(&mut model, &images, &augmenter, &cfg, 1)?;
    let (h, _) = model.embed(&images, cfg.embed_batch_size)?;
    let dim = model.feature_dim();
    let data = h.into_iter().flatten().collect();
    let mut fm = FeatureMatrix::new(ds.len(), dim, data, FeatureProvenance::SimclrH, ds)?;
    fm.normalization.insert("input_mean".into(), format!("{:?}", model.config().input_mean));
    fm.normalization.insert("input_std".into(), format!("{:?}", model.config().input_std));
    Ok((fm, record))
}
