//! Penultimate-layer features of ImageNet-style residual networks, loaded
//! from safetensors files that use torchvision parameter names.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::features::{FeatureMatrix, FeatureProvenance};
use crate::augment::{center_crop, resize, Image};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::network::tensorfile::load_tensors;
use crate::network::{ParamStore, ResNetSpec};

pub const RESIZE_TO: usize = 256;
pub const CROP_TO: usize = 224;
/// Channel statistics published with the torchvision ImageNet checkpoints.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedVariant {
    Depth18,
    Depth152,
}

impl PretrainedVariant {
    pub fn spec(self) -> ResNetSpec {
        match self {
            Self::Depth18 => ResNetSpec::resnet18(crate::network::Stem::Standard, 64),
            Self::Depth152 => ResNetSpec::resnet152(),
        }
    }

    fn provenance(self) -> FeatureProvenance {
        match self {
            Self::Depth18 => FeatureProvenance::Pretrained512,
            Self::Depth152 => FeatureProvenance::Pretrained2048,
        }
    }
}

impl std::str::FromStr for PretrainedVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth18" | "resnet18" => Ok(Self::Depth18),
            "depth152" | "resnet152" => Ok(Self::Depth152),
            other => Err(Error::Config(format!("unknown pretrained variant {other:?}"))),
        }
    }
}

/// Loads backbone weights, ignoring the classifier (`fc.*`) and batch
/// counters. Every backbone tensor must be present with the right shape.
pub fn load_pretrained(weights: &Path, variant: PretrainedVariant) -> Result<ParamStore> {
    let (tensors, _) = load_tensors(weights)?;
    let mut reference = ParamStore::new();
    variant.spec().init(&mut reference, "", 0)?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
            continue;
        }
        let expected = reference
            .get(&name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor {name} in {}", weights.display())))?;
        if expected.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, checkpoint has {:?}",
                expected.dims(),
                t.dims()
            )));
        }
        store.insert(name.clone(), &t, reference.is_trainable(&name))?;
    }
    if let Some(missing) = reference.names().find(|n| !store.contains(n)) {
        return Err(Error::Checkpoint(format!("{} lacks {missing}", weights.display())));
    }
    Ok(store)
}

fn preprocess(img: &Image) -> Result<Vec<f32>> {
    let resized = resize(img, RESIZE_TO, RESIZE_TO)?;
    let cropped = center_crop(&resized, CROP_TO)?;
    Ok(cropped
        .data()
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c]))
        .collect())
}

/// Resize to 256, centre-crop 224, standardise, and take the pooled
/// backbone output (512-D for depth 18, 2048-D for depth 152).
pub fn pretrained_features(
    ds: &ImageDataset,
    weights: &Path,
    variant: PretrainedVariant,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let store = load_pretrained(weights, variant)?;
    let spec = variant.spec();
    let images = ds.unit_images();
    let mut data = Vec::with_capacity(ds.len() * spec.feature_dim());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut batch = Vec::with_capacity(chunk.len() * CROP_TO * CROP_TO * 3);
        for img in chunk {
            batch.extend(preprocess(img)?);
        }
        let x = Tensor::from_vec(batch, (chunk.len(), CROP_TO, CROP_TO, 3), &Device::Cpu)?;
        let h = spec.forward(&store, "", &x, false)?;
        data.extend(h.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from));
    }
    let mut fm = FeatureMatrix::new(ds.len(), spec.feature_dim(), data, variant.provenance(), ds)?;
    fm.normalization.insert("resize".into(), RESIZE_TO.to_string());
    fm.normalization.insert("center_crop".into(), CROP_TO.to_string());
    fm.normalization.insert("mean".into(), format!("{IMAGENET_MEAN:?}"));
    fm.normalization.insert("std".into(), format!("{IMAGENET_STD:?}"));
    fm.normalization.insert("weights".into(), weights.display().to_string());
    Ok(fm)
}
