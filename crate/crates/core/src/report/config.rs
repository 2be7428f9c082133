use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationSet;
use crate::baselines::{PretrainedVariant, TsneSettings};
use crate::data::{binarize_labels, load_dataset, merge_rare_classes, resize_images, synthetic, DatasetFormat, ImageDataset};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::network::{channel_stats, BackboneVariant, ModelConfig};
use crate::training::TrainConfig;

use super::figures::FigureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tsimcne,
    SimclrTsne,
    TsnePixels,
    TsnePretrained,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tsimcne => "tsimcne",
            Self::SimclrTsne => "simclr_tsne",
            Self::TsnePixels => "tsne_pixels",
            Self::TsnePretrained => "tsne_pretrained",
        }
    }

    /// Whether the method trains a network and so depends on augmentations.
    pub fn uses_augmentation(self) -> bool {
        matches!(self, Self::Tsimcne | Self::SimclrTsne)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsimcne" => Ok(Self::Tsimcne),
            "simclr_tsne" => Ok(Self::SimclrTsne),
            "tsne_pixels" => Ok(Self::TsnePixels),
            "tsne_pretrained" => Ok(Self::TsnePretrained),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            side: 28,
            seed: 0,
        }
    }
}

/// Where the images come from and how labels and sizes are preprocessed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Archive file or image folder, relative to the config file.
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Generate the coloured-blob benchmark instead of reading `path`.
    pub synthetic: Option<SyntheticSection>,
    /// Merge classes with fewer members into one class.
    pub merge_rare_below: Option<usize>,
    pub merged_class_name: String,
    /// Class names forming the positive class of a binary relabelling.
    pub binarize_positive: Option<Vec<String>>,
    pub binary_class_names: [String; 2],
    pub resize_to: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::TensorArchive,
            synthetic: None,
            merge_rare_below: None,
            merged_class_name: "OTH".into(),
            binarize_positive: None,
            binary_class_names: ["negative".into(), "positive".into()],
            resize_to: None,
        }
    }
}

impl DatasetSection {
    pub fn load(&self, base_dir: &Path) -> Result<ImageDataset> {
        let mut ds = match (&self.synthetic, &self.path) {
            (Some(s), None) => synthetic::colored_blobs(s.n_per_class, s.side, s.seed)?,
            (None, Some(p)) => load_dataset(&base_dir.join(p), self.format)?,
            _ => {
                return Err(Error::Config(
                    "dataset needs exactly one of `path` and `synthetic`".into(),
                ))
            }
        };
        if let Some(positive) = &self.binarize_positive {
            let mut set = BTreeSet::new();
            for name in positive {
                let idx = ds
                    .class_names()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Config(format!("unknown class {name:?} in binarize_positive")))?;
                set.insert(idx);
            }
            let [neg, pos] = &self.binary_class_names;
            ds = binarize_labels(&ds, &set, (neg, pos))?;
        }
        if let Some(min) = self.merge_rare_below {
            ds = merge_rare_classes(&ds, min, &self.merged_class_name)?;
        }
        if let Some(side) = self.resize_to {
            ds = resize_images(&ds, side)?;
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Chosen from the image size when absent: `small_input` up to 32 px.
    pub variant: Option<BackboneVariant>,
    pub width: usize,
    pub hidden_dim: usize,
    /// Standardise inputs with the dataset's channel statistics.
    pub dataset_normalization: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: None,
            width: 64,
            hidden_dim: 1024,
            dataset_normalization: true,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, ds: &ImageDataset, out_dim: usize) -> ModelConfig {
        let variant = self.variant.unwrap_or(if ds.side() <= 32 {
            BackboneVariant::SmallInput
        } else {
            BackboneVariant::Standard
        });
        let mut cfg = ModelConfig {
            input_size: ds.side(),
            width: self.width,
            hidden_dim: self.hidden_dim,
            ..ModelConfig::new(variant, out_dim)
        };
        if self.dataset_normalization {
            let images = ds.unit_images();
            let (mean, std) = channel_stats(&images);
            cfg.input_mean = mean;
            cfg.input_std = std;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainedSection {
    pub weights: Option<PathBuf>,
    pub variant: PretrainedVariant,
    pub batch_size: usize,
}

impl Default for PretrainedSection {
    fn default() -> Self {
        Self {
            weights: None,
            variant: PretrainedVariant::Depth18,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Reduce pixels to this many principal components before t-SNE.
    pub pixel_pca_components: Option<usize>,
    /// SimCLR epochs (the remaining schedule comes from `[train]`).
    pub simclr_epochs: usize,
    pub simclr_temperature: f64,
    pub tsne: TsneSettings,
    pub pretrained: PretrainedSection,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            pixel_pca_components: None,
            simclr_epochs: 1000,
            simclr_temperature: 0.5,
            tsne: TsneSettings::default(),
            pretrained: PretrainedSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub augmentations: Vec<AugmentationSet>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub baselines: BaselineSection,
    pub eval: EvalConfig,
    pub figure: FigureSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            repeats: 3,
            out_dir: PathBuf::from("runs"),
            methods: vec![Method::Tsimcne],
            augmentations: vec![AugmentationSet::Default],
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            baselines: BaselineSection::default(),
            eval: EvalConfig::default(),
            figure: FigureSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        for p in [&mut cfg.dataset.path, &mut cfg.baselines.pretrained.weights].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < 1 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.methods.iter().any(|m| m.uses_augmentation()) && self.augmentations.is_empty() {
            return Err(Error::Config("trained methods need at least one augmentation set".into()));
        }
        if self.methods.contains(&Method::TsnePretrained) && self.baselines.pretrained.weights.is_none() {
            return Err(Error::Config("tsne_pretrained needs baselines.pretrained.weights".into()));
        }
        self.train.validate()?;
        self.figure.validate()
    }

    /// Every setting, defaults included.
    pub fn resolved_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the resolved config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.resolved_toml()?.as_bytes())))
    }
}
