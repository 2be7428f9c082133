//! Encoder network: residual backbone producing `h`, two-layer projector
//! producing `z`.

pub mod ops;
pub mod params;
pub mod resnet;
pub mod tensorfile;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use params::ParamStore;
pub use resnet::{BlockKind, ResNetSpec, Stem};

use crate::augment::Image;
use crate::error::{invalid, Error, Result};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HIDDEN_LAYER: &str = "projector.hidden";
pub const OUTPUT_LAYER: &str = "projector.out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// 3x3 first convolution without initial downsampling, for 28-32 px inputs.
    SmallInput,
    /// Unmodified ResNet18 stem, for 96 px inputs.
    Standard,
}

impl BackboneVariant {
    pub fn default_input_size(self) -> usize {
        match self {
            Self::SmallInput => 28,
            Self::Standard => 96,
        }
    }

    fn stem(self) -> Stem {
        match self {
            Self::SmallInput => Stem::Small,
            Self::Standard => Stem::Standard,
        }
    }
}

impl std::str::FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_input" => Ok(Self::SmallInput),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown backbone variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: BackboneVariant,
    /// Side length of the (square) input images.
    pub input_size: usize,
    /// Base channel width of the backbone; 64 gives the standard ResNet18
    /// with 512-dimensional `h`.
    pub width: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Per-channel normalisation applied to unit-interval inputs.
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl ModelConfig {
    pub fn new(variant: BackboneVariant, out_dim: usize) -> Self {
        Self {
            variant,
            input_size: variant.default_input_size(),
            width: 64,
            hidden_dim: 1024,
            out_dim,
            input_mean: [0.5; 3],
            input_std: [0.25; 3],
        }
    }

    pub fn backbone(&self) -> ResNetSpec {
        ResNetSpec::resnet18(self.variant.stem(), self.width)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone().feature_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.out_dim < 1 {
            return Err(invalid("out_dim must be at least 1"));
        }
        if self.width < 1 || self.hidden_dim < 1 || self.input_size < 1 {
            return Err(invalid("model widths and input size must be positive"));
        }
        if self.input_std.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("input_std must be positive"));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation of a set of unit-interval images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for img in images {
        for px in img.data().chunks_exact(3) {
            for c in 0..3 {
                let v = f64::from(px[c]);
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1.0;
        }
    }
    let mut mean = [0.5f32; 3];
    let mut std = [0.25f32; 3];
    if n > 0.0 {
        for c in 0..3 {
            let m = sum[c] / n;
            mean[c] = m as f32;
            std[c] = ((sq[c] / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
    }
    (mean, std)
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    store: ParamStore,
    backbone_frozen: bool,
}

/// Deterministically initialised encoder.
pub fn build_model(config: ModelConfig, init_seed: u64) -> Result<EncoderModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    config.backbone().init(&mut store, BACKBONE_PREFIX, init_seed)?;
    init_linear(&mut store, HIDDEN_LAYER, config.feature_dim(), config.hidden_dim, init_seed)?;
    init_linear(&mut store, OUTPUT_LAYER, config.hidden_dim, config.out_dim, init_seed)?;
    Ok(EncoderModel {
        config,
        store,
        backbone_frozen: false,
    })
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.init_uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound, seed)?;
    store.init_uniform(&format!("{name}.bias"), &[fan_out], bound, seed)
}

fn linear(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{name}.weight"))?;
    let b = store.get(&format!("{name}.bias"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

impl EncoderModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// Stacks images into a normalised NHWC batch, checking their size.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::Shape(format!(
                    "model expects {s}x{s} inputs, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    data.push((px[c] - self.config.input_mean[c]) / self.config.input_std[c]);
                }
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), s, s, 3), &Device::Cpu)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match x.dims() {
            [_, h, w, 3] if *h == s && *w == s => Ok(()),
            dims => Err(Error::Shape(format!("model expects [B, {s}, {s}, 3] input, got {dims:?}"))),
        }
    }

    /// Representation `h` of a normalised NHWC batch.
    pub fn representation(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let backbone_train = train && !self.backbone_frozen;
        let h = self.config.backbone().forward(&self.store, BACKBONE_PREFIX, x, backbone_train)?;
        Ok(if self.backbone_frozen { h.detach() } else { h })
    }

    /// Projector output `z` for a representation batch.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        let hidden = linear(&self.store, HIDDEN_LAYER, h)?.relu()?;
        linear(&self.store, OUTPUT_LAYER, &hidden)
    }

    /// `(h, z)` for a normalised NHWC batch. In training mode batch-norm
    /// uses batch statistics and updates its running averages, except in a
    /// frozen backbone.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let h = self.representation(x, train)?;
        let z = self.project(&h)?;
        Ok((h, z))
    }

    /// Inference-mode `h` and `z` for images, as `f64` rows.
    pub fn embed(&self, images: &[Image], batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut hs = Vec::with_capacity(images.len());
        let mut zs = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let (h, z) = self.forward(&self.batch_tensor(&refs)?, false)?;
            hs.extend(h.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            zs.extend(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok((hs, zs))
    }

    /// Re-initialises the final projector layer with `new_out_dim` outputs.
    pub fn swap_output_layer(&mut self, new_out_dim: usize, init_seed: u64) -> Result<()> {
        if new_out_dim < 1 {
            return Err(invalid("new_out_dim must be at least 1"));
        }
        self.store.remove(&format!("{OUTPUT_LAYER}.weight"));
        self.store.remove(&format!("{OUTPUT_LAYER}.bias"));
        init_linear(&mut self.store, OUTPUT_LAYER, self.config.hidden_dim, new_out_dim, init_seed)?;
        self.config.out_dim = new_out_dim;
        Ok(())
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.backbone_frozen = frozen;
    }

    /// Variables that receive gradient updates under the current freezing.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let frozen = self.backbone_frozen;
        self.store
            .trainable_vars(|name| !(frozen && name.starts_with(BACKBONE_PREFIX)))
    }

    /// Independent copy of the model (parameters are not shared).
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            store: self.store.deep_clone()?,
            backbone_frozen: self.backbone_frozen,
        })
    }

    /// Writes parameters, buffers, config and a stage tag, plus optional
    /// extra tensors (stored under `extra.`).
    pub fn save_checkpoint(
        &self,
        path: &Path,
        stage_tag: &str,
        extra: &[(String, Tensor)],
        extra_meta: &[(&str, String)],
    ) -> Result<()> {
        let mut tensors = self.store.tensors();
        for (name, t) in extra {
            tensors.push((format!("extra.{name}"), t.clone()));
        }
        let trainable: Vec<&str> = self.store.names().filter(|n| self.store.is_trainable(n)).collect();
        let mut meta = HashMap::from([
            ("format".to_string(), "tsimcne-checkpoint".to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("stage".to_string(), stage_tag.to_string()),
            ("backbone_frozen".to_string(), self.backbone_frozen.to_string()),
            ("trainable".to_string(), trainable.join(",")),
        ]);
        for (k, v) in extra_meta {
            meta.insert(format!("extra.{k}"), v.clone());
        }
        tensorfile::save_tensors(path, &tensors, meta)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        let (tensors, meta) = tensorfile::load_tensors(path)?;
        if meta.get("format").map(String::as_str) != Some("tsimcne-checkpoint") {
            return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k}")))
        };
        let config: ModelConfig = serde_json::from_str(field("config")?)?;
        let trainable: std::collections::BTreeSet<&str> = field("trainable")?.split(',').collect();
        let backbone_frozen = field("backbone_frozen")? == "true";
        let stage = field("stage")?.clone();
        let mut store = ParamStore::new();
        let mut extra = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("extra.") {
                extra.push((rest.to_string(), t));
            } else {
                store.insert(name.clone(), &t, trainable.contains(name.as_str()))?;
            }
        }
        let extra_meta = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint {
            model: EncoderModel {
                config,
                store,
                backbone_frozen,
            },
            stage,
            extra,
            extra_meta,
        })
    }
}

pub struct Checkpoint {
    pub model: EncoderModel,
    pub stage: String,
    pub extra: Vec<(String, Tensor)>,
    pub extra_meta: HashMap<String, String>,
}
