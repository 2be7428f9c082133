//! Stochastic view generation for contrastive training.
//!
//! Transforms run in a fixed order: crop, flips, rotations, colour jitter,
//! grayscale. Every random choice is drawn from the caller's generator.

mod color;
mod geometry;
mod image;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::ImageDataset;
use crate::error::{Error, Result};

pub use color::{adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, grayscale};
pub use geometry::{center_crop, hflip, resize, resize_region, rot90k, rotate_any, vflip, CropBox};
pub use image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub enabled: bool,
    pub scale_range: [f64; 2],
    pub output_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipConfig {
    pub enabled: bool,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub enabled: bool,
    pub probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleConfig {
    pub enabled: bool,
}

/// Colour used for corners exposed by non-right-angle rotations, in 0–255
/// intensities. `Auto` resolves to the dataset's mean border colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillColor {
    Auto,
    Rgb([f64; 3]),
}

impl Serialize for FillColor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FillColor::Auto => s.serialize_str("auto"),
            FillColor::Rgb(rgb) => rgb.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for FillColor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Rgb([f64; 3]),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "auto" => Ok(FillColor::Auto),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "fill_color must be \"auto\" or an RGB triple, got {n:?}"
            ))),
            Raw::Rgb(rgb) => Ok(FillColor::Rgb(rgb)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop: CropConfig,
    pub hflip: FlipConfig,
    pub vflip: FlipConfig,
    pub jitter: JitterConfig,
    pub grayscale: FlipConfig,
    pub rot90: ToggleConfig,
    pub rot_any: ToggleConfig,
    pub fill_color: FillColor,
    pub seed: u64,
}

/// The three augmentation families compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationSet {
    Default,
    PlusRot90,
    PlusRotAny,
}

impl AugmentationSet {
    pub const ALL: [AugmentationSet; 3] = [Self::Default, Self::PlusRot90, Self::PlusRotAny];

    pub fn config(self, output_size: usize) -> AugmentationConfig {
        let mut cfg = AugmentationConfig::natural_images(output_size);
        match self {
            Self::Default => {}
            Self::PlusRot90 => {
                cfg.vflip.enabled = true;
                cfg.rot90.enabled = true;
            }
            Self::PlusRotAny => cfg.rot_any.enabled = true,
        }
        cfg
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Default => "def. augm.",
            Self::PlusRot90 => "+ 90° rot.",
            Self::PlusRotAny => "+ rand. rot.",
        }
    }
}

impl std::str::FromStr for AugmentationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "plus_rot90" => Ok(Self::PlusRot90),
            "plus_rot_any" => Ok(Self::PlusRotAny),
            other => Err(Error::Config(format!("unknown augmentation set {other:?}"))),
        }
    }
}

impl AugmentationConfig {
    /// Crop, horizontal flip, colour jitter and grayscale with the usual
    /// SimCLR strengths and probabilities.
    pub fn natural_images(output_size: usize) -> Self {
        Self {
            crop: CropConfig {
                enabled: true,
                scale_range: [0.2, 1.0],
                output_size,
            },
            hflip: FlipConfig {
                enabled: true,
                probability: 0.5,
            },
            vflip: FlipConfig {
                enabled: false,
                probability: 0.5,
            },
            jitter: JitterConfig {
                enabled: true,
                probability: 0.8,
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            grayscale: FlipConfig {
                enabled: true,
                probability: 0.2,
            },
            rot90: ToggleConfig { enabled: false },
            rot_any: ToggleConfig { enabled: false },
            fill_color: FillColor::Auto,
            seed: 0,
        }
    }

    /// Every transform switched off; the output is the input.
    pub fn disabled(output_size: usize) -> Self {
        let mut cfg = Self::natural_images(output_size);
        cfg.crop.enabled = false;
        cfg.hflip.enabled = false;
        cfg.jitter.enabled = false;
        cfg.grayscale.enabled = false;
        cfg
    }

    /// Checks ranges and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} probability {p} outside [0, 1]")))
            }
        };
        prob("hflip", self.hflip.probability)?;
        prob("vflip", self.vflip.probability)?;
        prob("jitter", self.jitter.probability)?;
        prob("grayscale", self.grayscale.probability)?;
        let [lo, hi] = self.crop.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{lo}, {hi}] must satisfy 0 < low <= high <= 1"
            )));
        }
        if self.crop.output_size == 0 {
            return Err(Error::Config("crop output size must be positive".into()));
        }
        let j = &self.jitter;
        for (name, v) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("jitter {name} strength {v} is negative")));
            }
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return Err(Error::Config(format!("jitter hue strength {} outside [0, 0.5]", j.hue)));
        }
        if let FillColor::Rgb(rgb) = self.fill_color {
            if rgb.iter().any(|v| !(0.0..=255.0).contains(v)) {
                return Err(Error::Config(format!("fill colour {rgb:?} outside [0, 255]")));
            }
        }
        let mut warnings = Vec::new();
        if self.rot90.enabled && self.rot_any.enabled {
            warnings.push(
                "rot90 and rot_any are both enabled; arbitrary rotations already cover quarter turns"
                    .to_string(),
            );
        }
        Ok(warnings)
    }
}

/// Mean colour of the one-pixel border of every image, per channel, in 0–255
/// intensities.
pub fn compute_border_fill(ds: &ImageDataset) -> Result<[f64; 3]> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot compute a border colour of an empty dataset".into()));
    }
    let s = ds.side();
    let mut sum = [0f64; 3];
    let mut count = 0usize;
    for i in 0..ds.len() {
        let img = ds.image(i);
        for y in 0..s {
            for x in 0..s {
                if y == 0 || x == 0 || y == s - 1 || x == s - 1 {
                    let o = (y * s + x) * 3;
                    for c in 0..3 {
                        sum[c] += f64::from(img[o + c]);
                    }
                    count += 1;
                }
            }
        }
    }
    Ok(sum.map(|v| v / count as f64))
}

/// Parameters drawn for one colour-jitter application.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterDraw {
    pub order: [u8; 4],
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// Record of the random choices made by one pass through the stack.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub crop: Option<CropBox>,
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
    pub angle: Option<f64>,
    pub jitter: Option<JitterDraw>,
    pub grayscale: bool,
}

/// Two independently augmented views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_index: usize,
}

/// An augmentation config with its fill colour resolved.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentationConfig,
    fill: [f32; 3],
}

impl Augmenter {
    /// `fill` is used when the config asks for an automatic fill colour.
    pub fn new(cfg: AugmentationConfig, fill: [f64; 3]) -> Result<Self> {
        for w in cfg.validate()? {
            log::warn!("{w}");
        }
        let rgb = match cfg.fill_color {
            FillColor::Auto => fill,
            FillColor::Rgb(rgb) => rgb,
        };
        Ok(Self {
            cfg,
            fill: rgb.map(|v| (v / 255.0) as f32),
        })
    }

    /// Resolves an automatic fill colour from `ds` once.
    pub fn for_dataset(cfg: AugmentationConfig, ds: &ImageDataset) -> Result<Self> {
        let fill = match cfg.fill_color {
            FillColor::Auto => compute_border_fill(ds)?,
            FillColor::Rgb(rgb) => rgb,
        };
        Self::new(cfg, fill)
    }

    pub fn config(&self) -> &AugmentationConfig {
        &self.cfg
    }

    /// Fill colour in unit-interval RGB.
    pub fn fill(&self) -> [f32; 3] {
        self.fill
    }

    pub fn output_size(&self) -> usize {
        self.cfg.crop.output_size
    }

    pub fn apply_stack<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        self.apply_traced(img, rng).map(|(out, _)| out)
    }

    pub fn apply_traced<R: Rng + ?Sized>(
        &self,
        img: &Image,
        rng: &mut R,
    ) -> Result<(Image, AugmentTrace)> {
        let cfg = &self.cfg;
        let size = cfg.crop.output_size;
        let mut trace = AugmentTrace::default();

        let mut out = if cfg.crop.enabled {
            let region = random_resized_crop_box(img.height(), img.width(), cfg.crop.scale_range, rng);
            trace.crop = Some(region);
            resize_region(img, region, size, size)?
        } else if img.height() != size || img.width() != size {
            resize(img, size, size)?
        } else {
            img.clone()
        };

        if cfg.hflip.enabled && rng.random_bool(cfg.hflip.probability) {
            trace.hflip = true;
            out = hflip(&out);
        }
        if cfg.vflip.enabled && rng.random_bool(cfg.vflip.probability) {
            trace.vflip = true;
            out = vflip(&out);
        }
        if cfg.rot90.enabled {
            let k = rng.random_range(0..4u8);
            trace.quarter_turns = k;
            out = rot90k(&out, k)?;
        }
        if cfg.rot_any.enabled {
            let angle = rng.random_range(0.0..360.0);
            trace.angle = Some(angle);
            out = rotate_any(&out, angle, self.fill)?;
        }
        if cfg.jitter.enabled && rng.random_bool(cfg.jitter.probability) {
            let draw = draw_jitter(&cfg.jitter, rng);
            apply_jitter(&mut out, &draw, &cfg.jitter);
            trace.jitter = Some(draw);
        }
        if cfg.grayscale.enabled && rng.random_bool(cfg.grayscale.probability) {
            trace.grayscale = true;
            out = grayscale(&out);
        }
        Ok((out, trace))
    }

    /// Two independent passes through the stack over the same source.
    pub fn make_view_pair<R: Rng + ?Sized>(
        &self,
        img: &Image,
        source_index: usize,
        rng: &mut R,
    ) -> Result<ViewPair> {
        Ok(ViewPair {
            view_a: self.apply_stack(img, rng)?,
            view_b: self.apply_stack(img, rng)?,
            source_index,
        })
    }
}

/// Crop box with area fraction drawn from `scale` and log-uniform aspect ratio
/// in `[3/4, 4/3]`; falls back to the largest centred box after ten rejected
/// draws.
fn random_resized_crop_box<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: [f64; 2],
    rng: &mut R,
) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * sample_range(rng, scale[0], scale[1]);
        let aspect = sample_range(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox { top, left, height: h, width: w };
        }
    }
    let ratio = width as f64 / height as f64;
    let (h, w) = if ratio < 3.0 / 4.0 {
        ((width as f64 / (3.0 / 4.0)).round() as usize, width)
    } else if ratio > 4.0 / 3.0 {
        (height, (height as f64 * 4.0 / 3.0).round() as usize)
    } else {
        (height, width)
    };
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_jitter<R: Rng + ?Sized>(cfg: &JitterConfig, rng: &mut R) -> JitterDraw {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut R, s: f64| sample_range(rng, (1.0 - s).max(0.0), 1.0 + s) as f32;
    JitterDraw {
        order,
        brightness: factor(rng, cfg.brightness),
        contrast: factor(rng, cfg.contrast),
        saturation: factor(rng, cfg.saturation),
        hue: sample_range(rng, -cfg.hue, cfg.hue) as f32,
    }
}

fn apply_jitter(img: &mut Image, draw: &JitterDraw, cfg: &JitterConfig) {
    for op in draw.order {
        match op {
            0 if cfg.brightness > 0.0 => adjust_brightness(img, draw.brightness),
            1 if cfg.contrast > 0.0 => adjust_contrast(img, draw.contrast),
            2 if cfg.saturation > 0.0 => adjust_saturation(img, draw.saturation),
            3 if cfg.hue > 0.0 => adjust_hue(img, draw.hue),
            _ => {}
        }
    }
}
