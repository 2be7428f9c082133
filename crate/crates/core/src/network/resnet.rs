//! Residual networks without the classification layer, channels-last.
//!
//! Parameter names follow the torchvision layout (`conv1.weight`,
//! `layer2.0.downsample.1.running_var`, ...) under an optional prefix, so
//! converted torchvision checkpoints load directly.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ops::{batch_norm_eval, batch_norm_train, conv2d, max_pool_nonneg};
use super::params::ParamStore;
use crate::error::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3x3 stride-1 first convolution, no max-pool.
    Small,
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max-pool.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub stem: Stem,
    pub block: BlockKind,
    pub layers: [usize; 4],
    /// Channels of the stem and first stage; 64 in the standard networks.
    pub width: usize,
}

impl ResNetSpec {
    pub fn resnet18(stem: Stem, width: usize) -> Self {
        Self {
            stem,
            block: BlockKind::Basic,
            layers: [2, 2, 2, 2],
            width,
        }
    }

    pub fn resnet152() -> Self {
        Self {
            stem: Stem::Standard,
            block: BlockKind::Bottleneck,
            layers: [3, 8, 36, 3],
            width: 64,
        }
    }

    fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    /// Dimension of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.width * 8 * self.expansion()
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<()> {
        let w = self.width;
        let (k, _, _) = self.stem_geometry();
        init_conv(store, &format!("{prefix}conv1"), w, 3, k, seed)?;
        init_bn(store, &format!("{prefix}bn1"), w)?;
        let mut in_ch = w;
        for (stage, &blocks) in self.layers.iter().enumerate() {
            let planes = w << stage;
            let out_ch = planes * self.expansion();
            for b in 0..blocks {
                let p = format!("{prefix}layer{}.{b}.", stage + 1);
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                match self.block {
                    BlockKind::Basic => {
                        init_conv(store, &format!("{p}conv1"), planes, in_ch, 3, seed)?;
                        init_bn(store, &format!("{p}bn1"), planes)?;
                        init_conv(store, &format!("{p}conv2"), planes, planes, 3, seed)?;
                        init_bn(store, &format!("{p}bn2"), planes)?;
                    }
                    BlockKind::Bottleneck => {
                        init_conv(store, &format!("{p}conv1"), planes, in_ch, 1, seed)?;
                        init_bn(store, &format!("{p}bn1"), planes)?;
                        init_conv(store, &format!("{p}conv2"), planes, planes, 3, seed)?;
                        init_bn(store, &format!("{p}bn2"), planes)?;
                        init_conv(store, &format!("{p}conv3"), out_ch, planes, 1, seed)?;
                        init_bn(store, &format!("{p}bn3"), out_ch)?;
                    }
                }
                if b == 0 && (stride != 1 || in_ch != out_ch) {
                    init_conv(store, &format!("{p}downsample.0"), out_ch, in_ch, 1, seed)?;
                    init_bn(store, &format!("{p}downsample.1"), out_ch)?;
                }
                in_ch = out_ch;
            }
        }
        Ok(())
    }

    fn stem_geometry(&self) -> (usize, usize, usize) {
        match self.stem {
            Stem::Small => (3, 1, 1),
            Stem::Standard => (7, 2, 3),
        }
    }

    /// Pooled features `[B, feature_dim]` of an NHWC batch.
    pub fn forward(&self, store: &ParamStore, prefix: &str, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, stride, pad) = self.stem_geometry();
        let mut y = conv2d(x, store.get(&format!("{prefix}conv1.weight"))?, stride, pad)?;
        y = bn(store, &format!("{prefix}bn1"), &y, train)?.relu()?;
        if self.stem == Stem::Standard {
            y = max_pool_nonneg(&y, 3, 2, 1)?;
        }
        for (stage, &blocks) in self.layers.iter().enumerate() {
            for b in 0..blocks {
                let p = format!("{prefix}layer{}.{b}.", stage + 1);
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                y = self.block_forward(store, &p, &y, stride, train)?;
            }
        }
        let (batch, h, w, c) = y.dims4()?;
        Ok(y.reshape((batch, h * w, c))?.mean(1)?)
    }

    fn block_forward(&self, store: &ParamStore, p: &str, x: &Tensor, stride: usize, train: bool) -> Result<Tensor> {
        let conv = |name: &str, input: &Tensor, s: usize, pad: usize| -> Result<Tensor> {
            Ok(conv2d(input, store.get(&format!("{p}{name}.weight"))?, s, pad)?)
        };
        let y = match self.block {
            BlockKind::Basic => {
                let y = bn(store, &format!("{p}bn1"), &conv("conv1", x, stride, 1)?, train)?.relu()?;
                bn(store, &format!("{p}bn2"), &conv("conv2", &y, 1, 1)?, train)?
            }
            BlockKind::Bottleneck => {
                let y = bn(store, &format!("{p}bn1"), &conv("conv1", x, 1, 0)?, train)?.relu()?;
                let y = bn(store, &format!("{p}bn2"), &conv("conv2", &y, stride, 1)?, train)?.relu()?;
                bn(store, &format!("{p}bn3"), &conv("conv3", &y, 1, 0)?, train)?
            }
        };
        let shortcut = if store.contains(&format!("{p}downsample.0.weight")) {
            bn(store, &format!("{p}downsample.1"), &conv("downsample.0", x, stride, 0)?, train)?
        } else {
            x.clone()
        };
        Ok((y + shortcut)?.relu()?)
    }
}

fn init_conv(store: &mut ParamStore, name: &str, out_ch: usize, in_ch: usize, k: usize, seed: u64) -> Result<()> {
    // He initialisation, fan-out mode
    let std = (2.0 / (out_ch * k * k) as f64).sqrt();
    store.init_normal(&format!("{name}.weight"), &[out_ch, in_ch, k, k], std, seed)
}

fn init_bn(store: &mut ParamStore, name: &str, ch: usize) -> Result<()> {
    store.init_const(&format!("{name}.weight"), &[ch], 1.0, true)?;
    store.init_const(&format!("{name}.bias"), &[ch], 0.0, true)?;
    store.init_const(&format!("{name}.running_mean"), &[ch], 0.0, false)?;
    store.init_const(&format!("{name}.running_var"), &[ch], 1.0, false)
}

fn bn(store: &ParamStore, name: &str, x: &Tensor, train: bool) -> Result<Tensor> {
    let gamma = store.get(&format!("{name}.weight"))?;
    let beta = store.get(&format!("{name}.bias"))?;
    let rm_name = format!("{name}.running_mean");
    let rv_name = format!("{name}.running_var");
    if !train {
        let y = batch_norm_eval(x, gamma, beta, store.get(&rm_name)?, store.get(&rv_name)?, BN_EPS)?;
        return Ok(y);
    }
    let (y, stats) = batch_norm_train(x, gamma, beta, BN_EPS)?;
    let unbias = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    let update = |key: &str, batch: Vec<f64>| -> Result<()> {
        let old: Vec<f32> = store.get(key)?.to_vec1()?;
        let new: Vec<f32> = old
            .iter()
            .zip(batch)
            .map(|(&o, b)| ((1.0 - BN_MOMENTUM) * f64::from(o) + BN_MOMENTUM * b) as f32)
            .collect();
        let n = new.len();
        store.set(key, &Tensor::from_vec(new, n, x.device())?)
    };
    update(&rm_name, stats.mean)?;
    update(&rv_name, stats.var.iter().map(|v| v * unbias).collect())?;
    Ok(y)
}
