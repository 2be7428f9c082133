//! Contrastive losses over a batch of `2b` outputs in which rows `2t` and
//! `2t + 1` are the two views of source image `t`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    InfonceCosine,
    Cauchy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce_cosine" => Ok(Self::InfonceCosine),
            "cauchy" => Ok(Self::Cauchy),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Only used by the cosine loss.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cauchy,
            temperature: 0.5,
        }
    }
}

impl LossConfig {
    pub fn cosine(temperature: f64) -> Self {
        Self {
            kind: LossKind::InfonceCosine,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn loss(&self, z: &BatchPairing) -> Result<Tensor> {
        self.validate()?;
        match self.kind {
            LossKind::InfonceCosine => infonce_loss(z, self.temperature),
            LossKind::Cauchy => cauchy_infonce_loss(z),
        }
    }
}

/// `2b x d` outputs with positive pairs on consecutive rows.
#[derive(Debug, Clone)]
pub struct BatchPairing {
    z: Tensor,
}

impl BatchPairing {
    pub fn new(z: Tensor) -> Result<Self> {
        let (n, d) = z.dims2()?;
        if n < 2 || n % 2 != 0 {
            return Err(invalid(format!("pairing needs an even, non-zero row count, got {n}")));
        }
        if d == 0 {
            return Err(invalid("outputs must have at least one dimension"));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn num_pairs(&self) -> usize {
        self.z.dims()[0] / 2
    }

    fn partner_index(&self) -> Result<Tensor> {
        let n = self.z.dims()[0] as u32;
        let idx: Vec<u32> = (0..n).map(|i| i ^ 1).collect();
        Ok(Tensor::new(idx.as_slice(), self.z.device())?)
    }

    /// Row `i` of the result is the positive partner of row `i`.
    fn partners(&self) -> Result<Tensor> {
        Ok(self.z.index_select(&self.partner_index()?, 0)?)
    }

    fn off_diagonal_mask(&self) -> Result<Tensor> {
        let n = self.z.dims()[0];
        let eye = Tensor::eye(n, self.z.dtype(), self.z.device())?;
        Ok(eye.affine(-1.0, 1.0)?)
    }
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn cauchy_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", x.len(), y.len())));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 / (1.0 + d2))
}

/// Temperature-scaled cosine InfoNCE, averaged over all `2b` directed pairs.
/// The denominator runs over every `k != i`, including the positive.
pub fn infonce_loss(pairs: &BatchPairing, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let z = pairs.tensor();
    let norms = z.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min_norm = norms.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min_norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let zn = z.broadcast_div(&norms)?;
    let sims = (zn.matmul(&zn.t()?)? / temperature)?;
    let partners = zn.index_select(&pairs.partner_index()?, 0)?;
    let positive = ((&zn * &partners)?.sum(1)? / temperature)?;
    let row_max = sims.max_keepdim(1)?.detach();
    let exp = sims.broadcast_sub(&row_max)?.exp()?;
    let denom = (exp * pairs.off_diagonal_mask()?)?.sum(1)?;
    let lse = (denom.log()? + row_max.squeeze(1)?)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Cauchy-kernel InfoNCE on unnormalised outputs, averaged over all `2b`
/// directed pairs. The repulsive sum runs over every `k != i`.
pub fn cauchy_infonce_loss(pairs: &BatchPairing) -> Result<Tensor> {
    let z = pairs.tensor();
    let sq = z.sqr()?.sum_keepdim(1)?;
    let gram = z.matmul(&z.t()?)?;
    let d2 = (sq.broadcast_add(&sq.t()?)? - (gram * 2.0)?)?.relu()?;
    let kernel = (d2 + 1.0)?.recip()?;
    let repulsion = (kernel * pairs.off_diagonal_mask()?)?.sum(D::Minus1)?.log()?;
    let attraction = ((z - pairs.partners()?)?.sqr()?.sum(1)? + 1.0)?.log()?;
    Ok((attraction + repulsion)?.mean_all()?)
}
