use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeding::stream;

/// Named tensors of a model. Trainable entries receive gradients; buffers
/// (batch-norm running statistics) are updated in place during training.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor, trainable: bool) -> Result<()> {
        let var = Var::from_tensor(&tensor.to_dtype(DType::F32)?)?;
        self.entries.insert(name.into(), Entry { var, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| e.var.as_tensor())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Overwrites the value of an existing entry, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if entry.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                entry.var.dims(),
                value.dims()
            )));
        }
        entry.var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) {
        self.entries.remove(name);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Trainable variables whose names satisfy `keep`, sorted by name.
    pub fn trainable_vars(&self, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(n, e)| e.trainable && keep(n))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (n, e) in &self.entries {
            out.insert(n.clone(), &e.var.as_tensor().copy()?, e.trainable)?;
        }
        Ok(out)
    }

    /// Gaussian initialisation `N(0, std^2)`, seeded per name.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<()> {
        let mut rng = stream(seed, &[name_hash(name)]);
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, &Tensor::from_vec(v, shape, &Device::Cpu)?, true)
    }

    /// Uniform initialisation on `[-bound, bound)`, seeded per name.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) -> Result<()> {
        let mut rng = stream(seed, &[name_hash(name)]);
        let n: usize = shape.iter().product();
        let b = bound as f32;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-b..b)).collect();
        self.insert(name, &Tensor::from_vec(v, shape, &Device::Cpu)?, true)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32, trainable: bool) -> Result<()> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * f64::from(value))?;
        self.insert(name, &t, trainable)
    }
}
