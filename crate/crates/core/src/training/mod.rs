//! Three-stage optimisation: 128-D outputs, then a fresh 2-D output layer
//! trained alone, then the whole network at 2-D.

mod record;
mod schedule;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use record::{EpochRecord, TrainRunRecord};
pub use schedule::{Annealing, OptimizerConfig, OptimizerKind, ScheduleConfig};

use crate::augment::{AugmentationConfig, Augmenter, Image};
use crate::data::ImageDataset;
use crate::embedding::EmbeddingResult;
use crate::error::{invalid, Error, Result};
use crate::network::{build_model, EncoderModel, ModelConfig, OUTPUT_LAYER};
use crate::objective::{BatchPairing, LossConfig};
use crate::seeding::{derive_seed, stream};

const TAG_SHUFFLE: u64 = 1;
const TAG_VIEWS: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SWAP: u64 = 4;

/// Stop after `epoch` completed epochs of `stage`, leaving a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaltPoint {
    pub stage: u8,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage_epochs: [usize; 3],
    /// Source images per batch; each contributes two views.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub losses: [LossConfig; 3],
    pub stage1_out_dim: usize,
    pub final_out_dim: usize,
    /// Train only the new output layer in stage 2 (backbone frozen,
    /// batch-norm in inference mode); otherwise train everything.
    pub stage2_head_only: bool,
    pub seed: u64,
    pub embed_batch_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write `latest.ckpt` every this many epochs (0: only at stage ends).
    pub checkpoint_every: usize,
    #[serde(skip)]
    pub halt_after: Option<HaltPoint>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage_epochs: [1000, 50, 450],
            batch_size: 1024,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            losses: [LossConfig::default(); 3],
            stage1_out_dim: 128,
            final_out_dim: 2,
            stage2_head_only: true,
            seed: 0,
            embed_batch_size: 256,
            checkpoint_dir: None,
            checkpoint_every: 1,
            halt_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.stage1_out_dim < 1 || self.final_out_dim < 1 {
            return Err(Error::Config("output dimensions must be positive".into()));
        }
        for loss in &self.losses {
            loss.validate()?;
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stage_epochs.iter().sum()
    }
}

pub struct PipelineOutput {
    pub model: EncoderModel,
    pub embedding: EmbeddingResult,
    pub record: TrainRunRecord,
}

struct Session<'a> {
    images: &'a [Image],
    augmenter: &'a Augmenter,
    cfg: &'a TrainConfig,
    model: EncoderModel,
    momentum: BTreeMap<String, Tensor>,
    record: TrainRunRecord,
}

fn stage_index(stage: u8) -> Result<usize> {
    match stage {
        1..=3 => Ok(usize::from(stage - 1)),
        _ => Err(invalid(format!("stage must be 1, 2 or 3, got {stage}"))),
    }
}

impl Session<'_> {
    fn required_out_dim(&self, stage: u8) -> usize {
        if stage == 1 {
            self.cfg.stage1_out_dim
        } else {
            self.cfg.final_out_dim
        }
    }

    fn run_stage(&mut self, stage: u8, start_epoch: usize) -> Result<()> {
        let si = stage_index(stage)?;
        let epochs = self.cfg.stage_epochs[si];
        let want = self.required_out_dim(stage);
        if self.model.out_dim() != want {
            return Err(invalid(format!(
                "stage {stage} needs a {want}-dimensional output, model has {}",
                self.model.out_dim()
            )));
        }
        self.model.freeze_backbone(stage == 2 && self.cfg.stage2_head_only);
        let b = self.cfg.batch_size;
        let steps_per_epoch = self.images.len() / b;
        if epochs > start_epoch && steps_per_epoch == 0 {
            return Err(invalid(format!(
                "dataset of {} images is smaller than one batch of {b}",
                self.images.len()
            )));
        }
        let total_steps = epochs * steps_per_epoch;
        for epoch in start_epoch..epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..self.images.len()).collect();
            order.shuffle(&mut stream(self.cfg.seed, &[TAG_SHUFFLE, u64::from(stage), epoch as u64]));
            let mut loss_sum = 0.0;
            let mut first_lr = None;
            for (k, sources) in order.chunks_exact(b).enumerate() {
                let step = epoch * steps_per_epoch + k;
                let lr = self.cfg.schedule.learning_rate(si, step, total_steps, steps_per_epoch, b);
                first_lr.get_or_insert(lr);
                let loss = self.step(stage, epoch, sources, lr)?;
                loss_sum += loss;
            }
            let loss = loss_sum / steps_per_epoch as f64;
            let rec = EpochRecord::now(stage, epoch, loss, first_lr.unwrap_or(0.0), started.elapsed().as_secs_f64());
            log::info!("stage {stage} epoch {epoch}: loss {loss:.5} lr {:.5}", rec.lr);
            self.record.epochs.push(rec);
            let done = epoch + 1;
            let halt = self.cfg.halt_after == Some(HaltPoint { stage, epoch: done });
            let periodic = self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0;
            if halt || periodic || done == epochs {
                self.checkpoint(stage, done, "latest.ckpt")?;
            }
            if halt {
                return Err(Error::Interrupted { stage, epoch: done });
            }
        }
        if epochs > 0 && start_epoch < epochs {
            self.checkpoint(stage, epochs, &format!("stage{stage}.ckpt"))?;
        }
        Ok(())
    }

    fn view_batch(&self, stage: u8, epoch: usize, sources: &[usize]) -> Result<Vec<Image>> {
        let mut views = Vec::with_capacity(2 * sources.len());
        for &src in sources {
            let mut rng = stream(self.cfg.seed, &[TAG_VIEWS, u64::from(stage), epoch as u64, src as u64]);
            let pair = self.augmenter.make_view_pair(&self.images[src], src, &mut rng)?;
            views.push(pair.view_a);
            views.push(pair.view_b);
        }
        Ok(views)
    }

    fn step(&mut self, stage: u8, epoch: usize, sources: &[usize], lr: f64) -> Result<f64> {
        let views = self.view_batch(stage, epoch, sources)?;
        let x = self.model.batch_tensor(&views.iter().collect::<Vec<_>>())?;
        let (_, z) = self.model.forward(&x, true)?;
        let loss = self.cfg.losses[stage_index(stage)?].loss(&BatchPairing::new(z)?)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let checkpoint = match &self.cfg.checkpoint_dir {
                Some(_) => Some(self.checkpoint(stage, epoch, &format!("diagnostic-stage{stage}-epoch{epoch}.ckpt"))?),
                None => None,
            };
            return Err(Error::NonFiniteLoss { stage, epoch, checkpoint });
        }
        let grads = loss.backward()?;
        let opt = &self.cfg.optimizer;
        let head_only = stage == 2 && self.cfg.stage2_head_only;
        for (name, var) in self.model.trainable_vars() {
            if head_only && !name.starts_with(OUTPUT_LAYER) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let mut d = g.detach();
            if opt.weight_decay != 0.0 {
                d = (d + (&p * opt.weight_decay)?)?;
            }
            if opt.momentum != 0.0 {
                d = match self.momentum.get(&name) {
                    Some(buf) => ((buf * opt.momentum)? + d)?,
                    None => d,
                };
                self.momentum.insert(name, d.clone());
            }
            var.set(&(p - (d * lr)?)?)?;
        }
        Ok(value)
    }

    fn checkpoint(&mut self, stage: u8, epochs_done: usize, file: &str) -> Result<PathBuf> {
        let Some(dir) = &self.cfg.checkpoint_dir else {
            return Ok(PathBuf::new());
        };
        let path = dir.join(file);
        let extra: Vec<(String, Tensor)> = self
            .momentum
            .iter()
            .map(|(n, t)| (format!("momentum.{n}"), t.clone()))
            .collect();
        if !self.record.checkpoints.contains(&path) {
            self.record.checkpoints.push(path.clone());
        }
        let meta = [
            ("epochs_done", epochs_done.to_string()),
            ("record", serde_json::to_string(&self.record)?),
        ];
        self.model
            .save_checkpoint(&path, &format!("stage{stage}"), &extra, &meta)?;
        Ok(path)
    }

    /// Runs from `(stage, epoch)` through the end of stage 3.
    fn continue_from(&mut self, stage: u8, epoch: usize) -> Result<()> {
        for s in stage..=3 {
            let start = if s == stage { epoch } else { 0 };
            if start == 0 {
                self.momentum.clear();
                if s == 2 && self.model.out_dim() != self.cfg.final_out_dim {
                    self.model
                        .swap_output_layer(self.cfg.final_out_dim, derive_seed(self.cfg.seed, &[TAG_SWAP]))?;
                }
            }
            self.run_stage(s, start)?;
        }
        Ok(())
    }
}

/// Trains `model` for every epoch of one stage with fresh optimizer state.
pub fn train_stage(
    model: &mut EncoderModel,
    images: &[Image],
    augmenter: &Augmenter,
    cfg: &TrainConfig,
    stage: u8,
) -> Result<TrainRunRecord> {
    cfg.validate()?;
    let mut session = Session {
        images,
        augmenter,
        cfg,
        model: model.clone(),
        momentum: BTreeMap::new(),
        record: TrainRunRecord::new(cfg.clone()),
    };
    let result = session.run_stage(stage, 0);
    *model = session.model;
    result.map(|_| session.record)
}

fn check_inputs(ds: &ImageDataset, aug_cfg: &AugmentationConfig, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    if cfg.final_out_dim != 2 {
        return Err(Error::Config("the final embedding needs final_out_dim = 2".into()));
    }
    if aug_cfg.crop.output_size != model_cfg.input_size {
        return Err(Error::Config(format!(
            "augmentation output size {} differs from model input size {}",
            aug_cfg.crop.output_size, model_cfg.input_size
        )));
    }
    if ds.is_empty() {
        return Err(invalid("empty dataset"));
    }
    Ok(())
}

/// Stage 1, output swap, stages 2 and 3, then the 2-D embedding of every
/// unaugmented image.
pub fn run_pipeline(
    ds: &ImageDataset,
    aug_cfg: &AugmentationConfig,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<PipelineOutput> {
    train_cfg.validate()?;
    check_inputs(ds, aug_cfg, model_cfg, train_cfg)?;
    let model_cfg = ModelConfig {
        out_dim: train_cfg.stage1_out_dim,
        ..model_cfg.clone()
    };
    let model = build_model(model_cfg, derive_seed(train_cfg.seed, &[TAG_INIT]))?;
    let images = ds.unit_images();
    let augmenter = Augmenter::for_dataset(aug_cfg.clone(), ds)?;
    let mut session = Session {
        images: &images,
        augmenter: &augmenter,
        cfg: train_cfg,
        model,
        momentum: BTreeMap::new(),
        record: TrainRunRecord::new(train_cfg.clone()),
    };
    session.continue_from(1, 0)?;
    finish(session, ds)
}

/// Continues an interrupted pipeline from a checkpoint written by
/// [`run_pipeline`] with the same dataset and configuration.
pub fn resume_pipeline(
    ds: &ImageDataset,
    aug_cfg: &AugmentationConfig,
    train_cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<PipelineOutput> {
    train_cfg.validate()?;
    let ck = EncoderModel::load_checkpoint(checkpoint)?;
    check_inputs(ds, aug_cfg, ck.model.config(), train_cfg)?;
    let stage: u8 = ck
        .stage
        .strip_prefix("stage")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("unknown stage tag {:?}", ck.stage)))?;
    let epochs_done: usize = ck
        .extra_meta
        .get("epochs_done")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks epochs_done".into()))?;
    let mut record: TrainRunRecord = serde_json::from_str(
        ck.extra_meta
            .get("record")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks run record".into()))?,
    )?;
    record.config = train_cfg.clone();
    let momentum = ck
        .extra
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("momentum.").map(|n| (n.to_string(), t)))
        .collect();
    let images = ds.unit_images();
    let augmenter = Augmenter::for_dataset(aug_cfg.clone(), ds)?;
    let mut session = Session {
        images: &images,
        augmenter: &augmenter,
        cfg: train_cfg,
        model: ck.model,
        momentum,
        record,
    };
    session.continue_from(stage, epochs_done)?;
    finish(session, ds)
}

fn finish(session: Session<'_>, ds: &ImageDataset) -> Result<PipelineOutput> {
    let cfg = session.cfg;
    let mut model = session.model;
    model.freeze_backbone(false);
    let (_, z) = model.embed(session.images, cfg.embed_batch_size)?;
    let coords = z.iter().map(|r| [r[0], r[1]]).collect();
    let embedding = EmbeddingResult::new(
        "tsimcne",
        ds.name.clone(),
        coords,
        ds.labels().to_vec(),
        ds.class_names().to_vec(),
    )?
    .with_provenance("seed", cfg.seed.to_string())
    .with_provenance("stage_epochs", format!("{:?}", cfg.stage_epochs))
    .with_provenance("batch_size", cfg.batch_size.to_string());
    Ok(PipelineOutput {
        model,
        embedding,
        record: session.record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneVariant;

    fn tiny_model(out_dim: usize) -> ModelConfig {
        ModelConfig {
            input_size: 8,
            width: 2,
            hidden_dim: 8,
            ..ModelConfig::new(BackboneVariant::SmallInput, out_dim)
        }
    }

    fn toy_images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let data = (0..8 * 8 * 3).map(|k| ((k * (i + 3)) % 17) as f32 / 16.0).collect();
                Image::new(8, 8, data).unwrap()
            })
            .collect()
    }

    fn fixed_loss(model: &EncoderModel, images: &[Image], loss: &LossConfig) -> f64 {
        let views: Vec<&Image> = images.iter().flat_map(|i| [i, i]).collect();
        let (_, z) = model.forward(&model.batch_tensor(&views).unwrap(), true).unwrap();
        loss.loss(&BatchPairing::new(z).unwrap()).unwrap().to_scalar::<f32>().unwrap() as f64
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = build_model(tiny_model(128), 0).unwrap();
        let before = model.params().deep_clone().unwrap();
        let cfg = TrainConfig {
            stage_epochs: [0, 0, 0],
            batch_size: 2,
            ..TrainConfig::default()
        };
        let aug = Augmenter::new(AugmentationConfig::disabled(8), [0.0; 3]).unwrap();
        let rec = train_stage(&mut model, &toy_images(4), &aug, &cfg, 1).unwrap();
        assert!(rec.epochs.is_empty());
        for (name, t) in before.tensors() {
            let now = model.params().get(&name).unwrap();
            assert_eq!(
                t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                now.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn one_small_step_descends() {
        let images = toy_images(4);
        let mut model = build_model(tiny_model(128), 1).unwrap();
        let cfg = TrainConfig {
            stage_epochs: [1, 0, 0],
            batch_size: 4,
            schedule: ScheduleConfig {
                base_lr: 1e-3,
                warmup_epochs: [0, 0, 0],
                ..ScheduleConfig::default()
            },
            ..TrainConfig::default()
        };
        let aug = Augmenter::new(AugmentationConfig::disabled(8), [0.0; 3]).unwrap();
        let before = fixed_loss(&model, &images, &cfg.losses[0]);
        let rec = train_stage(&mut model, &images, &aug, &cfg, 1).unwrap();
        let after = fixed_loss(&model, &images, &cfg.losses[0]);
        assert_eq!(rec.epochs.len(), 1);
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn stage_requires_matching_output_dim() {
        let mut model = build_model(tiny_model(128), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let aug = Augmenter::new(AugmentationConfig::disabled(8), [0.0; 3]).unwrap();
        assert!(train_stage(&mut model, &toy_images(4), &aug, &cfg, 2).is_err());
        assert!(train_stage(&mut model, &toy_images(4), &aug, &cfg, 4).is_err());
    }

    #[test]
    fn head_only_stage_updates_only_the_output_layer() {
        let images = toy_images(4);
        let mut model = build_model(tiny_model(2), 2).unwrap();
        let cfg = TrainConfig {
            stage_epochs: [0, 2, 0],
            batch_size: 2,
            ..TrainConfig::default()
        };
        let aug = Augmenter::new(AugmentationConfig::natural_images(8), [0.0; 3]).unwrap();
        let before = model.params().deep_clone().unwrap();
        train_stage(&mut model, &images, &aug, &cfg, 2).unwrap();
        for (name, t) in before.tensors() {
            let same = t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
                == model.params().get(&name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(same, !name.starts_with(OUTPUT_LAYER), "{name}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let images = toy_images(4);
        let mut model = build_model(tiny_model(128), 0).unwrap();
        let cfg = TrainConfig {
            stage_epochs: [3, 0, 0],
            batch_size: 2,
            schedule: ScheduleConfig {
                base_lr: 1e30,
                warmup_epochs: [0, 0, 0],
                ..ScheduleConfig::default()
            },
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let aug = Augmenter::new(AugmentationConfig::disabled(8), [0.0; 3]).unwrap();
        match train_stage(&mut model, &images, &aug, &cfg, 1) {
            Err(Error::NonFiniteLoss { stage: 1, checkpoint: Some(path), .. }) => assert!(path.exists()),
            other => panic!("expected non-finite loss, got {:?}", other.map(|r| r.epochs.len())),
        }
    }
}
