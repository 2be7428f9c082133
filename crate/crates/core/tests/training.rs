use tsimcne::augment::{AugmentationConfig, AugmentationSet};
use tsimcne::data::synthetic::colored_blobs;
use tsimcne::data::ImageDataset;
use tsimcne::network::{channel_stats, BackboneVariant, EncoderModel, ModelConfig};
use tsimcne::training::{resume_pipeline, run_pipeline, HaltPoint, ScheduleConfig, TrainConfig, TrainRunRecord};
use tsimcne::Error;

fn tiny_model(ds: &ImageDataset, width: usize, hidden: usize) -> ModelConfig {
    let (mean, std) = channel_stats(&ds.unit_images());
    ModelConfig {
        input_size: ds.side(),
        width,
        hidden_dim: hidden,
        input_mean: mean,
        input_std: std,
        ..ModelConfig::new(BackboneVariant::SmallInput, 128)
    }
}

fn aug(ds: &ImageDataset) -> AugmentationConfig {
    AugmentationSet::Default.config(ds.side())
}

#[test]
fn full_schedule_records_every_epoch() {
    let ds = colored_blobs(2, 8, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 6,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = run_pipeline(&ds, &aug(&ds), &cfg, &tiny_model(&ds, 1, 8)).unwrap();
    let rec = &out.record;
    assert_eq!(rec.epochs.len(), 1500);
    assert_eq!(rec.stage_boundaries(), [0, 1000, 1050]);
    for (stage, n) in [(1u8, 1000usize), (2, 50), (3, 450)] {
        let epochs: Vec<usize> = rec.epochs.iter().filter(|e| e.stage == stage).map(|e| e.epoch).collect();
        assert_eq!(epochs, (0..n).collect::<Vec<_>>());
    }
    assert!(rec.epochs.iter().all(|e| e.loss.is_finite() && e.lr >= 0.0));
    assert!(rec.epochs.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    // warmup in stage 1 only
    let peak = cfg.schedule.peak_lr(0, cfg.batch_size);
    assert!((rec.epochs[0].lr - peak / 10.0).abs() < 1e-12);
    assert!(rec.epochs[..10].windows(2).all(|w| w[0].lr < w[1].lr));
    assert!((rec.epochs[9].lr - peak).abs() < 1e-12);
    assert!(rec.epochs[10].lr > rec.epochs[999].lr);
    assert!(rec.epochs[1000].lr > rec.epochs[1049].lr);
    assert_eq!(out.embedding.len(), 6);
    assert!(out.embedding.is_finite());
    assert_eq!(out.model.out_dim(), 2);

    let parsed = TrainRunRecord::read_jsonl(&rec.to_jsonl().unwrap()).unwrap();
    assert_eq!(parsed, rec.epochs);
}

fn small_setup() -> (ImageDataset, ModelConfig, TrainConfig) {
    let ds = colored_blobs(4, 12, 3).unwrap();
    let model = tiny_model(&ds, 2, 16);
    let cfg = TrainConfig {
        stage_epochs: [2, 1, 2],
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    (ds, model, cfg)
}

#[test]
fn stage_checkpoints_resume_to_the_same_result() {
    let (ds, model, base) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..base
    };
    let full = run_pipeline(&ds, &aug(&ds), &cfg, &model).unwrap();
    for name in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "latest.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    for stage in [1, 2] {
        let out = resume_pipeline(&ds, &aug(&ds), &cfg, &dir.path().join(format!("stage{stage}.ckpt"))).unwrap();
        assert_eq!(out.embedding.to_text(), full.embedding.to_text(), "resume from stage {stage}");
        let losses = |r: &TrainRunRecord| r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
        assert_eq!(losses(&out.record), losses(&full.record));
    }
    let ck = EncoderModel::load_checkpoint(&dir.path().join("stage3.ckpt")).unwrap();
    assert_eq!(ck.model.out_dim(), 2);
}

#[test]
fn interrupted_runs_report_where_they_stopped() {
    let (ds, model, base) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        halt_after: Some(HaltPoint { stage: 2, epoch: 1 }),
        ..base
    };
    match run_pipeline(&ds, &aug(&ds), &cfg, &model) {
        Err(Error::Interrupted { .. }) => {}
        other => panic!("expected an interruption, got {:?}", other.map(|o| o.record.epochs.len())),
    }
    let ck = EncoderModel::load_checkpoint(&dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(ck.stage, "stage2");
    assert_eq!(ck.extra_meta.get("epochs_done").map(String::as_str), Some("1"));
}

#[test]
fn stage_one_loss_trends_down() {
    let ds = colored_blobs(12, 16, 4).unwrap();
    let cfg = TrainConfig {
        stage_epochs: [60, 0, 0],
        batch_size: 18,
        seed: 2,
        schedule: ScheduleConfig {
            base_lr: 0.5,
            warmup_epochs: [5, 0, 0],
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = run_pipeline(&ds, &aug(&ds), &cfg, &tiny_model(&ds, 4, 32)).unwrap();
    let losses = out.record.stage_losses(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..10]), mean(&losses[50..]));
    assert!(last < first, "moving average went from {first} to {last}");
}

#[test]
fn mismatched_inputs_are_rejected_before_training() {
    let (ds, model, cfg) = small_setup();
    let wrong_size = AugmentationSet::Default.config(16);
    assert!(matches!(run_pipeline(&ds, &wrong_size, &cfg, &model), Err(Error::Config(_))));
    let three_d = TrainConfig {
        final_out_dim: 3,
        ..cfg
    };
    assert!(matches!(run_pipeline(&ds, &aug(&ds), &three_d, &model), Err(Error::Config(_))));
}
