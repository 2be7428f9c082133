//! Experiment harness: runs methods over augmentation sets and seeds,
//! evaluates every embedding, and aggregates the results into tables.

mod config;
mod figures;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{BaselineSection, DatasetSection, ExperimentConfig, Method, ModelSection, PretrainedSection, SyntheticSection};
pub use figures::{
    grid_selection, grid_thumbnail_figure, grid_thumbnail_image, scatter_figure, scatter_svg, FigureKind, FigureSpec,
    GridCell,
};

use crate::augment::{AugmentationConfig, AugmentationSet};
use crate::baselines::{pca_reduce, pixel_features, pretrained_features, train_simclr, tsne_embed};
use crate::data::ImageDataset;
use crate::embedding::EmbeddingResult;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::objective::LossConfig;
use crate::training::{run_pipeline, TrainRunRecord};

/// One evaluated embedding, as written next to it on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub method: Method,
    /// Augmentation set name, or `none` for untrained methods.
    pub augmentation: String,
    /// Ablation variant, `all` outside ablations.
    pub variant: String,
    pub repeat: usize,
    pub seed: u64,
    pub config_hash: String,
    pub embedding_file: PathBuf,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub method: Method,
    pub augmentation: String,
    pub variant: String,
    pub repeats: usize,
    pub knn_mean: f64,
    /// Population standard deviation; absent for a single run.
    pub knn_std: Option<f64>,
    pub silhouette_mean: f64,
    pub silhouette_std: Option<f64>,
    pub config_hash: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, Some(var.sqrt()))
}

impl ResultTable {
    /// Groups runs by dataset, method, augmentation, variant and config
    /// hash, keeping first-seen order.
    pub fn aggregate(runs: &[RunSummary]) -> Self {
        let mut order: Vec<(String, Method, String, String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, Method, String, String, String), Vec<&RunSummary>> = BTreeMap::new();
        for r in runs {
            let key = (r.dataset.clone(), r.method, r.augmentation.clone(), r.variant.clone(), r.config_hash.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let rows = order
            .into_iter()
            .map(|key| {
                let members = &groups[&key];
                let knn: Vec<f64> = members.iter().map(|r| r.eval.knn_accuracy).collect();
                let sil: Vec<f64> = members.iter().map(|r| r.eval.silhouette).collect();
                let (knn_mean, knn_std) = mean_std(&knn);
                let (silhouette_mean, silhouette_std) = mean_std(&sil);
                TableRow {
                    dataset: key.0,
                    method: key.1,
                    augmentation: key.2,
                    variant: key.3,
                    repeats: members.len(),
                    knn_mean,
                    knn_std,
                    silhouette_mean,
                    silhouette_std,
                    config_hash: key.4,
                    note: String::new(),
                }
            })
            .collect();
        Self { rows }
    }

    /// Tab-separated text with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "dataset\tmethod\taugmentation\tvariant\trepeats\tknn_mean\tknn_std\tsilhouette_mean\tsilhouette_std\tconfig_hash\tnote\n",
        );
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"));
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.2}\t{}\t{:.4}\t{}\t{}\t{}",
                r.dataset,
                r.method.name(),
                r.augmentation,
                r.variant,
                r.repeats,
                r.knn_mean,
                opt(r.knn_std, 2),
                r.silhouette_mean,
                opt(r.silhouette_std, 4),
                r.config_hash,
                r.note
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_tsv())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    pub config_hash: String,
    pub embeddings: Vec<EmbeddingResult>,
    pub runs: Vec<RunSummary>,
    pub records: Vec<TrainRunRecord>,
    pub table: ResultTable,
}

/// Computes one embedding with `method`; trained methods use `aug`.
pub fn run_method(
    cfg: &ExperimentConfig,
    ds: &ImageDataset,
    method: Method,
    aug: Option<&AugmentationConfig>,
    seed: u64,
    work_dir: Option<&Path>,
) -> Result<(EmbeddingResult, Option<TrainRunRecord>)> {
    let need_aug = || {
        aug.cloned()
            .ok_or_else(|| Error::Config(format!("{} needs an augmentation config", method.name())))
    };
    let mut tsne = cfg.baselines.tsne;
    tsne.seed = seed;
    match method {
        Method::Tsimcne => {
            let mut train = cfg.train.clone();
            train.seed = seed;
            if train.checkpoint_dir.is_none() {
                train.checkpoint_dir = work_dir.map(Path::to_path_buf);
            }
            let model_cfg = cfg.model.model_config(ds, train.stage1_out_dim);
            let out = run_pipeline(ds, &need_aug()?, &train, &model_cfg)?;
            Ok((out.embedding, Some(out.record)))
        }
        Method::SimclrTsne => {
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.stage_epochs = [cfg.baselines.simclr_epochs, 0, 0];
            train.losses = [LossConfig::cosine(cfg.baselines.simclr_temperature); 3];
            train.checkpoint_dir = None;
            let model_cfg = cfg.model.model_config(ds, train.stage1_out_dim);
            let (h, record) = train_simclr(ds, &need_aug()?, &train, &model_cfg)?;
            Ok((tsne_embed(&h, method.name(), &tsne)?, Some(record)))
        }
        Method::TsnePixels => {
            let mut x = pixel_features(ds)?;
            if let Some(k) = cfg.baselines.pixel_pca_components {
                x = pca_reduce(&x, k)?;
            }
            Ok((tsne_embed(&x, method.name(), &tsne)?, None))
        }
        Method::TsnePretrained => {
            let p = &cfg.baselines.pretrained;
            let weights = p
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("tsne_pretrained needs baselines.pretrained.weights".into()))?;
            let x = pretrained_features(ds, weights, p.variant, p.batch_size)?;
            Ok((tsne_embed(&x, method.name(), &tsne)?, None))
        }
    }
}

struct Harness<'a> {
    cfg: &'a ExperimentConfig,
    ds: ImageDataset,
    hash: String,
    embeddings: Vec<EmbeddingResult>,
    runs: Vec<RunSummary>,
    records: Vec<TrainRunRecord>,
}

impl<'a> Harness<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        write_file(&cfg.out_dir.join("resolved_config.toml"), &cfg.resolved_toml()?)?;
        let ds = cfg.dataset.load(Path::new(""))?;
        Ok(Self {
            cfg,
            ds,
            hash: cfg.hash()?,
            embeddings: Vec::new(),
            runs: Vec::new(),
            records: Vec::new(),
        })
    }

    fn run(
        &mut self,
        method: Method,
        augmentation: &str,
        variant: &str,
        aug: Option<&AugmentationConfig>,
        repeat: usize,
    ) -> Result<()> {
        let seed = self.cfg.seed + repeat as u64;
        let dir = self
            .cfg
            .out_dir
            .join("runs")
            .join(format!("{}-{augmentation}-{variant}-r{repeat}", method.name()));
        log::info!("running {}", dir.display());
        let (emb, record) = run_method(self.cfg, &self.ds, method, aug, seed, Some(&dir))?;
        let emb = emb
            .with_provenance("augmentation", augmentation)
            .with_provenance("variant", variant)
            .with_provenance("config_hash", self.hash.clone());
        let eval = evaluate(&emb.points(), &emb.labels, &self.cfg.eval)?;
        let embedding_file = dir.join("embedding.tsv");
        emb.save(&embedding_file)?;
        if let Some(rec) = &record {
            rec.save_jsonl(&dir.join("record.jsonl"))?;
        }
        scatter_figure(&emb, &self.cfg.figure, Some(&eval), &dir.join("scatter.svg"))?;
        let summary = RunSummary {
            dataset: self.ds.name.clone(),
            method,
            augmentation: augmentation.to_string(),
            variant: variant.to_string(),
            repeat,
            seed,
            config_hash: self.hash.clone(),
            embedding_file,
            eval,
        };
        write_file(&dir.join("summary.toml"), &toml::to_string(&summary)?)?;
        self.runs.push(summary);
        self.embeddings.push(emb);
        self.records.extend(record);
        Ok(())
    }

    fn finish(self, table_name: &str, table: ResultTable) -> Result<ExperimentBundle> {
        table.save(&self.cfg.out_dir.join(table_name))?;
        Ok(ExperimentBundle {
            config_hash: self.hash,
            embeddings: self.embeddings,
            runs: self.runs,
            records: self.records,
            table,
        })
    }
}

fn augmentation_name(set: AugmentationSet) -> &'static str {
    match set {
        AugmentationSet::Default => "default",
        AugmentationSet::PlusRot90 => "plus_rot90",
        AugmentationSet::PlusRotAny => "plus_rot_any",
    }
}

/// Runs every method (crossed with every augmentation set for trained
/// methods) `repeats` times with seeds `seed, seed + 1, ...`. Each run's
/// embedding, evaluation, scatter plot and training record are written as
/// soon as it finishes, so completed runs survive a later failure.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentBundle> {
    let mut h = Harness::new(cfg)?;
    let side = h.ds.side();
    let mut outcome = Ok(());
    'outer: for &method in &cfg.methods {
        let sets: Vec<Option<AugmentationSet>> = if method.uses_augmentation() {
            cfg.augmentations.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for set in sets {
            let aug = set.map(|s| s.config(side));
            let name = set.map_or("none", augmentation_name);
            for r in 0..cfg.repeats {
                if let Err(e) = h.run(method, name, "all", aug.as_ref(), r) {
                    outcome = Err(e);
                    break 'outer;
                }
            }
        }
    }
    let table = ResultTable::aggregate(&h.runs);
    if let Err(e) = outcome {
        table.save(&cfg.out_dir.join("results.partial.tsv"))?;
        return Err(e);
    }
    h.finish("results.tsv", table)
}

/// The augmentation variants of the ablation study: the default set plus
/// arbitrary rotations, then with crops, colour jitter or grayscale removed.
pub fn ablation_variants(size: usize) -> Vec<(&'static str, AugmentationConfig)> {
    let all = AugmentationSet::PlusRotAny.config(size);
    let mut no_crops = all.clone();
    no_crops.crop.enabled = false;
    let mut no_jitter = all.clone();
    no_jitter.jitter.enabled = false;
    let mut no_grayscale = all.clone();
    no_grayscale.grayscale.enabled = false;
    vec![
        ("all", all),
        ("no_crops", no_crops),
        ("no_jitter", no_jitter),
        ("no_grayscale", no_grayscale),
    ]
}

/// t-SimCNE under each ablation variant. Variants whose mean kNN accuracy
/// exceeds that of `all` by more than the larger spread are flagged in the
/// `note` column; nothing is asserted.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<ExperimentBundle> {
    let mut h = Harness::new(cfg)?;
    for (variant, aug) in ablation_variants(h.ds.side()) {
        for r in 0..cfg.repeats {
            h.run(Method::Tsimcne, "plus_rot_any", variant, Some(&aug), r)?;
        }
    }
    let mut table = ResultTable::aggregate(&h.runs);
    if let Some(all) = table.rows.iter().find(|r| r.variant == "all").cloned() {
        for row in table.rows.iter_mut().filter(|r| r.variant != "all") {
            let noise = all.knn_std.unwrap_or(0.0).max(row.knn_std.unwrap_or(0.0));
            if row.knn_mean > all.knn_mean + noise {
                row.note = "exceeds all".into();
            }
        }
    }
    h.finish("ablation.tsv", table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub dataset: String,
    pub repeats: usize,
    pub default_knn: f64,
    pub rotations_knn: f64,
    /// `rotations_knn - default_knn`.
    pub delta: f64,
    pub config_hash: String,
}

/// t-SimCNE with the default augmentations against the default set plus
/// 90-degree rotations and vertical flips.
pub fn control_experiment(cfg: &ExperimentConfig) -> Result<ControlReport> {
    let mut h = Harness::new(cfg)?;
    let side = h.ds.side();
    for set in [AugmentationSet::Default, AugmentationSet::PlusRot90] {
        for r in 0..cfg.repeats {
            h.run(Method::Tsimcne, augmentation_name(set), "all", Some(&set.config(side)), r)?;
        }
    }
    let table = ResultTable::aggregate(&h.runs);
    let knn = |aug: &str| {
        table
            .rows
            .iter()
            .find(|r| r.augmentation == aug)
            .map(|r| r.knn_mean)
            .expect("both arms ran")
    };
    let report = ControlReport {
        dataset: h.ds.name.clone(),
        repeats: cfg.repeats,
        default_knn: knn("default"),
        rotations_knn: knn("plus_rot90"),
        delta: knn("plus_rot90") - knn("default"),
        config_hash: h.hash.clone(),
    };
    write_file(&cfg.out_dir.join("control.toml"), &toml::to_string(&report)?)?;
    h.finish("control.tsv", table)?;
    Ok(report)
}

/// Rebuilds the table from the `summary.toml` files below `dir`.
pub fn aggregate_results(dir: &Path) -> Result<ResultTable> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.toml") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut runs = Vec::with_capacity(files.len());
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        runs.push(toml::from_str::<RunSummary>(&text)?);
    }
    Ok(ResultTable::aggregate(&runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: Method, aug: &str, knn: f64, sil: f64) -> RunSummary {
        RunSummary {
            dataset: "d".into(),
            method,
            augmentation: aug.into(),
            variant: "all".into(),
            repeat: 0,
            seed: 0,
            config_hash: "h".into(),
            embedding_file: PathBuf::new(),
            eval: EvalReport {
                knn_accuracy: knn,
                silhouette: sil,
                k: 15,
                split_seed: 0,
                n_points: 10,
                n_classes: 2,
            },
        }
    }

    #[test]
    fn aggregation_uses_population_std() {
        let runs = vec![
            summary(Method::Tsimcne, "default", 90.0, 0.1),
            summary(Method::Tsimcne, "default", 92.0, 0.3),
            summary(Method::Tsimcne, "default", 94.0, 0.2),
            summary(Method::TsnePixels, "none", 70.0, 0.0),
        ];
        let t = ResultTable::aggregate(&runs);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].repeats, 3);
        assert!((t.rows[0].knn_mean - 92.0).abs() < 1e-12);
        assert!((t.rows[0].knn_std.unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(t.rows[1].knn_std, None);
        let tsv = t.to_tsv();
        assert!(tsv.lines().nth(2).unwrap().contains("\t-\t"));
        assert!(tsv.lines().skip(1).all(|l| l.contains("\th\t")));
    }

    #[test]
    fn ablation_variants_differ_in_one_switch() {
        let v = ablation_variants(28);
        assert_eq!(v.len(), 4);
        let all = &v[0].1;
        assert!(all.rot_any.enabled);
        let mut no_crops = v[1].1.clone();
        assert!(!no_crops.crop.enabled);
        no_crops.crop.enabled = true;
        assert_eq!(&no_crops, all);
        assert!(!v[2].1.jitter.enabled && !v[3].1.grayscale.enabled);
    }
}
