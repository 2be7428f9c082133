use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tsimcne::augment::AugmentationSet;
use tsimcne::baselines::{pca_reduce, pixel_features, pretrained_features, train_simclr, tsne_embed};
use tsimcne::data::{load_dataset, save_archive, DatasetFormat, ImageDataset};
use tsimcne::embedding::EmbeddingResult;
use tsimcne::evaluation::{evaluate, EvalReport};
use tsimcne::network::EncoderModel;
use tsimcne::objective::LossConfig;
use tsimcne::report::{
    ablation_suite, aggregate_results, control_experiment, grid_thumbnail_figure, run_experiment, scatter_figure,
    ExperimentConfig, FigureKind, Method,
};
use tsimcne::training::{resume_pipeline, run_pipeline};

#[derive(Parser)]
#[command(name = "tsimcne", version, about = "2-D contrastive embeddings of image datasets")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the number of repeats.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Single-threaded numerics for bit-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArg {
    /// Tensor archive to use instead of the config's dataset section.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Scatter,
    Annotated,
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Load and preprocess the configured dataset and write a tensor archive.
    Ingest {
        /// Defaults to `<out>/dataset.safetensors`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train t-SimCNE and write the 2-D embedding, run record and checkpoints.
    Train {
        #[command(flatten)]
        data: DatasetArg,
        /// Augmentation set; defaults to the first one in the config.
        #[arg(long)]
        augmentation: Option<AugmentationSet>,
        /// Continue from a checkpoint of an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed a dataset with a trained 2-D checkpoint.
    Embed {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compute a baseline embedding.
    Baseline {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        augmentation: Option<AugmentationSet>,
    },
    /// Score an embedding with kNN accuracy and the silhouette.
    Eval {
        #[arg(long)]
        embedding: PathBuf,
    },
    /// Draw an embedding.
    Figure {
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, value_enum, default_value = "scatter")]
        kind: FigureArg,
        /// Evaluation report to print on scatter plots.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[command(flatten)]
        data: DatasetArg,
        /// Defaults to `<out>/scatter.svg` or `<out>/grid.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the augmentation ablation, or the rotation control experiment.
    Ablate {
        #[arg(long)]
        control: bool,
    },
    /// Run the configured experiment, or rebuild the table from a results directory.
    Report {
        #[arg(long)]
        aggregate: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, arg: &DatasetArg) -> Result<ImageDataset> {
    Ok(match &arg.dataset {
        Some(path) => load_dataset(path, DatasetFormat::TensorArchive)?,
        None => cfg.dataset.load(Path::new(""))?,
    })
}

fn out_file(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.join(name))
}

fn augmentation(cfg: &ExperimentConfig, chosen: Option<AugmentationSet>) -> AugmentationSet {
    chosen.or_else(|| cfg.augmentations.first().copied()).unwrap_or(AugmentationSet::Default)
}

fn save_embedding(cfg: &ExperimentConfig, emb: &EmbeddingResult) -> Result<()> {
    let path = out_file(cfg, "embedding.tsv")?;
    emb.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest { output } => {
            let ds = cfg.dataset.load(Path::new(""))?;
            let path = match output {
                Some(p) => p.clone(),
                None => out_file(&cfg, "dataset.safetensors")?,
            };
            save_archive(&ds, &path)?;
            println!("{}: {} images of {}x{} px", ds.name, ds.len(), ds.side(), ds.side());
            for (name, count) in ds.class_names().iter().zip(ds.class_counts()) {
                println!("  {name}\t{count}");
            }
            println!("wrote {}", path.display());
        }
        Command::Train {
            data,
            augmentation: chosen,
            resume,
        } => {
            let ds = dataset(&cfg, data)?;
            let aug = augmentation(&cfg, *chosen).config(ds.side());
            let mut train = cfg.train.clone();
            train.seed = cfg.seed;
            if train.checkpoint_dir.is_none() {
                train.checkpoint_dir = Some(cfg.out_dir.join("checkpoints"));
            }
            let out = match resume {
                Some(ckpt) => resume_pipeline(&ds, &aug, &train, ckpt)?,
                None => run_pipeline(&ds, &aug, &train, &cfg.model.model_config(&ds, train.stage1_out_dim))?,
            };
            out.record.save_jsonl(&out_file(&cfg, "record.jsonl")?)?;
            save_embedding(&cfg, &out.embedding)?;
        }
        Command::Embed { data, checkpoint } => {
            let ds = dataset(&cfg, data)?;
            let ck = EncoderModel::load_checkpoint(checkpoint)?;
            if ck.model.out_dim() != 2 {
                bail!("{} has {}-D outputs; embedding needs a 2-D model", checkpoint.display(), ck.model.out_dim());
            }
            let (_, z) = ck.model.embed(&ds.unit_images(), cfg.train.embed_batch_size)?;
            let coords = z.iter().map(|r| [r[0], r[1]]).collect();
            let emb = EmbeddingResult::new("tsimcne", ds.name.clone(), coords, ds.labels().to_vec(), ds.class_names().to_vec())?
                .with_provenance("checkpoint", checkpoint.display().to_string());
            save_embedding(&cfg, &emb)?;
        }
        Command::Baseline {
            data,
            method,
            augmentation: chosen,
        } => {
            let ds = dataset(&cfg, data)?;
            let mut tsne = cfg.baselines.tsne;
            tsne.seed = cfg.seed;
            let features = match method {
                Method::Tsimcne => bail!("tsimcne is not a baseline; use `train`"),
                Method::TsnePixels => {
                    let x = pixel_features(&ds)?;
                    match cfg.baselines.pixel_pca_components {
                        Some(k) => pca_reduce(&x, k)?,
                        None => x,
                    }
                }
                Method::TsnePretrained => {
                    let p = &cfg.baselines.pretrained;
                    let weights = p.weights.as_ref().context("baselines.pretrained.weights is not set")?;
                    pretrained_features(&ds, weights, p.variant, p.batch_size)?
                }
                Method::SimclrTsne => {
                    let mut train = cfg.train.clone();
                    train.seed = cfg.seed;
                    train.stage_epochs = [cfg.baselines.simclr_epochs, 0, 0];
                    train.losses = [LossConfig::cosine(cfg.baselines.simclr_temperature); 3];
                    train.checkpoint_dir = None;
                    let aug = augmentation(&cfg, *chosen).config(ds.side());
                    let model = cfg.model.model_config(&ds, train.stage1_out_dim);
                    let (h, record) = train_simclr(&ds, &aug, &train, &model)?;
                    record.save_jsonl(&out_file(&cfg, "record.jsonl")?)?;
                    h
                }
            };
            features.save(&out_file(&cfg, "features.safetensors")?)?;
            save_embedding(&cfg, &tsne_embed(&features, method.name(), &tsne)?)?;
        }
        Command::Eval { embedding } => {
            let emb = EmbeddingResult::load(embedding)?;
            let report = evaluate(&emb.points(), &emb.labels, &cfg.eval)?;
            let text = report.to_toml()?;
            let path = out_file(&cfg, "eval.toml")?;
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            print!("{text}");
        }
        Command::Figure {
            embedding,
            kind,
            eval,
            data,
            output,
        } => {
            let emb = EmbeddingResult::load(embedding)?;
            let mut spec = cfg.figure.clone();
            let path = match kind {
                FigureArg::Grid => {
                    spec.kind = FigureKind::GridThumbnails;
                    let ds = dataset(&cfg, data)?;
                    let path = output.clone().map_or_else(|| out_file(&cfg, "grid.png"), Ok)?;
                    let cells = grid_thumbnail_figure(&emb, &ds, &spec, &path)?;
                    println!("{} thumbnails", cells.len());
                    path
                }
                FigureArg::Scatter | FigureArg::Annotated => {
                    if matches!(kind, FigureArg::Annotated) {
                        spec.kind = FigureKind::Annotated;
                    }
                    let report = match eval {
                        Some(p) => Some(EvalReport::from_toml(
                            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                        )?),
                        None => None,
                    };
                    let path = output.clone().map_or_else(|| out_file(&cfg, "scatter.svg"), Ok)?;
                    scatter_figure(&emb, &spec, report.as_ref(), &path)?;
                    path
                }
            };
            println!("wrote {}", path.display());
        }
        Command::Ablate { control } => {
            if *control {
                let r = control_experiment(&cfg)?;
                println!(
                    "default {:.2}%  with rotations {:.2}%  delta {:+.2}",
                    r.default_knn, r.rotations_knn, r.delta
                );
            } else {
                print!("{}", ablation_suite(&cfg)?.table.to_tsv());
            }
        }
        Command::Report { aggregate } => {
            let table = match aggregate {
                Some(dir) => {
                    let table = aggregate_results(dir)?;
                    table.save(&out_file(&cfg, "results.tsv")?)?;
                    table
                }
                None => run_experiment(&cfg)?.table,
            };
            print!("{}", table.to_tsv());
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
