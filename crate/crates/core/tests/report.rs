use std::fs;

use tsimcne::augment::AugmentationSet;
use tsimcne::baselines::TsneSettings;
use tsimcne::data::synthetic::colored_blobs;
use tsimcne::embedding::EmbeddingResult;
use tsimcne::report::{
    ablation_variants, aggregate_results, grid_selection, grid_thumbnail_figure, grid_thumbnail_image, run_experiment,
    scatter_svg, DatasetSection, ExperimentConfig, FigureSpec, Method, SyntheticSection,
};

fn pixel_config(out: &std::path::Path, repeats: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "toy".into(),
        repeats,
        out_dir: out.to_path_buf(),
        methods: vec![Method::TsnePixels],
        dataset: DatasetSection {
            synthetic: Some(SyntheticSection {
                n_per_class: 20,
                side: 8,
                seed: 0,
            }),
            ..DatasetSection::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.baselines.tsne = TsneSettings {
        perplexity: 10.0,
        n_iter: 300,
        ..TsneSettings::default()
    };
    cfg
}

#[test]
fn a_single_pixel_run_writes_one_embedding_and_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pixel_config(dir.path(), 1);
    let bundle = run_experiment(&cfg).unwrap();
    assert_eq!(bundle.embeddings.len(), 1);
    assert_eq!(bundle.runs.len(), 1);
    assert!(bundle.records.is_empty());
    let row = &bundle.table.rows[0];
    assert_eq!((row.method, row.augmentation.as_str(), row.repeats), (Method::TsnePixels, "none", 1));
    assert_eq!(row.knn_std, None);
    assert_eq!(row.silhouette_std, None);

    let run_dir = dir.path().join("runs/tsne_pixels-none-all-r0");
    for f in ["embedding.tsv", "scatter.svg", "summary.toml"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let saved = EmbeddingResult::load(&run_dir.join("embedding.tsv")).unwrap();
    assert_eq!(saved, bundle.embeddings[0]);
    assert_eq!(saved.provenance.get("config_hash"), Some(&bundle.config_hash));

    let tsv = fs::read_to_string(dir.path().join("results.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    assert!(tsv.lines().nth(1).unwrap().contains("\t-\t"));
    let resolved = fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&resolved).unwrap(), cfg);

    assert_eq!(aggregate_results(dir.path()).unwrap(), bundle.table);
}

#[test]
fn repeats_use_consecutive_seeds_and_report_spread() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = run_experiment(&pixel_config(dir.path(), 2)).unwrap();
    let seeds: Vec<u64> = bundle.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [0, 1]);
    let row = &bundle.table.rows[0];
    assert_eq!(row.repeats, 2);
    let knn: Vec<f64> = bundle.runs.iter().map(|r| r.eval.knn_accuracy).collect();
    let mean = (knn[0] + knn[1]) / 2.0;
    assert!((row.knn_mean - mean).abs() < 1e-12);
    assert!((row.knn_std.unwrap() - (knn[0] - knn[1]).abs() / 2.0).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pixel_config(dir.path(), 1);
    cfg.repeats = 0;
    assert!(run_experiment(&cfg).is_err());
    assert!(ExperimentConfig::from_toml("methods = [\"tsne_pretrained\"]").is_err());
    assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
}

fn ring_embedding() -> EmbeddingResult {
    let n = 300;
    let coords = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            [a.cos() * (1.0 + (i % 3) as f64), a.sin() * (1.0 + (i % 3) as f64)]
        })
        .collect();
    let labels = (0..n).map(|i| i % 3).collect();
    EmbeddingResult::new("tsimcne", "blobs", coords, labels, vec!["disk".into(), "ring".into(), "OTH".into()]).unwrap()
}

#[test]
fn scatter_plots_are_deterministic_and_label_every_class() {
    let emb = ring_embedding();
    let spec = FigureSpec::default();
    let a = scatter_svg(&emb, &spec, None).unwrap();
    assert_eq!(a, scatter_svg(&emb, &spec, None).unwrap());
    assert_eq!(a.matches("class=\"legend-entry\"").count(), 3);
    assert_eq!(a.matches("<circle").count() - 3, 300);
    assert!(a.contains("#000000"));
}

#[test]
fn grid_thumbnails_show_dense_cells_only() {
    let ds = colored_blobs(100, 8, 1).unwrap();
    let coords = (0..ds.len()).map(|i| [[0.0, 11.0, 20.0][i % 3] + (i % 7) as f64 * 0.01, (i / 3 % 2) as f64]).collect();
    let emb = EmbeddingResult::new("tsimcne", ds.name.clone(), coords, ds.labels().to_vec(), ds.class_names().to_vec()).unwrap();
    let spec = FigureSpec {
        grid_size: 4,
        min_cell_count: 40,
        ..FigureSpec::default()
    };
    let cells = grid_selection(&emb, &spec).unwrap();
    assert!(!cells.is_empty());
    assert!(cells.iter().all(|c| c.count >= 40 && c.row < 4 && c.col < 4));
    assert_eq!(cells.iter().map(|c| c.count).sum::<usize>(), ds.len());
    let (img, again) = grid_thumbnail_image(&emb, &ds, &spec).unwrap();
    assert_eq!(again, cells);
    assert_eq!((img.width(), img.height()), (4 * 48, 4 * 48));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    grid_thumbnail_figure(&emb, &ds, &spec, &path).unwrap();
    assert!(fs::metadata(&path).unwrap().len() > 0);
}

#[test]
fn ablation_variants_drop_one_augmentation_each() {
    let variants = ablation_variants(28);
    let all = AugmentationSet::PlusRotAny.config(28);
    assert_eq!(variants[0].1, all);
    let names: Vec<&str> = variants.iter().map(|v| v.0).collect();
    assert_eq!(names.len(), 4);
    for (_, cfg) in &variants[1..] {
        assert_ne!(cfg, &all);
        assert!(cfg.rot_any.enabled);
    }
}

#[test]
fn sparse_cells_stay_empty_and_a_single_cell_holds_everything() {
    let coords: Vec<[f64; 2]> = (0..99).map(|i| [(i % 10) as f64, (i / 10) as f64]).collect();
    let emb = EmbeddingResult::new("tsimcne", "d", coords, vec![0; 99], vec!["a".into()]).unwrap();
    let one_cell = FigureSpec {
        grid_size: 1,
        ..FigureSpec::default()
    };
    assert!(grid_selection(&emb, &one_cell).unwrap().is_empty());
    let lower = FigureSpec {
        min_cell_count: 99,
        ..one_cell
    };
    let cells = grid_selection(&emb, &lower).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].count, 99);
}
