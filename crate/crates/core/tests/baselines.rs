use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tsimcne::baselines::{
    load_pretrained, pca_fit, pca_reduce, pixel_features, pretrained_features, tsne_coords, tsne_embed, FeatureMatrix,
    FeatureProvenance, PretrainedVariant, Repulsion, TsneSettings,
};
use tsimcne::data::synthetic::colored_blobs;
use tsimcne::data::{ImageDataset, SplitSpec};
use tsimcne::evaluation::knn_accuracy;
use tsimcne::network::tensorfile::save_tensors;
use tsimcne::network::ParamStore;

fn correlated_data(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mix: Vec<f64> = (0..cols * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let latent: Vec<f64> = (0..cols).map(|k| normal.sample(rng) * (cols - k) as f64).collect();
        for j in 0..cols {
            out.push(3.0 + (0..cols).map(|k| latent[k] * mix[k * cols + j]).sum::<f64>());
        }
    }
    out
}

#[test]
fn pca_matches_the_covariance_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, cols) = (120, 6);
    let data = correlated_data(&mut rng, rows, cols);
    let pca = pca_fit(rows, cols, &data, 4).unwrap();

    let x = DMatrix::from_row_slice(rows, cols, &data);
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let cov = xc.transpose() * &xc / (rows - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &k) in order.iter().take(4).enumerate() {
        let lambda = eig.eigenvalues[k];
        assert!((pca.explained_variance[c] - lambda).abs() <= 1e-8 * lambda.max(1.0));
        let v = eig.eigenvectors.column(k);
        let dot: f64 = (0..cols).map(|j| v[j] * pca.components[(c, j)]).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-8, "component {c}: |cos| = {}", dot.abs());
    }
}

#[test]
fn pca_scores_are_uncorrelated_with_decreasing_variance() {
    let ds = colored_blobs(20, 8, 0).unwrap();
    let px = pixel_features(&ds).unwrap();
    assert_eq!((px.rows(), px.cols()), (60, 192));
    let reduced = pca_reduce(&px, 10).unwrap();
    assert_eq!(reduced.provenance, FeatureProvenance::PcaOfPixels);
    let s = DMatrix::from_row_slice(60, 10, reduced.data());
    let mut variances = Vec::new();
    for a in 0..10 {
        let ca = s.column(a);
        assert!(ca.mean().abs() < 1e-9);
        variances.push(ca.dot(&ca));
        for b in 0..a {
            let cb = s.column(b);
            let corr = ca.dot(&cb) / (ca.norm() * cb.norm());
            assert!(corr.abs() < 1e-8, "columns {a} and {b}: {corr}");
        }
    }
    assert!(variances.windows(2).all(|w| w[0] >= w[1]));
}

fn gaussian_blobs(per_class: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..3 * per_class {
        let c = i % 3;
        for j in 0..dim {
            let center = if j == c { 10.0 } else { 0.0 };
            data.push(center + normal.sample(&mut rng));
        }
        labels.push(c);
    }
    FeatureMatrix::from_parts(
        3 * per_class,
        dim,
        data,
        FeatureProvenance::Pixels,
        "blobs".into(),
        labels,
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap()
}

#[test]
fn tsne_separates_gaussian_blobs_and_is_deterministic() {
    let x = gaussian_blobs(60, 50, 3);
    let s = TsneSettings {
        seed: 4,
        ..TsneSettings::default()
    };
    let emb = tsne_embed(&x, "tsne_pixels", &s).unwrap();
    assert!(emb.is_finite());
    let acc = knn_accuracy(&emb.points(), &emb.labels, 15, SplitSpec::default()).unwrap();
    assert!(acc >= 99.0, "kNN accuracy {acc}");
    let again = tsne_embed(&x, "tsne_pixels", &s).unwrap();
    assert_eq!(emb.to_text(), again.to_text());
}

#[test]
fn barnes_hut_and_exact_runs_agree_on_structure() {
    let x = gaussian_blobs(40, 10, 5);
    for repulsion in [Repulsion::Exact, Repulsion::BarnesHut] {
        let s = TsneSettings {
            repulsion,
            n_iter: 500,
            ..TsneSettings::default()
        };
        let y = tsne_coords(&x, &s).unwrap();
        let pts: Vec<Vec<f64>> = y.iter().map(|p| p.to_vec()).collect();
        assert_eq!(knn_accuracy(&pts, &x.labels, 15, SplitSpec::default()).unwrap(), 100.0);
    }
}

#[test]
fn feature_matrices_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let x = gaussian_blobs(5, 4, 0);
    let path = dir.path().join("features.safetensors");
    x.save(&path).unwrap();
    assert_eq!(FeatureMatrix::load(&path).unwrap(), x);
}

fn synthetic_checkpoint(dir: &std::path::Path, variant: PretrainedVariant) -> std::path::PathBuf {
    let mut store = ParamStore::new();
    variant.spec().init(&mut store, "", 17).unwrap();
    let mut tensors = store.tensors();
    let feat = variant.spec().feature_dim();
    let fc = candle_core::Tensor::zeros((1000, feat), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
    tensors.push(("fc.weight".into(), fc));
    let path = dir.join(format!("{variant:?}.safetensors"));
    save_tensors(&path, &tensors, HashMap::new()).unwrap();
    path
}

fn tiny_dataset() -> ImageDataset {
    let blobs = colored_blobs(1, 16, 2).unwrap();
    // the first and last images are identical
    let idx = [0, 1, 2, 0];
    blobs.subset(&idx).unwrap()
}

fn check_features(variant: PretrainedVariant, dim: usize) {
    let dir = tempfile::tempdir().unwrap();
    let weights = synthetic_checkpoint(dir.path(), variant);
    let ds = tiny_dataset();
    let f = pretrained_features(&ds, &weights, variant, 2).unwrap();
    assert_eq!((f.rows(), f.cols()), (4, dim));
    assert!(f.data().iter().all(|v| v.is_finite()));
    assert!(f.data().iter().any(|v| *v != 0.0));
    assert_eq!(f.row(0), f.row(3));
    assert_ne!(f.row(0), f.row(1));
}

#[test]
fn depth18_features_have_512_columns() {
    check_features(PretrainedVariant::Depth18, 512);
}

#[test]
fn depth152_features_have_2048_columns() {
    check_features(PretrainedVariant::Depth152, 2048);
}

#[test]
fn missing_or_incomplete_checkpoints_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.safetensors");
    assert!(load_pretrained(&missing, PretrainedVariant::Depth18).is_err());

    let mut store = ParamStore::new();
    PretrainedVariant::Depth18.spec().init(&mut store, "", 0).unwrap();
    let partial: Vec<_> = store.tensors().into_iter().filter(|(n, _)| !n.starts_with("layer4")).collect();
    let path = dir.path().join("partial.safetensors");
    save_tensors(&path, &partial, HashMap::new()).unwrap();
    assert!(load_pretrained(&path, PretrainedVariant::Depth18).is_err());
    assert!(load_pretrained(&path, PretrainedVariant::Depth152).is_err());
}
