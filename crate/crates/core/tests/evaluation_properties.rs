use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsimcne::data::SplitSpec;
use tsimcne::evaluation::{evaluate, knn_accuracy, silhouette, silhouette_with, EvalConfig, EvalReport, SilhouetteMode};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

#[test]
fn knn_on_random_labels_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points = random_points(&mut rng, 3000);
    let labels: Vec<usize> = (0..3000).map(|_| rng.random_range(0..2)).collect();
    let acc = knn_accuracy(&points, &labels, 15, SplitSpec::default()).unwrap();
    assert!((acc - 50.0).abs() <= 4.0, "accuracy {acc}");
}

#[test]
fn silhouette_of_random_labels_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let points = random_points(&mut rng, 1500);
    let labels: Vec<usize> = (0..1500).map(|_| rng.random_range(0..3)).collect();
    let s = silhouette(&points, &labels).unwrap();
    assert!(s.abs() < 0.05, "silhouette {s}");
}

#[test]
fn separated_clusters_score_high() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let points: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| vec![20.0 * l as f64 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let r = evaluate(&points, &labels, &EvalConfig::default()).unwrap();
    assert_eq!(r.knn_accuracy, 100.0);
    assert!(r.silhouette > 0.9);
    assert_eq!((r.n_points, r.n_classes), (400, 4));
    assert_eq!(EvalReport::from_toml(&r.to_toml().unwrap()).unwrap(), r);
}

#[test]
fn sampled_silhouette_tracks_the_exact_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<usize> = (0..2000).map(|i| i % 3).collect();
    let points: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| vec![3.0 * l as f64 + rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let exact = silhouette(&points, &labels).unwrap();
    let sampled = silhouette_with(&points, &labels, SilhouetteMode::Sampled { points: 800, seed: 7 }).unwrap();
    assert!((exact - sampled).abs() < 0.03, "{exact} vs {sampled}");
}

#[test]
fn rejects_mismatched_inputs() {
    let points = vec![vec![0.0, 0.0]; 4];
    assert!(knn_accuracy(&points, &[0, 1, 0], 1, SplitSpec::default()).is_err());
    assert!(silhouette(&points, &[0, 0, 0, 0]).is_err());
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (30usize..150, 2usize..5).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), n),
            prop::collection::vec(0..c, n).prop_map(move |mut l| {
                for (i, v) in l.iter_mut().take(2 * c).enumerate() {
                    *v = i % c;
                }
                l
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn metrics_survive_similarity_transforms(
        (points, labels) in instance(),
        angle in 0.0f64..std::f64::consts::TAU,
        scale in 0.01f64..100.0,
        dx in -1e3f64..1e3,
        dy in -1e3f64..1e3,
    ) {
        let (s, c) = angle.sin_cos();
        let moved: Vec<Vec<f64>> = points
            .iter()
            .map(|p| vec![scale * (c * p[0] - s * p[1]) + dx, scale * (s * p[0] + c * p[1]) + dy])
            .collect();
        let split = SplitSpec::default();
        let k = 5;
        prop_assert!((knn_accuracy(&points, &labels, k, split).unwrap() - knn_accuracy(&moved, &labels, k, split).unwrap()).abs() <= 1e-9);
        prop_assert!((silhouette(&points, &labels).unwrap() - silhouette(&moved, &labels).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn metrics_ignore_class_relabelling((points, labels) in instance(), shift in 1usize..4) {
        let c = labels.iter().max().unwrap() + 1;
        let relabelled: Vec<usize> = labels.iter().map(|l| (l + shift) % c).collect();
        prop_assert!((silhouette(&points, &labels).unwrap() - silhouette(&points, &relabelled).unwrap()).abs() <= 1e-12);
        let split = SplitSpec::default();
        // ties break towards the smaller class index; k = 1 has no ties
        let a = knn_accuracy(&points, &labels, 1, split).unwrap();
        let b = knn_accuracy(&points, &relabelled, 1, split).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_are_bounded((points, labels) in instance()) {
        let acc = knn_accuracy(&points, &labels, 7, SplitSpec::default()).unwrap();
        let s = silhouette(&points, &labels).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
