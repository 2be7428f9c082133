//! Embedding quality: k-nearest-neighbour accuracy on a held-out split and
//! the silhouette score of the class labels.

use serde::{Deserialize, Serialize};

use crate::data::{split_indices, SplitSpec};
use crate::error::{invalid, Error, Result};
use crate::seeding::stream;

fn check_points(points: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points of differing dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite coordinate"));
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Percentage of test points whose majority label among their `k` nearest
/// training points is correct. Distance ties go to the smaller point index,
/// vote ties to the smaller class index.
pub fn knn_accuracy(points: &[Vec<f64>], labels: &[usize], k: usize, split: SplitSpec) -> Result<f64> {
    check_points(points, labels)?;
    let (train, test) = split_indices(points.len(), split)?;
    knn_accuracy_on(points, labels, k, &train, &test)
}

/// As [`knn_accuracy`] with an explicit train/test partition.
pub fn knn_accuracy_on(
    points: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    train: &[usize],
    test: &[usize],
) -> Result<f64> {
    check_points(points, labels)?;
    if k == 0 || k > train.len() {
        return Err(invalid(format!("k = {k} with {} training points", train.len())));
    }
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    let first = labels[train[0]];
    if train.iter().all(|&i| labels[i] == first) {
        return Err(invalid("training portion holds a single class"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train_sorted = train.to_vec();
    train_sorted.sort_unstable();
    let mut correct = 0usize;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(train_sorted.len());
    let mut votes = vec![0usize; num_classes];
    for &t in test {
        cand.clear();
        cand.extend(train_sorted.iter().map(|&j| (sq_dist(&points[t], &points[j]), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, cmp);
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, j) in &cand[..k] {
            votes[labels[j]] += 1;
        }
        // max_by_key keeps the last maximum, so scan in reverse
        let predicted = (0..num_classes).rev().max_by_key(|&c| votes[c]).unwrap();
        if predicted == labels[t] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteMode {
    #[default]
    Exact,
    /// Score over a seeded random subset of this many points (distances
    /// still taken to all points).
    Sampled { points: usize, seed: u64 },
}

/// Mean over points of `(b - w) / max(w, b)`; `w` is the mean distance to
/// the other members of the point's class and `b` the smallest mean distance
/// to another class. Points in singleton classes contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    silhouette_with(points, labels, SilhouetteMode::Exact)
}

pub fn silhouette_with(points: &[Vec<f64>], labels: &[usize], mode: SilhouetteMode) -> Result<f64> {
    let rows: Vec<usize> = match mode {
        SilhouetteMode::Exact => (0..points.len()).collect(),
        SilhouetteMode::Sampled { points: m, seed } => {
            use rand::seq::index::sample;
            let mut rng = stream(seed, &[]);
            let mut idx = sample(&mut rng, points.len(), m.min(points.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let values = silhouette_of(points, labels, &rows)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-point silhouette values.
pub fn silhouette_samples(points: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    silhouette_of(points, labels, &(0..points.len()).collect::<Vec<_>>())
}

fn silhouette_of(points: &[Vec<f64>], labels: &[usize], rows: &[usize]) -> Result<Vec<f64>> {
    check_points(points, labels)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(invalid("silhouette needs at least two classes"));
    }
    let mut sums = vec![0f64; num_classes];
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let own = labels[i];
        if counts[own] < 2 {
            out.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, p) in points.iter().enumerate() {
            sums[labels[j]] += sq_dist(&points[i], p).sqrt();
        }
        let w = sums[own] / (counts[own] - 1) as f64;
        let b = (0..num_classes)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = w.max(b);
        out.push(if denom > 0.0 { (b - w) / denom } else { 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub split: SplitSpec,
    pub silhouette: SilhouetteMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 15,
            split: SplitSpec::default(),
            silhouette: SilhouetteMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub knn_accuracy: f64,
    pub silhouette: f64,
    pub k: usize,
    pub split_seed: u64,
    pub n_points: usize,
    pub n_classes: usize,
}

pub fn evaluate(points: &[Vec<f64>], labels: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    Ok(EvalReport {
        knn_accuracy: knn_accuracy(points, labels, cfg.k, cfg.split)?,
        silhouette: silhouette_with(points, labels, cfg.silhouette)?,
        k: cfg.k,
        split_seed: cfg.split.seed,
        n_points: points.len(),
        n_classes: present.len(),
    })
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}
