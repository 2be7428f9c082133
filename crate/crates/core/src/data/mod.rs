//! Canonical in-memory image datasets and the label/shape preprocessing
//! applied before training.
//!
//! Images are stored as 8-bit RGB in row-major `N x H x W x 3` order. They are
//! only converted to floating point when an augmentation pipeline reads them.

mod archive;
mod resize;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use archive::{load_dataset, save_archive, DatasetFormat};
pub use resize::area_resize_u8;

/// A uniformly shaped, square RGB dataset with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    images: Vec<u8>,
    side: usize,
    labels: Vec<usize>,
    class_names: Vec<String>,
    pub source_meta: BTreeMap<String, String>,
}

impl ImageDataset {
    /// Builds a dataset from a flat `N x side x side x 3` pixel buffer.
    pub fn new(
        name: impl Into<String>,
        images: Vec<u8>,
        side: usize,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if side == 0 {
            return Err(Error::Dataset("image side must be positive".into()));
        }
        let per_image = side * side * 3;
        if images.len() % per_image != 0 {
            return Err(Error::Dataset(format!(
                "pixel buffer of {} bytes is not a multiple of {side}x{side}x3",
                images.len()
            )));
        }
        let n = images.len() / per_image;
        if n != labels.len() {
            return Err(Error::Dataset(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::MissingClassNames);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            images,
            side,
            labels,
            class_names,
            source_meta: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Height and width of every image.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn pixels(&self) -> &[u8] {
        &self.images
    }

    pub fn image_len(&self) -> usize {
        self.side * self.side * 3
    }

    /// Pixels of image `i` in `H x W x 3` order.
    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// All images as unit-interval float images.
    pub fn unit_images(&self) -> Vec<crate::augment::Image> {
        (0..self.len())
            .map(|i| crate::augment::Image::from_u8(self.image(i), self.side))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// A new dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("index {i} out of range for {}", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut ds = Self::new(
            self.name.clone(),
            images,
            self.side,
            labels,
            self.class_names.clone(),
        )?;
        ds.source_meta = self.source_meta.clone();
        Ok(ds)
    }

    fn with_labels(&self, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let mut ds = Self::new(
            self.name.clone(),
            self.images.clone(),
            self.side,
            labels,
            class_names,
        )?;
        ds.source_meta = self.source_meta.clone();
        Ok(ds)
    }
}

/// Relabels every class with fewer than `min_count` members into a single
/// class named `merged_name`, appended after the surviving classes.
///
/// Classes with no members at all are dropped. Fails when no class would
/// survive, since the result would be a single class.
pub fn merge_rare_classes(
    ds: &ImageDataset,
    min_count: usize,
    merged_name: &str,
) -> Result<ImageDataset> {
    if min_count == 0 {
        return Err(invalid("min_count must be at least 1"));
    }
    let counts = ds.class_counts();
    let rare: Vec<bool> = counts.iter().map(|&c| c < min_count).collect();
    if !rare.iter().any(|&r| r) {
        return Ok(ds.clone());
    }
    if rare.iter().all(|&r| r) {
        return Err(invalid(format!(
            "every class has fewer than {min_count} members; merging would leave one class"
        )));
    }

    let mut mapping = vec![usize::MAX; counts.len()];
    let mut names = Vec::new();
    for (c, name) in ds.class_names().iter().enumerate() {
        if !rare[c] {
            mapping[c] = names.len();
            names.push(name.clone());
        }
    }
    let merged_members: usize = (0..counts.len()).filter(|&c| rare[c]).map(|c| counts[c]).sum();
    if merged_members > 0 {
        let merged = names.len();
        names.push(merged_name.to_string());
        for c in 0..counts.len() {
            if rare[c] {
                mapping[c] = merged;
            }
        }
    }
    let labels = ds.labels().iter().map(|&l| mapping[l]).collect();
    let mut out = ds.with_labels(labels, names)?;
    out.source_meta
        .insert("merged_rare_classes".into(), format!("min_count={min_count}"));
    Ok(out)
}

/// Collapses the labels to two classes: 1 for members of `positive`, 0 otherwise.
pub fn binarize_labels(
    ds: &ImageDataset,
    positive: &BTreeSet<usize>,
    names: (&str, &str),
) -> Result<ImageDataset> {
    if positive.is_empty() {
        return Err(invalid("positive class set is empty"));
    }
    if let Some(&bad) = positive.iter().find(|&&c| c >= ds.num_classes()) {
        return Err(invalid(format!(
            "positive class {bad} out of range for {} classes",
            ds.num_classes()
        )));
    }
    if positive.len() == ds.num_classes() {
        return Err(invalid("positive class set covers every class"));
    }
    let labels = ds
        .labels()
        .iter()
        .map(|l| usize::from(positive.contains(l)))
        .collect();
    ds.with_labels(labels, vec![names.0.to_string(), names.1.to_string()])
}

/// Resizes every image to `target x target` with area interpolation.
pub fn resize_images(ds: &ImageDataset, target: usize) -> Result<ImageDataset> {
    if target == 0 {
        return Err(invalid("resize target must be at least 1"));
    }
    if target == ds.side() {
        return Ok(ds.clone());
    }
    let mut images = Vec::with_capacity(ds.len() * target * target * 3);
    for i in 0..ds.len() {
        images.extend(area_resize_u8(ds.image(i), ds.side(), target));
    }
    let mut out = ImageDataset::new(
        ds.name.clone(),
        images,
        target,
        ds.labels().to_vec(),
        ds.class_names().to_vec(),
    )?;
    out.source_meta = ds.source_meta.clone();
    Ok(out)
}

/// Fraction of points used for training and the seed of the permutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Uniformly random train/test partition of `0..n`.
///
/// The train part has `round(train_fraction * n)` indices, clamped so that
/// both parts are nonempty.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(invalid(format!("cannot split {n} points")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(invalid(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: Vec<usize>, classes: usize) -> ImageDataset {
        let n = labels.len();
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        ImageDataset::new("t", vec![7; n * 2 * 2 * 3], 2, labels, names).unwrap()
    }

    #[test]
    fn merge_hand_counted() {
        let ds = labelled(vec![0, 0, 0, 1, 2], 3);
        let merged = merge_rare_classes(&ds, 2, "OTH").unwrap();
        assert_eq!(merged.class_names(), ["c0", "OTH"]);
        assert_eq!(merged.labels(), [0, 0, 0, 1, 1]);
        assert_eq!(merged.class_counts(), [3, 2]);
        assert_eq!(merged.len(), 5);
    }

    #[test]
    fn merge_min_count_one_is_identity() {
        let ds = labelled(vec![0, 1, 2, 2], 3);
        assert_eq!(merge_rare_classes(&ds, 1, "OTH").unwrap(), ds);
    }

    #[test]
    fn merge_fifteen_classes_to_seven() {
        // six large classes and nine with fewer than 80 members
        let mut labels = Vec::new();
        for c in 0..15 {
            let count = if c < 6 { 200 + c * 10 } else { 10 + c };
            labels.extend(std::iter::repeat(c).take(count));
        }
        let ds = labelled(labels, 15);
        let merged = merge_rare_classes(&ds, 80, "OTH").unwrap();
        assert_eq!(merged.num_classes(), 7);
        let counts = merged.class_counts();
        assert!(counts[..6].iter().all(|&c| c >= 80));
    }

    #[test]
    fn merge_all_rare_fails() {
        let ds = labelled(vec![0, 1, 2], 3);
        assert!(merge_rare_classes(&ds, 5, "OTH").is_err());
        assert!(merge_rare_classes(&ds, 0, "OTH").is_err());
    }

    #[test]
    fn binarize_maps_directly() {
        let ds = labelled(vec![0, 1, 2], 3);
        let pos: BTreeSet<usize> = [1].into();
        let b = binarize_labels(&ds, &pos, ("other", "target")).unwrap();
        assert_eq!(b.labels(), [0, 1, 0]);
        assert_eq!(b.num_classes(), 2);
    }

    #[test]
    fn binarize_seven_to_two() {
        let ds = labelled((0..7).cycle().take(70).collect(), 7);
        let pos: BTreeSet<usize> = [5].into();
        let b = binarize_labels(&ds, &pos, ("other", "melanocytic nevi")).unwrap();
        assert_eq!(b.class_counts(), [60, 10]);
    }

    #[test]
    fn binarize_rejects_degenerate_sets() {
        let ds = labelled(vec![0, 1, 2], 3);
        assert!(binarize_labels(&ds, &[0, 1, 2].into(), ("a", "b")).is_err());
        assert!(binarize_labels(&ds, &BTreeSet::new(), ("a", "b")).is_err());
        assert!(binarize_labels(&ds, &[3].into(), ("a", "b")).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let ds = ImageDataset::new("t", (0..48).collect(), 4, vec![0], vec!["a".into()]).unwrap();
        assert_eq!(resize_images(&ds, 4).unwrap(), ds);
    }

    #[test]
    fn resize_constant_image() {
        let px: Vec<u8> = [12u8, 200, 77].repeat(224 * 224);
        let ds = ImageDataset::new("t", px, 224, vec![0], vec!["a".into()]).unwrap();
        let r = resize_images(&ds, 28).unwrap();
        assert_eq!(r.side(), 28);
        assert!(r.image(0).chunks(3).all(|p| p == [12, 200, 77]));
    }

    #[test]
    fn resize_checkerboard_to_gray() {
        let mut px = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let v = if (x + y) % 2 == 0 { 0 } else { 255 };
                px.extend([v, v, v]);
            }
        }
        let ds = ImageDataset::new("t", px, 4, vec![0], vec!["a".into()]).unwrap();
        let r = resize_images(&ds, 2).unwrap();
        // each 2x2 block averages to 127.5, rounded half away from zero
        assert!(r.image(0).iter().all(|&v| v == 128));
    }

    #[test]
    fn split_nine_to_one() {
        let (train, test) = split_indices(10, SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
    }

    #[test]
    fn split_is_seeded() {
        let spec = SplitSpec { seed: 5, ..Default::default() };
        assert_eq!(split_indices(1000, spec).unwrap(), split_indices(1000, spec).unwrap());
        let other = SplitSpec { seed: 6, ..Default::default() };
        assert_ne!(split_indices(1000, spec).unwrap(), split_indices(1000, other).unwrap());
    }

    #[test]
    fn split_rejects_tiny() {
        assert!(split_indices(1, SplitSpec::default()).is_err());
        let bad = SplitSpec { train_fraction: 1.0, seed: 0 };
        assert!(split_indices(10, bad).is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(matches!(
            ImageDataset::new("t", vec![0; 12], 2, vec![3], vec!["a".into()]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            ImageDataset::new("t", vec![0; 12], 2, vec![0], vec![]),
            Err(Error::MissingClassNames)
        ));
        assert!(ImageDataset::new("t", vec![0; 13], 2, vec![0], vec!["a".into()]).is_err());
    }
}
