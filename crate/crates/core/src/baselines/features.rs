use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{invalid, Error, Result};
use crate::network::tensorfile::{load_tensors, save_tensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureProvenance {
    Pixels,
    PcaOfPixels,
    Pretrained512,
    Pretrained2048,
    SimclrH,
}

/// `N x D` features of a labelled dataset, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub provenance: FeatureProvenance,
    pub dataset: String,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Preprocessing applied to the inputs (free-form key/value).
    pub normalization: BTreeMap<String, String>,
}

impl FeatureMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        provenance: FeatureProvenance,
        ds: &ImageDataset,
    ) -> Result<Self> {
        Self::from_parts(rows, cols, data, provenance, ds.name.clone(), ds.labels().to_vec(), ds.class_names().to_vec())
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        provenance: FeatureProvenance,
        dataset: String,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if labels.len() != rows {
            return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        let expected = match provenance {
            FeatureProvenance::Pretrained512 => Some(512),
            FeatureProvenance::Pretrained2048 => Some(2048),
            _ => None,
        };
        if let Some(d) = expected.filter(|&d| d != cols) {
            return Err(Error::Shape(format!("{provenance:?} features need {d} columns, got {cols}")));
        }
        Ok(Self {
            rows,
            cols,
            data,
            provenance,
            dataset,
            labels,
            class_names,
            normalization: BTreeMap::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let t = Tensor::from_vec(self.data.clone(), (self.rows, self.cols), &Device::Cpu)?;
        let labels: Vec<i64> = self.labels.iter().map(|&l| l as i64).collect();
        let l = Tensor::from_vec(labels, self.rows, &Device::Cpu)?;
        let meta = HashMap::from([
            ("format".to_string(), "tsimcne-features".to_string()),
            ("provenance".to_string(), serde_json::to_string(&self.provenance)?),
            ("dataset".to_string(), self.dataset.clone()),
            ("class_names".to_string(), serde_json::to_string(&self.class_names)?),
            ("normalization".to_string(), serde_json::to_string(&self.normalization)?),
        ]);
        save_tensors(path, &[("features".into(), t), ("labels".into(), l)], meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors(path)?;
        if meta.get("format").map(String::as_str) != Some("tsimcne-features") {
            return Err(Error::Dataset(format!("{} is not a feature file", path.display())));
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Dataset(format!("feature file lacks {k}")));
        let find = |k: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Dataset(format!("feature file lacks tensor {k}")))
        };
        let f = find("features")?;
        let (rows, cols) = f.dims2()?;
        let data = f.flatten_all()?.to_vec1::<f64>()?;
        let labels = find("labels")?.to_vec1::<i64>()?.into_iter().map(|l| l as usize).collect();
        let mut out = Self::from_parts(
            rows,
            cols,
            data,
            serde_json::from_str(get("provenance")?)?,
            get("dataset")?.clone(),
            labels,
            serde_json::from_str(get("class_names")?)?,
        )?;
        out.normalization = serde_json::from_str(get("normalization")?)?;
        Ok(out)
    }
}

/// Each image flattened to `H * W * 3` unit-interval intensities.
pub fn pixel_features(ds: &ImageDataset) -> Result<FeatureMatrix> {
    let data = ds.pixels().iter().map(|&v| f64::from(v) / 255.0).collect();
    let mut fm = FeatureMatrix::new(ds.len(), ds.image_len(), data, FeatureProvenance::Pixels, ds)?;
    fm.normalization.insert("scale".into(), "1/255".into());
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> ImageDataset {
        let mut px = vec![7u8; 28 * 28 * 3];
        px.extend(vec![7u8; 28 * 28 * 3]);
        px.extend((0..28 * 28 * 3).map(|i| (i % 256) as u8));
        ImageDataset::new("t", px, 28, vec![0, 0, 1], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn pixel_rows() {
        let f = pixel_features(&ds()).unwrap();
        assert_eq!(f.cols(), 2352);
        assert!(f.row(0).iter().all(|&v| v == 7.0 / 255.0));
        assert_eq!(f.row(0), f.row(1));
        assert_ne!(f.row(1), f.row(2));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.safetensors");
        let f = pixel_features(&ds()).unwrap();
        f.save(&p).unwrap();
        assert_eq!(FeatureMatrix::load(&p).unwrap(), f);
    }

    #[test]
    fn pretrained_width_is_checked() {
        let r = FeatureMatrix::new(3, 10, vec![0.0; 30], FeatureProvenance::Pretrained512, &ds());
        assert!(r.is_err());
    }
}
