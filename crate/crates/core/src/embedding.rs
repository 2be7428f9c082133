//! 2-D embedding of a labelled dataset and its plain-text serialization.
//!
//! Format: `# key: value` header lines (method, dataset, classes and any
//! provenance), then a tab-separated table with columns
//! `index x y label`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingResult {
    pub method: String,
    pub dataset: String,
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: BTreeMap<String, String>,
}

impl EmbeddingResult {
    pub fn new(
        method: impl Into<String>,
        dataset: impl Into<String>,
        coords: Vec<[f64; 2]>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if coords.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels",
                coords.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            coords,
            labels,
            class_names,
            provenance: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn with_provenance(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.provenance.insert(key.into(), value.into());
        self
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.coords.iter().map(|c| c.to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let clean = |s: &str| s.replace(['\n', '\r'], " ");
        writeln!(out, "# method: {}", clean(&self.method)).unwrap();
        writeln!(out, "# dataset: {}", clean(&self.dataset)).unwrap();
        writeln!(out, "# classes: {}", self.class_names.iter().map(|c| clean(c)).collect::<Vec<_>>().join(",")).unwrap();
        for (k, v) in &self.provenance {
            writeln!(out, "# {}: {}", clean(k), clean(v)).unwrap();
        }
        out.push_str("index\tx\ty\tlabel\n");
        for (i, (c, l)) in self.coords.iter().zip(&self.labels).enumerate() {
            // `{:?}` prints the shortest string that parses back to the same f64
            writeln!(out, "{i}\t{:?}\t{:?}\t{l}", c[0], c[1]).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Dataset(format!("embedding file: {msg}"));
        let mut header = BTreeMap::new();
        let mut lines = text.lines();
        let mut columns_seen = false;
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(": ")
                    .or_else(|| rest.strip_suffix(':').map(|k| (k, "")))
                    .ok_or_else(|| bad(format!("malformed header {line:?}")))?;
                header.insert(k.to_string(), v.to_string());
            } else if line == "index\tx\ty\tlabel" {
                columns_seen = true;
                break;
            } else {
                return Err(bad(format!("unexpected line {line:?}")));
            }
        }
        if !columns_seen {
            return Err(bad("missing column header".into()));
        }
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(row) {
                return Err(bad(format!("malformed row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            coords.push([num(f[1])?, num(f[2])?]);
            labels.push(f[3].parse().map_err(|_| bad(format!("bad label {:?}", f[3])))?);
        }
        let method = header.remove("method").unwrap_or_default();
        let dataset = header.remove("dataset").unwrap_or_default();
        let classes = header.remove("classes").ok_or(Error::MissingClassNames)?;
        let class_names = if classes.is_empty() {
            Vec::new()
        } else {
            classes.split(',').map(str::to_string).collect()
        };
        let mut result = Self::new(method, dataset, coords, labels, class_names)?;
        result.provenance = header;
        Ok(result)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let e = EmbeddingResult::new(
            "t-simcne",
            "toy",
            vec![[0.1, -2.5e-17], [1.0 / 3.0, f64::MAX]],
            vec![1, 0],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
        .with_provenance("seed", "4");
        let back = EmbeddingResult::from_text(&e.to_text()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_text(), e.to_text());
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        assert!(EmbeddingResult::new("m", "d", vec![[0.0, 0.0]], vec![], vec!["a".into()]).is_err());
        assert!(EmbeddingResult::new("m", "d", vec![[0.0, 0.0]], vec![2], vec!["a".into()]).is_err());
        assert!(EmbeddingResult::from_text("index\tx\ty\tlabel\n0\t1\t2\t0\n").is_err());
    }
}
