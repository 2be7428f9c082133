//! On-disk dataset formats.
//!
//! A tensor archive is a safetensors file with a `u8` tensor `images`
//! (`N x H x W x 3`) and an integer tensor `labels` (`N`), next to a UTF-8
//! manifest (same path, `.manifest` extension) holding `key=value` lines.
//! The manifest must carry `classes` (comma-separated) and may carry `name`;
//! any other key is kept as provenance.
//!
//! An image folder is `root/<class_name>/<file>.png|jpg`, classes sorted by name.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    TensorArchive,
    ImageFolder,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor-archive" => Ok(Self::TensorArchive),
            "image-folder" => Ok(Self::ImageFolder),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    archive.with_extension("manifest")
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<ImageDataset> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    match format {
        DatasetFormat::TensorArchive => load_archive(path),
        DatasetFormat::ImageFolder => load_image_folder(path),
    }
}

fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim_end_matches('\r');
            let (k, v) = line.split_once('=')?;
            Some((k.trim().to_string(), v.to_string()))
        })
        .collect()
}

fn read_labels(view: &TensorView<'_>) -> Result<Vec<i64>> {
    let data = view.data();
    let labels = match view.dtype() {
        Dtype::I64 => data
            .chunks_exact(8)
            .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::I32 => data
            .chunks_exact(4)
            .map(|b| i64::from(i32::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        Dtype::U32 => data
            .chunks_exact(4)
            .map(|b| i64::from(u32::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        Dtype::U8 => data.iter().map(|&b| i64::from(b)).collect(),
        other => {
            return Err(Error::Dataset(format!("unsupported label dtype {other:?}")));
        }
    };
    Ok(labels)
}

fn load_archive(path: &Path) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes)?;
    let images = st
        .tensor("images")
        .map_err(|_| Error::Dataset("archive has no `images` tensor".into()))?;
    let labels = st.tensor("labels").map_err(|_| Error::MissingLabels)?;

    let manifest_file = manifest_path(path);
    let manifest = match fs::read_to_string(&manifest_file) {
        Ok(text) => parse_manifest(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingClassNames),
        Err(e) => return Err(Error::io(manifest_file, e)),
    };
    let classes: Vec<String> = match manifest.get("classes") {
        Some(c) if !c.is_empty() => c.split(',').map(str::to_string).collect(),
        _ => return Err(Error::MissingClassNames),
    };

    if images.dtype() != Dtype::U8 {
        return Err(Error::Dataset(format!(
            "images must be u8, found {:?}",
            images.dtype()
        )));
    }
    let shape = images.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Dataset(format!(
            "images must be N x H x W x 3, found {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if h != w {
        return Err(Error::NotSquare { height: h, width: w });
    }
    let raw_labels = read_labels(&labels)?;
    if raw_labels.len() != n {
        return Err(Error::Dataset(format!(
            "{n} images but {} labels",
            raw_labels.len()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for l in raw_labels {
        if l < 0 || l as usize >= classes.len() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: classes.len(),
            });
        }
        labels.push(l as usize);
    }

    let name = manifest.get("name").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let mut ds = ImageDataset::new(name, images.data().to_vec(), h, labels, classes)?;
    ds.source_meta = manifest
        .into_iter()
        .filter(|(k, _)| k != "name" && k != "classes")
        .collect();
    Ok(ds)
}

/// Writes `ds` as a tensor archive plus manifest.
pub fn save_archive(ds: &ImageDataset, path: &Path) -> Result<()> {
    for name in ds.class_names() {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Dataset(format!(
                "class name {name:?} cannot be stored in a manifest"
            )));
        }
    }
    for (k, v) in &ds.source_meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') || k == "name" || k == "classes" {
            return Err(Error::Dataset(format!("provenance entry {k:?} cannot be stored")));
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let n = ds.len();
    let s = ds.side();
    let label_bytes: Vec<u8> = ds
        .labels()
        .iter()
        .flat_map(|&l| (l as i64).to_le_bytes())
        .collect();
    let tensors = [
        (
            "images",
            TensorView::new(Dtype::U8, vec![n, s, s, 3], ds.pixels())?,
        ),
        ("labels", TensorView::new(Dtype::I64, vec![n], &label_bytes)?),
    ];
    let info = HashMap::from([("format".to_string(), "tsimcne-dataset".to_string())]);
    safetensors::serialize_to_file(tensors, Some(info), path)?;

    let mut manifest = format!("name={}\nclasses={}\n", ds.name, ds.class_names().join(","));
    for (k, v) in &ds.source_meta {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))
}

fn load_image_folder(root: &Path) -> Result<ImageDataset> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut entries = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        Ok(entries)
    };
    let class_dirs: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::MissingClassNames);
    }
    let mut classes = Vec::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut side = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        classes.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        for file in read_dir(dir)? {
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                continue;
            }
            let img = image::open(&file)?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let expected = *side.get_or_insert((h, w));
            if (h, w) != expected {
                return Err(Error::RaggedImages {
                    expected,
                    found: (h, w),
                });
            }
            pixels.extend_from_slice(img.as_raw());
            labels.push(label);
        }
    }
    let (h, w) = side.ok_or_else(|| Error::Dataset("image folder holds no images".into()))?;
    if h != w {
        return Err(Error::NotSquare { height: h, width: w });
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    let mut ds = ImageDataset::new(name, pixels, h, labels, classes)?;
    ds.source_meta
        .insert("source".into(), root.display().to_string());
    Ok(ds)
}
