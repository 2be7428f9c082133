use nalgebra::DMatrix;

use super::features::{FeatureMatrix, FeatureProvenance};
use crate::error::{invalid, Result};

/// Principal axes of centred data, ordered by decreasing variance.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `n_components x D`, unit rows.
    pub components: DMatrix<f64>,
    /// Variance along each component (denominator `N - 1`).
    pub explained_variance: Vec<f64>,
    /// Projections of the fitted rows, `N x n_components`.
    pub scores: DMatrix<f64>,
}

/// Fits `n_components` principal components via a thin SVD of the centred
/// data. Each component's sign is chosen so its largest-magnitude loading
/// is positive.
pub fn pca_fit(rows: usize, cols: usize, data: &[f64], n_components: usize) -> Result<Pca> {
    if n_components == 0 || n_components > rows.min(cols) {
        return Err(invalid(format!(
            "n_components = {n_components} for a {rows}x{cols} matrix"
        )));
    }
    let x = DMatrix::from_row_slice(rows, cols, data);
    let mean: Vec<f64> = (0..cols).map(|j| x.column(j).mean()).collect();
    let mut xc = x;
    for j in 0..cols {
        xc.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let svd = xc.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = svd.singular_values.max();
    let tol = s_max * rows.max(cols) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if n_components > rank {
        return Err(invalid(format!(
            "n_components = {n_components} exceeds the data rank {rank}"
        )));
    }
    let mut components = DMatrix::zeros(n_components, cols);
    let mut explained = Vec::with_capacity(n_components);
    let denom = (rows.max(2) - 1) as f64;
    for (c, &k) in order.iter().take(n_components).enumerate() {
        let mut row = v_t.row(k).clone_owned();
        let pivot = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            row.neg_mut();
        }
        components.set_row(c, &row);
        explained.push(svd.singular_values[k].powi(2) / denom);
    }
    let scores = &xc * components.transpose();
    Ok(Pca {
        mean,
        components,
        explained_variance: explained,
        scores,
    })
}

/// Projection of `x` onto its top `n_components` principal components.
pub fn pca_reduce(x: &FeatureMatrix, n_components: usize) -> Result<FeatureMatrix> {
    let pca = pca_fit(x.rows(), x.cols(), x.data(), n_components)?;
    let mut data = Vec::with_capacity(x.rows() * n_components);
    for i in 0..x.rows() {
        data.extend(pca.scores.row(i).iter());
    }
    let provenance = match x.provenance {
        FeatureProvenance::Pixels | FeatureProvenance::PcaOfPixels => FeatureProvenance::PcaOfPixels,
        other => other,
    };
    let mut out = FeatureMatrix::from_parts(
        x.rows(),
        n_components,
        data,
        provenance,
        x.dataset.clone(),
        x.labels.clone(),
        x.class_names.clone(),
    )?;
    out.normalization = x.normalization.clone();
    out.normalization.insert("pca_components".into(), n_components.to_string());
    Ok(out)
}
