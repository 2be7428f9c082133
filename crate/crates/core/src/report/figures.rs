//! Scatter plots (SVG) and grid-of-thumbnails figures (PNG).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::augment::{resize, Image};
use crate::data::ImageDataset;
use crate::embedding::EmbeddingResult;
use crate::error::{invalid, Error, Result};
use crate::evaluation::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    Scatter,
    GridThumbnails,
    /// Scatter with class names written at the class medians.
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureSpec {
    pub kind: FigureKind,
    pub grid_size: usize,
    pub min_cell_count: usize,
    /// Side of the square plotting area (scatter) in pixels.
    pub size_px: usize,
    /// Side of one grid cell (thumbnail figure) in pixels.
    pub cell_px: usize,
    pub point_radius: f64,
    /// Classes with this name are drawn in black.
    pub other_class_name: String,
    /// Overrides the default palette (hex colours, cycled).
    pub palette: Option<Vec<String>>,
}

impl Default for FigureSpec {
    fn default() -> Self {
        Self {
            kind: FigureKind::Scatter,
            grid_size: 10,
            min_cell_count: 100,
            size_px: 640,
            cell_px: 48,
            point_radius: 1.5,
            other_class_name: "OTH".into(),
            palette: None,
        }
    }
}

impl FigureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 1 || self.min_cell_count < 1 {
            return Err(Error::Config("grid_size and min_cell_count must be at least 1".into()));
        }
        if self.cell_px < 8 || self.size_px < 64 {
            return Err(Error::Config("figure too small".into()));
        }
        if let Some(p) = &self.palette {
            if p.is_empty() || p.iter().any(|c| parse_hex(c).is_none()) {
                return Err(Error::Config("palette entries must be #rrggbb colours".into()));
            }
        }
        Ok(())
    }

    /// Colour of every class, as `#rrggbb`.
    pub fn class_colors(&self, class_names: &[String]) -> Vec<String> {
        let palette: Vec<String> = match &self.palette {
            Some(p) => p.clone(),
            None => DEFAULT_PALETTE.iter().map(|s| s.to_string()).collect(),
        };
        let mut next = 0;
        class_names
            .iter()
            .map(|name| {
                if *name == self.other_class_name {
                    "#000000".to_string()
                } else {
                    let c = palette[next % palette.len()].clone();
                    next += 1;
                    c
                }
            })
            .collect()
    }
}

const DEFAULT_PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7",
    "#dbdb8d", "#9edae5",
];

fn parse_hex(s: &str) -> Option<[u8; 3]> {
    let h = s.strip_prefix('#')?;
    if h.len() != 6 {
        return None;
    }
    let v = u32::from_str_radix(h, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    min: [f64; 2],
    span: f64,
}

impl Frame {
    /// Square bounding box with a small margin, so the aspect ratio is kept.
    fn of(coords: &[[f64; 2]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in coords {
            for d in 0..2 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12) * 1.04;
        let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        Self {
            min: [mid[0] - span / 2.0, mid[1] - span / 2.0],
            span,
        }
    }

    fn to_px(&self, c: [f64; 2], size: f64) -> (f64, f64) {
        (
            (c[0] - self.min[0]) / self.span * size,
            size - (c[1] - self.min[1]) / self.span * size,
        )
    }
}

/// SVG scatter plot: one dot per point coloured by class, a legend of the
/// classes present, and the metrics when given.
pub fn scatter_svg(emb: &EmbeddingResult, spec: &FigureSpec, metrics: Option<&EvalReport>) -> Result<String> {
    spec.validate()?;
    if !emb.is_finite() {
        return Err(invalid("embedding has non-finite coordinates"));
    }
    let colors = spec.class_colors(&emb.class_names);
    let size = spec.size_px as f64;
    let pad = 40.0;
    let legend_w = 220.0;
    let width = size + 2.0 * pad + legend_w;
    let height = size + 2.0 * pad;
    let frame = Frame::of(&emb.coords);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{pad}" y="24" font-size="16">{} ({})</text>"#,
        escape(&emb.method),
        escape(&emb.dataset)
    )
    .unwrap();
    writeln!(svg, r#"<g id="points" transform="translate({pad},{pad})">"#).unwrap();
    for (c, &l) in emb.coords.iter().zip(&emb.labels) {
        let (x, y) = frame.to_px(*c, size);
        writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{}" fill="{}"/>"#, spec.point_radius, colors[l]).unwrap();
    }
    writeln!(svg, "</g>").unwrap();
    if spec.kind == FigureKind::Annotated {
        writeln!(svg, r#"<g id="annotations" transform="translate({pad},{pad})">"#).unwrap();
        for (class, name) in emb.class_names.iter().enumerate() {
            let mut xs: Vec<f64> = Vec::new();
            let mut ys: Vec<f64> = Vec::new();
            for (c, &l) in emb.coords.iter().zip(&emb.labels) {
                if l == class {
                    xs.push(c[0]);
                    ys.push(c[1]);
                }
            }
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            let (x, y) = frame.to_px([xs[xs.len() / 2], ys[ys.len() / 2]], size);
            writeln!(svg, r#"<text x="{x:.2}" y="{y:.2}" font-size="13" font-weight="bold">{}</text>"#, escape(name)).unwrap();
        }
        writeln!(svg, "</g>").unwrap();
    }
    let mut present = vec![false; emb.class_names.len()];
    for &l in &emb.labels {
        present[l] = true;
    }
    let lx = size + 2.0 * pad;
    writeln!(svg, r#"<g id="legend">"#).unwrap();
    let mut row = 0;
    for (class, name) in emb.class_names.iter().enumerate().filter(|(c, _)| present[*c]) {
        let y = pad + 18.0 * row as f64;
        writeln!(
            svg,
            r#"<circle class="legend-entry" cx="{}" cy="{y:.1}" r="5" fill="{}"/><text x="{}" y="{:.1}" font-size="12">{}</text>"#,
            lx + 5.0,
            colors[class],
            lx + 16.0,
            y + 4.0,
            escape(name)
        )
        .unwrap();
        row += 1;
    }
    writeln!(svg, "</g>").unwrap();
    if let Some(m) = metrics {
        writeln!(
            svg,
            r#"<text id="metrics" x="{pad}" y="{:.1}" font-size="13">kNN acc. {:.1}%   silhouette {:.3}</text>"#,
            height - 12.0,
            m.knn_accuracy,
            m.silhouette
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn scatter_figure(emb: &EmbeddingResult, spec: &FigureSpec, metrics: Option<&EvalReport>, path: &Path) -> Result<()> {
    let svg = scatter_svg(emb, spec, metrics)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    /// 0 is the top row (largest y).
    pub row: usize,
    pub col: usize,
    pub count: usize,
    /// Point whose image is shown.
    pub point: usize,
}

/// Cells holding at least `min_cell_count` points, each with the point
/// nearest the cell centre (ties to the smaller index).
pub fn grid_selection(emb: &EmbeddingResult, spec: &FigureSpec) -> Result<Vec<GridCell>> {
    spec.validate()?;
    if emb.is_empty() {
        return Err(invalid("empty embedding"));
    }
    if !emb.is_finite() {
        return Err(invalid("embedding has non-finite coordinates"));
    }
    let g = spec.grid_size;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &emb.coords {
        for d in 0..2 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let cell_w = [(hi[0] - lo[0]) / g as f64, (hi[1] - lo[1]) / g as f64];
    let index = |v: f64, d: usize| -> usize {
        if cell_w[d] > 0.0 {
            (((v - lo[d]) / cell_w[d]).floor() as usize).min(g - 1)
        } else {
            0
        }
    };
    let mut counts = vec![0usize; g * g];
    let mut best: Vec<Option<(f64, usize)>> = vec![None; g * g];
    for (i, c) in emb.coords.iter().enumerate() {
        let (cx, cy) = (index(c[0], 0), index(c[1], 1));
        let cell = cy * g + cx;
        counts[cell] += 1;
        let center = [lo[0] + (cx as f64 + 0.5) * cell_w[0], lo[1] + (cy as f64 + 0.5) * cell_w[1]];
        let d = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2);
        if best[cell].is_none_or(|(bd, _)| d < bd) {
            best[cell] = Some((d, i));
        }
    }
    let mut out = Vec::new();
    for row in 0..g {
        let cy = g - 1 - row;
        for col in 0..g {
            let cell = cy * g + col;
            if counts[cell] >= spec.min_cell_count {
                out.push(GridCell {
                    row,
                    col,
                    count: counts[cell],
                    point: best[cell].expect("non-empty cell").1,
                });
            }
        }
    }
    Ok(out)
}

/// Renders the selected thumbnails, each framed in its class colour, at
/// their cell positions.
pub fn grid_thumbnail_image(emb: &EmbeddingResult, ds: &ImageDataset, spec: &FigureSpec) -> Result<(RgbImage, Vec<GridCell>)> {
    if ds.len() != emb.len() {
        return Err(Error::Shape(format!("{} images for {} points", ds.len(), emb.len())));
    }
    let cells = grid_selection(emb, spec)?;
    let colors: Vec<[u8; 3]> = spec
        .class_colors(&emb.class_names)
        .iter()
        .map(|c| parse_hex(c).expect("validated palette"))
        .collect();
    let cp = spec.cell_px as u32;
    let side = cp * spec.grid_size as u32;
    let mut canvas = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let frame = (cp / 12).max(2);
    let inner = cp - 2 * frame;
    for cell in &cells {
        let (x0, y0) = (cell.col as u32 * cp, cell.row as u32 * cp);
        let color = Rgb(colors[emb.labels[cell.point]]);
        for y in 0..cp {
            for x in 0..cp {
                canvas.put_pixel(x0 + x, y0 + y, color);
            }
        }
        let thumb = resize(&Image::from_u8(ds.image(cell.point), ds.side()), inner as usize, inner as usize)?;
        let px = thumb.to_u8();
        for y in 0..inner {
            for x in 0..inner {
                let k = ((y * inner + x) * 3) as usize;
                canvas.put_pixel(x0 + frame + x, y0 + frame + y, Rgb([px[k], px[k + 1], px[k + 2]]));
            }
        }
    }
    Ok((canvas, cells))
}

pub fn grid_thumbnail_figure(
    emb: &EmbeddingResult,
    ds: &ImageDataset,
    spec: &FigureSpec,
    path: &Path,
) -> Result<Vec<GridCell>> {
    let (canvas, cells) = grid_thumbnail_image(emb, ds, spec)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    canvas.save(path)?;
    Ok(cells)
}
