//! Geometric transforms: exact quarter turns, arbitrary rotations with a fill
//! colour, flips and resampling.

use super::Image;
use crate::error::{invalid, Result};

/// Rotates a square image counter-clockwise by `k` quarter turns.
///
/// This is an exact pixel permutation.
pub fn rot90k(img: &Image, k: u8) -> Result<Image> {
    let n = img.square_side()?;
    let k = k % 4;
    if k == 0 {
        return Ok(img.clone());
    }
    let mut out = vec![0f32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match k {
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            let o = (y * n + x) * 3;
            out[o..o + 3].copy_from_slice(&img.pixel(sy, sx));
        }
    }
    Image::new(n, n, out)
}

/// Rotates a square image counter-clockwise by `angle` degrees about its
/// centre using bilinear interpolation. Source samples that fall outside the
/// image take `fill` (unit-interval RGB).
pub fn rotate_any(img: &Image, angle: f64, fill: [f32; 3]) -> Result<Image> {
    let n = img.square_side()?;
    if angle == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = angle.to_radians().sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; n * n * 3];
    for y in 0..n {
        let v = y as f64 - c;
        for x in 0..n {
            let u = x as f64 - c;
            let sx = c + u * cos - v * sin;
            let sy = c + u * sin + v * cos;
            let px = sample_bilinear(img, sy, sx, fill);
            let o = (y * n + x) * 3;
            out[o..o + 3].copy_from_slice(&px);
        }
    }
    Image::new(n, n, out)
}

/// Snaps coordinates within `1e-9` of an integer so that exact quarter-turn
/// angles do not pick up interpolation noise from `sin`/`cos` rounding.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn sample_bilinear(img: &Image, y: f64, x: f64, fill: [f32; 3]) -> [f32; 3] {
    let (y, x) = (snap(y), snap(x));
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (h, w) = (img.height() as i64, img.width() as i64);
    let fetch = |yy: i64, xx: i64| -> [f32; 3] {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img.pixel(yy as usize, xx as usize)
        }
    };
    let (yi, xi) = (y0 as i64, x0 as i64);
    let taps = [
        ((1.0 - fy) * (1.0 - fx), fetch(yi, xi)),
        ((1.0 - fy) * fx, fetch(yi, xi + 1)),
        (fy * (1.0 - fx), fetch(yi + 1, xi)),
        (fy * fx, fetch(yi + 1, xi + 1)),
    ];
    let mut px = [0f32; 3];
    for (wgt, v) in taps {
        if wgt != 0.0 {
            for c in 0..3 {
                px[c] += wgt * v[c];
            }
        }
    }
    px
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            data[o..o + 3].copy_from_slice(&img.pixel(y, w - 1 - x));
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let data = out.data_mut();
    for y in 0..h {
        let row = w * 3;
        data[y * row..(y + 1) * row]
            .copy_from_slice(&img.data()[(h - 1 - y) * row..(h - y) * row]);
    }
    out
}

/// Axis-aligned crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Bilinear resampling of `region` of `img` to `out_h x out_w`, with
/// half-pixel centre alignment and edge clamping.
pub fn resize_region(img: &Image, region: CropBox, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("output size must be positive"));
    }
    if region.height == 0
        || region.width == 0
        || region.top + region.height > img.height()
        || region.left + region.width > img.width()
    {
        return Err(invalid(format!("crop {region:?} outside image")));
    }
    if region.height == out_h && region.width == out_w {
        let mut out = Vec::with_capacity(out_h * out_w * 3);
        for y in 0..out_h {
            let o = ((region.top + y) * img.width() + region.left) * 3;
            out.extend_from_slice(&img.data()[o..o + out_w * 3]);
        }
        return Image::new(out_h, out_w, out);
    }
    let sy = region.height as f64 / out_h as f64;
    let sx = region.width as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let p0 = p.floor() as usize;
        let p1 = (p0 + 1).min(len - 1);
        (p0, p1, (p - p0 as f64) as f32)
    };
    let mut out = vec![0f32; out_h * out_w * 3];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, region.height);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, sx, region.width);
            let a = img.pixel(region.top + y0, region.left + x0);
            let b = img.pixel(region.top + y0, region.left + x1);
            let c = img.pixel(region.top + y1, region.left + x0);
            let d = img.pixel(region.top + y1, region.left + x1);
            let o = (y * out_w + x) * 3;
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                out[o + ch] = top + (bottom - top) * fy;
            }
        }
    }
    Image::new(out_h, out_w, out)
}

pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let full = CropBox {
        top: 0,
        left: 0,
        height: img.height(),
        width: img.width(),
    };
    resize_region(img, full, out_h, out_w)
}

pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    if size > img.height() || size > img.width() {
        return Err(invalid(format!(
            "center crop {size} larger than {}x{}",
            img.height(),
            img.width()
        )));
    }
    let region = CropBox {
        top: (img.height() - size) / 2,
        left: (img.width() - size) / 2,
        height: size,
        width: size,
    };
    resize_region(img, region, size, size)
}
