//! Colour jitter and grayscale conversion with the usual luma weights.

use super::Image;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[inline]
fn luma(p: &[f32]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let g = luma(p);
        p.fill(g);
    }
    out
}

pub fn adjust_brightness(img: &mut Image, factor: f32) {
    for v in img.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

/// Blends every pixel with the image's mean luma.
pub fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = (img.height() * img.width()) as f64;
    let mean = (img
        .data()
        .chunks_exact(3)
        .map(|p| f64::from(luma(p)))
        .sum::<f64>()
        / n) as f32;
    for v in img.data_mut() {
        *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0);
    }
}

/// Blends every pixel with its own luma.
pub fn adjust_saturation(img: &mut Image, factor: f32) {
    for p in img.data_mut().chunks_exact_mut(3) {
        let g = luma(p);
        for v in p.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * g).clamp(0.0, 1.0);
        }
    }
}

/// Shifts hue by `shift` turns (in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Image, shift: f32) {
    for p in img.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_equal_channels() {
        let img = Image::new(1, 2, vec![1.0, 0.0, 0.0, 0.2, 0.4, 0.9]).unwrap();
        let g = grayscale(&img);
        for p in g.data().chunks(3) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
        assert!((g.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.9f32, 0.1, 0.3], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0]] {
            let (h, s, v) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            assert!((r - rgb[0]).abs() < 1e-6 && (g - rgb[1]).abs() < 1e-6 && (b - rgb[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn half_turn_hue_of_red_is_cyan() {
        let mut img = Image::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        adjust_hue(&mut img, 0.5);
        assert_eq!(img.data(), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn unit_factors_are_identity() {
        let img = Image::new(1, 2, vec![0.3, 0.6, 0.1, 0.8, 0.2, 0.5]).unwrap();
        let mut j = img.clone();
        adjust_brightness(&mut j, 1.0);
        adjust_contrast(&mut j, 1.0);
        adjust_saturation(&mut j, 1.0);
        assert_eq!(j, img);
    }
}
