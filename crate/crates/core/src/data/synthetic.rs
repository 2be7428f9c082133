//! A small rotation-invariant benchmark: three classes of coloured blobs on a
//! noisy background, each drawn at a random orientation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageDataset;
use crate::error::Result;

const CLASS_NAMES: [&str; 3] = ["disk", "ring", "pair"];

/// `n_per_class` images per class, `side x side` pixels each.
///
/// * `disk`: one filled reddish disk
/// * `ring`: a greenish annulus
/// * `pair`: two small bluish disks on a randomly oriented axis
pub fn colored_blobs(n_per_class: usize, side: usize, seed: u64) -> Result<ImageDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3 * n_per_class;
    let mut pixels = Vec::with_capacity(n * side * side * 3);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64 / 28.0;
    for i in 0..n {
        let class = i % 3;
        let bg = rng.random_range(30.0..60.0);
        let jitter = [
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        ];
        let base: [f64; 3] = match class {
            0 => [210.0, 70.0, 60.0],
            1 => [70.0, 200.0, 80.0],
            _ => [70.0, 90.0, 215.0],
        };
        let color = [base[0] + jitter[0], base[1] + jitter[1], base[2] + jitter[2]];
        let half = side as f64 / 2.0;
        let cx = half + rng.random_range(-3.0..3.0) * s;
        let cy = half + rng.random_range(-3.0..3.0) * s;
        let radius = rng.random_range(6.0..9.0) * s;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos() * 5.0 * s, angle.sin() * 5.0 * s);

        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let inside = match class {
                    0 => d <= radius,
                    1 => d <= radius + 1.0 && d >= radius - 2.5 * s,
                    _ => {
                        let d1 = ((px - cx - dx).powi(2) + (py - cy - dy).powi(2)).sqrt();
                        let d2 = ((px - cx + dx).powi(2) + (py - cy + dy).powi(2)).sqrt();
                        d1 <= 3.5 * s || d2 <= 3.5 * s
                    }
                };
                for c in 0..3 {
                    let noise = rng.random_range(-8.0..8.0);
                    let v = if inside { color[c] } else { bg } + noise;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class);
    }
    let mut ds = ImageDataset::new(
        "colored-blobs",
        pixels,
        side,
        labels,
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )?;
    ds.source_meta
        .insert("generator".into(), format!("colored_blobs(n_per_class={n_per_class}, side={side}, seed={seed})"));
    Ok(ds)
}
