/// Per-output-index list of `(source index, weight)` for area interpolation
/// along one axis. Weights are the overlap of the output cell with each source
/// cell, normalised to sum to one.
pub(crate) fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (i, overlap)
                })
                .filter(|&(_, w)| w > 1e-12)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Area-interpolated resize of one square `side x side x 3` image.
pub fn area_resize_u8(src: &[u8], side: usize, target: usize) -> Vec<u8> {
    let taps = area_weights(side, target);
    // rows first: side x target x 3
    let mut tmp = vec![0f64; side * target * 3];
    for y in 0..side {
        for (ox, row_taps) in taps.iter().enumerate() {
            for c in 0..3 {
                tmp[(y * target + ox) * 3 + c] = row_taps
                    .iter()
                    .map(|&(x, w)| w * f64::from(src[(y * side + x) * 3 + c]))
                    .sum();
            }
        }
    }
    let mut out = vec![0u8; target * target * 3];
    for (oy, col_taps) in taps.iter().enumerate() {
        for ox in 0..target {
            for c in 0..3 {
                let v: f64 = col_taps
                    .iter()
                    .map(|&(y, w)| w * tmp[(y * target + ox) * 3 + c])
                    .sum();
                out[(oy * target + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for (s, d) in [(224, 28), (5, 3), (3, 7), (10, 10)] {
            for taps in area_weights(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fractional_overlap() {
        // 3 -> 2: output cell 0 covers [0, 1.5)
        let w = area_weights(3, 2);
        assert_eq!(w[0].len(), 2);
        assert!((w[0][0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[0][1].1 - 1.0 / 3.0).abs() < 1e-12);
    }
}
