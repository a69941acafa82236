//! Heatmap and activation-map export.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::ldwa::DensityWeights;

/// Nearest-neighbour upsampling of a row-major `grid` to `(h, w)`.
pub fn upsample_nearest(grid: &[f64], (gh, gw): (usize, usize), (h, w): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y * gh / h;
        for x in 0..w {
            out.push(grid[gy * gw + x * gw / w]);
        }
    }
    out
}

/// Min-max scaling to [0, 1]; a constant input maps to 0.5.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Blue → cyan → yellow → red.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let t = v * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = ((stops[i][c] * (1.0 - f) + stops[i + 1][c] * f) * 255.0).round() as u8;
    }
    rgb
}

/// Weight grid upsampled to the image size and alpha-blended over it.
pub fn heatmap_overlay(base: &RgbImage, weights: &DensityWeights, alpha: f64) -> RgbImage {
    let (w, h) = base.dimensions();
    let grid = normalize_unit(&weights.weights);
    let up = upsample_nearest(&grid, weights.source_shape, (h as usize, w as usize));
    let mut out = base.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let c = colormap(up[i]);
        for k in 0..3 {
            px.0[k] = ((1.0 - alpha) * px.0[k] as f64 + alpha * c[k] as f64).round() as u8;
        }
    }
    out
}

/// Grey-level map of `grid` upsampled to `(h, w)`.
pub fn grayscale_map(grid: &[f64], shape: (usize, usize), (h, w): (usize, usize)) -> RgbImage {
    let up = upsample_nearest(&normalize_unit(grid), shape, (h, w));
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (up[y as usize * w + x as usize] * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// Channel-mean of the first image of an NHWC activation → (grid, (h, w)).
pub fn mean_activation<T: Real>(g: &Graph<T>, x: Var) -> Result<(Vec<f64>, (usize, usize))> {
    let (h, w, c) = match *g.shape(x) {
        [_, h, w, c] => (h, w, c),
        ref s => {
            return Err(Error::shape(
                "mean_activation",
                format!("expected (B,H,W,C), got {s:?}"),
            ))
        }
    };
    let data = g.value(x).to_f64();
    let grid = data[..h * w * c]
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    Ok((grid, (h, w)))
}

/// Weight grid as CSV, one line per token row.
pub fn weights_csv(weights: &DensityWeights) -> String {
    let (_, gw) = weights.source_shape;
    let mut s = String::new();
    for row in weights.weights.chunks(gw) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upsampling_keeps_blocks() {
        let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], (2, 2), (4, 4));
        assert_eq!(
            up,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn flat_weights_give_flat_heatmap() {
        let base = RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]));
        let out = heatmap_overlay(&base, &DensityWeights::uniform((2, 2)), 0.5);
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
    }

    #[test]
    fn csv_sums_to_one() {
        let w = DensityWeights::new(vec![0.1, 0.2, 0.3, 0.4], (2, 2)).unwrap();
        let csv = weights_csv(&w);
        assert_eq!(csv.lines().count(), 2);
        let sum: f64 = csv
            .split([',', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [204, 0, 0]);
    }
}
