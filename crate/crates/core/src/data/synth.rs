//! Procedural count-labeled scenes: soft bright blobs over a textured
//! background. The label is the number of blobs drawn, overlaps included.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{derived_rng, Rng};
use crate::error::{Error, Result};

/// Stream tag of the per-image generators; image `i` uses `SYNTH_STREAM + i`.
pub const SYNTH_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// (height, width).
    pub image_size: [usize; 2],
    /// Inclusive count range.
    pub count_range: [u32; 2],
    /// Blob radius range in pixels.
    pub blob_radius_range: [f64; 2],
    /// Background texture amplitude in [0, 1].
    pub clutter_level: f64,
    pub num_images: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 128],
            count_range: [0, 200],
            blob_radius_range: [1.5, 3.0],
            clutter_level: 0.3,
            num_images: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be positive")));
        }
        let [lo, hi] = self.count_range;
        if lo > hi {
            return Err(Error::Config(format!("count range [{lo}, {hi}] is reversed")));
        }
        let [r0, r1] = self.blob_radius_range;
        if !(r0 > 0.0 && r1 >= r0 && r1.is_finite()) {
            return Err(Error::Config(format!(
                "blob radius range [{r0}, {r1}] must be positive and ordered"
            )));
        }
        if 2.0 * r1 > h.min(w) as f64 {
            return Err(Error::Config(format!("blob radius {r1} does not fit a {h}x{w} image")));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::Config(format!(
                "clutter level {} outside [0, 1]",
                self.clutter_level
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: RgbImage,
    pub count: usize,
    /// Blob centers as (x, y) pixel coordinates.
    pub centers: Vec<[f64; 2]>,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

fn background(cfg: &SynthConfig, rng: &mut Rng) -> Vec<[f64; 3]> {
    let [h, w] = cfg.image_size;
    let base = [
        rng.random_range(50.0..90.0),
        rng.random_range(50.0..90.0),
        rng.random_range(50.0..90.0),
    ];
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..6.0) * 2.0 * PI / h.max(w) as f64;
            Wave {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: [
                    rng.random_range(20.0..50.0),
                    rng.random_range(20.0..50.0),
                    rng.random_range(20.0..50.0),
                ],
            }
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut px = base;
            for wave in &waves {
                let s = (wave.fx * x as f64 + wave.fy * y as f64 + wave.phase).sin();
                for c in 0..3 {
                    px[c] += cfg.clutter_level * wave.amp[c] * s;
                }
            }
            let noise = rng.random_range(-1.0..1.0) * 15.0 * cfg.clutter_level;
            for v in &mut px {
                *v += noise;
            }
            out.push(px);
        }
    }
    out
}

fn render(cfg: &SynthConfig, centers: &[[f64; 2]], rng: &mut Rng) -> RgbImage {
    let [h, w] = cfg.image_size;
    let mut canvas = background(cfg, rng);
    let [r0, r1] = cfg.blob_radius_range;
    for &[cx, cy] in centers {
        let r = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
        let bright: f64 = rng.random_range(0.75..1.0);
        let color = [235.0 * bright, 215.0 * bright, 190.0 * bright];
        let reach = r + 1.0;
        let y_lo = (cy - reach).floor().max(0.0) as usize;
        let y_hi = ((cy + reach).ceil() as usize).min(h - 1);
        let x_lo = (cx - reach).floor().max(0.0) as usize;
        let x_hi = ((cx + reach).ceil() as usize).min(w - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                // Soft edge: opaque inside r - 0.5, transparent beyond r + 0.5.
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    let px = &mut canvas[y * w + x];
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = canvas[y as usize * w + x as usize];
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn centers_in(cfg: &SynthConfig, n: usize, region: [f64; 4], rng: &mut Rng) -> Vec<[f64; 2]> {
    let [h, w] = cfg.image_size;
    let [x0, y0, x1, y1] = region;
    (0..n)
        .map(|_| [rng.random_range(x0..x1) * w as f64, rng.random_range(y0..y1) * h as f64])
        .collect()
}

/// Draws a count uniformly from the configured range and renders a scene.
pub fn generate_synthetic_sample(cfg: &SynthConfig, rng: &mut Rng) -> Result<SynthSample> {
    cfg.validate()?;
    let [lo, hi] = cfg.count_range;
    let n = rng.random_range(lo..=hi) as usize;
    let centers = centers_in(cfg, n, [0.0, 0.0, 1.0, 1.0], rng);
    let image = render(cfg, &centers, rng);
    Ok(SynthSample {
        image,
        count: n,
        centers,
    })
}

/// Scene whose `count` blobs all fall inside `region`, given as
/// `[x0, y0, x1, y1]` fractions of the image.
pub fn generate_clustered_sample(
    cfg: &SynthConfig,
    count: usize,
    region: [f64; 4],
    rng: &mut Rng,
) -> Result<SynthSample> {
    cfg.validate()?;
    let [x0, y0, x1, y1] = region;
    if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
        return Err(Error::invalid(
            "generate_clustered_sample",
            format!("bad region {region:?}"),
        ));
    }
    let centers = centers_in(cfg, count, region, rng);
    let image = render(cfg, &centers, rng);
    Ok(SynthSample { image, count, centers })
}

/// Sample `index` of the dataset described by `cfg`.
pub fn dataset_sample(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    let mut rng = derived_rng(cfg.seed, SYNTH_STREAM + index as u64);
    generate_synthetic_sample(cfg, &mut rng)
}

/// Writes `images/NNNNN.png` and `manifest.txt` under `out`; returns the
/// manifest path. Output is a pure function of `cfg`.
pub fn write_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<std::path::PathBuf> {
    cfg.validate()?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::from("# path,count\n");
    for i in 0..cfg.num_images {
        let s = dataset_sample(cfg, i)?;
        let rel = format!("images/{i:05}.png");
        let path = out.join(&rel);
        super::save_png(&s.image, &path)?;
        manifest.push_str(&format!("{rel},{}\n", s.count));
    }
    let path = out.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    #[test]
    fn empty_scene() {
        let cfg = SynthConfig {
            count_range: [0, 0],
            ..SynthConfig::default()
        };
        let s = generate_synthetic_sample(&cfg, &mut seeded_rng(1)).unwrap();
        assert_eq!(s.count, 0);
        assert!(s.centers.is_empty());
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = dataset_sample(&cfg, 7).unwrap();
        let b = dataset_sample(&cfg, 7).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.count, b.count);
    }

    #[test]
    fn label_equals_recorded_centers() {
        let cfg = SynthConfig::default();
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let s = generate_synthetic_sample(&cfg, &mut rng).unwrap();
            assert_eq!(s.centers.len(), s.count);
            assert!(s
                .centers
                .iter()
                .all(|&[x, y]| (0.0..128.0).contains(&x) && (0.0..128.0).contains(&y)));
        }
    }

    #[test]
    fn isolated_blobs_are_visible() {
        // One blob on a flat background brightens its center pixel.
        let cfg = SynthConfig {
            clutter_level: 0.0,
            ..SynthConfig::default()
        };
        let s = generate_clustered_sample(&cfg, 1, [0.4, 0.4, 0.6, 0.6], &mut seeded_rng(2)).unwrap();
        let [cx, cy] = s.centers[0];
        let center = s.image.get_pixel(cx as u32, cy as u32);
        let corner = s.image.get_pixel(0, 0);
        assert!(center[0] as i32 - corner[0] as i32 > 80);
    }

    #[test]
    fn oversized_blob_is_an_error() {
        let cfg = SynthConfig {
            image_size: [8, 8],
            blob_radius_range: [1.0, 5.0],
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_sample(&cfg, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn uniform_count_mean() {
        let cfg = SynthConfig {
            image_size: [8, 8],
            blob_radius_range: [1.0, 1.0],
            ..SynthConfig::default()
        };
        let mut rng = seeded_rng(9);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| generate_synthetic_sample(&cfg, &mut rng).unwrap().count)
            .sum();
        assert!((total as f64 / n as f64 - 100.0).abs() < 3.0);
    }
}
