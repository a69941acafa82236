//! Count-labeled image data: synthetic generation, manifests, splits,
//! normalization and augmentation.

mod manifest;
mod synth;

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Rng, Tensor};
use crate::error::{Error, Result};

pub use image::RgbImage;
pub use manifest::{dataset_stats, load_manifest, parse_manifest, DatasetStats, Manifest, Record};
pub use synth::{
    dataset_sample, generate_clustered_sample, generate_synthetic_sample, write_synthetic_dataset, SynthConfig,
    SynthSample, SYNTH_STREAM,
};

/// One image with its count, stored CHW in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub count: f64,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, count: f64, height: usize, width: usize, image: Vec<f32>) -> Result<Self> {
        if !(count.is_finite() && count >= 0.0) {
            return Err(Error::Data(format!("count {count} must be non-negative")));
        }
        if image.len() != 3 * height * width || image.is_empty() {
            return Err(Error::Data(format!(
                "{} values for a 3x{height}x{width} image",
                image.len()
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image has non-finite values".into()));
        }
        Ok(Self {
            id: id.into(),
            count,
            height,
            width,
            image,
        })
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.image.chunks_mut(self.width) {
            row.reverse();
        }
    }
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize to `[height, width]`, then `v / 127.5 − 1`, CHW output.
pub fn resize_normalize(img: &RgbImage, target: [usize; 2]) -> Result<Vec<f32>> {
    let [th, tw] = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid(
            "resize_normalize",
            format!("target {th}x{tw} has a zero extent"),
        ));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("resize_normalize", "empty image"));
    }
    // Resampling runs on v / 255, the range the float filters clamp to.
    let raw: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb(p.0.map(|v| v as f32 / 255.0))
    });
    let resized = if (img.height() as usize, img.width() as usize) == (th, tw) {
        raw
    } else {
        imageops::resize(&raw, tw as u32, th as u32, FilterType::Triangle)
    };
    let plane = th * tw;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] * 2.0 - 1.0;
        }
    }
    Ok(out)
}

/// Bernoulli(0.5) draw deciding a horizontal flip.
pub fn flip_decision(rng: &mut Rng) -> bool {
    rng.random_bool(0.5)
}

/// Random horizontal mirror with probability 0.5; the count is untouched.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    let mut out = sample.clone();
    if flip_decision(rng) {
        out.flip_horizontal();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 assignment by a 64-bit FNV-1a hash of the sample id.
    pub fn of(id: &str) -> Split {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in id.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        match h % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?}; expected train, val or test"
            ))),
        }
    }
}

/// In-memory images of one split at the network input size.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Option<Split>, size: [usize; 2]) -> Result<Self> {
        let samples = manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| Split::of(&r.path) == s))
            .map(|r| {
                let img = load_png(&manifest.resolve(r))?;
                Sample::new(r.path.clone(), r.count, size[0], size[1], resize_normalize(&img, size)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.count).collect()
    }

    /// Stacks the given samples into (B, 3, H, W), mirroring where `flips`
    /// says so. Returns the batch and its counts.
    pub fn batch<T: Real>(&self, indices: &[usize], flips: Option<&[bool]>) -> Result<(Tensor<T>, Vec<f64>)> {
        let first = indices
            .first()
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut counts = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            if (s.height, s.width) != (h, w) {
                return Err(Error::Data(format!(
                    "{} is {}x{}, batch is {h}x{w}",
                    s.id, s.height, s.width
                )));
            }
            let flip = flips.is_some_and(|f| f[k]);
            for row in s.image.chunks(w) {
                if flip {
                    data.extend(row.iter().rev().map(|&v| T::c(v as f64)));
                } else {
                    data.extend(row.iter().map(|&v| T::c(v as f64)));
                }
            }
            counts.push(s.count);
        }
        Ok((Tensor::new(&[indices.len(), 3, h, w], data)?, counts))
    }
}
