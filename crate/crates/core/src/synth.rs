//! Synthetic segmentation data: smooth random blobs on a textured
//! background, with a ragged image boundary around a crisp mask.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_pgm, save_pgm, GrayImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    /// Max radial jitter (pixels) of the image boundary around the mask.
    pub boundary_noise: f64,
    /// Amplitude of background/foreground texture.
    pub texture: f64,
    /// Intensity gap between foreground and background.
    pub contrast: f64,
    /// Accepted foreground fraction range.
    pub fg_min: f64,
    pub fg_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 160,
            size: 64,
            blob_min: 1,
            blob_max: 3,
            boundary_noise: 1.5,
            texture: 0.12,
            contrast: 0.35,
            fg_min: 0.05,
            fg_max: 0.40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.size < 8 {
            return bad("synthetic size must be at least 8");
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max {
            return bad("need 1 <= blob_min <= blob_max");
        }
        if !(0.0 <= self.fg_min && self.fg_min < self.fg_max && self.fg_max <= 1.0) {
            return bad("need 0 <= fg_min < fg_max <= 1");
        }
        if !(self.boundary_noise >= 0.0 && self.texture >= 0.0 && self.contrast > 0.0) {
            return bad("boundary_noise and texture must be >= 0, contrast > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: GrayImage,
    /// Class ids (0 background, 1 foreground).
    pub mask: GrayImage,
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    /// (amplitude, phase) of harmonics 2 and 3.
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn random(size: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cy: rng.gen_range(0.2..0.8) * size,
            cx: rng.gen_range(0.2..0.8) * size,
            radius: rng.gen_range(0.08..0.2) * size,
            harmonics: [(rng.gen_range(0.0..0.25), rng.gen_range(0.0..TAU)), (rng.gen_range(0.0..0.15), rng.gen_range(0.0..TAU))],
        }
    }

    /// Signed distance-like margin: positive inside.
    fn margin(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        let [(a2, p2), (a3, p3)] = self.harmonics;
        let r = self.radius * (1.0 + a2 * (2.0 * theta + p2).cos() + a3 * (3.0 * theta + p3).cos());
        r - (dy * dy + dx * dx).sqrt()
    }
}

/// Bilinear upsampling of a random coarse grid: smooth values in `[-1, 1]`.
fn smooth_field(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = ((y as f64 + 0.5) * scale, (x as f64 + 0.5) * scale);
            let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| grid[r * (cells + 1) + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

const BACKGROUND: f64 = 0.3;
const MAX_ATTEMPTS: usize = 1000;

/// Sample `index` of a dataset; independent of `cfg.count`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let n = cfg.size;
    let size = n as f64;
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.gen_range(cfg.blob_min..=cfg.blob_max);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(size, &mut rng)).collect();
        let margin = |y: usize, x: usize| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            blobs.iter().map(|b| b.margin(py, px)).fold(f64::NEG_INFINITY, f64::max)
        };
        let mask: Vec<u8> = (0..n * n).map(|p| u8::from(margin(p / n, p % n) > 0.0)).collect();
        let fraction = mask.iter().map(|&m| f64::from(m)).sum::<f64>() / (n * n) as f64;
        if !(cfg.fg_min..=cfg.fg_max).contains(&fraction) {
            continue;
        }
        let coarse = smooth_field(n, 8, &mut rng);
        let fine: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pixels = (0..n * n)
            .map(|p| {
                let jitter = if cfg.boundary_noise > 0.0 { rng.gen_range(-cfg.boundary_noise..=cfg.boundary_noise) } else { 0.0 };
                let inside = margin(p / n, p % n) + jitter > 0.0;
                let base = BACKGROUND + if inside { cfg.contrast } else { 0.0 };
                let v = base + cfg.texture * (0.6 * coarse[p] + 0.4 * fine[p]);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        return Ok(Sample { image: GrayImage::new(n, n, pixels)?, mask: GrayImage::new(n, n, mask)? });
    }
    Err(Error::Config(format!(
        "no sample with foreground fraction in [{}, {}] after {MAX_ATTEMPTS} attempts",
        cfg.fg_min, cfg.fg_max
    )))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..count` cut into train/val/test by fraction; the
/// remainder after rounding goes to train.
pub fn split_indices(count: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::Config(format!("invalid split fractions val={val_fraction} test={test_fraction}")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    idx.shuffle(&mut rng);
    let n_val = (count as f64 * val_fraction).round() as usize;
    let n_test = (count as f64 * test_fraction).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut test = idx[n_val..n_val + n_test].to_vec();
    let mut train = idx[n_val + n_test..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub splits: Splits,
    /// Generator settings, absent for datasets not produced here.
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn synthesize(cfg: &SynthConfig, val_fraction: f64, test_fraction: f64) -> Result<Self> {
        let samples = generate_synthetic(cfg)?;
        let splits = split_indices(cfg.count, val_fraction, test_fraction, cfg.seed)?;
        let manifest = Manifest { seed: cfg.seed, count: cfg.count, size: cfg.size, splits, synth: Some(cfg.clone()) };
        Ok(Self { manifest, samples })
    }

    /// `images/NNNN.pgm`, `masks/NNNN.pgm`, `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for (i, s) in self.samples.iter().enumerate() {
            save_pgm(&dir.join("images").join(format!("{i:04}.pgm")), &s.image)?;
            save_pgm(&dir.join("masks").join(format!("{i:04}.pgm")), &s.mask)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let samples = (0..manifest.count)
            .map(|i| {
                let image = load_pgm(&dir.join("images").join(format!("{i:04}.pgm")))?;
                let mask = load_pgm(&dir.join("masks").join(format!("{i:04}.pgm")))?;
                if (image.width, image.height) != (mask.width, mask.height) {
                    return Err(Error::Data(format!("sample {i}: image and mask sizes differ")));
                }
                Ok(Sample { image, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        let all = manifest.splits.train.iter().chain(&manifest.splits.val).chain(&manifest.splits.test);
        if let Some(bad) = all.into_iter().find(|&&i| i >= manifest.count) {
            return Err(Error::Data(format!("split index {bad} out of range for {} samples", manifest.count)));
        }
        Ok(Self { manifest, samples })
    }

    /// Stack samples into `[B, 1, H, W]` images in `[0, 1]` and
    /// row-major class ids.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = self.samples.get(*indices.first().ok_or_else(|| Error::Data("empty batch".into()))?);
        let first = first.ok_or_else(|| Error::Data("batch index out of range".into()))?;
        let (h, w) = (first.image.height, first.image.width);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut target = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Data(format!("sample {i} out of range")))?;
            if (s.image.height, s.image.width) != (h, w) {
                return Err(Error::Shape(format!("sample {i} is {}x{}, batch is {h}x{w}", s.image.height, s.image.width)));
            }
            data.extend(s.image.to_unit());
            target.extend(s.mask.pixels.iter().map(|&c| usize::from(c)));
        }
        Ok((Tensor::new(&[indices.len(), 1, h, w], data)?, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, count: usize) -> SynthConfig {
        SynthConfig { seed, count, size: 32, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(&small(3, 4)).unwrap(), generate_synthetic(&small(3, 4)).unwrap());
        assert_ne!(generate_synthetic(&small(3, 4)).unwrap(), generate_synthetic(&small(4, 4)).unwrap());
        // A sample does not depend on how many are generated.
        assert_eq!(generate_synthetic(&small(3, 2)).unwrap()[..], generate_synthetic(&small(3, 4)).unwrap()[..2]);
    }

    #[test]
    fn noiseless_boundary_is_the_intensity_step() {
        let cfg = SynthConfig { boundary_noise: 0.0, texture: 0.0, count: 5, ..Default::default() };
        for s in generate_synthetic(&cfg).unwrap() {
            let threshold = ((BACKGROUND + cfg.contrast / 2.0) * 255.0) as u8;
            for (p, m) in s.image.pixels.iter().zip(&s.mask.pixels) {
                assert_eq!(u8::from(*p > threshold), *m);
            }
        }
    }

    #[test]
    fn foreground_fraction_in_range() {
        for s in generate_synthetic(&SynthConfig { count: 50, ..Default::default() }).unwrap() {
            let f = s.mask.pixels.iter().filter(|&&m| m == 1).count() as f64 / 4096.0;
            assert!((0.05..=0.40).contains(&f), "{f}");
        }
    }

    #[test]
    fn splits_partition() {
        let s = split_indices(160, 0.125, 0.125, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 20, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..160).collect::<Vec<_>>());
        assert_eq!(s, split_indices(160, 0.125, 0.125, 9).unwrap());
        assert!(split_indices(10, 0.6, 0.5, 0).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let ds = Dataset::synthesize(&small(1, 6), 0.2, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        assert!(dir.path().join("images/0005.pgm").exists());
        assert_eq!(Dataset::read_dir(dir.path()).unwrap(), ds);
        let (img, target) = ds.batch(&[0, 2]).unwrap();
        assert_eq!(img.shape(), &[2, 1, 32, 32]);
        assert_eq!(target.len(), 2048);
        assert!(ds.batch(&[]).is_err());
    }
}
