//! Seeded synthetic datasets used by the trend checks and the demo dataset
//! example.
//!
//! The anomaly suite draws noisy striped textures with a smooth mottle; each
//! test image carries a large low-contrast disk and a small high-contrast
//! speck. The segmentation suite draws noisy two-region images whose
//! foreground is a union of coarse disks with a fine ragged rim.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pyramid::ImageTensor;
use crate::tensorio::{self, DatasetManifest, ManifestEntry, Split, Tensor, TensorIoError};

#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    pub side: usize,
    pub noise: f32,
    pub stripe_amplitude: f32,
    pub blob_radius: f32,
    pub blob_contrast: f32,
    pub speck_side: usize,
    pub speck_contrast: f32,
    /// Amplitude of the smooth value-noise field.
    pub mottle: f32,
    /// Lattice spacing of the value-noise field in pixels.
    pub mottle_cell: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            side: 224,
            noise: 0.05,
            stripe_amplitude: 0.1,
            blob_radius: 24.0,
            blob_contrast: 0.1,
            speck_side: 8,
            speck_contrast: 0.35,
            mottle: 0.15,
            mottle_cell: 8,
        }
    }
}

/// Nominal and defective images with binary defect masks.
#[derive(Debug, Clone)]
pub struct AdSuite {
    pub train: Vec<ImageTensor>,
    pub test: Vec<ImageTensor>,
    pub masks: Vec<Vec<bool>>,
}

/// Bilinearly interpolated random lattice values in [-1, 1].
fn value_noise(rng: &mut ChaCha8Rng, n: usize, cell: usize) -> Vec<f32> {
    let cell = cell.max(1);
    let m = n / cell + 2;
    let lattice: Vec<f32> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let (gy, fy) = (y / cell, (y % cell) as f32 / cell as f32);
        for x in 0..n {
            let (gx, fx) = (x / cell, (x % cell) as f32 / cell as f32);
            let at = |a: usize, b: usize| lattice[a * m + b];
            let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
            let bottom = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn texture(rng: &mut ChaCha8Rng, p: &TextureParams) -> Vec<f32> {
    let n = p.side;
    let mottle = value_noise(rng, n, p.mottle_cell);
    let freq = 2.0 * std::f32::consts::PI / 12.0;
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let tilt: f32 = rng.gen_range(-0.15..0.15);
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f32, (i % n) as f32);
            let stripe = p.stripe_amplitude * ((x + tilt * y) * freq + phase).sin();
            let noise = rng.gen_range(-p.noise..p.noise);
            0.5 + stripe + noise + p.mottle * mottle[i]
        })
        .collect()
}

fn to_image(side: usize, data: Vec<f32>) -> ImageTensor {
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(side, side, 1, data).expect("synthetic image is valid")
}

pub fn ad_suite(seed: u64, train: usize, test: usize, p: &TextureParams) -> AdSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.side;
    let train_imgs = (0..train).map(|_| to_image(n, texture(&mut rng, p))).collect();
    let mut test_imgs = Vec::with_capacity(test);
    let mut masks = Vec::with_capacity(test);
    for _ in 0..test {
        let mut img = texture(&mut rng, p);
        let mut mask = vec![false; n * n];
        let margin = p.blob_radius + 2.0;
        let cy = rng.gen_range(margin..n as f32 - margin);
        let cx = rng.gen_range(margin..n as f32 - margin);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                if d2 <= p.blob_radius * p.blob_radius {
                    img[y * n + x] += p.blob_contrast;
                    mask[y * n + x] = true;
                }
            }
        }
        // Speck placed away from the blob: the first of a bounded number of
        // draws that clears it, else the farthest draw.
        let mut best = (f32::NEG_INFINITY, 0, 0);
        for _ in 0..256 {
            let sy = rng.gen_range(0..=n - p.speck_side);
            let sx = rng.gen_range(0..=n - p.speck_side);
            let half = p.speck_side as f32 / 2.0;
            let gap = ((sy as f32 + half - cy).powi(2) + (sx as f32 + half - cx).powi(2)).sqrt();
            if gap > best.0 {
                best = (gap, sy, sx);
            }
            if gap > p.blob_radius + 3.0 * p.speck_side as f32 {
                break;
            }
        }
        let (_, sy, sx) = best;
        for y in sy..sy + p.speck_side {
            for x in sx..sx + p.speck_side {
                img[y * n + x] += p.speck_contrast;
                mask[y * n + x] = true;
            }
        }
        test_imgs.push(to_image(n, img));
        masks.push(mask);
    }
    AdSuite {
        train: train_imgs,
        test: test_imgs,
        masks,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegParams {
    pub side: usize,
    pub noise: f32,
    pub contrast: f32,
    pub disks: usize,
    pub rim: f32,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            side: 64,
            noise: 0.4,
            contrast: 0.08,
            disks: 3,
            rim: 3.0,
        }
    }
}

/// Images with per-pixel labels (0 background, 1 foreground).
#[derive(Debug, Clone)]
pub struct SegSuite {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<Vec<u32>>,
}

pub fn seg_suite(seed: u64, count: usize, p: &SegParams) -> SegSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.side;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let disks: Vec<(f32, f32, f32, f32, f32)> = (0..p.disks)
            .map(|_| {
                let r = rng.gen_range(n as f32 * 0.12..n as f32 * 0.25);
                (
                    rng.gen_range(0.0..n as f32),
                    rng.gen_range(0.0..n as f32),
                    r,
                    rng.gen_range(3.0..7.0f32),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        let mut img = Vec::with_capacity(n * n);
        let mut lab = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let inside = disks.iter().any(|&(cy, cx, r, lobes, phase)| {
                    let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                    let angle = dy.atan2(dx);
                    let edge = r + p.rim * (lobes.round() * angle + phase).sin();
                    (dy * dy + dx * dx).sqrt() <= edge
                });
                let base = if inside { 0.5 + p.contrast } else { 0.5 - p.contrast };
                img.push(base + rng.gen_range(-p.noise..p.noise));
                lab.push(inside as u32);
            }
        }
        images.push(to_image(n, img));
        labels.push(lab);
    }
    SegSuite { images, labels }
}

fn write_image(path: &Path, img: &ImageTensor) -> Result<(), TensorIoError> {
    let t = Tensor::new(vec![img.height(), img.width(), img.channels()], img.data().to_vec())?;
    tensorio::write_tensor(path, &t)
}

fn write_mask(path: &Path, side: usize, labels: impl Iterator<Item = u8>) -> Result<(), TensorIoError> {
    tensorio::write_gray_png(path, side, side, labels.collect())
}

fn finish_manifest(dir: &Path, entries: Vec<ManifestEntry>) -> Result<PathBuf, TensorIoError> {
    let manifest = DatasetManifest {
        base_dir: dir.to_path_buf(),
        entries,
    };
    let path = dir.join("manifest.txt");
    tensorio::write_manifest(&path, &manifest)?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<(), TensorIoError> {
    fs::create_dir_all(dir).map_err(|source| TensorIoError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes the anomaly suite as `.mrft` images, PNG masks (255 = defect) and
/// `manifest.txt`; returns the manifest path.
pub fn write_ad_dataset(dir: &Path, suite: &AdSuite) -> Result<PathBuf, TensorIoError> {
    create_dir(dir)?;
    let mut entries = Vec::new();
    for (i, img) in suite.train.iter().enumerate() {
        let name = format!("train_{i:03}.mrft");
        write_image(&dir.join(&name), img)?;
        let mut e = ManifestEntry::new(name, Split::Train);
        e.label = Some(0);
        entries.push(e);
    }
    for (i, (img, mask)) in suite.test.iter().zip(&suite.masks).enumerate() {
        let name = format!("test_{i:03}.mrft");
        let mask_name = format!("test_{i:03}_mask.png");
        write_image(&dir.join(&name), img)?;
        write_mask(&dir.join(&mask_name), img.height(), mask.iter().map(|&d| if d { 255 } else { 0 }))?;
        let mut e = ManifestEntry::new(name, Split::Test);
        e.label = Some(1);
        e.mask_path = Some(mask_name.into());
        entries.push(e);
    }
    finish_manifest(dir, entries)
}

/// Writes the segmentation suite with the first `train` images in the train
/// split; label maps are PNGs holding class indices.
pub fn write_seg_dataset(dir: &Path, suite: &SegSuite, train: usize) -> Result<PathBuf, TensorIoError> {
    create_dir(dir)?;
    let mut entries = Vec::new();
    for (i, (img, labels)) in suite.images.iter().zip(&suite.labels).enumerate() {
        let name = format!("img_{i:03}.mrft");
        let mask_name = format!("img_{i:03}_labels.png");
        write_image(&dir.join(&name), img)?;
        write_mask(&dir.join(&mask_name), img.height(), labels.iter().map(|&l| l as u8))?;
        let split = if i < train { Split::Train } else { Split::Test };
        let mut e = ManifestEntry::new(name, split);
        e.mask_path = Some(mask_name.into());
        entries.push(e);
    }
    finish_manifest(dir, entries)
}
