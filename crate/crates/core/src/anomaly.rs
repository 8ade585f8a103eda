//! Training-free anomaly detection with one memory bank per scale.
//!
//! Each scale keeps the patch features of nominal images. A query patch is
//! scored by its exact L2 distance to the nearest bank vector, and the
//! per-scale score grids are upsampled to image size and averaged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{Backbone, EncoderError, FeatureMap, Source};
use crate::fusion::{concat_layers, FusionError};
use crate::pyramid::{resize_bilinear, PyramidError, ScaleSet};
use crate::tensorio::{read_tensor, write_tensor, Tensor, TensorIoError};

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("no nominal features to build a memory bank from")]
    EmptyBank,
    #[error("coreset fraction {0} must be in (0, 1]")]
    BadFraction(f64),
    #[error("feature dim {found} does not match bank dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no score maps to fuse")]
    NoMaps,
    #[error("smoothing sigma {0} must be positive and finite")]
    BadSigma(f64),
    #[error("invalid memory bank: {0}")]
    InvalidBank(String),
    #[error("{0}")]
    Pipeline(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Resize(#[from] PyramidError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    L2,
}

/// Nominal patch vectors for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    scale: f64,
    dim: usize,
    vectors: Vec<f32>,
    coreset: Option<Vec<usize>>,
    normalization: Normalization,
    /// Vectors actually searched: the coreset rows, or everything.
    active: Vec<f32>,
}

impl MemoryBank {
    pub fn from_parts(
        scale: f64,
        dim: usize,
        vectors: Vec<f32>,
        coreset: Option<Vec<usize>>,
        normalization: Normalization,
    ) -> Result<Self, AnomalyError> {
        if dim == 0 || vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(AnomalyError::InvalidBank(format!(
                "{} values for dim {dim}",
                vectors.len()
            )));
        }
        let n = vectors.len() / dim;
        if let Some(idx) = &coreset {
            if idx.is_empty() || idx.windows(2).any(|w| w[1] <= w[0]) || idx.iter().any(|&i| i >= n) {
                return Err(AnomalyError::InvalidBank(
                    "coreset indices must be unique, sorted and within range".into(),
                ));
            }
        }
        let active = match &coreset {
            Some(idx) => idx
                .iter()
                .flat_map(|&i| vectors[i * dim..(i + 1) * dim].iter().copied())
                .collect(),
            None => vectors.clone(),
        };
        Ok(Self {
            scale,
            dim,
            vectors,
            coreset,
            normalization,
            active,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn coreset_indices(&self) -> Option<&[usize]> {
        self.coreset.as_deref()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Number of vectors searched at query time.
    pub fn active_len(&self) -> usize {
        self.active.len() / self.dim
    }
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Greedy farthest-point selection of `k` rows, starting from row 0.
///
/// Returns indices in selection order, all distinct. Ties go to the lowest
/// unselected index.
pub fn greedy_k_center(vectors: &[f32], dim: usize, k: usize) -> Vec<usize> {
    let n = vectors.len() / dim;
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut selected = Vec::with_capacity(k);
    selected.push(0);
    let mut taken = vec![false; n];
    taken[0] = true;
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(row(i), row(0))).collect();
    while selected.len() < k {
        // Already selected rows are skipped so duplicates cannot be re-picked.
        let mut best = usize::MAX;
        for i in 0..n {
            if !taken[i] && (best == usize::MAX || nearest[i] > nearest[best]) {
                best = i;
            }
        }
        taken[best] = true;
        selected.push(best);
        let center = row(best);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| {
                let nd = squared_distance(&vectors[i * dim..(i + 1) * dim], center);
                if nd < *d {
                    *d = nd;
                }
            });
    }
    selected
}

/// Pools every patch vector of the nominal maps into one bank.
pub fn build_bank(
    scale: f64,
    maps: &[FeatureMap],
    coreset_fraction: f64,
    normalization: Normalization,
) -> Result<MemoryBank, AnomalyError> {
    if !(coreset_fraction > 0.0 && coreset_fraction <= 1.0) {
        return Err(AnomalyError::BadFraction(coreset_fraction));
    }
    let first = maps.first().ok_or(AnomalyError::EmptyBank)?;
    let dim = first.dim;
    let mut vectors = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
    for m in maps {
        if m.dim != dim {
            return Err(AnomalyError::DimMismatch {
                expected: dim,
                found: m.dim,
            });
        }
        vectors.extend_from_slice(&m.data);
    }
    if vectors.is_empty() {
        return Err(AnomalyError::EmptyBank);
    }
    if normalization == Normalization::L2 {
        vectors.chunks_exact_mut(dim).for_each(l2_normalize);
    }
    let n = vectors.len() / dim;
    let coreset = if coreset_fraction < 1.0 {
        let k = ((coreset_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let mut idx = greedy_k_center(&vectors, dim, k);
        idx.sort_unstable();
        Some(idx)
    } else {
        None
    };
    MemoryBank::from_parts(scale, dim, vectors, coreset, normalization)
}

/// Per-pixel non-negative scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self, AnomalyError> {
        if height == 0 || width == 0 || scores.len() != height * width {
            return Err(AnomalyError::Pipeline(format!(
                "{} scores for a {height}x{width} map",
                scores.len()
            )));
        }
        Ok(Self { height, width, scores })
    }

    pub fn max(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }

    /// 8-bit grayscale rendering, `value/scale_max` clamped to [0,1].
    pub fn to_gray8(&self, scale_max: f32) -> Vec<u8> {
        self.scores
            .iter()
            .map(|&s| {
                if scale_max > 0.0 {
                    ((s / scale_max).clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Distance from each query vector to its nearest bank vector.
pub fn nearest_distances(bank: &MemoryBank, queries: &[f32]) -> Result<Vec<f32>, AnomalyError> {
    let dim = bank.dim;
    if !queries.len().is_multiple_of(dim) {
        return Err(AnomalyError::DimMismatch {
            expected: dim,
            found: queries.len(),
        });
    }
    let active = &bank.active;
    Ok(queries
        .par_chunks_exact(dim)
        .map(|q| {
            let mut normalized;
            let q = if bank.normalization == Normalization::L2 {
                normalized = q.to_vec();
                l2_normalize(&mut normalized);
                &normalized[..]
            } else {
                q
            };
            let mut best = f64::INFINITY;
            for m in active.chunks_exact(dim) {
                // Partial sums only grow, so stop once the running best is beaten.
                let mut acc = 0.0f64;
                for (a, b) in q.iter().zip(m) {
                    let d = *a as f64 - *b as f64;
                    acc += d * d;
                    if acc >= best {
                        break;
                    }
                }
                if acc < best {
                    best = acc;
                }
            }
            best.sqrt() as f32
        })
        .collect())
}

/// Nearest-neighbor score for every grid cell of `feats`.
pub fn score_map(bank: &MemoryBank, feats: &FeatureMap) -> Result<AnomalyMap, AnomalyError> {
    if feats.dim != bank.dim {
        return Err(AnomalyError::DimMismatch {
            expected: bank.dim,
            found: feats.dim,
        });
    }
    let scores = nearest_distances(bank, &feats.data)?;
    AnomalyMap::new(feats.grid_h, feats.grid_w, scores)
}

/// Mean of the per-scale maps after bilinear upsampling to `out_h × out_w`.
pub fn fuse_scores(per_scale: &[AnomalyMap], out_h: usize, out_w: usize) -> Result<AnomalyMap, AnomalyError> {
    if per_scale.is_empty() {
        return Err(AnomalyError::NoMaps);
    }
    let mut acc = vec![0.0f64; out_h * out_w];
    for m in per_scale {
        let up = resize_bilinear(&m.scores, m.height, m.width, 1, out_h, out_w)?;
        for (a, v) in acc.iter_mut().zip(up) {
            *a += v as f64;
        }
    }
    let k = per_scale.len() as f64;
    AnomalyMap::new(out_h, out_w, acc.into_iter().map(|v| (v / k) as f32).collect())
}

/// Separable Gaussian blur with clamped borders and a ±⌈4σ⌉ kernel.
pub fn gaussian_smooth(map: &AnomalyMap, sigma: f64) -> Result<AnomalyMap, AnomalyError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(AnomalyError::BadSigma(sigma));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (map.height as isize, map.width as isize);
    let mut tmp = vec![0.0f64; map.scores.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| k * map.scores[(y * w + (x + d).clamp(0, w - 1)) as usize] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; map.scores.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| k * tmp[((y + d).clamp(0, h - 1) * w + x) as usize])
                .sum::<f64>() as f32;
        }
    }
    AnomalyMap::new(map.height, map.width, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdConfig {
    pub scales: ScaleSet,
    pub coreset_fraction: f64,
    pub normalization: Normalization,
    pub smoothing_sigma: Option<f64>,
}

impl AdConfig {
    pub fn new(scales: ScaleSet) -> Self {
        Self {
            scales,
            coreset_fraction: 1.0,
            normalization: Normalization::None,
            smoothing_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdOutcome {
    pub map: AnomalyMap,
    /// Maximum of the fused pixel map.
    pub image_score: f32,
    pub per_scale: Vec<AnomalyMap>,
}

/// Patch features used for anomaly scoring at each scale (layers concatenated).
fn scale_maps(backbone: &Backbone, source: Source<'_>, scales: &ScaleSet) -> Result<Vec<(f64, FeatureMap)>, AnomalyError> {
    backbone
        .extract(source, scales)?
        .into_iter()
        .map(|sf| Ok((sf.scale, concat_layers(&sf.layers)?)))
        .collect()
}

/// One bank per scale from nominal sources.
pub fn build_banks(
    backbone: &Backbone,
    nominal: &[Source<'_>],
    config: &AdConfig,
) -> Result<Vec<MemoryBank>, AnomalyError> {
    if nominal.is_empty() {
        return Err(AnomalyError::EmptyBank);
    }
    let per_image = nominal
        .par_iter()
        .map(|s| scale_maps(backbone, *s, &config.scales))
        .collect::<Result<Vec<_>, _>>()?;
    config
        .scales
        .scales()
        .iter()
        .enumerate()
        .map(|(k, &scale)| {
            let maps: Vec<FeatureMap> = per_image.iter().map(|img| img[k].1.clone()).collect();
            build_bank(scale, &maps, config.coreset_fraction, config.normalization)
        })
        .collect()
}

/// Scores one test source against per-scale banks.
pub fn score_source(
    backbone: &Backbone,
    banks: &[MemoryBank],
    source: Source<'_>,
    config: &AdConfig,
) -> Result<AdOutcome, AnomalyError> {
    let maps = scale_maps(backbone, source, &config.scales)?;
    if maps.len() != banks.len() {
        return Err(AnomalyError::Pipeline(format!(
            "{} scales but {} banks",
            maps.len(),
            banks.len()
        )));
    }
    let per_scale = maps
        .iter()
        .zip(banks)
        .map(|((scale, m), bank)| {
            if *scale != bank.scale {
                return Err(AnomalyError::Pipeline(format!(
                    "bank for scale {} used at scale {scale}",
                    bank.scale
                )));
            }
            score_map(bank, m)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (h, w) = source.image_size()?;
    let mut map = fuse_scores(&per_scale, h, w)?;
    if let Some(sigma) = config.smoothing_sigma {
        map = gaussian_smooth(&map, sigma)?;
    }
    let image_score = map.max();
    Ok(AdOutcome {
        map,
        image_score,
        per_scale,
    })
}

/// Builds banks from `train` and scores every `test` source.
pub fn run_ad(
    backbone: &Backbone,
    train: &[Source<'_>],
    test: &[Source<'_>],
    config: &AdConfig,
) -> Result<Vec<AdOutcome>, AnomalyError> {
    let banks = build_banks(backbone, train, config)?;
    test.par_iter()
        .map(|s| score_source(backbone, &banks, *s, config))
        .collect()
}

/// Writes `bank_<idx>.mrft` (N×d) and `bank_<idx>.meta.txt` into `dir`.
pub fn save_bank(dir: impl AsRef<Path>, idx: usize, bank: &MemoryBank, extra: &BTreeMap<String, String>) -> Result<(), AnomalyError> {
    let dir = dir.as_ref();
    write_tensor(
        dir.join(format!("bank_{idx}.mrft")),
        &Tensor::new(vec![bank.len(), bank.dim], bank.vectors.clone())?,
    )?;
    let mut meta = BTreeMap::new();
    meta.insert("scale".to_string(), bank.scale.to_string());
    meta.insert("dim".to_string(), bank.dim.to_string());
    meta.insert(
        "normalization".to_string(),
        match bank.normalization {
            Normalization::None => "none",
            Normalization::L2 => "l2",
        }
        .to_string(),
    );
    meta.insert(
        "coreset".to_string(),
        bank.coreset
            .as_ref()
            .map(|c| c.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .unwrap_or_default(),
    );
    for (k, v) in extra {
        meta.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = dir.join(format!("bank_{idx}.meta.txt"));
    fs::write(&path, text).map_err(|source| TensorIoError::Io { path, source })?;
    Ok(())
}

pub fn load_bank(dir: impl AsRef<Path>, idx: usize) -> Result<(MemoryBank, BTreeMap<String, String>), AnomalyError> {
    let dir = dir.as_ref();
    let path = dir.join(format!("bank_{idx}.meta.txt"));
    let text = fs::read_to_string(&path).map_err(|source| TensorIoError::Io { path, source })?;
    let meta: BTreeMap<String, String> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let bad = |k: &str| AnomalyError::InvalidBank(format!("metadata field `{k}` missing or invalid"));
    let scale: f64 = meta.get("scale").and_then(|v| v.parse().ok()).ok_or_else(|| bad("scale"))?;
    let normalization = match meta.get("normalization").map(String::as_str) {
        Some("none") => Normalization::None,
        Some("l2") => Normalization::L2,
        _ => return Err(bad("normalization")),
    };
    let coreset = match meta.get("coreset").map(String::as_str) {
        None | Some("") => None,
        Some(list) => Some(
            list.split(',')
                .map(|i| i.parse::<usize>().map_err(|_| bad("coreset")))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let t = read_tensor(dir.join(format!("bank_{idx}.mrft")))?;
    let &[_, dim] = t.dims.as_slice() else {
        return Err(AnomalyError::InvalidBank(format!("bank tensor dims {:?}", t.dims)));
    };
    let bank = MemoryBank::from_parts(scale, dim, t.data, coreset, normalization)?;
    Ok((bank, meta))
}
