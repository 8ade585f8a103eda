//! Multi-resolution fusion: per-scale feature grids are bilinearly resampled
//! onto one target grid and concatenated along channels in ascending scale
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::encoder::FeatureMap;
use crate::pyramid::{resize_bilinear, ImageTensor, PyramidError};
use crate::tensorio::{read_tensor, write_tensor, Tensor, TensorIoError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("nothing to fuse")]
    Empty,
    #[error("scale {0} appears more than once")]
    DuplicateScale(f64),
    #[error("scale {0} is not a positive finite number")]
    BadScale(f64),
    #[error("layer grids differ: {0}x{1} vs {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error("feature covariance is degenerate (all features identical)")]
    Degenerate,
    #[error("invalid PCA request: {0}")]
    InvalidPca(String),
    #[error("invalid fused map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Resize(#[from] PyramidError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// Channel range occupied by one scale in a fused map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBlock {
    pub scale: f64,
    pub dim: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub total_dim: usize,
    pub blocks: Vec<ScaleBlock>,
    pub data: Vec<f32>,
    /// Per-scale global tokens, in block order.
    pub global_tokens: Option<Vec<(f64, Vec<f32>)>>,
}

impl FusedFeatureMap {
    /// Wraps a single map as a one-block fused map without resampling.
    pub fn from_single(scale: f64, map: &FeatureMap) -> Self {
        Self {
            grid_h: map.grid_h,
            grid_w: map.grid_w,
            total_dim: map.dim,
            blocks: vec![ScaleBlock {
                scale,
                dim: map.dim,
                offset: 0,
            }],
            data: map.data.clone(),
            global_tokens: map.global_token.clone().map(|t| vec![(scale, t)]),
        }
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        &self.data[(y * self.grid_w + x) * self.total_dim..][..self.total_dim]
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Channels `[offset, offset + dim)` of block `idx` as a plain grid.
    pub fn block(&self, idx: usize) -> Vec<f32> {
        let b = self.blocks[idx];
        self.data
            .chunks_exact(self.total_dim)
            .flat_map(|cell| cell[b.offset..b.offset + b.dim].iter().copied())
            .collect()
    }

    /// Summed length of the global tokens, 0 when absent.
    pub fn global_dim(&self) -> usize {
        self.global_tokens
            .as_ref()
            .map_or(0, |t| t.iter().map(|(_, v)| v.len()).sum())
    }

    /// Text describing the channel layout, one `scale= dim= offset=` line per block.
    pub fn layout_text(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let _ = writeln!(s, "scale={} dim={} offset={}", b.scale, b.dim, b.offset);
        }
        s
    }
}

fn validate_scale(scale: f64) -> Result<(), FusionError> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(FusionError::BadScale(scale))
    }
}

/// Concatenates per-layer maps of one scale along channels, ascending layer.
pub fn concat_layers(per_layer: &[FeatureMap]) -> Result<FeatureMap, FusionError> {
    let first = per_layer.first().ok_or(FusionError::Empty)?;
    if per_layer.len() == 1 {
        return Ok(first.clone());
    }
    for m in per_layer {
        if (m.grid_h, m.grid_w) != (first.grid_h, first.grid_w) {
            return Err(FusionError::GridMismatch(first.grid_h, first.grid_w, m.grid_h, m.grid_w));
        }
    }
    let mut order: Vec<&FeatureMap> = per_layer.iter().collect();
    order.sort_by_key(|m| m.layer_id);
    let dim: usize = order.iter().map(|m| m.dim).sum();
    let mut data = Vec::with_capacity(first.positions() * dim);
    for p in 0..first.positions() {
        for m in &order {
            data.extend_from_slice(&m.data[p * m.dim..][..m.dim]);
        }
    }
    let global_token = if order.iter().all(|m| m.global_token.is_some()) {
        Some(order.iter().flat_map(|m| m.global_token.clone().unwrap()).collect())
    } else {
        None
    };
    Ok(FeatureMap {
        grid_h: first.grid_h,
        grid_w: first.grid_w,
        dim,
        data,
        global_token,
        layer_id: order.last().unwrap().layer_id,
    })
}

/// Fuses `(scale, map)` pairs onto `target` (default: the largest input grid).
pub fn fuse(maps: &[(f64, FeatureMap)], target: Option<(usize, usize)>) -> Result<FusedFeatureMap, FusionError> {
    if maps.is_empty() {
        return Err(FusionError::Empty);
    }
    let mut order: Vec<&(f64, FeatureMap)> = maps.iter().collect();
    for (s, _) in &order {
        validate_scale(*s)?;
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = order.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(FusionError::DuplicateScale(w[0].0));
    }
    let (th, tw) = target.unwrap_or_else(|| {
        (
            order.iter().map(|(_, m)| m.grid_h).max().unwrap(),
            order.iter().map(|(_, m)| m.grid_w).max().unwrap(),
        )
    });
    if th == 0 || tw == 0 {
        return Err(FusionError::Resize(PyramidError::ZeroSize(th, tw)));
    }

    let resampled = order
        .iter()
        .map(|(_, m)| resize_bilinear(&m.data, m.grid_h, m.grid_w, m.dim, th, tw))
        .collect::<Result<Vec<_>, _>>()?;

    let mut blocks = Vec::with_capacity(order.len());
    let mut offset = 0;
    for (s, m) in &order {
        blocks.push(ScaleBlock {
            scale: *s,
            dim: m.dim,
            offset,
        });
        offset += m.dim;
    }
    let total_dim = offset;

    let mut data = Vec::with_capacity(th * tw * total_dim);
    for p in 0..th * tw {
        for ((_, m), r) in order.iter().zip(&resampled) {
            data.extend_from_slice(&r[p * m.dim..][..m.dim]);
        }
    }
    let global_tokens = if order.iter().all(|(_, m)| m.global_token.is_some()) {
        Some(
            order
                .iter()
                .map(|(s, m)| (*s, m.global_token.clone().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    Ok(FusedFeatureMap {
        grid_h: th,
        grid_w: tw,
        total_dim,
        blocks,
        data,
        global_tokens,
    })
}

/// Writes `path` (H'×W'×D), `<path>.blocks` and, when present, `<path>.cls` (k×d).
pub fn write_fused(path: impl AsRef<Path>, fused: &FusedFeatureMap) -> Result<(), FusionError> {
    let path = path.as_ref();
    write_tensor(
        path,
        &Tensor::new(vec![fused.grid_h, fused.grid_w, fused.total_dim], fused.data.clone())?,
    )?;
    let blocks = sidecar(path, "blocks");
    fs::write(&blocks, fused.layout_text()).map_err(|source| TensorIoError::Io { path: blocks, source })?;
    if let Some(tokens) = &fused.global_tokens {
        let flat: Vec<f32> = tokens.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let d = tokens[0].1.len();
        if tokens.iter().all(|(_, t)| t.len() == d) {
            write_tensor(sidecar(path, "cls"), &Tensor::new(vec![tokens.len(), d], flat)?)?;
        } else {
            write_tensor(sidecar(path, "cls"), &Tensor::new(vec![flat.len()], flat)?)?;
        }
    }
    Ok(())
}

pub fn read_fused(path: impl AsRef<Path>) -> Result<FusedFeatureMap, FusionError> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let &[gh, gw, total] = t.dims.as_slice() else {
        return Err(FusionError::Invalid(format!("expected 3-D tensor, found {:?}", t.dims)));
    };
    let blocks_path = sidecar(path, "blocks");
    let text = fs::read_to_string(&blocks_path).map_err(|source| TensorIoError::Io {
        path: blocks_path,
        source,
    })?;
    let mut blocks = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut scale = None;
        let mut dim = None;
        let mut offset = None;
        for tok in line.split_whitespace() {
            match tok.split_once('=') {
                Some(("scale", v)) => scale = v.parse::<f64>().ok(),
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("offset", v)) => offset = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        match (scale, dim, offset) {
            (Some(scale), Some(dim), Some(offset)) => blocks.push(ScaleBlock { scale, dim, offset }),
            _ => return Err(FusionError::Invalid(format!("bad block line {line:?}"))),
        }
    }
    let mut expect = 0;
    for b in &blocks {
        if b.offset != expect {
            return Err(FusionError::Invalid("block offsets do not partition the channels".into()));
        }
        expect += b.dim;
    }
    if expect != total {
        return Err(FusionError::Invalid(format!("blocks cover {expect} of {total} channels")));
    }
    let cls_path = sidecar(path, "cls");
    let global_tokens = if cls_path.exists() {
        let cls = read_tensor(&cls_path)?;
        let k = blocks.len();
        if cls.data.len() % k != 0 {
            return Err(FusionError::Invalid("global token file does not split per scale".into()));
        }
        let d = cls.data.len() / k;
        Some(
            blocks
                .iter()
                .zip(cls.data.chunks_exact(d))
                .map(|(b, t)| (b.scale, t.to_vec()))
                .collect(),
        )
    } else {
        None
    };
    Ok(FusedFeatureMap {
        grid_h: gh,
        grid_w: gw,
        total_dim: total,
        blocks,
        data: t.data,
        global_tokens,
    })
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Projects patch features onto their top principal directions.
///
/// Rows excluded by `foreground` are zero in the output. Each component is
/// min-max normalized to [0,1] over the included rows and its sign is fixed
/// so the largest-magnitude score is positive. Two components are padded
/// with a zero third channel.
pub fn pca_project(
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: &[f32],
    components: usize,
    foreground: Option<&[bool]>,
) -> Result<ImageTensor, FusionError> {
    if !(1..=3).contains(&components) {
        return Err(FusionError::InvalidPca(format!("components must be 1..=3, got {components}")));
    }
    if components > dim {
        return Err(FusionError::InvalidPca(format!("{components} components from {dim} channels")));
    }
    let n = grid_h * grid_w;
    if data.len() != n * dim {
        return Err(FusionError::InvalidPca("data length does not match grid".into()));
    }
    let rows: Vec<usize> = match foreground {
        Some(mask) if mask.len() != n => {
            return Err(FusionError::InvalidPca("mask does not match grid".into()));
        }
        Some(mask) => (0..n).filter(|&i| mask[i]).collect(),
        None => (0..n).collect(),
    };
    if rows.len() < components {
        return Err(FusionError::InvalidPca(format!(
            "{} foreground positions for {components} components",
            rows.len()
        )));
    }

    let m = rows.len();
    let mut mean = vec![0.0f64; dim];
    for &r in &rows {
        for (acc, &v) in mean.iter_mut().zip(&data[r * dim..][..dim]) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = DMatrix::from_fn(m, dim, |i, j| data[rows[i] * dim + j] as f64 - mean[j]);

    // Eigen-decompose whichever of XᵀX (dim×dim) or XXᵀ (m×m) is smaller.
    let scores: Vec<Vec<f64>> = if dim <= m {
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        check_spread(eig.eigenvalues[order[0]], &centered)?;
        order[..components]
            .iter()
            .map(|&k| {
                let v = eig.eigenvectors.column(k);
                (&centered * v).iter().copied().collect()
            })
            .collect()
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        check_spread(eig.eigenvalues[order[0]], &centered)?;
        order[..components]
            .iter()
            .map(|&k| {
                let sigma = eig.eigenvalues[k].max(0.0).sqrt();
                eig.eigenvectors.column(k).iter().map(|u| u * sigma).collect()
            })
            .collect()
    };

    let channels = if components == 1 { 1 } else { 3 };
    let mut out = vec![0.0f32; n * channels];
    for (c, comp) in scores.iter().enumerate() {
        let peak = comp.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        let lo = comp.iter().map(|v| v * sign).fold(f64::INFINITY, f64::min);
        let hi = comp.iter().map(|v| v * sign).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for (i, &r) in rows.iter().enumerate() {
            let v = if range > 0.0 { (comp[i] * sign - lo) / range } else { 0.0 };
            out[r * channels + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageTensor::new(grid_h, grid_w, channels, out)?)
}

pub fn pca_project_fused(
    fused: &FusedFeatureMap,
    components: usize,
    foreground: Option<&[bool]>,
) -> Result<ImageTensor, FusionError> {
    pca_project(fused.grid_h, fused.grid_w, fused.total_dim, &fused.data, components, foreground)
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn check_spread(top: f64, centered: &DMatrix<f64>) -> Result<(), FusionError> {
    let energy: f64 = centered.iter().map(|v| v * v).sum();
    if energy == 0.0 || top <= 1e-12 * energy.max(f64::MIN_POSITIVE) {
        return Err(FusionError::Degenerate);
    }
    Ok(())
}
