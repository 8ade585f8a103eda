//! Frozen patch-feature encoders.
//!
//! [`ToyEncoder`] is a closed-form stand-in for a ViT backbone: each patch's
//! pixels are projected by a fixed pseudo-random matrix, then layer `ℓ`
//! applies `ℓ` rounds of 3×3 mean mixing over the patch grid. Feature files
//! written by an external exporter are read through [`file_features`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use thiserror::Error;

use crate::pyramid::{build_pyramid, ImageTensor, PyramidError, ScaleSet};
use crate::tensorio::{read_raster, read_tensor, DatasetManifest, ManifestEntry, TensorIoError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image side {side} is not divisible by patch {patch}")]
    NotDivisible { side: usize, patch: usize },
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("manifest entry on line {line} has no feature file for scale {scale}")]
    MissingFeatureFile { line: usize, scale: f64 },
    #[error("feature file {path}: {message}")]
    ShapeMismatch { path: PathBuf, message: String },
    #[error("invalid feature map: {0}")]
    InvalidMap(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

/// Patch-feature grid `grid_h × grid_w × dim` with an optional global token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub global_token: Option<Vec<f32>>,
    pub layer_id: u32,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self, EncoderError> {
        let map = Self {
            grid_h,
            grid_w,
            dim,
            data,
            global_token: None,
            layer_id: 0,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn with_global_token(mut self, token: Vec<f32>) -> Result<Self, EncoderError> {
        self.global_token = Some(token);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.grid_h == 0 || self.grid_w == 0 || self.dim == 0 {
            return Err(EncoderError::InvalidMap(format!(
                "empty shape {}x{}x{}",
                self.grid_h, self.grid_w, self.dim
            )));
        }
        if self.data.len() != self.grid_h * self.grid_w * self.dim {
            return Err(EncoderError::InvalidMap(format!(
                "{} values for {}x{}x{}",
                self.data.len(),
                self.grid_h,
                self.grid_w,
                self.dim
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::InvalidMap("non-finite feature value".into()));
        }
        if let Some(t) = &self.global_token {
            if t.len() != self.dim || t.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::InvalidMap(format!(
                    "global token of length {} for dim {}",
                    t.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        &self.data[(y * self.grid_w + x) * self.dim..][..self.dim]
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Toy,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
    pub layers: Vec<u32>,
}

impl EncoderSpec {
    pub fn toy(patch: usize, dim: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Toy,
            patch,
            dim,
            seed,
            layers: vec![0],
        }
    }

    pub fn with_layers(mut self, layers: Vec<u32>) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch == 0 || self.dim == 0 {
            return Err(EncoderError::InvalidSpec("patch and dim must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(EncoderError::InvalidSpec("at least one layer is required".into()));
        }
        if self.layers.windows(2).any(|p| p[1] <= p[0]) {
            return Err(EncoderError::InvalidSpec(format!(
                "layers must be strictly increasing: {:?}",
                self.layers
            )));
        }
        Ok(())
    }
}

/// `toy:patch=14,dim=8,seed=7,layers=0+2` or `file:patch=14,dim=768,layers=12`.
impl FromStr for EncoderSpec {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let kind = match kind {
            "toy" => EncoderKind::Toy,
            "file" => EncoderKind::File,
            other => return Err(EncoderError::InvalidSpec(format!("unknown encoder kind {other:?}"))),
        };
        let mut spec = Self {
            kind,
            patch: 14,
            dim: 8,
            seed: 0,
            layers: vec![0],
        };
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| EncoderError::InvalidSpec(format!("expected key=value, found {kv:?}")))?;
            let bad = || EncoderError::InvalidSpec(format!("bad value for {k}: {v:?}"));
            match k {
                "patch" => spec.patch = v.parse().map_err(|_| bad())?,
                "dim" => spec.dim = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "layers" => {
                    spec.layers = v
                        .split('+')
                        .map(|l| l.parse::<u32>().map_err(|_| bad()))
                        .collect::<Result<_, _>>()?
                }
                _ => return Err(EncoderError::InvalidSpec(format!("unknown key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layers: Vec<String> = self.layers.iter().map(u32::to_string).collect();
        match self.kind {
            EncoderKind::Toy => write!(
                f,
                "toy:patch={},dim={},seed={},layers={}",
                self.patch,
                self.dim,
                self.seed,
                layers.join("+")
            ),
            EncoderKind::File => write!(
                f,
                "file:patch={},dim={},layers={}",
                self.patch,
                self.dim,
                layers.join("+")
            ),
        }
    }
}

/// The standard splitmix64 output function applied to a single state value.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn u64_to_unit(x: u64) -> f64 {
    x as f64 / 18_446_744_073_709_551_616.0
}

/// Projection coefficient `B(k, j)` in [-1, 1].
#[inline]
pub fn projection_coefficient(seed: u64, k: usize, j: usize) -> f64 {
    let idx = (k as u64).wrapping_mul(1_000_003).wrapping_add(j as u64);
    2.0 * u64_to_unit(splitmix64(seed ^ idx)) - 1.0
}

fn projection_matrix(seed: u64, dim: usize, inputs: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(dim * inputs);
    for k in 0..dim {
        for j in 0..inputs {
            m.push(projection_coefficient(seed, k, j));
        }
    }
    m
}

fn check_divisible(image: &ImageTensor, patch: usize) -> Result<(), EncoderError> {
    if patch == 0 {
        return Err(EncoderError::InvalidSpec("patch must be >= 1".into()));
    }
    for side in [image.height(), image.width()] {
        if side % patch != 0 {
            return Err(EncoderError::NotDivisible { side, patch });
        }
    }
    Ok(())
}

/// Layer-0 projection of every patch, in f64, row-major over the grid.
fn project_patches(image: &ImageTensor, patch: usize, dim: usize, proj: &[f64]) -> Vec<f64> {
    let (gh, gw, c) = (image.height() / patch, image.width() / patch, image.channels());
    let inputs = patch * patch * c;
    let mut raw = vec![0.0f64; inputs];
    let mut out = vec![0.0f64; gh * gw * dim];
    for u in 0..gh {
        for v in 0..gw {
            let mut j = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        raw[j] = image.at(u * patch + py, v * patch + px, ch) as f64;
                        j += 1;
                    }
                }
            }
            let dst = &mut out[(u * gw + v) * dim..][..dim];
            for (k, slot) in dst.iter_mut().enumerate() {
                let row = &proj[k * inputs..][..inputs];
                *slot = row.iter().zip(&raw).map(|(b, r)| b * r).sum();
            }
        }
    }
    out
}

/// One round of 3×3 mean filtering with clamped edges.
fn mix_once(src: &[f64], gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; src.len()];
    for y in 0..gh {
        for x in 0..gw {
            let dst = &mut out[(y * gw + x) * dim..][..dim];
            for dy in [-1isize, 0, 1] {
                let yy = (y as isize + dy).clamp(0, gh as isize - 1) as usize;
                for dx in [-1isize, 0, 1] {
                    let xx = (x as isize + dx).clamp(0, gw as isize - 1) as usize;
                    let s = &src[(yy * gw + xx) * dim..][..dim];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d /= 9.0;
            }
        }
    }
    out
}

fn finish_layers(base: Vec<f64>, gh: usize, gw: usize, dim: usize, layers: &[u32]) -> Vec<FeatureMap> {
    let mut out = Vec::with_capacity(layers.len());
    let mut current = base;
    let mut depth = 0u32;
    for &layer in layers {
        while depth < layer {
            current = mix_once(&current, gh, gw, dim);
            depth += 1;
        }
        let n = (gh * gw) as f64;
        let mut token = vec![0.0f64; dim];
        for cell in current.chunks_exact(dim) {
            for (t, v) in token.iter_mut().zip(cell) {
                *t += v;
            }
        }
        out.push(FeatureMap {
            grid_h: gh,
            grid_w: gw,
            dim,
            data: current.iter().map(|&v| v as f32).collect(),
            global_token: Some(token.iter().map(|&t| (t / n) as f32).collect()),
            layer_id: layer,
        });
    }
    out
}

/// Toy features for a single layer.
pub fn toy_features(
    image: &ImageTensor,
    patch: usize,
    dim: usize,
    seed: u64,
    layer: u32,
) -> Result<FeatureMap, EncoderError> {
    check_divisible(image, patch)?;
    if dim == 0 {
        return Err(EncoderError::InvalidSpec("dim must be >= 1".into()));
    }
    let proj = projection_matrix(seed, dim, patch * patch * image.channels());
    let base = project_patches(image, patch, dim, &proj);
    let (gh, gw) = (image.height() / patch, image.width() / patch);
    Ok(finish_layers(base, gh, gw, dim, &[layer]).remove(0))
}

/// Encoder abstraction over a frozen backbone.
pub trait Encoder: Send + Sync {
    fn patch(&self) -> usize;
    fn dim(&self) -> usize;
    fn layers(&self) -> &[u32];
    /// One feature map per configured layer, ascending.
    fn encode(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>, EncoderError>;
}

#[derive(Debug)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    gray: OnceLock<Vec<f64>>,
    rgb: OnceLock<Vec<f64>>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        if spec.kind != EncoderKind::Toy {
            return Err(EncoderError::InvalidSpec("not a toy encoder spec".into()));
        }
        Ok(Self {
            spec,
            gray: OnceLock::new(),
            rgb: OnceLock::new(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn projection(&self, channels: usize) -> &[f64] {
        let cell = if channels == 1 { &self.gray } else { &self.rgb };
        cell.get_or_init(|| {
            projection_matrix(self.spec.seed, self.spec.dim, self.spec.patch * self.spec.patch * channels)
        })
    }
}

impl Encoder for ToyEncoder {
    fn patch(&self) -> usize {
        self.spec.patch
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn layers(&self) -> &[u32] {
        &self.spec.layers
    }

    fn encode(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>, EncoderError> {
        check_divisible(image, self.spec.patch)?;
        let proj = self.projection(image.channels());
        let base = project_patches(image, self.spec.patch, self.spec.dim, proj);
        let (gh, gw) = (image.height() / self.spec.patch, image.width() / self.spec.patch);
        Ok(finish_layers(base, gh, gw, self.spec.dim, &self.spec.layers))
    }
}

/// Resolves the feature file of `entry` for `scale` and `layer`.
///
/// A `{layer}` placeholder in the declared path is replaced by the layer id,
/// which lets one manifest field address several exported layers.
pub fn feature_file_path(entry: &ManifestEntry, base_dir: &Path, scale: f64, layer: u32) -> Result<PathBuf, EncoderError> {
    let rel = entry
        .feature_path(scale)
        .ok_or(EncoderError::MissingFeatureFile {
            line: entry.line,
            scale,
        })?;
    let text = rel.to_string_lossy().replace("{layer}", &layer.to_string());
    Ok(base_dir.join(text))
}

/// Loads a precomputed feature map (plus the optional `<path>.cls` token).
pub fn file_features(
    entry: &ManifestEntry,
    base_dir: &Path,
    scale: f64,
    layer: u32,
    expected_dim: Option<usize>,
) -> Result<FeatureMap, EncoderError> {
    let path = feature_file_path(entry, base_dir, scale, layer)?;
    let tensor = read_tensor(&path)?;
    let &[gh, gw, dim] = tensor.dims.as_slice() else {
        return Err(EncoderError::ShapeMismatch {
            path,
            message: format!("expected a 3-D (grid_h, grid_w, dim) tensor, found dims {:?}", tensor.dims),
        });
    };
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(EncoderError::ShapeMismatch {
                path,
                message: format!("declared dim {d} but file has {dim}"),
            });
        }
    }
    let mut cls_path = path.clone().into_os_string();
    cls_path.push(".cls");
    let cls_path = PathBuf::from(cls_path);
    let global_token = if cls_path.exists() {
        let cls = read_tensor(&cls_path)?;
        if cls.dims != [dim] {
            return Err(EncoderError::ShapeMismatch {
                path: cls_path,
                message: format!("global token dims {:?}, expected [{dim}]", cls.dims),
            });
        }
        Some(cls.data)
    } else {
        None
    };
    let map = FeatureMap {
        grid_h: gh,
        grid_w: gw,
        dim,
        data: tensor.data,
        global_token,
        layer_id: layer,
    };
    map.validate()?;
    Ok(map)
}

/// Where a sample's pixels or features come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Image(&'a ImageTensor),
    Entry {
        entry: &'a ManifestEntry,
        manifest: &'a DatasetManifest,
    },
}

impl Source<'_> {
    /// Original image size, needed to place score maps back on pixels.
    pub fn image_size(&self) -> Result<(usize, usize), EncoderError> {
        match self {
            Source::Image(img) => Ok((img.height(), img.width())),
            Source::Entry { entry, manifest } => {
                let path = manifest.resolve(&entry.image_path);
                if path.extension().is_some_and(|e| e == "mrft") {
                    let (h, w, _, _) = read_raster(&path)?;
                    Ok((h, w))
                } else {
                    let (w, h) = image::image_dimensions(&path).map_err(|e| {
                        TensorIoError::Image {
                            path: path.clone(),
                            message: e.to_string(),
                        }
                    })?;
                    Ok((h as usize, w as usize))
                }
            }
        }
    }

    pub fn load_image(&self) -> Result<ImageTensor, EncoderError> {
        match self {
            Source::Image(img) => Ok((*img).clone()),
            Source::Entry { entry, manifest } => load_image(manifest.resolve(&entry.image_path)),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor, EncoderError> {
    let (h, w, c, data) = read_raster(path)?;
    Ok(ImageTensor::new(h, w, c, data)?)
}

/// Feature maps for every configured layer at one scale.
#[derive(Debug, Clone)]
pub struct ScaleFeatures {
    pub scale: f64,
    pub layers: Vec<FeatureMap>,
}

/// A frozen backbone run across a scale set.
#[derive(Debug)]
pub enum Backbone {
    Toy(ToyEncoder),
    File(EncoderSpec),
}

impl Backbone {
    pub fn from_spec(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        match spec.kind {
            EncoderKind::Toy => Ok(Backbone::Toy(ToyEncoder::new(spec)?)),
            EncoderKind::File => Ok(Backbone::File(spec)),
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        match self {
            Backbone::Toy(t) => t.spec(),
            Backbone::File(s) => s,
        }
    }

    pub fn extract(&self, source: Source<'_>, scales: &ScaleSet) -> Result<Vec<ScaleFeatures>, EncoderError> {
        match self {
            Backbone::Toy(enc) => {
                let image = source.load_image()?;
                let pyramid = build_pyramid(&image, scales, enc.patch())?;
                scales
                    .scales()
                    .iter()
                    .zip(&pyramid)
                    .map(|(&scale, img)| {
                        Ok(ScaleFeatures {
                            scale,
                            layers: enc.encode(img)?,
                        })
                    })
                    .collect()
            }
            Backbone::File(spec) => {
                let Source::Entry { entry, manifest } = source else {
                    return Err(EncoderError::InvalidSpec(
                        "file encoder needs manifest entries, not raw images".into(),
                    ));
                };
                scales
                    .scales()
                    .iter()
                    .map(|&scale| {
                        let layers = spec
                            .layers
                            .iter()
                            .map(|&l| file_features(entry, &manifest.base_dir, scale, l, Some(spec.dim)))
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok(ScaleFeatures { scale, layers })
                    })
                    .collect()
            }
        }
    }
}
