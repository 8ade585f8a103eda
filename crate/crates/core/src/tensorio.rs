//! Binary tensor files and line-oriented dataset manifests.
//!
//! Tensor file layout (little-endian, no padding):
//!
//! | field      | size            |
//! |------------|-----------------|
//! | magic      | 4 bytes `MRFT`  |
//! | version    | u32             |
//! | dtype_code | u8 (0 = f32)    |
//! | ndim       | u8              |
//! | dims       | ndim × u64      |
//! | payload    | Π dims × f32    |

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MRFT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"MRFT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingData(u64),
    #[error("tensor must have at least one dimension and every dimension >= 1 (dims {0:?})")]
    EmptyTensor(Vec<usize>),
    #[error("tensor has {0} dimensions, the format allows at most 255")]
    TooManyDims(usize),
    #[error("element count of dims {0:?} overflows 64 bits")]
    Overflow(Vec<usize>),
    #[error("data length {data} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, data: usize },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: unknown split {value:?} (expected train or test)")]
    UnknownSplit { line: usize, value: String },
    #[error("manifest line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A dense row-major f32 tensor, the unit of file interchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorIoError> {
        let count = element_count(&dims)?;
        if count != data.len() as u64 {
            return Err(TensorIoError::LengthMismatch {
                dims,
                data: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorIoError> {
        let count = element_count(&dims)? as usize;
        Ok(Self {
            dims,
            data: vec![0.0; count],
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }
}

fn element_count(dims: &[usize]) -> Result<u64, TensorIoError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorIoError::EmptyTensor(dims.to_vec()));
    }
    if dims.len() > u8::MAX as usize {
        return Err(TensorIoError::TooManyDims(dims.len()));
    }
    dims.iter().try_fold(1u64, |acc, &d| {
        acc.checked_mul(d as u64)
            .ok_or_else(|| TensorIoError::Overflow(dims.to_vec()))
    })
}

/// Serializes `tensor` into the tensor file byte layout.
pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>, TensorIoError> {
    let count = element_count(&tensor.dims)?;
    if count != tensor.data.len() as u64 {
        return Err(TensorIoError::LengthMismatch {
            dims: tensor.dims.clone(),
            data: tensor.data.len(),
        });
    }
    let mut out = Vec::with_capacity(10 + 8 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorIoError> {
    let mut cursor = bytes;
    let mut take = |n: usize, expected: u64| -> Result<&[u8], TensorIoError> {
        if cursor.len() < n {
            return Err(TensorIoError::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };

    let magic: [u8; 4] = take(4, 10)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(take(4, 10)?.try_into().unwrap());
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let dtype = take(1, 10)?[0];
    if dtype != DTYPE_F32 {
        return Err(TensorIoError::UnsupportedDtype(dtype));
    }
    let ndim = take(1, 10)?[0] as usize;
    let header_len = 10 + 8 * ndim as u64;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(8, header_len)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| TensorIoError::Overflow(vec![usize::MAX]))?);
    }
    let count = element_count(&dims)?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| TensorIoError::Overflow(dims.clone()))?;
    let expected = header_len + payload_len;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(TensorIoError::Truncated {
            expected,
            found: actual,
        });
    }
    if actual > expected {
        return Err(TensorIoError::TrailingData(actual - expected));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_tensor(&bytes)
}

/// Loads a raster as (height, width, channels, values in [0,1]).
///
/// `.mrft` files are read as H×W or H×W×C tensors with values taken as-is;
/// anything else goes through the PNG decoder and is scaled by 1/255.
pub fn read_raster(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>), TensorIoError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "mrft") {
        let t = read_tensor(path)?;
        return match *t.dims.as_slice() {
            [h, w] => Ok((h, w, 1, t.data)),
            [h, w, c] => Ok((h, w, c, t.data)),
            _ => Err(TensorIoError::Image {
                path: path.to_path_buf(),
                message: format!("expected a 2-D or 3-D tensor, found dims {:?}", t.dims),
            }),
        };
    }
    let img = image::open(path).map_err(|e| TensorIoError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Ok((h, w, 3, data))
    } else {
        let gray = img.to_luma8();
        let data = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Ok((h, w, 1, data))
    }
}

/// Reads an integer label map. PNG pixels are used verbatim (0..=255);
/// `.mrft` values are rounded to the nearest integer.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>), TensorIoError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "mrft") {
        let (h, w, c, data) = read_raster(path)?;
        if c != 1 {
            return Err(TensorIoError::Image {
                path: path.to_path_buf(),
                message: format!("label map must have one channel, found {c}"),
            });
        }
        return Ok((h, w, data.iter().map(|v| v.round().max(0.0) as u32).collect()));
    }
    let img = image::open(path).map_err(|e| TensorIoError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok((h, w, gray.as_raw().iter().map(|&v| v as u32).collect()))
}

pub fn write_gray_png(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels).ok_or_else(|| {
        TensorIoError::Image {
            path: path.to_path_buf(),
            message: "pixel buffer does not match dimensions".into(),
        }
    })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TensorIoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn write_rgb_png(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels).ok_or_else(|| {
        TensorIoError::Image {
            path: path.to_path_buf(),
            message: "pixel buffer does not match dimensions".into(),
        }
    })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TensorIoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub split: Split,
    pub label: Option<i64>,
    pub mask_path: Option<PathBuf>,
    /// Per-scale feature files, keyed by the scale text as written.
    pub feature_paths: BTreeMap<String, PathBuf>,
    /// 1-based source line, 0 for entries built in memory.
    pub line: usize,
}

impl ManifestEntry {
    pub fn new(image_path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            image_path: image_path.into(),
            split,
            label: None,
            mask_path: None,
            feature_paths: BTreeMap::new(),
            line: 0,
        }
    }

    /// Feature file declared for `scale`, compared numerically.
    pub fn feature_path(&self, scale: f64) -> Option<&Path> {
        self.feature_paths
            .iter()
            .find(|(k, _)| k.parse::<f64>().is_ok_and(|s| s == scale))
            .map(|(_, p)| p.as_path())
    }

    fn to_line(&self) -> String {
        let mut line = format!(
            "image={} split={}",
            self.image_path.display(),
            self.split.as_str()
        );
        if let Some(label) = self.label {
            line.push_str(&format!(" label={label}"));
        }
        if let Some(mask) = &self.mask_path {
            line.push_str(&format!(" mask={}", mask.display()));
        }
        for (scale, path) in &self.feature_paths {
            line.push_str(&format!(" feat:{scale}={}", path.display()));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory every entry path is relative to.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Every path the manifest references, resolved against `base_dir`.
    pub fn referenced_paths(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push(self.resolve(&e.image_path));
            if let Some(m) = &e.mask_path {
                out.push(self.resolve(m));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }
}

fn relative_path(line: usize, value: &str) -> Result<PathBuf, TensorIoError> {
    if value.is_empty() {
        return Err(TensorIoError::Parse {
            line,
            message: "empty path".into(),
        });
    }
    let p = PathBuf::from(value);
    if p.is_absolute() {
        return Err(TensorIoError::Parse {
            line,
            message: format!("path {value:?} must be relative to the manifest directory"),
        });
    }
    Ok(p)
}

/// Parses manifest text; `base_dir` is recorded for path resolution.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest, TensorIoError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut image = None;
        let mut split = None;
        let mut label = None;
        let mut mask = None;
        let mut feats = BTreeMap::new();
        for token in content.split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| TensorIoError::Parse {
                line,
                message: format!("expected key=value, found {token:?}"),
            })?;
            let dup = |k: &str| TensorIoError::Parse {
                line,
                message: format!("duplicate field `{k}`"),
            };
            match key {
                "image" => {
                    if image.replace(relative_path(line, value)?).is_some() {
                        return Err(dup(key));
                    }
                }
                "split" => {
                    let s = match value {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => {
                            return Err(TensorIoError::UnknownSplit {
                                line,
                                value: other.to_string(),
                            })
                        }
                    };
                    if split.replace(s).is_some() {
                        return Err(dup(key));
                    }
                }
                "label" => {
                    let v = value.parse::<i64>().map_err(|_| TensorIoError::Parse {
                        line,
                        message: format!("label {value:?} is not an integer"),
                    })?;
                    if label.replace(v).is_some() {
                        return Err(dup(key));
                    }
                }
                "mask" => {
                    if mask.replace(relative_path(line, value)?).is_some() {
                        return Err(dup(key));
                    }
                }
                _ => {
                    let Some(scale) = key.strip_prefix("feat:") else {
                        return Err(TensorIoError::Parse {
                            line,
                            message: format!("unknown field `{key}`"),
                        });
                    };
                    match scale.parse::<f64>() {
                        Ok(s) if s.is_finite() && s > 0.0 => {}
                        _ => {
                            return Err(TensorIoError::Parse {
                                line,
                                message: format!("feature scale {scale:?} is not a positive number"),
                            })
                        }
                    }
                    if feats
                        .insert(scale.to_string(), relative_path(line, value)?)
                        .is_some()
                    {
                        return Err(dup(key));
                    }
                }
            }
        }
        let image_path = image.ok_or(TensorIoError::MissingField {
            line,
            field: "image",
        })?;
        let split = split.ok_or(TensorIoError::MissingField {
            line,
            field: "split",
        })?;
        entries.push(ManifestEntry {
            image_path,
            split,
            label,
            mask_path: mask,
            feature_paths: feats,
            line,
        });
    }
    Ok(DatasetManifest {
        base_dir: base_dir.to_path_buf(),
        entries,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, TensorIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(io_err(path))
}
