//! Image pyramids and corner-aligned bilinear resampling.
//!
//! The same resampler is used to shrink images into the pyramid and to
//! enlarge feature and score grids back onto a common grid. Output index
//! `i` of an axis resized from `n` to `m` samples source coordinate
//! `i·(n−1)/(m−1)` (or 0 when `m == 1`), so resizing to the same shape is
//! an exact identity.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PyramidError {
    #[error("resize target {0}x{1} has a zero side")]
    ZeroSize(usize, usize),
    #[error("source buffer of length {len} does not match {h}x{w}x{c}")]
    BadSource { len: usize, h: usize, w: usize, c: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid scale set: {0}")]
    InvalidScales(String),
    #[error("patch size must be >= 1")]
    ZeroPatch,
    #[error("scale {scale} maps side {side} to {target} pixels, below one patch of {patch}")]
    SideBelowPatch {
        scale: f64,
        side: usize,
        target: usize,
        patch: usize,
    },
}

/// Resizes a row-major `h×w×c` buffer to `out_h×out_w×c`.
pub fn resize_bilinear(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>, PyramidError> {
    if out_h == 0 || out_w == 0 {
        return Err(PyramidError::ZeroSize(out_h, out_w));
    }
    if h == 0 || w == 0 || c == 0 || src.len() != h * w * c {
        return Err(PyramidError::BadSource {
            len: src.len(),
            h,
            w,
            c,
        });
    }
    if h == out_h && w == out_w {
        return Ok(src.to_vec());
    }

    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for (ch, slot) in dst.iter_mut().enumerate() {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = lerp(p(y0, x0), p(y0, x1), fx);
                let bottom = lerp(p(y1, x0), p(y1, x1), fx);
                *slot = lerp(top, bottom, fy) as f32;
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// (lower index, upper index, fraction) for each output sample on one axis.
fn axis_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    if m == 1 || n == 1 {
        return vec![(0, 0, 0.0); m];
    }
    let den = (m - 1) as u64;
    (0..m as u64)
        .map(|i| {
            let num = i * (n as u64 - 1);
            let lo = (num / den) as usize;
            let rem = num % den;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, rem as f64 / den as f64)
        })
        .collect()
}

/// H×W×C raster with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, PyramidError> {
        if height == 0 || width == 0 {
            return Err(PyramidError::InvalidImage(format!(
                "sides must be >= 1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(PyramidError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(PyramidError::InvalidImage(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(PyramidError::InvalidImage(format!(
                "value {v} outside [0,1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, PyramidError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<Self, PyramidError> {
        let data = resize_bilinear(&self.data, self.height, self.width, self.channels, out_h, out_w)?;
        // Convex combinations of [0,1] values stay in [0,1].
        Ok(Self {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    RelativeFactor,
    AbsoluteSide,
}

/// Strictly increasing set of positive scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    scales: Vec<f64>,
    mode: ScaleMode,
}

impl ScaleSet {
    pub fn new(scales: Vec<f64>, mode: ScaleMode) -> Result<Self, PyramidError> {
        if scales.is_empty() {
            return Err(PyramidError::InvalidScales("at least one scale is required".into()));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(PyramidError::InvalidScales(format!("scale {s} is not positive")));
        }
        if scales.windows(2).any(|p| p[1] <= p[0]) {
            return Err(PyramidError::InvalidScales(format!(
                "scales must be strictly increasing: {scales:?}"
            )));
        }
        if mode == ScaleMode::AbsoluteSide && scales.iter().any(|s| s.fract() != 0.0) {
            return Err(PyramidError::InvalidScales(
                "absolute sides must be whole pixels".into(),
            ));
        }
        Ok(Self { scales, mode })
    }

    pub fn relative(scales: &[f64]) -> Result<Self, PyramidError> {
        Self::new(scales.to_vec(), ScaleMode::RelativeFactor)
    }

    pub fn absolute(sides: &[usize]) -> Result<Self, PyramidError> {
        Self::new(sides.iter().map(|&s| s as f64).collect(), ScaleMode::AbsoluteSide)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Snapped (height, width) for `scale` applied to an `h×w` image.
    pub fn target_size(&self, scale: f64, h: usize, w: usize, patch: usize) -> Result<(usize, usize), PyramidError> {
        if patch == 0 {
            return Err(PyramidError::ZeroPatch);
        }
        let (th, tw) = match self.mode {
            ScaleMode::RelativeFactor => (
                (h as f64 * scale).round() as usize,
                (w as f64 * scale).round() as usize,
            ),
            ScaleMode::AbsoluteSide => (scale as usize, scale as usize),
        };
        Ok((
            snap_side(th, scale, h, patch)?,
            snap_side(tw, scale, w, patch)?,
        ))
    }
}

/// Nearest multiple of `patch`, halves rounding up.
fn snap_side(target: usize, scale: f64, side: usize, patch: usize) -> Result<usize, PyramidError> {
    if target < patch {
        return Err(PyramidError::SideBelowPatch {
            scale,
            side,
            target,
            patch,
        });
    }
    Ok((2 * target + patch) / (2 * patch) * patch)
}

impl fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let suffix = match self.mode {
            ScaleMode::RelativeFactor => "",
            ScaleMode::AbsoluteSide => "px",
        };
        let parts: Vec<String> = self.scales.iter().map(|s| format!("{s}{suffix}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `0.5,1.0,1.5` (relative factors) or `266px,518px` (absolute sides).
impl FromStr for ScaleSet {
    type Err = PyramidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let absolute = parts.iter().filter(|p| p.ends_with("px")).count();
        if absolute != 0 && absolute != parts.len() {
            return Err(PyramidError::InvalidScales(
                "cannot mix relative factors and absolute sides".into(),
            ));
        }
        let mode = if absolute > 0 {
            ScaleMode::AbsoluteSide
        } else {
            ScaleMode::RelativeFactor
        };
        let scales = parts
            .iter()
            .map(|p| {
                p.trim_end_matches("px")
                    .parse::<f64>()
                    .map_err(|_| PyramidError::InvalidScales(format!("cannot parse {p:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(scales, mode)
    }
}

/// One resized image per scale, in scale order.
pub fn build_pyramid(image: &ImageTensor, scales: &ScaleSet, patch: usize) -> Result<Vec<ImageTensor>, PyramidError> {
    scales
        .scales()
        .iter()
        .map(|&s| {
            let (h, w) = scales.target_size(s, image.height(), image.width(), patch)?;
            image.resized(h, w)
        })
        .collect()
}
