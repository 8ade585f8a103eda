//! Evaluation metrics: mean IoU, depth RMSE and AU-PRO up to an FPR limit.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("ground truth contains no defect regions")]
    NoDefectRegions,
    #[error("ground truth contains no defect-free pixels")]
    NoNegatives,
    #[error("score map contains a non-finite value")]
    NonFiniteScore,
    #[error("FPR limit {0} must be in (0, 1]")]
    BadLimit(f64),
}

/// Confusion counts accumulated over any number of images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u32>,
    /// `counts[gt * classes + pred]`
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u32>) -> Self {
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    /// Pixels where either map carries the ignore label are skipped.
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::ShapeMismatch(pred.len(), gt.len()));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(p) == self.ignore || Some(g) == self.ignore {
                continue;
            }
            for label in [p, g] {
                if label as usize >= self.classes {
                    return Err(MetricsError::LabelOutOfRange {
                        label,
                        classes: self.classes,
                    });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both prediction and truth.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c * self.classes + c];
                let gt_total: u64 = self.counts[c * self.classes..(c + 1) * self.classes].iter().sum();
                let pred_total: u64 = (0..self.classes).map(|g| self.counts[g * self.classes + c]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU in percent.
    pub fn miou(&self) -> Result<f64, MetricsError> {
        let ious: Vec<f64> = self.ious().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(MetricsError::NoValidPixels);
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize, ignore: Option<u32>) -> Result<f64, MetricsError> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    cm.add(pred, gt)?;
    cm.miou()
}

/// Root mean squared error over pixels where `valid` is true (all when `None`).
pub fn rmse(pred: &[f32], gt: &[f32], valid: Option<&[bool]>) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(pred.len(), gt.len()));
    }
    if let Some(v) = valid {
        if v.len() != gt.len() {
            return Err(MetricsError::ShapeMismatch(v.len(), gt.len()));
        }
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let d = pred[i] as f64 - gt[i] as f64;
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok((sum / n as f64).sqrt())
}

/// 8-connected components of the nonzero pixels; 0 marks background,
/// regions are numbered from 1 in raster order of their first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; height * width];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// One image's scores and binary defect mask.
#[derive(Debug, Clone, Copy)]
pub struct ProSample<'a> {
    pub height: usize,
    pub width: usize,
    pub scores: &'a [f32],
    pub defect: &'a [bool],
}

/// PRO-vs-FPR curve with a leading (0, 0) anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps thresholds from the highest score down; one point per distinct
/// score, with all pixels at or above the threshold counted as positive.
/// Thresholds and FPR are pooled across samples, PRO averages every region
/// of every sample.
pub fn pro_curve(samples: &[ProSample<'_>]) -> Result<ProCurve, MetricsError> {
    struct Pixel {
        score: f32,
        region: u32,
    }
    let mut pixels = Vec::new();
    let mut region_sizes: Vec<u64> = vec![0];
    for s in samples {
        let n = s.height * s.width;
        if s.scores.len() != n {
            return Err(MetricsError::ShapeMismatch(s.scores.len(), n));
        }
        if s.defect.len() != n {
            return Err(MetricsError::ShapeMismatch(s.defect.len(), n));
        }
        if s.scores.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFiniteScore);
        }
        let (labels, count) = connected_components(s.defect, s.height, s.width);
        let base = region_sizes.len() as u32 - 1;
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&score, &l) in s.scores.iter().zip(&labels) {
            let region = if l == 0 { 0 } else { base + l };
            region_sizes[region as usize] += 1;
            pixels.push(Pixel { score, region });
        }
    }
    let regions = region_sizes.len() - 1;
    if regions == 0 {
        return Err(MetricsError::NoDefectRegions);
    }
    let negatives = region_sizes[0];
    if negatives == 0 {
        return Err(MetricsError::NoNegatives);
    }

    pixels.sort_by(|a, b| b.score.total_cmp(&a.score));
    let weights: Vec<f64> = region_sizes.iter().map(|&n| 1.0 / n as f64).collect();
    let mut points = vec![(0.0, 0.0)];
    let mut false_pos = 0u64;
    let mut overlap_sum = 0.0f64;
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].score;
        while i < pixels.len() && pixels[i].score == t {
            match pixels[i].region {
                0 => false_pos += 1,
                r => overlap_sum += weights[r as usize],
            }
            i += 1;
        }
        let fpr = false_pos as f64 / negatives as f64;
        let pro = (overlap_sum / regions as f64).min(1.0);
        points.push((fpr, pro));
    }
    Ok(ProCurve { points })
}

/// Trapezoidal area under a piecewise-linear curve from x = 0 to `limit`,
/// interpolating the crossing segment. Points must be sorted by x.
pub fn area_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) * 0.5;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) * 0.5;
            break;
        }
    }
    area
}

/// Normalized AU-PRO in [0,1] over one or more images.
pub fn au_pro(samples: &[ProSample<'_>], fpr_limit: f64) -> Result<f64, MetricsError> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricsError::BadLimit(fpr_limit));
    }
    let curve = pro_curve(samples)?;
    Ok((area_to_limit(&curve.points, fpr_limit) / fpr_limit).clamp(0.0, 1.0))
}
