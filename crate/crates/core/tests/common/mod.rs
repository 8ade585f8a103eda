//! Reference implementations used as test oracles.
//!
//! Each one is written from the definition, favoring the most direct
//! (usually slowest) formulation over anything the library does.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Reference splitmix64 finalizer on `x` (one step of the generator).
pub fn splitmix64_ref(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Corner-aligned bilinear resize evaluated pointwise:
/// output sample i maps to source coordinate i·(n−1)/(m−1).
pub fn bilinear_ref(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize, m: usize| -> f64 {
        if m == 1 {
            0.0
        } else {
            i as f64 * (n as f64 - 1.0) / (m as f64 - 1.0)
        }
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let sy = coord(oy, h, oh);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = coord(ox, w, ow);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out.push(v);
            }
        }
    }
    out
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Exhaustive nearest-neighbor distances, no early exit.
pub fn nn_ref(bank: &[f32], queries: &[f32], dim: usize) -> Vec<f64> {
    queries
        .chunks(dim)
        .map(|q| {
            let mut best = f64::INFINITY;
            for m in bank.chunks(dim) {
                let d = dist2(q, m);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Farthest-point selection recomputing every distance from scratch at
/// each step.
pub fn k_center_ref(vectors: &[f32], dim: usize, k: usize) -> Vec<usize> {
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut chosen = vec![0usize];
    while chosen.len() < k.min(n) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let d = chosen
                .iter()
                .map(|&c| dist2(row(i), row(c)))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// 8-connected components by recursive-free flood fill; labels from 1.
pub fn components_ref(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut label = vec![0usize; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        let mut frontier = vec![start];
        while let Some(p) = frontier.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && label[q] == 0 {
                        label[q] = count;
                        frontier.push(q);
                    }
                }
            }
        }
    }
    (label, count)
}

/// PRO/FPR pair at threshold `t`, recounting every pixel of every image.
fn pro_at(maps: &[(usize, usize, Vec<f32>, Vec<bool>)], t: f32) -> (f64, f64) {
    let mut fp = 0usize;
    let mut neg = 0usize;
    let mut overlaps = Vec::new();
    for (h, w, scores, mask) in maps {
        let (labels, count) = components_ref(mask, *h, *w);
        for i in 0..h * w {
            if !mask[i] {
                neg += 1;
                if scores[i] >= t {
                    fp += 1;
                }
            }
        }
        for r in 1..=count {
            let members: Vec<usize> = (0..h * w).filter(|&i| labels[i] == r).collect();
            let hit = members.iter().filter(|&&i| scores[i] >= t).count();
            overlaps.push(hit as f64 / members.len() as f64);
        }
    }
    let pro = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    (fp as f64 / neg as f64, pro)
}

/// AU-PRO by brute force: every distinct score is a threshold, the curve
/// starts at the origin and is integrated with trapezoids, the last segment
/// cut at `limit` by linear interpolation.
pub fn au_pro_ref(maps: &[(usize, usize, Vec<f32>, Vec<bool>)], limit: f64) -> f64 {
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.2.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    curve.extend(thresholds.iter().map(|&t| pro_at(maps, t)));
    let mut area = 0.0;
    for seg in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += 0.5 * (limit - x0) * (y0 + y);
            break;
        }
        area += 0.5 * (x1 - x0) * (y0 + y1);
    }
    area / limit
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Least-squares fit of `y ≈ w·x + b` through the normal equations; returns
/// the in-sample RMSE of the optimum.
pub fn least_squares_rmse(rows: &[f32], dim: usize, y: &[f64]) -> f64 {
    let n = y.len();
    let p = dim + 1;
    let feat = |i: usize, j: usize| if j == dim { 1.0 } else { rows[i * dim + j] as f64 };
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            aty[j] += feat(i, j) * y[i];
            for k in 0..p {
                ata[j][k] += feat(i, j) * feat(i, k);
            }
        }
    }
    let coef = solve(ata, aty);
    let sse: f64 = (0..n)
        .map(|i| {
            let pred: f64 = (0..p).map(|j| coef[j] * feat(i, j)).sum();
            (pred - y[i]).powi(2)
        })
        .sum();
    (sse / n as f64).sqrt()
}

/// Top principal directions by power iteration with deflation on the
/// covariance matrix of `rows` (n × d). Returns per-row projection scores
/// for each component.
pub fn pca_scores_ref(rows: &[f32], d: usize, components: usize) -> Vec<Vec<f64>> {
    let n = rows.len() / d;
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64 / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .chunks(d)
        .map(|r| r.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut out = Vec::new();
    for c in 0..components {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + c * 3) % 5) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut next: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            next.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-15 {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(centered.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect());
    }
    out
}

/// Per-component min-max normalization with sign chosen so the largest
/// magnitude score maps high.
pub fn normalize_component(scores: &[f64]) -> Vec<f64> {
    let peak = scores.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    let s: Vec<f64> = scores.iter().map(|v| if peak < 0.0 { -v } else { *v }).collect();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    s.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
