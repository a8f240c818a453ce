//! Occlusion boundaries: Canny on normalized depth and edge Chamfer
//! distances through an exact Euclidean distance transform.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::DepthMap;

/// Binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl EdgeMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(y, x) in points {
            m.data[y * width + x] = true;
        }
        m
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge replication.
fn blur(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * img[y * w + at(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * tmp[at(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub const CANNY_LOW: f64 = 100.0;
pub const CANNY_HIGH: f64 = 200.0;

/// Canny edges of a depth map after min-max normalization to `0..=255`.
///
/// 5x5 Gaussian (sigma 1.4), 3x3 Sobel, non-maximum suppression along
/// four quantized directions, then hysteresis with 8-connectivity. The
/// one-pixel border never carries an edge.
pub fn canny_edges(depth: &DepthMap, low: f64, high: f64) -> EdgeMask {
    let (h, w) = (depth.height, depth.width);
    let mut out = EdgeMask::empty(h, w);
    let vals: Vec<f64> = depth
        .values
        .iter()
        .zip(&depth.valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v as f64)
        .collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if vals.is_empty() || hi <= lo || h < 3 || w < 3 {
        return out;
    }
    let norm: Vec<f64> = depth
        .values
        .iter()
        .zip(&depth.valid)
        .map(|(&v, &ok)| if ok { ((v as f64 - lo) / (hi - lo) * 255.0).round() } else { 0.0 })
        .collect();
    let smooth = blur(&norm, h, w, &gaussian_kernel(2, 1.4));

    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dy: isize, dx: isize| smooth[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = y * w + x;
            mag[i] = gx.hypot(gy);
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    // 0: horizontal gradient, 1: 45 deg (down-right in image rows), 2: vertical, 3: 135 deg
    let offsets: [(isize, isize); 4] = [(0, 1), (1, 1), (1, 0), (1, -1)];
    let mut thin = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let (dy, dx) = offsets[dir[i] as usize];
            let a = mag[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let b = mag[(y as isize - dy) as usize * w + (x as isize - dx) as usize];
            if mag[i] > a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }

    let mut queue = VecDeque::new();
    for i in 0..h * w {
        if thin[i] >= high {
            out.data[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 1 || nx < 1 || ny >= h as isize - 1 || nx >= w as isize - 1 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !out.data[j] && thin[j] >= low {
                    out.data[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

/// Squared distance to the nearest set pixel of `mask` (exact, separable
/// lower-envelope transform). `f64::INFINITY` everywhere for an empty mask.
pub fn squared_distance_transform(mask: &EdgeMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut f: Vec<f64> = mask.data.iter().map(|&v| if v { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = f[y * w + x];
        }
        let d = dt_1d(&col);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = dt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    f
}

fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return d;
    }
    let mut v = vec![0usize; sites.len()];
    let mut z = vec![0.0f64; sites.len() + 1];
    let mut k = 0;
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &sites[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferMode {
    /// Mean squared distance (pixels²).
    #[default]
    Squared,
    /// Mean Euclidean distance (pixels).
    Root,
}

/// `(eps_a, eps_c)`: mean distance from predicted edges to the nearest
/// ground-truth edge, and the reverse.
pub fn boundary_chamfer(pred: &EdgeMask, gt: &EdgeMask, mode: ChamferMode) -> Result<(f64, f64)> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape("edge masks differ in size".into()));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::Undefined("boundary Chamfer needs edges on both sides".into()));
    }
    let directed = |from: &EdgeMask, to: &EdgeMask| {
        let dt = squared_distance_transform(to);
        let (s, n) = from.data.iter().zip(&dt).filter(|(&e, _)| e).fold((0.0, 0.0), |(s, n), (_, &d)| {
            let v = match mode {
                ChamferMode::Squared => d,
                ChamferMode::Root => d.sqrt(),
            };
            (s + v, n + 1.0)
        });
        s / n
    };
    Ok((directed(pred, gt), directed(gt, pred)))
}
