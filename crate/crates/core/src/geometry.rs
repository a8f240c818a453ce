//! Pinhole back-projection and point-cloud Chamfer distances.

use std::io::Write;

use crate::error::{Error, Result};
use crate::loss_metrics::ChamferMode;
use crate::raster::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidInput(format!("bad intrinsics fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Focal length 0.6·width, principal point at the exact raster center.
    pub fn for_size(height: usize, width: usize) -> Self {
        let f = 0.6 * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Ray direction through pixel `(u, v)` with unit z.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy, p[2])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect(),
        }
    }

    /// ASCII PLY with one `x y z` line per point.
    pub fn write_ply<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", self.points.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Valid pixels of `depth` lifted to camera coordinates, row-major order.
pub fn backproject(depth: &DepthMap, k: &Intrinsics, scale: f64) -> PointCloud {
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            if !depth.valid[i] {
                continue;
            }
            let z = scale * depth.values[i] as f64;
            let r = k.ray(u as f64, v as f64);
            points.push([z * r[0], z * r[1], z]);
        }
    }
    PointCloud { points }
}

/// `(u, v, depth)` per point, undoing [`backproject`].
pub fn reproject(cloud: &PointCloud, k: &Intrinsics, scale: f64) -> Vec<(f64, f64, f64)> {
    cloud
        .points
        .iter()
        .map(|&p| {
            let (u, v, z) = k.project(p);
            (u, v, z / scale)
        })
        .collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

const LEAF: usize = 8;

/// Static k-d tree over borrowed points; exact nearest-neighbor queries.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    idx: Vec<usize>,
    /// Split axis of the node whose pivot sits at each position.
    axis: Vec<u8>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut t = Self {
            points,
            idx: (0..points.len()).collect(),
            axis: vec![0; points.len()],
        };
        t.build(0, points.len());
        t
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF {
            return;
        }
        let pts = self.points;
        let spread = |a: usize| {
            let (mn, mx) = self.idx[lo..hi]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &i| (mn.min(pts[i][a]), mx.max(pts[i][a])));
            mx - mn
        };
        let a = (0..3).max_by(|&x, &y| spread(x).total_cmp(&spread(y))).unwrap_or(0);
        let mid = (lo + hi) / 2;
        self.idx[lo..hi].select_nth_unstable_by(mid - lo, |&i, &j| pts[i][a].total_cmp(&pts[j][a]));
        self.axis[mid] = a as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    fn nearest2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.idx.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut f64) {
        if hi - lo <= LEAF {
            for &i in &self.idx[lo..hi] {
                *best = best.min(dist2(q, &self.points[i]));
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[self.idx[mid]];
        *best = best.min(dist2(q, p));
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn directed(a: &PointCloud, b: &PointCloud, mode: ChamferMode) -> f64 {
    const BRUTE_LIMIT: usize = 64;
    let tree = (b.len() > BRUTE_LIMIT).then(|| KdTree::new(&b.points));
    let sum: f64 = a
        .points
        .iter()
        .map(|p| {
            let d = match &tree {
                Some(t) => t.nearest2(p),
                None => b.points.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min),
            };
            match mode {
                ChamferMode::Squared => d,
                ChamferMode::Root => d.sqrt(),
            }
        })
        .sum();
    sum / a.len() as f64
}

/// `(d_ab, d_ba)`: mean nearest-neighbor distance from `a` to `b` and back.
pub fn chamfer_3d(a: &PointCloud, b: &PointCloud, mode: ChamferMode) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined("Chamfer distance of an empty cloud".into()));
    }
    Ok((directed(a, b, mode), directed(b, a, mode)))
}
