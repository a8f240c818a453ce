//! Superpixel tokenization: SLIC-style local k-means in CIELAB + XY, a
//! regular-grid partition for analyzable tests, and the pixel-to-segment
//! one-hot map.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::ndcore::{Array, Real};
use crate::raster::{write_pgm16, Image, LabelMap};

/// A partition of the image into `n_segments` labelled regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superpixelation {
    pub labels: LabelMap,
    pub n_segments: usize,
}

impl Superpixelation {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Pixel count per segment.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_segments];
        for &l in &self.labels.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        write_pgm16(w, &self.labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub n_segments: usize,
    pub iters: usize,
    pub compactness: f64,
}

impl SlicParams {
    pub fn new(n_segments: usize) -> Self {
        Self {
            n_segments,
            iters: 10,
            compactness: 10.0,
        }
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// sRGB in `[0, 1]` to CIELAB under a D65 white point.
pub fn rgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0] as f64);
    let g = srgb_to_linear(rgb[1] as f64);
    let b = srgb_to_linear(rgb[2] as f64);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / 0.950_47), lab_f(y), lab_f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Grid layout with at most `n` cells: `nx` columns, `ny` rows.
pub fn grid_layout(h: usize, w: usize, n: usize) -> (usize, usize) {
    let nx = ((n as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w.min(n));
    let ny = (n / nx).clamp(1, h);
    (nx, ny)
}

fn check_request(h: usize, w: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("superpixel count must be positive".into()));
    }
    if n > h * w {
        return Err(Error::InvalidInput(format!(
            "{n} superpixels requested for a {h}x{w} image"
        )));
    }
    Ok(())
}

/// Regular grid partition with no clustering.
pub fn grid_superpixels(h: usize, w: usize, n: usize) -> Result<Superpixelation> {
    check_request(h, w, n)?;
    let (nx, ny) = grid_layout(h, w, n);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y * ny / h;
        for x in 0..w {
            labels.push((gy * nx + x * nx / w) as u32);
        }
    }
    Ok(Superpixelation {
        labels: LabelMap::new(h, w, labels)?,
        n_segments: nx * ny,
    })
}

#[derive(Clone, Copy)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

/// SLIC superpixels with connectivity enforcement.
///
/// Deterministic: seeds sit on a regular grid, so no random stream is
/// consumed. The result has at most `params.n_segments` labels, each one
/// 4-connected region.
pub fn generate_superpixels(image: &Image, params: &SlicParams) -> Result<Superpixelation> {
    let (h, w) = (image.height, image.width);
    let n = params.n_segments;
    check_request(h, w, n)?;
    let lab: Vec<[f64; 3]> = image.data.chunks(3).map(|c| rgb_to_lab([c[0], c[1], c[2]])).collect();

    let (nx, ny) = grid_layout(h, w, n);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let spacing = ((h * w) as f64 / n as f64).sqrt();
    let spatial_weight = (params.compactness / spacing).powi(2);

    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            // cell centre in pixel-centre coordinates
            let y = (gy as f64 + 0.5) * sy - 0.5;
            let x = (gx as f64 + 0.5) * sx - 0.5;
            let (py, px) = ((y.round() as usize).min(h - 1), (x.round() as usize).min(w - 1));
            centers.push(Center {
                lab: lab[py * w + px],
                y,
                x,
            });
        }
    }

    let mut labels = vec![usize::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    let (ry, rx) = (sy.ceil() as isize, sx.ceil() as isize);
    for _ in 0..params.iters.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        labels.iter_mut().for_each(|l| *l = usize::MAX);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            for y in (cy - ry).max(0)..=(cy + ry).min(h as isize - 1) {
                for x in (cx - rx).max(0)..=(cx + rx).min(w as isize - 1) {
                    let i = y as usize * w + x as usize;
                    let p = lab[i];
                    let dc = (p[0] - c.lab[0]).powi(2) + (p[1] - c.lab[1]).powi(2) + (p[2] - c.lab[2]).powi(2);
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dc + spatial_weight * ds;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k;
                    }
                }
            }
        }
        // pixels outside every window go to the spatially nearest center
        for i in 0..h * w {
            if labels[i] == usize::MAX {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let mut best = (f64::INFINITY, 0);
                for (k, c) in centers.iter().enumerate() {
                    let d = (y - c.y).powi(2) + (x - c.x).powi(2);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                labels[i] = best.1;
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let a = &mut acc[l];
            a[0] += lab[i][0];
            a[1] += lab[i][1];
            a[2] += lab[i][2];
            a[3] += (i / w) as f64;
            a[4] += (i % w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = Center {
                    lab: [a[0] / a[5], a[1] / a[5], a[2] / a[5]],
                    y: a[3] / a[5],
                    x: a[4] / a[5],
                };
            }
        }
    }

    let (final_labels, count) = enforce_connectivity(&labels, h, w);
    Ok(Superpixelation {
        labels: LabelMap::new(h, w, final_labels.into_iter().map(|l| l as u32).collect())?,
        n_segments: count,
    })
}

/// 4-connected component ids in raster order of first appearance.
fn components(labels: &[usize], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[start] {
                    comp[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        next += 1;
    }
    (comp, next)
}

/// Keep the largest component of every label, then fold each remaining
/// component into its largest adjacent kept region. Returns contiguous
/// labels and their count.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize) -> (Vec<usize>, usize) {
    let (comp, n_comp) = components(labels, h, w);
    let mut size = vec![0usize; n_comp];
    let mut comp_label = vec![0usize; n_comp];
    for (i, &c) in comp.iter().enumerate() {
        size[c] += 1;
        comp_label[c] = labels[i];
    }
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_comp];
    for y in 0..h {
        for x in 0..w {
            let c = comp[y * w + x];
            if x + 1 < w {
                let d = comp[y * w + x + 1];
                if c != d {
                    adjacency[c].insert(d);
                    adjacency[d].insert(c);
                }
            }
            if y + 1 < h {
                let d = comp[(y + 1) * w + x];
                if c != d {
                    adjacency[c].insert(d);
                    adjacency[d].insert(c);
                }
            }
        }
    }

    let n_labels = labels.iter().max().map_or(0, |&m| m + 1);
    let mut largest: Vec<Option<usize>> = vec![None; n_labels];
    for c in 0..n_comp {
        let l = comp_label[c];
        match largest[l] {
            Some(b) if size[b] >= size[c] => {}
            _ => largest[l] = Some(c),
        }
    }
    // region[c] = the kept component that c has been merged into
    let mut region: Vec<Option<usize>> = vec![None; n_comp];
    let mut region_size = vec![0usize; n_comp];
    for c in largest.into_iter().flatten() {
        region[c] = Some(c);
        region_size[c] = size[c];
    }
    loop {
        let mut changed = false;
        let mut pending = false;
        for c in 0..n_comp {
            if region[c].is_some() {
                continue;
            }
            let mut best: Option<usize> = None;
            for &d in &adjacency[c] {
                if let Some(r) = region[d] {
                    best = match best {
                        Some(b) if region_size[b] > region_size[r] || (region_size[b] == region_size[r] && b <= r) => Some(b),
                        _ => Some(r),
                    };
                }
            }
            match best {
                Some(r) => {
                    region[c] = Some(r);
                    region_size[r] += size[c];
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(changed, "connectivity merge stalled");
    }

    let mut relabel = vec![usize::MAX; n_comp];
    let mut next = 0;
    let mut out = Vec::with_capacity(h * w);
    for &c in &comp {
        let r = region[c].expect("all components assigned");
        if relabel[r] == usize::MAX {
            relabel[r] = next;
            next += 1;
        }
        out.push(relabel[r]);
    }
    (out, next)
}

/// One-hot `(h*w) x n` pixel-to-segment matrix.
pub fn assignment_matrix<T: Real>(sp: &Superpixelation) -> Array<T> {
    let n = sp.n_segments;
    let mut a = Array::zeros(&[sp.labels.labels.len(), n]);
    for (i, &l) in sp.labels.labels.iter().enumerate() {
        a.set2(i, l as usize, T::one());
    }
    a
}
