use shed::loss_metrics::{canny_edges, label_boundaries, EdgeMask, CANNY_HIGH, CANNY_LOW};
use shed::model::Prediction;
use shed::raster::{DepthMap, Image};

const BOUNDARY: [f32; 3] = [1.0, 0.0, 0.0];

/// Polynomial fit of the turbo colormap, sampled at 256 points.
fn turbo_table() -> [[u8; 3]; 256] {
    const R: [f64; 6] = [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943];
    const G: [f64; 6] = [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604];
    const B: [f64; 6] = [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973];
    let eval = |c: &[f64; 6], x: f64| {
        let v = c.iter().rev().fold(0.0, |acc, &k| acc * x + k);
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let mut t = [[0u8; 3]; 256];
    for (i, e) in t.iter_mut().enumerate() {
        let x = i as f64 / 255.0;
        *e = [eval(&R, x), eval(&G, x), eval(&B, x)];
    }
    t
}

/// Image with every pixel on a label discontinuity painted red.
pub fn boundary_overlay(image: &Image, boundaries: &EdgeMask) -> Image {
    let mut out = image.clone();
    for (y, x) in boundaries.points() {
        out.set_pixel(y, x, BOUNDARY);
    }
    out
}

/// Near is red, far is blue; invalid pixels are black.
pub fn depth_colormap(depth: &DepthMap) -> Image {
    let table = turbo_table();
    let valid = |i: usize| depth.valid[i];
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &v) in depth.values.iter().enumerate() {
        if valid(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Image::new(depth.height, depth.width);
    for (i, &v) in depth.values.iter().enumerate() {
        if !valid(i) {
            continue;
        }
        let k = 255 - ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as usize;
        let c = table[k].map(|b| b as f32 / 255.0);
        out.set_pixel(i / depth.width, i % depth.width, c);
    }
    out
}

pub fn edge_image(edges: &EdgeMask) -> Image {
    let mut out = Image::new(edges.height, edges.width);
    for (y, x) in edges.points() {
        out.set_pixel(y, x, [1.0; 3]);
    }
    out
}

/// `level_{l}.ppm` for every hierarchy level, then `depth.ppm` and `edges.ppm`.
pub fn render_all(image: &Image, pred: &Prediction) -> Vec<(String, Image)> {
    let (h, w) = (image.height, image.width);
    let mut files: Vec<(String, Image)> = pred
        .segmentations
        .iter()
        .enumerate()
        .map(|(l, s)| (format!("level_{l}.ppm"), boundary_overlay(image, &label_boundaries(&s.labels, h, w))))
        .collect();
    files.push(("depth.ppm".into(), depth_colormap(&pred.depth)));
    files.push(("edges.ppm".into(), edge_image(&canny_edges(&pred.depth, CANNY_LOW, CANNY_HIGH))));
    files
}
