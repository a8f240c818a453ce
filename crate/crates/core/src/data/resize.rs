//! Bilinear resampling with half-pixel centers (align-corners off).

use crate::error::Result;
use crate::raster::{DepthMap, Image};

fn taps(out: usize, n_out: usize, n_in: usize) -> (usize, usize, f64) {
    let s = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Resamples an interleaved `h x w x channels` raster.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, channels: usize, nh: usize, nw: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w * channels, "raster size");
    assert!(h > 0 && w > 0 && nh > 0 && nw > 0, "empty raster");
    if (h, w) == (nh, nw) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(nh * nw * channels);
    for y in 0..nh {
        let (y0, y1, fy) = taps(y, nh, h);
        for x in 0..nw {
            let (x0, x1, fx) = taps(x, nw, w);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * channels + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

pub fn resize_image(im: &Image, nh: usize, nw: usize) -> Image {
    Image {
        height: nh,
        width: nw,
        data: resize_bilinear(&im.data, im.height, im.width, 3, nh, nw),
    }
}

/// Invalid inputs do not leak into the output: a pixel is valid only if
/// every tap with nonzero weight is valid, and invalid taps carry no value.
pub fn resize_depth(d: &DepthMap, nh: usize, nw: usize) -> Result<DepthMap> {
    let masked: Vec<f32> = d.values.iter().zip(&d.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    let values = resize_bilinear(&masked, d.height, d.width, 1, nh, nw);
    let validity: Vec<f32> = d.valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
    let valid = resize_bilinear(&validity, d.height, d.width, 1, nh, nw).iter().map(|&v| v >= 1.0 - 1e-6).collect();
    DepthMap::new(nh, nw, values)?.with_mask(valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_upsampling() {
        assert_eq!(resize_bilinear(&[0.0, 1.0], 1, 2, 1, 1, 4), vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(resize_bilinear(&[0.0, 1.0, 2.0, 3.0], 1, 4, 1, 1, 2), vec![0.5, 2.5]);
    }

    #[test]
    fn identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|i| i as f32 * 0.3).collect();
        assert_eq!(resize_bilinear(&src, 2, 2, 3, 2, 2), src);
        let c = vec![1.75f32; 5 * 7];
        assert!(resize_bilinear(&c, 5, 7, 1, 11, 3).iter().all(|&v| v == 1.75));
    }

    #[test]
    fn depth_masks_propagate() {
        let d = DepthMap::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = d.with_mask(vec![true, true, true, false]).unwrap();
        let r = resize_depth(&d, 1, 8).unwrap();
        assert_eq!(r.valid, vec![true, true, true, true, true, false, false, false]);
        assert_eq!(r.values[0], 1.0);
    }
}
