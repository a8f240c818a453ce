//! Convolutional stem, fixed positional embeddings and superpixel pooling
//! into the initial segment tokens.

use crate::error::{Error, Result};
use crate::model::params::{Bound, Init, ParamStore};
use crate::ndcore::{Array, ConvGeom, Real, Tape, Var};
use crate::raster::{Image, LabelMap};

/// Feature maps at strides 4 and 8, stored `(h*w) x c` on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StemFeatures {
    pub f4: Var,
    pub f8: Var,
    pub h4: usize,
    pub w4: usize,
    pub c4: usize,
    pub h8: usize,
    pub w8: usize,
    pub c8: usize,
}

/// `(cin, cout, stride)` for each stem convolution.
pub fn stem_layers(d: usize) -> [(usize, usize, usize); 5] {
    let c2 = (d / 4).max(1);
    let c4 = (d / 2).max(1);
    [(3, c2, 2), (c2, c2, 1), (c2, c4, 2), (c4, c4, 1), (c4, d, 2)]
}

pub(crate) fn init_stem<T: Real>(store: &mut ParamStore<T>, d: usize, init: &Init) -> Result<()> {
    for (i, (cin, cout, _)) in stem_layers(d).into_iter().enumerate() {
        let name = format!("stem.conv{i}.w");
        let w = init.fan_in(&name, 9 * cin, cout);
        store.insert(name, w)?;
        store.insert(format!("stem.conv{i}.b"), Array::zeros(&[cout]))?;
    }
    Ok(())
}

/// Interleaved RGB as an `(h*w) x 3` array.
pub fn image_array<T: Real>(image: &Image) -> Array<T> {
    let data = image.data.iter().map(|&v| T::lit(v as f64)).collect();
    Array::from_vec(&[image.height * image.width, 3], data).expect("rgb image")
}

fn conv_geom(h: usize, w: usize, cin: usize, cout: usize, stride: usize) -> ConvGeom {
    ConvGeom {
        in_h: h,
        in_w: w,
        cin,
        cout,
        kernel: 3,
        stride,
        pad: 1,
        replicate: true,
    }
}

/// Five 3x3 convolutions with GELU between them. The stride-4 tap is
/// taken after the fourth layer, the stride-8 map is the last layer's
/// linear output.
/// Input standardization applied before the first convolution.
pub const IMAGE_MEAN: f64 = 0.45;
pub const IMAGE_STD: f64 = 0.225;

pub fn stem_forward<T: Real>(
    t: &mut Tape<T>,
    image: Var,
    h: usize,
    w: usize,
    params: &Bound,
    d: usize,
) -> Result<StemFeatures> {
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be a nonzero multiple of 8")));
    }
    if t.value(image).shape() != [h * w, 3] {
        return Err(Error::Shape(format!("stem expects a {}x3 image", h * w)));
    }
    let centered = t.add_scalar(image, T::lit(-IMAGE_MEAN));
    let image = t.scale(centered, T::lit(1.0 / IMAGE_STD));
    let (mut x, mut ch, mut cw) = (image, h, w);
    let mut f4 = None;
    let layers = stem_layers(d);
    for (i, (cin, cout, stride)) in layers.into_iter().enumerate() {
        let geom = conv_geom(ch, cw, cin, cout, stride);
        let wv = params.var(&format!("stem.conv{i}.w"));
        let bv = params.var(&format!("stem.conv{i}.b"));
        x = t.conv2d(x, wv, Some(bv), geom);
        ch = geom.out_h();
        cw = geom.out_w();
        if i + 1 < layers.len() {
            x = t.gelu(x);
        }
        if i == 3 {
            f4 = Some(x);
        }
    }
    Ok(StemFeatures {
        f4: f4.expect("stem has a stride-4 tap"),
        f8: x,
        h4: h / 4,
        w4: w / 4,
        c4: layers[3].1,
        h8: ch,
        w8: cw,
        c8: d,
    })
}

/// Fixed 2-D sine/cosine table, `hh*ww` rows of width `d`.
///
/// The first half of the channels encodes the row index, the second half
/// the column index; each half is `[sin(p w_k)..., cos(p w_k)...]` with
/// `w_k = 10000^(-k / (d/4))`.
pub fn sinusoidal_pos_embed<T: Real>(hh: usize, ww: usize, d: usize) -> Result<Array<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Shape(format!("embedding width {d} must be a multiple of 4")));
    }
    let q = d / 4;
    let freqs: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut out = Array::zeros(&[hh * ww, d]);
    for y in 0..hh {
        for x in 0..ww {
            let row = out.row_mut(y * ww + x);
            for (k, &f) in freqs.iter().enumerate() {
                row[k] = T::lit((y as f64 * f).sin());
                row[q + k] = T::lit((y as f64 * f).cos());
                row[2 * q + k] = T::lit((x as f64 * f).sin());
                row[3 * q + k] = T::lit((x as f64 * f).cos());
            }
        }
    }
    Ok(out)
}

/// Reduce a pixel label map by `factor`: each output cell takes the most
/// frequent label of its `factor x factor` block, smallest label on ties.
pub fn downsample_labels(labels: &LabelMap, factor: usize) -> Result<Vec<usize>> {
    let (h, w) = (labels.height, labels.width);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} labels not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(oh * ow);
    let mut block = Vec::with_capacity(factor * factor);
    for by in 0..oh {
        for bx in 0..ow {
            block.clear();
            for y in by * factor..(by + 1) * factor {
                block.extend_from_slice(&labels.labels[y * w + bx * factor..y * w + (bx + 1) * factor]);
            }
            block.sort_unstable();
            let (mut best, mut best_n) = (block[0], 0);
            let mut i = 0;
            while i < block.len() {
                let mut j = i;
                while j < block.len() && block[j] == block[i] {
                    j += 1;
                }
                // ascending scan, strict comparison keeps the smallest label
                if j - i > best_n {
                    best = block[i];
                    best_n = j - i;
                }
                i = j;
            }
            out.push(best as usize);
        }
    }
    Ok(out)
}

/// Positional embedding added to `f8`, then mean-pooled per segment.
/// With `cls`, the class token is prepended as row 0.
pub fn init_segment_tokens<T: Real>(
    t: &mut Tape<T>,
    f8: Var,
    grid: (usize, usize),
    s0: &[usize],
    n0: usize,
    cls: Option<Var>,
) -> Result<Var> {
    let (hh, ww) = grid;
    let fv = t.value(f8);
    if fv.rows() != hh * ww || s0.len() != hh * ww {
        return Err(Error::Shape(format!(
            "{} features and {} labels for a {hh}x{ww} grid",
            fv.rows(),
            s0.len()
        )));
    }
    if let Some(&bad) = s0.iter().find(|&&l| l >= n0) {
        return Err(Error::InvalidInput(format!("segment label {bad} >= {n0}")));
    }
    let pos = t.constant(sinusoidal_pos_embed(hh, ww, fv.cols())?);
    let x = t.add(f8, pos);
    let tokens = t.segment_mean(x, s0, n0);
    Ok(match cls {
        Some(c) => t.concat_rows(&[c, tokens]),
        None => tokens,
    })
}
