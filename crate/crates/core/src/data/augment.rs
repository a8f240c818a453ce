//! Joint geometric and image-only photometric augmentation.

use crate::error::{Error, Result};
use crate::ndcore::Rng;
use crate::raster::{DepthMap, Image, LabelMap};

use super::Sample;

/// Ranges the augmentation draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub gamma: (f64, f64),
    pub brightness: (f64, f64),
    pub jitter: (f64, f64),
    /// Output `(height, width)`; `None` keeps the full frame.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            gamma: (0.9, 1.1),
            brightness: (0.75, 1.25),
            jitter: (0.9, 1.1),
            crop: None,
        }
    }
}

/// One concrete draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub gamma: f64,
    pub brightness: f64,
    pub jitter: [f64; 3],
    /// `(top, left, height, width)`.
    pub crop: (usize, usize, usize, usize),
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            gamma: 1.0,
            brightness: 1.0,
            jitter: [1.0; 3],
            crop: (0, 0, height, width),
        }
    }

    pub fn draw(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let (ch, cw) = cfg.crop.unwrap_or((height, width));
        if ch == 0 || cw == 0 || ch > height || cw > width {
            return Err(Error::InvalidInput(format!("crop {ch}x{cw} does not fit {height}x{width}")));
        }
        let flip = rng.bernoulli(cfg.flip_prob);
        let gamma = rng.uniform(cfg.gamma.0, cfg.gamma.1);
        let brightness = rng.uniform(cfg.brightness.0, cfg.brightness.1);
        let jitter = [0; 3].map(|_| rng.uniform(cfg.jitter.0, cfg.jitter.1));
        let top = rng.below(height - ch + 1);
        let left = rng.below(width - cw + 1);
        Ok(Self {
            flip,
            gamma,
            brightness,
            jitter,
            crop: (top, left, ch, cw),
        })
    }
}

fn remap<T: Copy>(src: &[T], width: usize, channels: usize, p: &AugmentParams) -> Vec<T> {
    let (top, left, ch, cw) = p.crop;
    let mut out = Vec::with_capacity(ch * cw * channels);
    for y in top..top + ch {
        for x in left..left + cw {
            let sx = if p.flip { width - 1 - x } else { x };
            let i = (y * width + sx) * channels;
            out.extend_from_slice(&src[i..i + channels]);
        }
    }
    out
}

pub fn apply(sample: &Sample, p: &AugmentParams) -> Result<Sample> {
    let (h, w) = (sample.image.height, sample.image.width);
    let (top, left, ch, cw) = p.crop;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::InvalidInput(format!("crop {ch}x{cw}+{top}+{left} outside {h}x{w}")));
    }
    let mut data = remap(&sample.image.data, w, 3, p);
    for px in data.chunks_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            let g = (*v as f64).max(0.0).powf(p.gamma);
            *v = (g * p.brightness * p.jitter[c]).clamp(0.0, 1.0) as f32;
        }
    }
    let depth = DepthMap::new(ch, cw, remap(&sample.depth.values, w, 1, p))?.with_mask(remap(&sample.depth.valid, w, 1, p))?;
    Ok(Sample {
        image: Image {
            height: ch,
            width: cw,
            data,
        },
        depth,
        instances: LabelMap::new(ch, cw, remap(&sample.instances.labels, w, 1, p))?,
        scene_id: sample.scene_id,
        frame_id: sample.frame_id,
    })
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample> {
    let p = AugmentParams::draw(cfg, sample.image.height, sample.image.width, rng)?;
    apply(sample, &p)
}
