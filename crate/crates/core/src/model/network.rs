//! Encoder (stem, segment tokens, ViT blocks and graph pooling per stage)
//! and decoder (unpooling, skip fusion, spatial projection, conv head).

use crate::backbone::{self, downsample_labels, init_segment_tokens, stem_forward, StemFeatures};
use crate::error::{Error, Result};
use crate::hierarchy::{
    compose_segmentation, compose_soft, farthest_point_sample, fps_start, pool_tokens, project_spatial, skip_fuse,
    soft_assign, unpool_tokens, SegmentationMap,
};
use crate::ndcore::nn::{attention_block, linear, mlp, BlockVars, MlpVars};
use crate::ndcore::{Array, ConvGeom, Real, ResizePlan, Rng, Tape, Var};
use crate::superpixel::Superpixelation;

use super::config::{ModelConfig, Variant};
use super::params::{Bound, Init, ParamStore};

const PROJ_STD: f64 = 0.02;

const BLOCK_TENSORS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

fn insert_block<T: Real>(s: &mut ParamStore<T>, init: &Init, prefix: &str, d: usize, hidden: usize) -> Result<()> {
    for name in BLOCK_TENSORS {
        let full = format!("{prefix}.{name}");
        let v = match name {
            "ln1.g" | "ln2.g" => Array::full(&[d], T::one()),
            "mlp.w1" => init.proj(&full, &[d, hidden]),
            "mlp.w2" => init.proj(&full, &[hidden, d]),
            "mlp.b1" => Array::zeros(&[hidden]),
            n if n.starts_with("attn.w") => init.proj(&full, &[d, d]),
            _ => Array::zeros(&[d]),
        };
        s.insert(full, v)?;
    }
    Ok(())
}

fn block_vars(b: &Bound, prefix: &str) -> BlockVars {
    let v = |n: &str| b.var(&format!("{prefix}.{n}"));
    BlockVars {
        ln1_g: v("ln1.g"),
        ln1_b: v("ln1.b"),
        wq: v("attn.wq"),
        bq: v("attn.bq"),
        wk: v("attn.wk"),
        bk: v("attn.bk"),
        wv: v("attn.wv"),
        bv: v("attn.bv"),
        wo: v("attn.wo"),
        bo: v("attn.bo"),
        ln2_g: v("ln2.g"),
        ln2_b: v("ln2.b"),
        mlp: mlp_vars(b, &format!("{prefix}.mlp")),
    }
}

fn mlp_vars(b: &Bound, prefix: &str) -> MlpVars {
    let v = |n: &str| b.var(&format!("{prefix}.{n}"));
    MlpVars {
        w1: v("w1"),
        b1: v("b1"),
        w2: v("w2"),
        b2: v("b2"),
    }
}

fn insert_mlp<T: Real>(s: &mut ParamStore<T>, prefix: &str, w1: Array<T>, w2: Array<T>) -> Result<()> {
    let (hidden, dout) = (w1.cols(), w2.cols());
    s.insert(format!("{prefix}.w1"), w1)?;
    s.insert(format!("{prefix}.b1"), Array::zeros(&[hidden]))?;
    s.insert(format!("{prefix}.w2"), w2)?;
    s.insert(format!("{prefix}.b2"), Array::zeros(&[dout]))?;
    Ok(())
}

/// Input channels of the first head convolution.
fn head_in_channels(cfg: &ModelConfig) -> usize {
    cfg.head_channels + backbone::stem_layers(cfg.d)[3].1 + cfg.d + cfg.head_pos
}

/// Levels whose spatial maps feed the head.
pub fn fused_levels(cfg: &ModelConfig) -> Vec<usize> {
    match cfg.variant {
        Variant::Full => (0..=cfg.levels()).collect(),
        Variant::NoUnpool => vec![cfg.levels()],
    }
}

/// Fresh parameters. Transformer and pooling projections use a small
/// truncated normal; convolutions and the non-residual fusion MLPs use
/// fan-in scaling; the last head convolution starts at zero.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let init = Init {
        root: Rng::new(seed).child("init"),
        proj_std: PROJ_STD,
    };
    let (d, hidden) = (cfg.d, cfg.hidden());
    let mut s = ParamStore::new();
    backbone::init_stem(&mut s, d, &init)?;
    s.insert("enc.cls", init.proj("enc.cls", &[1, d]))?;
    for l in 0..cfg.levels() {
        for k in 0..cfg.blocks_per_stage {
            insert_block(&mut s, &init, &format!("enc.{l}.b{k}"), d, hidden)?;
        }
        let p = format!("enc.{l}.pool");
        insert_mlp(&mut s, &p, init.proj(&format!("{p}.w1"), &[d, d]), init.proj(&format!("{p}.w2"), &[d, d]))?;
    }
    if cfg.variant == Variant::Full {
        for l in 0..cfg.levels() {
            let p = format!("dec.{l}.fuse");
            insert_mlp(&mut s, &p, init.fan_in(&format!("{p}.w1"), d, d), init.fan_in(&format!("{p}.w2"), d, d))?;
            for k in 0..cfg.blocks_per_stage {
                insert_block(&mut s, &init, &format!("dec.{l}.b{k}"), d, hidden)?;
            }
        }
    }
    let hc = cfg.head_channels;
    for l in fused_levels(cfg) {
        let n = format!("head.proj{l}.w");
        let w = init.fan_in(&n, d, hc);
        s.insert(n, w)?;
        s.insert(format!("head.proj{l}.b"), Array::zeros(&[hc]))?;
    }
    let cin = head_in_channels(cfg);
    s.insert("head.conv0.w", init.fan_in("head.conv0.w", 9 * cin, hc))?;
    s.insert("head.conv0.b", Array::zeros(&[hc]))?;
    s.insert("head.conv1.w", Array::zeros(&[9 * hc, 1]))?;
    s.insert("head.conv1.b", Array::zeros(&[1]))?;
    Ok(s)
}

/// One level of the hierarchy.
#[derive(Debug, Clone)]
pub struct LevelState {
    /// Segment tokens entering this level (no class token).
    pub tokens: Var,
    /// Tokens after this level's encoder blocks; absent at the top level.
    pub encoded: Option<Var>,
    /// Pixel-resolution partition.
    pub segmentation: SegmentationMap,
    /// Soft assignment from the previous level; absent at level 0.
    pub assignment: Option<Var>,
}

impl LevelState {
    pub fn n_tokens<T: Real>(&self, t: &Tape<T>) -> usize {
        t.value(self.tokens).rows()
    }
}

/// Everything the decoder and the evaluators need from one encoder pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub levels: Vec<LevelState>,
    pub stem: StemFeatures,
    /// Level-0 partition on the stride-8 grid.
    pub grid_segmentation: SegmentationMap,
    /// Level-0 partition on the head grid.
    pub head_segmentation: SegmentationMap,
    /// Class token after the last encoder stage.
    pub class_token: Var,
    pub height: usize,
    pub width: usize,
}

impl ForwardTrace {
    pub fn segmentations(&self) -> impl Iterator<Item = &SegmentationMap> {
        self.levels.iter().map(|l| &l.segmentation)
    }

    pub fn assignments(&self) -> Vec<Var> {
        self.levels.iter().filter_map(|l| l.assignment).collect()
    }
}

fn run_blocks<T: Real>(t: &mut Tape<T>, b: &Bound, cfg: &ModelConfig, prefix: &str, mut x: Var) -> Result<Var> {
    for k in 0..cfg.blocks_per_stage {
        x = attention_block(t, x, &block_vars(b, &format!("{prefix}.b{k}")), cfg.heads)?;
    }
    Ok(x)
}

fn split_cls<T: Real>(t: &mut Tape<T>, x: Var) -> (Var, Var) {
    let n = t.value(x).rows();
    (t.slice_rows(x, 0, 1), t.slice_rows(x, 1, n))
}

/// Encoder pass over `image` (an `(h*w) x 3` tape value) with base
/// superpixels `sp`.
pub fn encode<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    image: Var,
    sp: &Superpixelation,
) -> Result<ForwardTrace> {
    let (h, w) = (cfg.height, cfg.width);
    if sp.height() != h || sp.width() != w {
        return Err(Error::Shape(format!(
            "superpixels {}x{} for a {h}x{w} model",
            sp.height(),
            sp.width()
        )));
    }
    let n0 = sp.n_segments;
    if n0 <= cfg.stage_sizes[0] {
        return Err(Error::InvalidInput(format!(
            "{n0} superpixels cannot pool into {} segments",
            cfg.stage_sizes[0]
        )));
    }
    let stem = stem_forward(t, image, h, w, b, cfg.d)?;
    let grid_labels = downsample_labels(&sp.labels, 8)?;
    let grid_segmentation = SegmentationMap::new(grid_labels, n0)?;
    let head_segmentation = if cfg.head_stride == 8 {
        grid_segmentation.clone()
    } else {
        SegmentationMap::new(downsample_labels(&sp.labels, cfg.head_stride)?, n0)?
    };
    let pixel_s0 = SegmentationMap::new(sp.labels.labels.iter().map(|&l| l as usize).collect(), n0)?;

    let cls = b.var("enc.cls");
    let tokens0 = init_segment_tokens(t, stem.f8, (stem.h8, stem.w8), &grid_segmentation.labels, n0, None)?;
    let mut x = t.concat_rows(&[cls, tokens0]);
    let mut levels = vec![LevelState {
        tokens: tokens0,
        encoded: None,
        segmentation: pixel_s0,
        assignment: None,
    }];
    let mut class_token = cls;
    for (l, &n_next) in cfg.stage_sizes.iter().enumerate() {
        x = run_blocks(t, b, cfg, &format!("enc.{l}"), x)?;
        let (c, z) = split_cls(t, x);
        class_token = c;
        levels[l].encoded = Some(z);
        let zv = t.value(z);
        let seeds = farthest_point_sample(zv, n_next, fps_start(zv))?;
        let seeded = t.gather_rows(z, &seeds);
        let p = soft_assign(t, z, seeded, cfg.tau)?;
        let pool = mlp_vars(b, &format!("enc.{l}.pool"));
        let pooled = pool_tokens(t, z, seeded, p, |t, v| mlp(t, v, &pool))?;
        let seg = compose_segmentation(&levels[l].segmentation, t.value(p))?;
        levels.push(LevelState {
            tokens: pooled,
            encoded: None,
            segmentation: seg,
            assignment: Some(p),
        });
        x = t.concat_rows(&[c, pooled]);
    }
    Ok(ForwardTrace {
        levels,
        stem,
        grid_segmentation,
        head_segmentation,
        class_token,
        height: h,
        width: w,
    })
}

/// Decoder token pass. Returns `Z'_l` for each level in `fused_levels`,
/// paired with the assignment chain from level 0.
fn decode_tokens<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
) -> Result<Vec<(usize, Var)>> {
    let top = cfg.levels();
    let z_top = trace.levels[top].tokens;
    match cfg.variant {
        Variant::NoUnpool => Ok(vec![(top, z_top)]),
        Variant::Full => {
            let mut out = vec![(top, z_top)];
            let mut zp = z_top;
            let mut cls = trace.class_token;
            for l in (0..top).rev() {
                let p = trace.levels[l + 1].assignment.expect("pooled level has an assignment");
                let skip = trace.levels[l].encoded.expect("encoded level has a skip");
                let up = unpool_tokens(t, zp, p)?;
                let fuse = mlp_vars(b, &format!("dec.{l}.fuse"));
                let fused = skip_fuse(t, up, skip, |t, v| mlp(t, v, &fuse))?;
                let x = t.concat_rows(&[cls, fused]);
                let x = run_blocks(t, b, cfg, &format!("dec.{l}"), x)?;
                let (c, z) = split_cls(t, x);
                cls = c;
                zp = z;
                out.push((l, z));
            }
            out.reverse();
            Ok(out)
        }
    }
}

/// Per-level spatial maps `S₀ P_{0→l} Z'_l` on the head grid.
pub fn spatial_maps<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
) -> Result<Vec<(usize, Var)>> {
    let tokens = decode_tokens(t, b, cfg, trace)?;
    let chain = trace.assignments();
    let n0 = trace.head_segmentation.n_segments;
    let mut out = Vec::with_capacity(tokens.len());
    for (l, z) in tokens {
        let p = compose_soft(t, &chain[..l], n0)?;
        out.push((l, project_spatial(t, &trace.head_segmentation, p, z)?));
    }
    Ok(out)
}

fn head_geom(h: usize, w: usize, cin: usize, cout: usize) -> ConvGeom {
    ConvGeom {
        in_h: h,
        in_w: w,
        cin,
        cout,
        kernel: 3,
        stride: 1,
        pad: 1,
        replicate: true,
    }
}

/// `x` with `softplus(x + offset) = prior` at `x = 0`.
fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Decoder plus head: an `(h*w) x 1` depth map in meters.
pub fn decode<T: Real>(t: &mut Tape<T>, b: &Bound, cfg: &ModelConfig, trace: &ForwardTrace) -> Result<Var> {
    if trace.height != cfg.height || trace.width != cfg.width || trace.levels.len() != cfg.levels() + 1 {
        return Err(Error::Shape("trace does not match the model config".into()));
    }
    let maps = spatial_maps(t, b, cfg, trace)?;
    let mut fused: Option<Var> = None;
    for (l, f) in maps {
        let proj = linear(t, f, b.var(&format!("head.proj{l}.w")), b.var(&format!("head.proj{l}.b")));
        fused = Some(match fused {
            Some(acc) => t.add(acc, proj),
            None => proj,
        });
    }
    let fused = fused.expect("at least one fused level");
    let st = trace.stem;
    let (gh, gw) = (cfg.height / cfg.head_stride, cfg.width / cfg.head_stride);
    let to_grid = |t: &mut Tape<T>, v: Var, h: usize, w: usize| {
        if (h, w) == (gh, gw) {
            v
        } else {
            t.resize(v, ResizePlan::new(h, w, gh, gw))
        }
    };
    let f4 = to_grid(t, st.f4, st.h4, st.w4);
    let f8 = to_grid(t, st.f8, st.h8, st.w8);
    let mut parts = vec![fused, f4, f8];
    if cfg.head_pos > 0 {
        parts.push(t.constant(backbone::sinusoidal_pos_embed(gh, gw, cfg.head_pos)?));
    }
    let cat = t.concat_cols(&parts);
    let hc = cfg.head_channels;
    let c0 = t.conv2d(
        cat,
        b.var("head.conv0.w"),
        Some(b.var("head.conv0.b")),
        head_geom(gh, gw, head_in_channels(cfg), hc),
    );
    let c0 = t.gelu(c0);
    let c1 = t.conv2d(c0, b.var("head.conv1.w"), Some(b.var("head.conv1.b")), head_geom(gh, gw, hc, 1));
    let up = t.resize(c1, ResizePlan::new(gh, gw, cfg.height, cfg.width));
    let shifted = t.add_scalar(up, T::lit(softplus_inverse(cfg.depth_prior)));
    let depth = t.softplus(shifted);
    Ok(t.clamp(depth, T::lit(cfg.depth_min), T::lit(cfg.depth_max)))
}

pub fn forward<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    image: Var,
    sp: &Superpixelation,
) -> Result<(Var, ForwardTrace)> {
    let trace = encode(t, b, cfg, image, sp)?;
    let depth = decode(t, b, cfg, &trace)?;
    Ok((depth, trace))
}
