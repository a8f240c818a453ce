use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::superpixel::SlicParams;

/// Decoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Progressive unpooling with skip fusion at every level.
    Full,
    /// Project the coarsest tokens straight to the feature grid.
    NoUnpool,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoUnpool => "no_unpool",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_unpool" => Ok(Variant::NoUnpool),
            _ => Err(Error::Config(format!("unknown variant {s:?} (full|no_unpool)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Requested superpixel count.
    pub n0: usize,
    pub stage_sizes: Vec<usize>,
    pub blocks_per_stage: usize,
    pub d: usize,
    pub heads: usize,
    /// Hidden width of transformer MLPs, as a multiple of `d`.
    pub mlp_ratio: usize,
    pub tau: f64,
    pub head_channels: usize,
    /// Output stride of the head grid: 2, 4 or 8.
    pub head_stride: usize,
    /// Sinusoidal position channels appended to the head input (0 disables).
    pub head_pos: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Depth produced by a zero head output.
    pub depth_prior: f64,
    pub variant: Variant,
    pub slic_iters: usize,
    pub slic_compactness: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            n0: 36,
            stage_sizes: vec![16, 8, 4],
            blocks_per_stage: 2,
            d: 64,
            heads: 4,
            mlp_ratio: 4,
            tau: 1.0,
            head_channels: 32,
            head_stride: 2,
            head_pos: 16,
            depth_min: 1e-3,
            depth_max: 10.0,
            depth_prior: 3.0,
            variant: Variant::Full,
            slic_iters: 10,
            slic_compactness: 10.0,
        }
    }
}

const KEYS: &[&str] = &[
    "height",
    "width",
    "n0",
    "stages",
    "blocks_per_stage",
    "d",
    "heads",
    "mlp_ratio",
    "tau",
    "head_channels",
    "head_stride",
    "head_pos",
    "depth_min",
    "depth_max",
    "depth_prior",
    "variant",
    "slic_iters",
    "slic_compactness",
];

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.stage_sizes.len()
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    pub fn slic(&self) -> SlicParams {
        SlicParams {
            n_segments: self.n0,
            iters: self.slic_iters,
            compactness: self.slic_compactness,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("input {}x{} must be a nonzero multiple of 8", self.height, self.width));
        }
        if self.stage_sizes.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stage_sizes.windows(2).any(|w| w[1] >= w[0]) || self.stage_sizes.contains(&0) {
            return bad(format!("stage sizes {:?} must be positive and strictly decreasing", self.stage_sizes));
        }
        if self.n0 <= self.stage_sizes[0] {
            return bad(format!("n0={} must exceed the first stage size {}", self.n0, self.stage_sizes[0]));
        }
        if self.d == 0 || self.d % 4 != 0 {
            return bad(format!("width d={} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by {} heads", self.d, self.heads));
        }
        if self.mlp_ratio == 0 || self.head_channels == 0 {
            return bad("mlp_ratio and head_channels must be positive".into());
        }
        if ![2, 4, 8].contains(&self.head_stride) {
            return bad(format!("head_stride={} must be 2, 4 or 8", self.head_stride));
        }
        if self.head_pos % 4 != 0 {
            return bad(format!("head_pos={} must be a multiple of 4", self.head_pos));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau={} must be positive", self.tau));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad(format!("depth range [{}, {}] is empty", self.depth_min, self.depth_max));
        }
        if !(self.depth_prior > self.depth_min && self.depth_prior < self.depth_max) {
            return bad(format!("depth_prior={} outside the depth range", self.depth_prior));
        }
        if self.slic_iters == 0 || self.slic_compactness <= 0.0 {
            return bad("superpixel iterations and compactness must be positive".into());
        }
        Ok(())
    }

    /// Canonical `model.*` key map.
    pub fn to_kv(&self) -> KvMap {
        let stages: Vec<String> = self.stage_sizes.iter().map(usize::to_string).collect();
        let pairs = [
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("n0", self.n0.to_string()),
            ("stages", stages.join(",")),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("head_channels", self.head_channels.to_string()),
            ("head_stride", self.head_stride.to_string()),
            ("head_pos", self.head_pos.to_string()),
            ("depth_min", format!("{:?}", self.depth_min)),
            ("depth_max", format!("{:?}", self.depth_max)),
            ("depth_prior", format!("{:?}", self.depth_prior)),
            ("variant", self.variant.to_string()),
            ("slic_iters", self.slic_iters.to_string()),
            ("slic_compactness", format!("{:?}", self.slic_compactness)),
        ];
        pairs.into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
    }

    /// Start from `self` and override any `model.*` keys in `map`.
    pub fn with_kv(&self, map: &KvMap) -> Result<Self> {
        kv::check_known(map, "model.", KEYS)?;
        let mut c = self.clone();
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv::get(map, concat!("model.", $key))? {
                    c.$field = v;
                }
            };
        }
        take!(height, "height");
        take!(width, "width");
        take!(n0, "n0");
        take!(blocks_per_stage, "blocks_per_stage");
        take!(d, "d");
        take!(heads, "heads");
        take!(mlp_ratio, "mlp_ratio");
        take!(tau, "tau");
        take!(head_channels, "head_channels");
        take!(head_stride, "head_stride");
        take!(head_pos, "head_pos");
        take!(depth_min, "depth_min");
        take!(depth_max, "depth_max");
        take!(depth_prior, "depth_prior");
        take!(variant, "variant");
        take!(slic_iters, "slic_iters");
        take!(slic_compactness, "slic_compactness");
        if let Some(s) = kv::get_list(map, "model.stages")? {
            c.stage_sizes = s;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        Self::default().with_kv(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut n = c.clone();
        n.variant = Variant::NoUnpool;
        n.tau = 0.1;
        n.head_stride = 8;
        n.head_pos = 0;
        assert_eq!(ModelConfig::from_kv(&n.to_kv()).unwrap(), n);
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ModelConfig::default();
        for (k, v) in [
            ("model.stages", "16,16,4"),
            ("model.n0", "16"),
            ("model.height", "97"),
            ("model.heads", "5"),
            ("model.variant", "other"),
            ("model.depth_prior", "50"),
            ("model.head_stride", "3"),
            ("model.head_pos", "6"),
            ("model.unknown", "1"),
        ] {
            let m = KvMap::from([(k.to_string(), v.to_string())]);
            assert!(c.with_kv(&m).is_err(), "{k}={v} accepted");
        }
    }
}
