//! Analytic multiply-accumulate counts for the token encoder.

use crate::error::Result;

use super::config::ModelConfig;

/// Published totals for the full-size models (GFLOPs), kept for reference
/// next to the structural comparison computed here.
pub const REFERENCE_FLAT_GFLOPS: f64 = 135.0;
pub const REFERENCE_HIERARCHICAL_GFLOPS: f64 = 103.2;

pub fn reference_ratio() -> f64 {
    REFERENCE_HIERARCHICAL_GFLOPS / REFERENCE_FLAT_GFLOPS
}

/// Self-attention cost of one block over `n` tokens of width `d`:
/// Q/K/V/output projections plus the two `n x n` products.
pub fn attention_macs(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    4 * n * d * d + 2 * n * n * d
}

/// MLP cost of one block with hidden width `4d`.
pub fn mlp_macs(n: usize, d: usize) -> u64 {
    8 * n as u64 * (d as u64).pow(2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFlops {
    /// Segment tokens at this stage (the class token is added on top).
    pub tokens: usize,
    pub blocks: usize,
    pub attention_per_block: u64,
    pub mlp_per_block: u64,
}

impl StageFlops {
    fn new(tokens: usize, blocks: usize, d: usize) -> Self {
        Self {
            tokens,
            blocks,
            attention_per_block: attention_macs(tokens + 1, d),
            mlp_per_block: mlp_macs(tokens + 1, d),
        }
    }

    pub fn total(&self) -> u64 {
        self.blocks as u64 * (self.attention_per_block + self.mlp_per_block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    /// Encoder stages: blocks at `n0` and each pooled size but the last.
    pub hierarchical: Vec<StageFlops>,
    /// Same block count, every block at `n0` tokens.
    pub flat: Vec<StageFlops>,
    /// Per-block costs at every hierarchy level, including the top.
    pub levels: Vec<StageFlops>,
}

impl FlopReport {
    pub fn hierarchical_total(&self) -> u64 {
        self.hierarchical.iter().map(StageFlops::total).sum()
    }

    pub fn flat_total(&self) -> u64 {
        self.flat.iter().map(StageFlops::total).sum()
    }

    pub fn ratio(&self) -> f64 {
        self.hierarchical_total() as f64 / self.flat_total() as f64
    }
}

/// Encoder cost of `cfg` against a flat encoder of equal depth.
pub fn estimate_flops(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let sizes: Vec<usize> = std::iter::once(cfg.n0).chain(cfg.stage_sizes.iter().copied()).collect();
    let b = cfg.blocks_per_stage;
    let hierarchical = sizes[..cfg.levels()].iter().map(|&n| StageFlops::new(n, b, cfg.d)).collect();
    let flat = (0..cfg.levels()).map(|_| StageFlops::new(cfg.n0, b, cfg.d)).collect();
    let levels = sizes.iter().map(|&n| StageFlops::new(n, b, cfg.d)).collect();
    Ok(FlopReport {
        hierarchical,
        flat,
        levels,
    })
}

/// A config whose stages never shrink the token count, costed the same way.
pub fn flat_report(cfg: &ModelConfig) -> Result<FlopReport> {
    let mut r = estimate_flops(cfg)?;
    r.hierarchical = r.flat.clone();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_shaped() -> ModelConfig {
        ModelConfig {
            n0: 576,
            stage_sizes: vec![256, 128, 64],
            d: 384,
            heads: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn formula_by_hand() {
        assert_eq!(attention_macs(2, 3), 4 * 2 * 9 + 2 * 4 * 3);
        assert_eq!(mlp_macs(2, 3), 8 * 2 * 9);
    }

    #[test]
    fn per_level_cost_strictly_decreases() {
        let r = estimate_flops(&paper_shaped()).unwrap();
        let tokens: Vec<usize> = r.levels.iter().map(|s| s.tokens).collect();
        assert_eq!(tokens, vec![576, 256, 128, 64]);
        assert!(r.levels.windows(2).all(|w| w[1].attention_per_block < w[0].attention_per_block));
    }

    #[test]
    fn hierarchy_is_cheaper_than_flat() {
        let cfg = paper_shaped();
        let r = estimate_flops(&cfg).unwrap();
        let d = cfg.d as u64;
        let cost = |n: u64| 2 * (4 * n * d * d + 2 * n * n * d + 8 * n * d * d);
        assert_eq!(r.hierarchical_total(), cost(577) + cost(257) + cost(129));
        assert_eq!(r.flat_total(), 3 * cost(577));
        assert!(r.ratio() < 1.0);
        assert_eq!(flat_report(&cfg).unwrap().ratio(), 1.0);
        assert!((reference_ratio() - 0.764).abs() < 1e-3);
    }
}
