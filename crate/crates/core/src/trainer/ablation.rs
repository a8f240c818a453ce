//! Trains both decoder variants under one budget and compares them.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{ModelConfig, Variant};

use super::eval::{evaluate_model, EvalProtocols};
use super::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub abs_rel: f64,
    pub eps_a: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// `(abs_rel, eps_a)` averaged over seeds.
    pub fn mean(&self, variant: Variant) -> Option<(f64, f64)> {
        let rs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        if rs.is_empty() {
            return None;
        }
        let n = rs.len() as f64;
        Some((
            rs.iter().map(|r| r.abs_rel).sum::<f64>() / n,
            rs.iter().map(|r| r.eps_a).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,abs_rel,eps_a,final_loss\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.variant, r.seed, r.abs_rel, r.eps_a, r.final_loss));
        }
        s
    }
}

/// `eps_a` averages the samples whose prediction has Canny edges; it is
/// NaN only if none does.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let mc = ModelConfig {
                variant,
                ..model_cfg.clone()
            };
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let (state, curve) = train(&mc, &tc, data)?;
            let report = evaluate_model(&state.model, data, &EvalProtocols::default())?;
            runs.push(AblationRun {
                variant,
                seed,
                abs_rel: report.mean_of("abs_rel").unwrap_or(f64::NAN),
                eps_a: report.mean_of("eps_a").unwrap_or(f64::NAN),
                final_loss: curve.last().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(AblationReport { runs })
}
