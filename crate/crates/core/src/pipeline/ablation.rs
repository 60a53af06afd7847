use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::predict::{evaluate_with, PredictOptions};
use super::train::train;
use crate::activation::SelectionVariant;
use crate::features::Episode;
use crate::memory_bank::InitMode;
use crate::par;
use crate::representative::TierMode;

/// One configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCellSpec {
    pub semantic_on: bool,
    pub init_mode: InitMode,
    pub recalc_on: bool,
    pub variant: SelectionVariant,
    pub tier_mode: TierMode,
}

impl AblationCellSpec {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            semantic_on: self.semantic_on,
            init_mode: self.init_mode,
            recalc_on: self.recalc_on,
            selection_variant: self.variant,
            tier_mode: self.tier_mode,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCellSpec,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub hm: Option<f64>,
    /// Evaluated items per second over both test splits.
    pub items_per_sec: Option<f64>,
    pub error: Option<String>,
}

/// The full grid in output order: semantic, init, recalc, variant, tier.
pub fn ablation_grid() -> Vec<AblationCellSpec> {
    let mut out = Vec::with_capacity(72);
    for semantic_on in [true, false] {
        for init_mode in [InitMode::TextSeeded, InitMode::Random] {
            for recalc_on in [true, false] {
                for variant in SelectionVariant::ALL {
                    for tier_mode in TierMode::ALL {
                        out.push(AblationCellSpec { semantic_on, init_mode, recalc_on, variant, tier_mode });
                    }
                }
            }
        }
    }
    out
}

/// Train once per training-relevant configuration and evaluate every tier
/// mode against it. A failing cell is reported in its row; the sweep
/// continues.
pub fn run_ablation(base: &RunConfig, episode: &Episode) -> Vec<AblationRow> {
    let grid = ablation_grid();
    let tiers = TierMode::ALL.len();
    let groups: Vec<&[AblationCellSpec]> = grid.chunks(tiers).collect();
    let per_group = par::map(&groups, |cells| {
        let cfg = cells[0].apply(base);
        let state = train(&cfg, &episode.base_train);
        cells
            .iter()
            .map(|cell| {
                let state = match &state {
                    Ok(s) => s,
                    Err(e) => return failed(*cell, e.to_string()),
                };
                let opts = PredictOptions { k: cfg.k_act, tier_mode: cell.tier_mode };
                let start = Instant::now();
                match evaluate_with(state, &episode.base_test, &episode.novel_test, opts) {
                    Ok(m) => {
                        let secs = start.elapsed().as_secs_f64().max(1e-9);
                        let n = episode.base_test.len() + episode.novel_test.len();
                        AblationRow {
                            cell: *cell,
                            base: Some(m.base.accuracy),
                            novel: Some(m.novel.accuracy),
                            hm: Some(m.hm),
                            items_per_sec: Some(n as f64 / secs),
                            error: None,
                        }
                    }
                    Err(e) => failed(*cell, e.to_string()),
                }
            })
            .collect::<Vec<_>>()
    });
    per_group.into_iter().flatten().collect()
}

fn failed(cell: AblationCellSpec, error: String) -> AblationRow {
    AblationRow { cell, base: None, novel: None, hm: None, items_per_sec: None, error: Some(error) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_72_distinct_cells() {
        let g = ablation_grid();
        assert_eq!(g.len(), 72);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| b != a));
        }
        // Consecutive triples differ only in tier mode.
        for chunk in g.chunks(3) {
            assert!(chunk.iter().all(|c| c.apply(&RunConfig::default()).tier_mode == c.tier_mode));
            assert!(chunk.iter().all(|c| (c.semantic_on, c.init_mode, c.recalc_on, c.variant)
                == (chunk[0].semantic_on, chunk[0].init_mode, chunk[0].recalc_on, chunk[0].variant)));
        }
    }
}
