use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::predict::{novel_bank, predict_all, tally, PredictOptions};
use super::train::{check_data, TrainedState};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::numerics::block::block_flops;
use crate::par;
use crate::representative::{FusionParams, TierMode};
use crate::rng::PRNG_NAME;

pub const MIN_WORKLOAD: usize = 100;
pub const MIN_REPS: usize = 5;

/// Parameter count quoted for the method in the efficiency comparison; it
/// does not correspond to any width of the tensors trained here.
pub const QUOTED_PARAM_COUNT: usize = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub k_values: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { k_values: vec![4, 8, 16, 32], reps: MIN_REPS, warmup: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub items_per_sec: f64,
    pub items_per_sec_min: f64,
    pub items_per_sec_max: f64,
    /// Total timed wall clock over all repetitions.
    pub wall_clock_secs: f64,
    /// Percent; `None` for unlabeled workloads.
    pub accuracy: Option<f64>,
    pub flops_per_item: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub n_items: usize,
    pub n_tok: usize,
    pub reps: usize,
    pub warmup: usize,
    pub parallel: bool,
    pub prng: String,
    pub rows: Vec<BenchRow>,
    /// Every token activated (`k = n_tok`).
    pub full_token: BenchRow,
    pub trainable_param_count: usize,
    pub param_count_formula: usize,
    pub note: String,
}

/// Analytic multiply-accumulate count of one prediction at `k` activated
/// tokens over `n_classes` candidate classes.
pub fn inference_flops(state: &TrainedState, n_tok: usize, n_classes: usize, k: usize, tier_mode: TierMode) -> u64 {
    let cfg = &state.config;
    let (n, c, kp, d) = (n_tok as u64, n_classes as u64, cfg.n_proto as u64, cfg.width as u64);
    let kk = k as u64;
    let pool = n * d;
    let matching = c * kp * d + c * kp;
    let scores = n * d + if cfg.semantic_on { n * kp * d } else { 0 };
    let select = n;
    let recalc = if cfg.recalc_on { kk * kp * d } else { 0 };
    let t1 = k.div_ceil(2);
    let mut per_tier = 0u64;
    for (tier, m) in [t1, k - t1].into_iter().enumerate() {
        if m == 0 || !tier_mode.includes(tier) {
            continue;
        }
        let mu = m as u64;
        per_tier += block_flops(cfg.width, cfg.heads, cfg.ffn_width(), cfg.n_proto, m);
        per_tier += block_flops(cfg.width, cfg.heads, cfg.ffn_width(), cfg.n_proto + m, cfg.n_proto + m);
        per_tier += 2 * c * mu * d + 3 * c * mu;
        per_tier += c * 2 * d * d + 2 * c * d;
        per_tier += kp * d + c * d;
    }
    pool + matching + scores + select + recalc + per_tier + c * d + 3 * c
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_one(state: &TrainedState, data: &FeatureSet, bank: &crate::memory_bank::MemoryBank, k: usize, opts: &BenchOptions) -> Result<BenchRow> {
    let popts = PredictOptions { k, tier_mode: state.config.tier_mode };
    for _ in 0..opts.warmup {
        predict_all(state, data, bank, popts)?;
    }
    let mut rates = Vec::with_capacity(opts.reps);
    let mut wall = 0.0;
    let mut preds = Vec::new();
    for _ in 0..opts.reps {
        let start = Instant::now();
        preds = predict_all(state, data, bank, popts)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        wall += secs;
        rates.push(data.len() as f64 / secs);
    }
    let accuracy = match &data.labels {
        Some(labels) => Some(tally(&preds, labels, data.n_classes())?.accuracy),
        None => None,
    };
    let (lo, hi) = (
        rates.iter().copied().fold(f64::INFINITY, f64::min),
        rates.iter().copied().fold(0.0, f64::max),
    );
    Ok(BenchRow {
        k,
        items_per_sec: median(&mut rates),
        items_per_sec_min: lo,
        items_per_sec_max: hi,
        wall_clock_secs: wall,
        accuracy,
        flops_per_item: inference_flops(state, data.n_tok(), data.n_classes(), k, state.config.tier_mode),
    })
}

/// Time prediction over `workload` at every `k`, plus the all-token
/// reference. The workload's classes use the trained bank when they match it
/// and a fresh bank otherwise.
pub fn bench_throughput(state: &TrainedState, workload: &FeatureSet, opts: &BenchOptions) -> Result<ThroughputReport> {
    if workload.len() < MIN_WORKLOAD {
        return Err(Error::WorkloadTooSmall(workload.len()));
    }
    if opts.reps < MIN_REPS {
        return Err(Error::InvalidConfig(format!("need at least {MIN_REPS} repetitions, got {}", opts.reps)));
    }
    check_data(&state.config, workload)?;
    let n = workload.n_tok();
    if let Some(&k) = opts.k_values.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::KOutOfRange { k, n });
    }
    let fresh;
    let bank = if workload.text_embeddings.rows() == state.bank.n_classes()
        && workload.split == crate::features::Split::Base
    {
        &state.bank
    } else {
        fresh = novel_bank(state, &workload.text_embeddings)?;
        &fresh
    };
    let rows = opts
        .k_values
        .iter()
        .map(|&k| bench_one(state, workload, bank, k, opts))
        .collect::<Result<Vec<_>>>()?;
    let full_token = bench_one(state, workload, bank, n, opts)?;
    let cfg = &state.config;
    let formula = FusionParams::param_count_formula(cfg.width, cfg.ffn_width(), cfg.shared_irm);
    let count = state.trainable_param_count();
    Ok(ThroughputReport {
        n_items: workload.len(),
        n_tok: n,
        reps: opts.reps,
        warmup: opts.warmup,
        parallel: par::is_parallel(),
        prng: PRNG_NAME.into(),
        rows,
        full_token,
        trainable_param_count: count,
        param_count_formula: formula,
        note: format!(
            "trainable count is exact ({count}); the quoted figure of {QUOTED_PARAM_COUNT} \
             parameters matches no width of these tensors"
        ),
    })
}
