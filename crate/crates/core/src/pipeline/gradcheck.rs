//! Finite-difference audit of the training gradient: every fusion parameter,
//! through the full weighted loss, at random parameter points.

use serde::Serialize;

use super::config::RunConfig;
use super::train::{activate_and_update, fresh_bank, item_gradient, TrainedState};
use crate::activation::finish_profile;
use crate::error::{Error, Result};
use crate::features::{generate_episode, SynthSpec};
use crate::memory_bank::local_loss;
use crate::numerics::{grad_check, TransformerBlockParams};
use crate::objectives::item_losses;
use crate::representative::{build_representatives, FrozenTheta, FusionParams, TierMode};
use crate::rng::SeededRng;

pub const MAX_GRADCHECK_WIDTH: usize = 16;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_GRADCHECK_EPS: f64 = 1e-6;

const POINT_STREAM: u64 = 0x6C4E;

/// A small configuration that exercises every code path cheaply.
pub fn small_config() -> RunConfig {
    RunConfig { width: 8, heads: 2, n_proto: 3, k_act: 6, ..RunConfig::default() }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub seeds: usize,
    pub n_params: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_param: String,
    /// Worst error per tensor over all seeds, in parameter order.
    pub groups: Vec<GroupError>,
    pub passed: bool,
}

/// State, item and selection for one seed: random dense parameters (every
/// entry nonzero) and a bank that has seen one update.
fn setup(cfg: &RunConfig, seed: u64) -> Result<(TrainedState, crate::activation::ActivationProfile, crate::Matrix, crate::Matrix, usize)> {
    let spec = SynthSpec {
        n_classes: 3,
        n_tok: cfg.k_act.max(8),
        d: cfg.width,
        signal_tokens: 2,
        noise_sigma: 0.3,
        distractor_pool: 3,
        seed,
    };
    let (train, _) = generate_episode(&spec, 1, 1)?;
    let mut rng = SeededRng::derive(seed, POINT_STREAM);
    let label = rng.below(3);
    let tokens = train.items[label].clone();
    let text = train.text_embeddings.clone();

    let cfg = RunConfig { seed, ..cfg.clone() };
    let blocks = if cfg.shared_irm { 1 } else { 2 };
    let irm = (0..blocks)
        .map(|_| TransformerBlockParams::random_dense(cfg.width, cfg.heads, cfg.ffn_width(), 0.5, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut params = FusionParams::zeros(cfg.width, cfg.heads, cfg.ffn_width(), cfg.shared_irm, cfg.alpha)?;
    params.irm = irm;
    params.trm_weight.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.gaussian());
    params.trm_bias.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.gaussian());
    let theta = FrozenTheta(TransformerBlockParams::random_dense(cfg.width, cfg.heads, cfg.ffn_width(), 0.5, &mut rng)?);

    let mut bank = fresh_bank(&cfg, &text)?;
    let mut profile = activate_and_update(&mut bank, &cfg, &tokens, &text, label)?;
    finish_profile(&mut profile, &tokens, bank.class_prototypes(label))?;
    let state = TrainedState { config: cfg, params, theta, bank, history: Vec::new() };
    Ok((state, profile, tokens, text, label))
}

/// Check one seed. With `corrupt` the analytic gradient is deliberately
/// perturbed, which the check must catch.
pub fn gradcheck_seed(cfg: &RunConfig, seed: u64, eps: f64, corrupt: bool) -> Result<(Vec<f64>, f64)> {
    let (state, profile, tokens, text, label) = setup(cfg, seed)?;
    let mut analytic = item_gradient(&state, &profile, &tokens, &text, label)?.grad;
    if corrupt {
        analytic[0] += 1.0;
    }
    let protos = state.bank.class_prototypes(label);
    let selected = tokens.select_rows(&profile.selected);
    let local = local_loss(&state.bank, &selected, label, state.config.tau)?;
    let weights = state.config.loss_weights();
    let loss = |flat: &[f64]| {
        let mut params = state.params.clone();
        params.load_flat(flat);
        build_representatives(&profile, &tokens, protos, &text, &params, &state.theta, state.config.tau, TierMode::Both)
            .and_then(|reps| item_losses(&reps, &text, &tokens, local, label, &weights))
            .map_or(f64::NAN, |b| b.total)
    };
    let report = grad_check(loss, &state.params.flatten(), &analytic, eps)?;
    Ok((report.errors, report.max_rel_error))
}

/// Run [`gradcheck_seed`] for `seeds` consecutive seeds starting at `first_seed`.
pub fn run_gradcheck(cfg: &RunConfig, first_seed: u64, seeds: usize, eps: f64, corrupt: bool) -> Result<GradcheckSummary> {
    cfg.validate()?;
    if cfg.width > MAX_GRADCHECK_WIDTH {
        return Err(Error::InvalidConfig(format!(
            "gradient check needs width ≤ {MAX_GRADCHECK_WIDTH}, got {}",
            cfg.width
        )));
    }
    let layout = FusionParams::zeros(cfg.width, cfg.heads, cfg.ffn_width(), cfg.shared_irm, cfg.alpha)?;
    let names: Vec<(String, usize)> = layout.tensors().into_iter().map(|(n, m)| (n, m.len())).collect();
    let n_params = layout.param_count();
    let mut groups: Vec<GroupError> =
        names.iter().map(|(n, s)| GroupError { name: n.clone(), size: *s, max_rel_error: 0.0 }).collect();
    let (mut worst, mut worst_seed, mut worst_idx) = (0.0f64, first_seed, 0usize);
    for seed in first_seed..first_seed + seeds as u64 {
        let (errors, max) = gradcheck_seed(cfg, seed, eps, corrupt)?;
        let mut at = 0;
        for g in groups.iter_mut() {
            let m = errors[at..at + g.size].iter().copied().fold(0.0, f64::max);
            g.max_rel_error = g.max_rel_error.max(m);
            at += g.size;
        }
        if max > worst || seed == first_seed {
            worst = max;
            worst_seed = seed;
            worst_idx = errors.iter().enumerate().fold(0, |b, (i, e)| if *e > errors[b] { i } else { b });
        }
    }
    let mut at = 0;
    let mut worst_param = String::new();
    for (name, size) in &names {
        if worst_idx < at + size {
            worst_param = format!("{name}[{}]", worst_idx - at);
            break;
        }
        at += size;
    }
    Ok(GradcheckSummary {
        seeds,
        n_params,
        eps,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error: worst,
        worst_seed,
        worst_param,
        groups,
        passed: worst < GRADCHECK_TOLERANCE,
    })
}
