use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::activation::{finish_profile, score_and_select, ActivationProfile};
use crate::error::{dim_mismatch, Error, Result};
use crate::features::FeatureSet;
use crate::memory_bank::{assign_tokens, init_bank, local_loss, MemoryBank};
use crate::numerics::{argmax, Matrix, Tape};
use crate::objectives::{class_logits, item_losses_on_tape, LossBreakdown};
use crate::par;
use crate::representative::{FrozenTheta, FusionParams, FusionVars, TierMode};
use crate::rng::SeededRng;

const PARAM_STREAM: u64 = 0xF05E;
const ORDER_STREAM: u64 = 0x0DE0;

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Fraction of training items whose training-path logits pick the label.
    pub train_accuracy: f64,
}

/// Everything needed to run inference, plus how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedState {
    pub config: RunConfig,
    pub params: FusionParams,
    pub theta: FrozenTheta,
    pub bank: MemoryBank,
    pub history: Vec<EpochRecord>,
}

impl TrainedState {
    /// Freshly initialized state for classes with text embeddings `text`.
    pub fn init(config: &RunConfig, text: &Matrix) -> Result<Self> {
        config.validate()?;
        if text.cols() != config.width {
            return Err(dim_mismatch(format!("text width {} vs config width {}", text.cols(), config.width)));
        }
        let mut rng = SeededRng::derive(config.seed, PARAM_STREAM);
        let params = FusionParams::init(
            config.width,
            config.heads,
            config.ffn_width(),
            config.shared_irm,
            config.alpha,
            config.fusion_init(),
            &mut rng,
        )?;
        let theta =
            FrozenTheta::init(config.width, config.heads, config.ffn_width(), config.theta_init(), config.seed)?;
        let bank = fresh_bank(config, text)?;
        Ok(Self { config: config.clone(), params, theta, bank, history: Vec::new() })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.param_count()
    }
}

/// A bank for `text` as the config prescribes, before any update.
pub fn fresh_bank(config: &RunConfig, text: &Matrix) -> Result<MemoryBank> {
    Ok(init_bank(text, config.n_proto, config.init_mode, config.proto_sigma, config.seed)?
        .with_beta(config.beta)
        .with_renormalize(config.renormalize))
}

pub(crate) fn check_data(config: &RunConfig, data: &FeatureSet) -> Result<()> {
    if data.width() != config.width {
        return Err(dim_mismatch(format!("feature width {} vs config width {}", data.width(), config.width)));
    }
    if config.k_act > data.n_tok() {
        return Err(Error::KOutOfRange { k: config.k_act, n: data.n_tok() });
    }
    Ok(())
}

/// Gradient, loss and correctness for one item at fixed bank and parameters.
pub struct ItemGrad {
    pub grad: Vec<f64>,
    pub loss: LossBreakdown,
    pub correct: bool,
}

/// Forward and backward pass of the total loss for one item whose profile
/// already has its tiers.
pub fn item_gradient(
    state: &TrainedState,
    profile: &ActivationProfile,
    tokens: &Matrix,
    text: &Matrix,
    label: usize,
) -> Result<ItemGrad> {
    let cfg = &state.config;
    let protos = state.bank.class_prototypes(label);
    let selected = tokens.select_rows(&profile.selected);
    let local = local_loss(&state.bank, &selected, label, cfg.tau)?;

    let mut tape = Tape::new();
    let vars = FusionVars::register(&mut tape, &state.params, &state.theta);
    let tiers = vars.build(&mut tape, profile, tokens, protos, text, cfg.tau, TierMode::Both)?;
    let (root, loss) = item_losses_on_tape(&mut tape, &tiers, text, tokens, local, label, &cfg.loss_weights())?;

    let visual: Vec<&Matrix> = tiers.iter().map(|t| tape.value(t.visual)).collect();
    let text_tiers: Vec<&Matrix> = tiers.iter().map(|t| tape.value(t.text)).collect();
    let logits = class_logits(&Matrix::concat_rows(&visual), &text_tiers, cfg.tau)?;
    let correct = argmax(&logits) == label;

    let grads = tape.backward(root);
    let grad = vars.flat_grad(&grads, &tape);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("gradient entry {i} is {}", grad[i])));
    }
    Ok(ItemGrad { grad, loss, correct })
}

/// Score, select, assign and apply the momentum update for one training item.
/// Returns the profile with tiers still empty.
pub fn activate_and_update(
    bank: &mut MemoryBank,
    config: &RunConfig,
    tokens: &Matrix,
    text: &Matrix,
    label: usize,
) -> Result<ActivationProfile> {
    if label >= bank.n_classes() {
        return Err(Error::LabelOutOfRange { label, classes: bank.n_classes() });
    }
    let profile = score_and_select(tokens, text.row(label), bank.class_prototypes(label), config.activation_flags())?;
    let selected = tokens.select_rows(&profile.selected);
    let assignment = assign_tokens(&selected, bank.class_prototypes(label), config.assign_temperature)?;
    bank.momentum_update(label, &assignment, &selected)?;
    Ok(profile)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = SeededRng::derive(seed, ORDER_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// Train the fusion modules on a labeled feature set.
pub fn train(config: &RunConfig, data: &FeatureSet) -> Result<TrainedState> {
    train_with(config, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &RunConfig,
    data: &FeatureSet,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedState> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let labels = data.labels.as_ref().ok_or(Error::MissingLabels)?;
    check_data(config, data)?;
    let text = &data.text_embeddings;
    let mut state = TrainedState::init(config, text)?;
    let mut velocity = vec![0.0; state.params.param_count()];

    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        let mut losses = Vec::with_capacity(data.len());
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            // Bank updates are sequential; the gradient pass below reads the
            // bank as it stands after the whole batch.
            let mut profiles = Vec::with_capacity(batch.len());
            for &i in batch {
                profiles.push(activate_and_update(&mut state.bank, config, &data.items[i], text, labels[i])?);
            }
            let snapshot = &state;
            let results = par::map_range(batch.len(), |b| {
                let i = batch[b];
                let mut profile = profiles[b].clone();
                finish_profile(&mut profile, &data.items[i], snapshot.bank.class_prototypes(labels[i]))?;
                item_gradient(snapshot, &profile, &data.items[i], text, labels[i])
            });

            let mut sum = vec![0.0; velocity.len()];
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("epoch {}: {m}", epoch + 1)),
                    other => other,
                })?;
                for (s, g) in sum.iter_mut().zip(&r.grad) {
                    *s += g;
                }
                losses.push(r.loss);
                correct += r.correct as usize;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut flat = state.params.flatten();
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&sum) {
                *v = config.momentum * *v + g * scale;
                *p -= config.lr * *v;
            }
            state.params.load_flat(&flat);
            state.params.round_to_f32();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: LossBreakdown::mean(&losses),
            train_accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&record);
        state.history.push(record);
    }
    Ok(state)
}
