use serde::{Deserialize, Serialize};

use super::train::{check_data, fresh_bank, TrainedState};
use crate::activation::{finish_profile, score_and_select};
use crate::error::{dim_mismatch, Error, Result};
use crate::features::FeatureSet;
use crate::memory_bank::{match_class, MemoryBank};
use crate::numerics::{argmax, mean_pool, softmax, Matrix};
use crate::objectives::class_logits;
use crate::par;
use crate::representative::{build_representatives, TierMode};

/// Knobs that may differ between training and inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub k: usize,
    pub tier_mode: TierMode,
}

impl PredictOptions {
    pub fn from_state(state: &TrainedState) -> Self {
        Self { k: state.config.k_act, tier_mode: state.config.tier_mode }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// The classes an item is classified among: their text embeddings and a
/// prototype bank for them.
#[derive(Clone, Copy, Debug)]
pub struct ClassSet<'a> {
    pub text: &'a Matrix,
    pub bank: &'a MemoryBank,
}

impl<'a> ClassSet<'a> {
    pub fn new(text: &'a Matrix, bank: &'a MemoryBank) -> Result<Self> {
        if text.rows() != bank.n_classes() || text.cols() != bank.width() {
            return Err(dim_mismatch(format!(
                "text {:?} vs bank of {} classes, width {}",
                text.shape(),
                bank.n_classes(),
                bank.width()
            )));
        }
        Ok(Self { text, bank })
    }
}

/// Label-free prediction: the pooled item picks the class whose prototypes
/// steer activation, then the pruned representatives are classified.
pub fn predict(state: &TrainedState, tokens: &Matrix, classes: ClassSet<'_>, opts: PredictOptions) -> Result<Prediction> {
    let cfg = &state.config;
    let pooled = mean_pool(tokens)?;
    let matched = match_class(&pooled, classes.bank)?;
    let protos = classes.bank.class_prototypes(matched);
    let flags = crate::activation::ActivationFlags { k: opts.k, ..cfg.activation_flags() };
    let mut profile = score_and_select(tokens, classes.text.row(matched), protos, flags)?;
    finish_profile(&mut profile, tokens, protos)?;
    let reps = build_representatives(
        &profile,
        tokens,
        protos,
        classes.text,
        &state.params,
        &state.theta,
        cfg.tau,
        opts.tier_mode,
    )?;
    let text_tiers: Vec<&Matrix> = reps.text.iter().map(|(_, m)| m).collect();
    let logits = class_logits(&reps.visual_concat(), &text_tiers, cfg.tau)?;
    let probs = softmax(&logits, 1.0)?;
    Ok(Prediction { class: argmax(&logits), probs })
}

/// Accuracy on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Percent.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Percent correct per class, indexed by label.
    pub per_class: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub base: SplitMetrics,
    pub novel: SplitMetrics,
    pub hm: f64,
}

/// `2bn/(b+n)`, zero when both are zero.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}

/// Tally predictions against labels.
pub fn tally(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<SplitMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    if predicted.len() != labels.len() {
        return Err(dim_mismatch(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let mut hits = vec![0usize; n_classes];
    let mut seen = vec![0usize; n_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, classes: n_classes });
        }
        seen[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let correct: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { 100.0 * h as f64 / s as f64 })
        .collect();
    Ok(SplitMetrics {
        accuracy: 100.0 * correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        per_class,
    })
}

/// Predicted class for every item of `data`.
pub fn predict_all(state: &TrainedState, data: &FeatureSet, bank: &MemoryBank, opts: PredictOptions) -> Result<Vec<usize>> {
    let classes = ClassSet::new(&data.text_embeddings, bank)?;
    let preds = par::try_map(&data.items, |tokens| predict(state, tokens, classes, opts).map(|p| p.class))?;
    Ok(preds)
}

/// Prototype bank for classes never seen in training.
pub fn novel_bank(state: &TrainedState, text: &Matrix) -> Result<MemoryBank> {
    fresh_bank(&state.config, text)
}

pub fn evaluate_split(state: &TrainedState, data: &FeatureSet, bank: &MemoryBank, opts: PredictOptions) -> Result<SplitMetrics> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let labels = data.labels.as_ref().ok_or(Error::MissingLabels)?;
    check_data(&state.config, data)?;
    if opts.k > data.n_tok() {
        return Err(Error::KOutOfRange { k: opts.k, n: data.n_tok() });
    }
    let preds = predict_all(state, data, bank, opts)?;
    tally(&preds, labels, data.n_classes())
}

/// Base classes use the trained bank; novel classes get a fresh bank from
/// their text embeddings.
pub fn evaluate(state: &TrainedState, base: &FeatureSet, novel: &FeatureSet) -> Result<Metrics> {
    evaluate_with(state, base, novel, PredictOptions::from_state(state))
}

pub fn evaluate_with(
    state: &TrainedState,
    base: &FeatureSet,
    novel: &FeatureSet,
    opts: PredictOptions,
) -> Result<Metrics> {
    let base_m = evaluate_split(state, base, &state.bank, opts)?;
    let bank = novel_bank(state, &novel.text_embeddings)?;
    let novel_m = evaluate_split(state, novel, &bank, opts)?;
    let hm = harmonic_mean(base_m.accuracy, novel_m.accuracy);
    Ok(Metrics { base: base_m, novel: novel_m, hm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(77.62, 71.71) - 74.55).abs() < 0.01);
        assert!((harmonic_mean(69.34, 74.22) - 71.70).abs() < 0.01);
        assert_eq!(harmonic_mean(100.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(42.5, 42.5) - 42.5).abs() < 1e-12);
    }

    #[test]
    fn tally_counts() {
        let m = tally(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!((m.correct, m.total), (3, 4));
        assert_eq!(m.accuracy, 75.0);
        assert_eq!(m.per_class, vec![100.0, 100.0, 50.0]);
        assert!(matches!(tally(&[], &[], 3), Err(Error::EmptySplit)));
    }
}
