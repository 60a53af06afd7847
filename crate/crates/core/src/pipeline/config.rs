//! Run configuration and its flat `key = value` text form.

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationFlags, SelectionVariant};
use crate::error::{Error, Result};
use crate::memory_bank::InitMode;
use crate::numerics::BlockInit;
use crate::objectives::LossWeights;
use crate::representative::{FusionInit, TierMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k_act: usize,
    pub n_proto: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub semantic_on: bool,
    pub recalc_on: bool,
    pub init_mode: InitMode,
    pub selection_variant: SelectionVariant,
    pub tier_mode: TierMode,
    pub shared_irm: bool,
    pub renormalize: bool,
    pub proto_sigma: f64,
    pub assign_temperature: f64,
    pub irm_in_scale: f64,
    pub irm_out_scale: f64,
    pub trm_scale: f64,
    pub theta_in_scale: f64,
    pub theta_out_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_act: 16,
            n_proto: 5,
            width: 64,
            heads: 4,
            ffn_mult: 2,
            alpha: 0.2,
            beta: 0.8,
            tau: 0.01,
            lambda1: 0.02,
            lambda2: 20.0,
            lambda3: 0.1,
            epochs: 30,
            lr: 0.01,
            momentum: 0.0,
            batch_size: 8,
            seed: 7,
            semantic_on: true,
            recalc_on: true,
            init_mode: InitMode::TextSeeded,
            selection_variant: SelectionVariant::TopK,
            tier_mode: TierMode::Both,
            shared_irm: false,
            renormalize: true,
            proto_sigma: 0.1,
            assign_temperature: 0.01,
            irm_in_scale: 1.0,
            irm_out_scale: 0.1,
            trm_scale: 0.1,
            theta_in_scale: 1.0,
            theta_out_scale: 0.1,
        }
    }
}

/// `(key, description)` for every config key, in canonical order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("k_act", "activated tokens kept per item"),
    ("n_proto", "prototypes per class"),
    ("width", "embedding width d"),
    ("heads", "attention heads in every block"),
    ("ffn_mult", "FFN hidden width as a multiple of d"),
    ("alpha", "text fusion coefficient"),
    ("beta", "prototype momentum"),
    ("tau", "softmax temperature"),
    ("lambda1", "weight of the graded tier losses"),
    ("lambda2", "weight of the text regularizer"),
    ("lambda3", "weight of visual KL plus local loss"),
    ("epochs", "training epochs"),
    ("lr", "SGD learning rate"),
    ("momentum", "SGD momentum (0 disables)"),
    ("batch_size", "items per optimizer step"),
    ("seed", "seed for parameter init and data order"),
    ("semantic_on", "add prototype similarity to activation scores"),
    ("recalc_on", "re-score activated tokens against updated prototypes"),
    ("init_mode", "prototype initialization: text-seeded | random"),
    ("selection_variant", "top-k | bottom-k | remove-top-k"),
    ("tier_mode", "tiers used at inference: both | lev1 | lev2"),
    ("shared_irm", "one cross-attention block for both tiers"),
    ("renormalize", "unit-normalize prototypes after each update"),
    ("proto_sigma", "jitter of text-seeded prototypes"),
    ("assign_temperature", "temperature of token-to-prototype assignment"),
    ("irm_in_scale", "init scale of IRM input projections"),
    ("irm_out_scale", "init scale of IRM output projections"),
    ("trm_scale", "init scale of the TRM linear map"),
    ("theta_in_scale", "init scale of frozen-block input projections"),
    ("theta_out_scale", "init scale of frozen-block output projections"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.width
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3, tau: self.tau }
    }

    pub fn activation_flags(&self) -> ActivationFlags {
        ActivationFlags {
            k: self.k_act,
            semantic_on: self.semantic_on,
            recalc_on: self.recalc_on,
            variant: self.selection_variant,
        }
    }

    pub fn fusion_init(&self) -> FusionInit {
        FusionInit {
            irm: BlockInit { in_scale: self.irm_in_scale, out_scale: self.irm_out_scale },
            trm_scale: self.trm_scale,
        }
    }

    pub fn theta_init(&self) -> BlockInit {
        BlockInit { in_scale: self.theta_in_scale, out_scale: self.theta_out_scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_act == 0 {
            return bad("k_act must be ≥ 1".into());
        }
        if self.n_proto == 0 {
            return Err(Error::InvalidK(0));
        }
        if self.width < 2 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be ≥ 2 and divisible by heads {}", self.width, self.heads));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} outside [0, 1]", self.beta));
        }
        self.loss_weights().validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.proto_sigma >= 0.0) {
            return bad(format!("proto_sigma = {} must be ≥ 0", self.proto_sigma));
        }
        if !(self.assign_temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.assign_temperature));
        }
        for (k, v) in [
            ("irm_in_scale", self.irm_in_scale),
            ("irm_out_scale", self.irm_out_scale),
            ("trm_scale", self.trm_scale),
            ("theta_in_scale", self.theta_in_scale),
            ("theta_out_scale", self.theta_out_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} = {v} must be ≥ 0"));
            }
        }
        Ok(())
    }

    /// Set one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k_act" => self.k_act = parse(key, v)?,
            "n_proto" => self.n_proto = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "lambda3" => self.lambda3 = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "semantic_on" => self.semantic_on = parse_bool(key, v)?,
            "recalc_on" => self.recalc_on = parse_bool(key, v)?,
            "init_mode" => self.init_mode = v.parse()?,
            "selection_variant" => self.selection_variant = v.parse()?,
            "tier_mode" => self.tier_mode = v.parse()?,
            "shared_irm" => self.shared_irm = parse_bool(key, v)?,
            "renormalize" => self.renormalize = parse_bool(key, v)?,
            "proto_sigma" => self.proto_sigma = parse(key, v)?,
            "assign_temperature" => self.assign_temperature = parse(key, v)?,
            "irm_in_scale" => self.irm_in_scale = parse(key, v)?,
            "irm_out_scale" => self.irm_out_scale = parse(key, v)?,
            "trm_scale" => self.trm_scale = parse(key, v)?,
            "theta_in_scale" => self.theta_in_scale = parse(key, v)?,
            "theta_out_scale" => self.theta_out_scale = parse(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("line {}: expected key = value", n + 1)));
            };
            cfg.set(k, v).map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Text value of a key, as [`RunConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        let json = serde_json::to_value(self).ok()?;
        json.get(key).map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).unwrap_or_default()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta), (0.2, 0.8));
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (0.02, 20.0, 0.1));
        assert_eq!((c.n_proto, c.k_act, c.width, c.heads, c.epochs), (5, 16, 64, 4, 30));
        assert_eq!((c.lr, c.tau), (0.01, 0.01));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let c = RunConfig {
            k_act: 8,
            init_mode: InitMode::Random,
            tier_mode: TierMode::Lev2,
            semantic_on: false,
            ..RunConfig::default()
        };
        let back = RunConfig::parse_kv(&c.to_kv(), RunConfig::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        for (k, _) in CONFIG_KEYS {
            let mut d = RunConfig::default();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        assert!(RunConfig::parse_kv("bogus = 1", RunConfig::default()).is_err());
        assert!(RunConfig::parse_kv("alpha = 2", RunConfig::default()).is_err());
        assert!(RunConfig::parse_kv("k_act = many", RunConfig::default()).is_err());
        let c = RunConfig::parse_kv("# comment\nk_act = 4  # trailing\n\n", RunConfig::default()).unwrap();
        assert_eq!(c.k_act, 4);
    }
}
