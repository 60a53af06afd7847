//! Representative-token fusion.
//!
//! Visual side: the class prototypes query the tier tokens through a
//! trainable cross-attention block, then the fused prototypes and the tier
//! tokens pass together through a frozen self-attention block; the first `K`
//! output rows are the visual representatives.
//!
//! Text side: every class text embedding softly matches the tier tokens, and
//! a residual linear map fuses the embedding with its matched aggregate:
//! `rep_i = α·Linear([text_i ⊕ Σ_j W_ij·tok_j]) + text_i`.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationProfile;
use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{
    cosine_matrix, softmax, BlockInit, BlockVars, Matrix, Tape, TransformerBlockParams, Var,
};
use crate::rng::SeededRng;

pub const DEFAULT_ALPHA: f64 = 0.2;

/// Which tiers feed the representatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierMode {
    Both,
    Lev1,
    Lev2,
}

impl TierMode {
    pub const ALL: [TierMode; 3] = [TierMode::Both, TierMode::Lev1, TierMode::Lev2];

    pub fn as_str(self) -> &'static str {
        match self {
            TierMode::Both => "both",
            TierMode::Lev1 => "lev1",
            TierMode::Lev2 => "lev2",
        }
    }

    pub fn includes(self, tier: usize) -> bool {
        matches!((self, tier), (TierMode::Both, _) | (TierMode::Lev1, 0) | (TierMode::Lev2, 1))
    }
}

impl std::str::FromStr for TierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(TierMode::Both),
            "lev1" => Ok(TierMode::Lev1),
            "lev2" => Ok(TierMode::Lev2),
            other => Err(Error::InvalidConfig(format!("unknown tier mode {other:?}"))),
        }
    }
}

/// The trainable parameters: one cross-attention block per tier (or one
/// shared block) and the text-side linear map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub irm: Vec<TransformerBlockParams>,
    /// `2d×d`
    pub trm_weight: Matrix,
    /// `1×d`
    pub trm_bias: Matrix,
    pub alpha: f64,
}

/// Initialization scales for [`FusionParams::init`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionInit {
    pub irm: BlockInit,
    /// TRM weights are drawn with `std = trm_scale / sqrt(2d)`.
    pub trm_scale: f64,
}

impl FusionParams {
    pub fn zeros(width: usize, heads: usize, ffn_width: usize, shared_irm: bool, alpha: f64) -> Result<Self> {
        let block = TransformerBlockParams::zeros(width, heads, ffn_width)?;
        let irm = if shared_irm { vec![block] } else { vec![block.clone(), block] };
        Ok(Self {
            irm,
            trm_weight: Matrix::zeros(2 * width, width),
            trm_bias: Matrix::zeros(1, width),
            alpha,
        })
    }

    pub fn init(
        width: usize,
        heads: usize,
        ffn_width: usize,
        shared_irm: bool,
        alpha: f64,
        init: FusionInit,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let n = if shared_irm { 1 } else { 2 };
        let irm = (0..n)
            .map(|_| TransformerBlockParams::random(width, heads, ffn_width, init.irm, rng))
            .collect::<Result<Vec<_>>>()?;
        let std = init.trm_scale / ((2 * width) as f64).sqrt();
        let trm_weight = Matrix::from_fn(2 * width, width, |_, _| std * rng.gaussian());
        let mut p = Self { irm, trm_weight, trm_bias: Matrix::zeros(1, width), alpha };
        p.round_to_f32();
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.trm_bias.cols()
    }

    pub fn shared_irm(&self) -> bool {
        self.irm.len() == 1
    }

    pub fn irm_for_tier(&self, tier: usize) -> &TransformerBlockParams {
        &self.irm[tier.min(self.irm.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if self.irm.is_empty() || self.irm.len() > 2 {
            return Err(dim_mismatch(format!("{} IRM blocks; expected 1 or 2", self.irm.len())));
        }
        let d = self.width();
        for b in &self.irm {
            b.validate()?;
            if b.width != d {
                return Err(dim_mismatch(format!("IRM width {} vs TRM width {d}", b.width)));
            }
        }
        if self.trm_weight.shape() != (2 * d, d) {
            return Err(dim_mismatch(format!("TRM weight {:?}", self.trm_weight.shape())));
        }
        Ok(())
    }

    /// Named trainable tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, b) in self.irm.iter().enumerate() {
            for (name, m) in b.tensors() {
                out.push((format!("irm.{i}.{name}"), m));
            }
        }
        out.push(("trm.weight".into(), &self.trm_weight));
        out.push(("trm.bias".into(), &self.trm_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, b) in self.irm.iter_mut().enumerate() {
            for (name, m) in b.tensors_mut() {
                out.push((format!("irm.{i}.{name}"), m));
            }
        }
        out.push(("trm.weight".into(), &mut self.trm_weight));
        out.push(("trm.bias".into(), &mut self.trm_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Blocks × block formula, plus the `2d×d` TRM weight and its bias.
    pub fn param_count_formula(width: usize, ffn_width: usize, shared_irm: bool) -> usize {
        let blocks = if shared_irm { 1 } else { 2 };
        blocks * TransformerBlockParams::param_count_formula(width, ffn_width) + 2 * width * width + width
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len(), "flat parameter length");
    }

    pub fn round_to_f32(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.round_to_f32();
        }
    }
}

/// The frozen self-attention block applied after cross-attention fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenTheta(pub TransformerBlockParams);

impl FrozenTheta {
    pub fn init(width: usize, heads: usize, ffn_width: usize, init: BlockInit, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::derive(seed, 0x7E7A);
        let mut p = TransformerBlockParams::random(width, heads, ffn_width, init, &mut rng)?;
        p.round_to_f32();
        Ok(Self(p))
    }

    pub fn zeros(width: usize, heads: usize, ffn_width: usize) -> Result<Self> {
        Ok(Self(TransformerBlockParams::zeros(width, heads, ffn_width)?))
    }
}

/// Prototypes (`K×d`) attend over tier tokens (`m×d`).
pub fn irm_fuse(class_protos: &Matrix, tier_tokens: &Matrix, irm: &TransformerBlockParams) -> Result<Matrix> {
    if tier_tokens.rows() == 0 {
        return Err(Error::EmptySelection);
    }
    irm.forward(class_protos, tier_tokens)
}

/// Run `[Û ; tier]` through the frozen block; returns the first `K` rows and
/// the updated tier tokens.
pub fn extract_visual_rep(fused: &Matrix, tier_tokens: &Matrix, theta: &FrozenTheta) -> Result<(Matrix, Matrix)> {
    if fused.cols() != tier_tokens.cols() {
        return Err(dim_mismatch(format!("fused width {} vs tokens {}", fused.cols(), tier_tokens.cols())));
    }
    let seq = Matrix::concat_rows(&[fused, tier_tokens]);
    let out = theta.0.self_attention(&seq)?;
    let k = fused.rows();
    Ok((out.slice_rows(0, k), out.slice_rows(k, tier_tokens.rows())))
}

/// Matching weights: row `i` is softmax over tier tokens of
/// `cos(text_i, tok_j) / temperature`.
pub fn trm_matching(text: &Matrix, tier_tokens: &Matrix, temperature: f64) -> Result<Matrix> {
    if tier_tokens.rows() == 0 {
        return Err(Error::EmptySelection);
    }
    let mut w = cosine_matrix(text, tier_tokens)?;
    for r in 0..w.rows() {
        let p = softmax(w.row(r), temperature)?;
        w.row_mut(r).copy_from_slice(&p);
    }
    Ok(w)
}

/// Text-side fusion for one tier.
pub fn trm_fuse(
    text: &Matrix,
    tier_tokens: &Matrix,
    params: &FusionParams,
    temperature: f64,
) -> Result<Matrix> {
    let d = params.width();
    if text.cols() != d || tier_tokens.cols() != d {
        return Err(dim_mismatch(format!(
            "TRM width {d} vs text {} and tokens {}",
            text.cols(),
            tier_tokens.cols()
        )));
    }
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(Error::InvalidConfig(format!("alpha = {} outside [0, 1]", params.alpha)));
    }
    let w = trm_matching(text, tier_tokens, temperature)?;
    let aggregated = w.matmul(tier_tokens);
    let joined = Matrix::concat_cols(&[text, &aggregated]);
    let linear = joined.matmul(&params.trm_weight).add_row(params.trm_bias.data());
    Ok(linear.scale(params.alpha).add(text))
}

/// Visual and text representatives, one entry per contributing tier.
#[derive(Clone, Debug, PartialEq)]
pub struct Representatives {
    /// `(tier index, K×d)`
    pub visual: Vec<(usize, Matrix)>,
    /// `(tier index, C×d)`
    pub text: Vec<(usize, Matrix)>,
}

impl Representatives {
    pub fn visual_concat(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.visual.iter().map(|(_, m)| m).collect();
        Matrix::concat_rows(&parts)
    }

    pub fn text_concat(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.text.iter().map(|(_, m)| m).collect();
        Matrix::concat_rows(&parts)
    }

    pub fn tiers(&self) -> usize {
        self.visual.len()
    }
}

/// Tier token index lists in tier order, filtered by `mode`. Empty tiers are
/// dropped.
pub fn active_tiers(profile: &ActivationProfile, mode: TierMode) -> Vec<(usize, &[usize])> {
    [profile.tier1.as_slice(), profile.tier2.as_slice()]
        .into_iter()
        .enumerate()
        .filter(|(i, t)| mode.includes(*i) && !t.is_empty())
        .collect()
}

/// Run both fusion paths independently per tier and collect the outputs.
#[allow(clippy::too_many_arguments)]
pub fn build_representatives(
    profile: &ActivationProfile,
    tokens: &Matrix,
    class_protos: &Matrix,
    text: &Matrix,
    params: &FusionParams,
    theta: &FrozenTheta,
    temperature: f64,
    mode: TierMode,
) -> Result<Representatives> {
    let tiers = active_tiers(profile, mode);
    if tiers.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut visual = Vec::with_capacity(tiers.len());
    let mut text_out = Vec::with_capacity(tiers.len());
    for (tier, idx) in tiers {
        let tier_tokens = tokens.select_rows(idx);
        let fused = irm_fuse(class_protos, &tier_tokens, params.irm_for_tier(tier))?;
        let (rep, _) = extract_visual_rep(&fused, &tier_tokens, theta)?;
        visual.push((tier, rep));
        text_out.push((tier, trm_fuse(text, &tier_tokens, params, temperature)?));
    }
    Ok(Representatives { visual, text: text_out })
}

/// [`FusionParams`] registered on a tape as trainable leaves, with the
/// frozen block as constants.
pub struct FusionVars {
    pub irm: Vec<BlockVars>,
    pub trm_weight: Var,
    pub trm_bias: Var,
    pub theta: BlockVars,
    alpha: f64,
}

/// Tape handles for one tier's representatives.
pub struct TierVars {
    pub tier: usize,
    pub visual: Var,
    pub text: Var,
}

impl FusionVars {
    pub fn register(tape: &mut Tape, params: &FusionParams, theta: &FrozenTheta) -> Self {
        let irm = params.irm.iter().map(|b| BlockVars::register(tape, b, true)).collect();
        let trm_weight = tape.param(params.trm_weight.clone());
        let trm_bias = tape.param(params.trm_bias.clone());
        let theta = BlockVars::register(tape, &theta.0, false);
        Self { irm, trm_weight, trm_bias, theta, alpha: params.alpha }
    }

    /// Tape counterpart of [`build_representatives`].
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        &self,
        tape: &mut Tape,
        profile: &ActivationProfile,
        tokens: &Matrix,
        class_protos: &Matrix,
        text: &Matrix,
        temperature: f64,
        mode: TierMode,
    ) -> Result<Vec<TierVars>> {
        let tiers = active_tiers(profile, mode);
        if tiers.is_empty() {
            return Err(Error::EmptySelection);
        }
        let protos = tape.constant(class_protos.clone());
        let text_v = tape.constant(text.clone());
        let k = class_protos.rows();
        let mut out = Vec::with_capacity(tiers.len());
        for (tier, idx) in tiers {
            let tier_tokens = tokens.select_rows(idx);
            let w = trm_matching(text, &tier_tokens, temperature)?;
            let aggregated = tape.constant(w.matmul(&tier_tokens));
            let tok = tape.constant(tier_tokens);

            let block = &self.irm[tier.min(self.irm.len() - 1)];
            let fused = block.forward(tape, protos, tok);
            let seq = tape.concat_rows(&[fused, tok]);
            let mixed = self.theta.forward(tape, seq, seq);
            let visual = tape.slice_rows(mixed, 0, k);

            let joined = tape.concat_cols(&[text_v, aggregated]);
            let lin = tape.matmul(joined, self.trm_weight);
            let lin = tape.add_row(lin, self.trm_bias);
            let lin = tape.scale(lin, self.alpha);
            let text_rep = tape.add(lin, text_v);
            out.push(TierVars { tier, visual, text: text_rep });
        }
        Ok(out)
    }

    /// Flat gradient in [`FusionParams::flatten`] order.
    pub fn flat_grad(&self, grads: &crate::numerics::Grads, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.irm {
            out.extend(b.flat_grad(grads, tape));
        }
        for v in [self.trm_weight, self.trm_bias] {
            let (r, c) = tape.value(v).shape();
            out.extend_from_slice(grads.get_or_zeros(v, r, c).data());
        }
        out
    }
}
