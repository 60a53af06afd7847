//! Token activation scoring, top-k selection, and two-tier stratification.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{cosine_matrix, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionVariant {
    TopK,
    BottomK,
    RemoveTopK,
}

impl SelectionVariant {
    pub const ALL: [SelectionVariant; 3] =
        [SelectionVariant::TopK, SelectionVariant::BottomK, SelectionVariant::RemoveTopK];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionVariant::TopK => "top-k",
            SelectionVariant::BottomK => "bottom-k",
            SelectionVariant::RemoveTopK => "remove-top-k",
        }
    }
}

impl std::str::FromStr for SelectionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top-k" => Ok(Self::TopK),
            "bottom-k" => Ok(Self::BottomK),
            "remove-top-k" => Ok(Self::RemoveTopK),
            other => Err(Error::InvalidConfig(format!("unknown selection variant {other:?}"))),
        }
    }
}

/// Scores and tier assignment for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    pub sample_scores: Vec<f64>,
    /// `None` when semantic scoring is switched off.
    pub semantic_scores: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    /// Token indices in selection order.
    pub selected: Vec<usize>,
    pub tier1: Vec<usize>,
    pub tier2: Vec<usize>,
    pub recalc_on: bool,
    pub variant: SelectionVariant,
}

/// `cos(tok_i, T)` for every token.
pub fn sample_scores(tokens: &Matrix, text_embedding: &[f64]) -> Result<Vec<f64>> {
    let t = Matrix::row_vector(text_embedding.to_vec());
    Ok(cosine_matrix(tokens, &t)?.into_data())
}

/// `max_k cos(tok_i, u_k)` for every token.
pub fn semantic_scores(tokens: &Matrix, class_protos: &Matrix) -> Result<Vec<f64>> {
    if class_protos.rows() == 0 {
        return Err(Error::InvalidK(0));
    }
    let cos = cosine_matrix(tokens, class_protos)?;
    Ok(cos.row_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
}

/// Elementwise sum of the two score levels, or the sample scores alone.
pub fn combine(sample: &[f64], semantic: Option<&[f64]>) -> Vec<f64> {
    match semantic {
        Some(s) => sample.iter().zip(s).map(|(a, b)| a + b).collect(),
        None => sample.to_vec(),
    }
}

/// Indices ordered by descending score, lower index first on ties.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Pick tokens by score.
///
/// * `TopK`: the `k` highest, descending.
/// * `BottomK`: the `k` lowest, ascending.
/// * `RemoveTopK`: everything except the `k` highest, descending.
pub fn select_activated(scores: &[f64], k: usize, variant: SelectionVariant) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let ranked = rank_descending(scores);
    Ok(match variant {
        SelectionVariant::TopK => ranked[..k].to_vec(),
        SelectionVariant::RemoveTopK => ranked[k..].to_vec(),
        SelectionVariant::BottomK => {
            let mut asc: Vec<usize> = (0..n).collect();
            asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            asc.truncate(k);
            asc
        }
    })
}

/// Split the selection into a high tier of `⌈m/2⌉` tokens and a low tier.
///
/// `scores` holds the original per-token scores (indexed by token). With
/// `recalc = Some((tokens, protos))` the selected tokens are re-scored as
/// `semantic_scores` against `protos` before ranking.
pub fn stratify(
    selected: &[usize],
    scores: &[f64],
    recalc: Option<(&Matrix, &Matrix)>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let local: Vec<f64> = match recalc {
        Some((tokens, protos)) => semantic_scores(&tokens.select_rows(selected), protos)?,
        None => {
            if let Some(&bad) = selected.iter().find(|&&i| i >= scores.len()) {
                return Err(dim_mismatch(format!("selected token {bad} beyond {} scores", scores.len())));
            }
            selected.iter().map(|&i| scores[i]).collect()
        }
    };
    let mut order: Vec<usize> = (0..selected.len()).collect();
    order.sort_by(|&a, &b| {
        local[b].total_cmp(&local[a]).then(selected[a].cmp(&selected[b]))
    });
    let ranked: Vec<usize> = order.iter().map(|&p| selected[p]).collect();
    let cut = selected.len().div_ceil(2);
    Ok((ranked[..cut].to_vec(), ranked[cut..].to_vec()))
}

/// Scoring and selection switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationFlags {
    pub k: usize,
    pub semantic_on: bool,
    pub recalc_on: bool,
    pub variant: SelectionVariant,
}

/// Score and select, leaving the tiers empty; call [`finish_profile`] once
/// the bank is in the state stratification should see.
pub fn score_and_select(
    tokens: &Matrix,
    text_embedding: &[f64],
    class_protos: &Matrix,
    flags: ActivationFlags,
) -> Result<ActivationProfile> {
    let sample = sample_scores(tokens, text_embedding)?;
    let semantic = if flags.semantic_on { Some(semantic_scores(tokens, class_protos)?) } else { None };
    let combined = combine(&sample, semantic.as_deref());
    let selected = select_activated(&combined, flags.k, flags.variant)?;
    Ok(ActivationProfile {
        sample_scores: sample,
        semantic_scores: semantic,
        combined,
        selected,
        tier1: Vec::new(),
        tier2: Vec::new(),
        recalc_on: flags.recalc_on,
        variant: flags.variant,
    })
}

/// Fill the tiers, re-scoring against `class_protos` when recalculation is on.
pub fn finish_profile(profile: &mut ActivationProfile, tokens: &Matrix, class_protos: &Matrix) -> Result<()> {
    let recalc = profile.recalc_on.then_some((tokens, class_protos));
    let (t1, t2) = stratify(&profile.selected, &profile.combined, recalc)?;
    profile.tier1 = t1;
    profile.tier2 = t2;
    Ok(())
}
