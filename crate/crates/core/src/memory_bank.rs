//! Semantic memory bank: `K` prototypes per class, refined during training by
//! momentum updates from the tokens assigned to them.
//!
//! Prototypes are stored at `f32` precision (values are rounded after every
//! update) so checkpoints reproduce the bank exactly.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{argmax, cosine_matrix, cross_entropy, l2_normalize, norm, Matrix};
use crate::rng::SeededRng;

pub const DEFAULT_BETA: f64 = 0.8;
pub const DEFAULT_PROTOTYPES: usize = 5;
pub const DEFAULT_ASSIGN_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    TextSeeded,
    Random,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::TextSeeded => "text-seeded",
            InitMode::Random => "random",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-seeded" | "text" => Ok(InitMode::TextSeeded),
            "random" => Ok(InitMode::Random),
            other => Err(Error::InvalidConfig(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    /// One `K×d` matrix per class.
    prototypes: Vec<Matrix>,
    pub beta: f64,
    pub init_mode: InitMode,
    /// Re-normalize updated prototypes to unit length.
    pub renormalize: bool,
}

/// Soft assignment of tokens to one class's prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `n×K`; every row is a probability vector.
    pub weights: Matrix,
    /// Row-wise argmax of `weights`, lowest index on ties.
    pub hard: Vec<usize>,
}

/// Build a bank from class text embeddings (`C×d`).
///
/// Text-seeded prototypes are `normalize(T_c + σ·g)` with `g ~ N(0, I/d)`;
/// random prototypes are independent random unit vectors.
pub fn init_bank(
    text_embeddings: &Matrix,
    k: usize,
    mode: InitMode,
    sigma: f64,
    seed: u64,
) -> Result<MemoryBank> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("prototype jitter sigma = {sigma} must be ≥ 0")));
    }
    let d = text_embeddings.cols();
    let mut rng = SeededRng::derive(seed, 0xBA4C);
    let jitter = sigma / (d as f64).sqrt();
    let mut prototypes = Vec::with_capacity(text_embeddings.rows());
    for c in 0..text_embeddings.rows() {
        let mut rows = Vec::with_capacity(k);
        for _ in 0..k {
            let raw: Vec<f64> = match mode {
                InitMode::TextSeeded => {
                    text_embeddings.row(c).iter().map(|t| t + jitter * rng.gaussian()).collect()
                }
                InitMode::Random => rng.gaussian_vec(d),
            };
            let unit: Vec<f64> = l2_normalize(&raw)?.into_iter().map(|v| v as f32 as f64).collect();
            rows.push(unit);
        }
        prototypes.push(Matrix::from_rows(&rows));
    }
    Ok(MemoryBank { prototypes, beta: DEFAULT_BETA, init_mode: mode, renormalize: true })
}

impl MemoryBank {
    pub fn from_prototypes(prototypes: Vec<Matrix>, beta: f64, init_mode: InitMode) -> Result<Self> {
        let bank = Self { prototypes, beta, init_mode, renormalize: true };
        bank.validate()?;
        Ok(bank)
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_renormalize(mut self, on: bool) -> Self {
        self.renormalize = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta = {} outside [0, 1]", self.beta)));
        }
        let Some(first) = self.prototypes.first() else {
            return Err(dim_mismatch("bank has no classes"));
        };
        if first.rows() == 0 {
            return Err(Error::InvalidK(0));
        }
        for p in &self.prototypes {
            if p.shape() != first.shape() {
                return Err(dim_mismatch("prototype matrices differ in shape"));
            }
            if !p.is_finite() || p.row_iter().any(|r| norm(r) == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn k(&self) -> usize {
        self.prototypes[0].rows()
    }

    pub fn width(&self) -> usize {
        self.prototypes[0].cols()
    }

    pub fn class_prototypes(&self, c: usize) -> &Matrix {
        &self.prototypes[c]
    }

    pub fn prototypes(&self) -> &[Matrix] {
        &self.prototypes
    }

    /// Bytes needed to store the bank as 32-bit reals.
    pub fn storage_bytes(&self) -> usize {
        self.n_classes() * self.k() * self.width() * 4
    }

    /// Flatten to `C·K·d` values, class-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.prototypes.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Apply one momentum step to `category` from its assigned tokens.
    ///
    /// `u_j ← β·u_j + (1−β)·Σ_{i ∈ bucket j} D[i,j]·tok_i`; prototypes with
    /// empty buckets are left untouched, as is every other class.
    pub fn momentum_update(
        &mut self,
        category: usize,
        assignment: &Assignment,
        tokens: &Matrix,
    ) -> Result<()> {
        if category >= self.n_classes() {
            return Err(Error::LabelOutOfRange { label: category, classes: self.n_classes() });
        }
        let (k, d) = (self.k(), self.width());
        if tokens.cols() != d
            || assignment.weights.shape() != (tokens.rows(), k)
            || assignment.hard.len() != tokens.rows()
        {
            return Err(dim_mismatch(format!(
                "assignment {:?} / tokens {:?} vs bank K={k}, d={d}",
                assignment.weights.shape(),
                tokens.shape()
            )));
        }
        if self.beta == 1.0 {
            return Ok(());
        }
        let beta = self.beta;
        let protos = &mut self.prototypes[category];
        for j in 0..k {
            let members: Vec<usize> = (0..tokens.rows()).filter(|&i| assignment.hard[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let mut pull = vec![0.0; d];
            for &i in &members {
                let w = assignment.weights.get(i, j);
                for (p, t) in pull.iter_mut().zip(tokens.row(i)) {
                    *p += w * t;
                }
            }
            let mut updated: Vec<f64> =
                protos.row(j).iter().zip(&pull).map(|(u, p)| beta * u + (1.0 - beta) * p).collect();
            if self.renormalize {
                updated = l2_normalize(&updated)?;
            }
            for (dst, v) in protos.row_mut(j).iter_mut().zip(updated) {
                *dst = v as f32 as f64;
            }
        }
        Ok(())
    }
}

/// Category whose best-matching prototype is most similar to `pooled`.
pub fn match_class(pooled: &[f64], bank: &MemoryBank) -> Result<usize> {
    if pooled.len() != bank.width() {
        return Err(dim_mismatch(format!("pooled width {} vs bank {}", pooled.len(), bank.width())));
    }
    let q = Matrix::row_vector(pooled.to_vec());
    let scores = bank
        .prototypes()
        .iter()
        .map(|p| Ok(cosine_matrix(&q, p)?.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(argmax(&scores))
}

/// Softmax over prototypes of `cos(tok_i, u_j) / temperature`, plus the
/// argmax bucket of each token.
pub fn assign_tokens(tokens: &Matrix, class_protos: &Matrix, temperature: f64) -> Result<Assignment> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if tokens.rows() == 0 || class_protos.rows() == 0 {
        return Err(dim_mismatch("assignment needs at least one token and one prototype"));
    }
    let cos = cosine_matrix(tokens, class_protos)?;
    let mut weights = cos.clone();
    let mut hard = Vec::with_capacity(tokens.rows());
    for r in 0..cos.rows() {
        let p = crate::numerics::softmax(cos.row(r), temperature)?;
        hard.push(argmax(&p));
        weights.row_mut(r).copy_from_slice(&p);
    }
    Ok(Assignment { weights, hard })
}

/// Per-class logits `s_c = mean_i max_k cos(tok_i, u_{c,k})`.
pub fn local_logits(bank: &MemoryBank, tokens: &Matrix) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::EmptySelection);
    }
    bank.prototypes()
        .iter()
        .map(|p| {
            let cos = cosine_matrix(tokens, p)?;
            let total: f64 =
                cos.row_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
            Ok(total / tokens.rows() as f64)
        })
        .collect()
}

/// Cross-entropy of `label` under softmax(local_logits / temperature).
pub fn local_loss(bank: &MemoryBank, tokens: &Matrix, label: usize, temperature: f64) -> Result<f64> {
    if label >= bank.n_classes() {
        return Err(Error::LabelOutOfRange { label, classes: bank.n_classes() });
    }
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let logits: Vec<f64> = local_logits(bank, tokens)?.iter().map(|s| s / temperature).collect();
    cross_entropy(&logits, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn text(c: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_fn(c, d, |_, _| rng.gaussian())
    }

    #[test]
    fn zero_jitter_prototypes_equal_text() {
        let t = text(3, 6, 1);
        let bank = init_bank(&t, 4, InitMode::TextSeeded, 0.0, 9).unwrap();
        for c in 0..3 {
            let want: Vec<f64> = l2_normalize(t.row(c)).unwrap().iter().map(|v| *v as f32 as f64).collect();
            for k in 0..4 {
                assert_eq!(bank.class_prototypes(c).row(k), &want[..]);
            }
        }
    }

    #[test]
    fn storage_is_ten_kilobytes_per_category() {
        let t = text(3, 512, 2);
        let bank = init_bank(&t, 5, InitMode::TextSeeded, 0.1, 0).unwrap();
        assert_eq!(bank.storage_bytes(), 3 * 5 * 512 * 4);
        assert_eq!(bank.storage_bytes() / 3, 10_240);
    }

    #[test]
    fn random_mode_is_deterministic() {
        let t = text(4, 8, 3);
        let a = init_bank(&t, 5, InitMode::Random, 0.0, 77).unwrap();
        let b = init_bank(&t, 5, InitMode::Random, 0.0, 77).unwrap();
        assert_eq!(a, b);
        assert!(init_bank(&t, 0, InitMode::Random, 0.0, 77).is_err());
    }

    #[test]
    fn match_class_constructions() {
        let t = text(5, 8, 4);
        let bank = init_bank(&t, 3, InitMode::TextSeeded, 0.0, 0).unwrap();
        assert_eq!(match_class(t.row(2), &bank).unwrap(), 2);
        let scaled: Vec<f64> = t.row(3).iter().map(|v| v * 17.0).collect();
        assert_eq!(match_class(&scaled, &bank).unwrap(), 3);

        let protos = vec![
            Matrix::from_rows(&[basis(3, 0)]),
            Matrix::from_rows(&[basis(3, 1)]),
            Matrix::from_rows(&[basis(3, 2)]),
        ];
        let bank = MemoryBank::from_prototypes(protos, 0.8, InitMode::TextSeeded).unwrap();
        assert_eq!(match_class(&[0.3, 0.0, 0.0], &bank).unwrap(), 0);
        assert!(matches!(match_class(&[0.0, 0.0, 0.0], &bank), Err(Error::ZeroVector)));
    }

    #[test]
    fn assignment_constructions() {
        let protos = Matrix::from_rows(&[basis(5, 0), basis(5, 1), basis(5, 2), basis(5, 3), basis(5, 4)]);
        let tok = Matrix::from_rows(&[basis(5, 3)]);
        let a = assign_tokens(&tok, &protos, 0.01).unwrap();
        assert_eq!(a.hard, vec![3]);
        assert!(a.weights.get(0, 3) > 0.99);

        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let tok = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        let a = assign_tokens(&tok, &same, 0.01).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(a.weights.get(r, j), 1.0 / 3.0, epsilon = 1e-12);
            }
            assert_eq!(a.hard[r], 0);
        }
        assert!(matches!(assign_tokens(&tok, &same, 0.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn momentum_hand_evaluation() {
        let bank = MemoryBank::from_prototypes(vec![Matrix::from_rows(&[[1.0, 0.0]])], 0.8, InitMode::TextSeeded)
            .unwrap()
            .with_renormalize(false);
        let mut b = bank.clone();
        let tok = Matrix::from_rows(&[[0.0, 1.0]]);
        let a = Assignment { weights: Matrix::from_rows(&[[1.0]]), hard: vec![0] };
        b.momentum_update(0, &a, &tok).unwrap();
        assert_eq!(b.class_prototypes(0).row(0), &[0.8f32 as f64, 0.2f32 as f64]);
    }

    #[test]
    fn beta_one_freezes_and_empty_bucket_untouched() {
        let t = text(3, 4, 5);
        let bank = init_bank(&t, 2, InitMode::TextSeeded, 0.2, 1).unwrap().with_beta(1.0);
        let tok = text(6, 4, 6);
        let mut b = bank.clone();
        let a = assign_tokens(&tok, b.class_prototypes(1), 0.01).unwrap();
        b.momentum_update(1, &a, &tok).unwrap();
        assert_eq!(b, bank);

        let mut b = bank.with_beta(0.5);
        let before = b.clone();
        let a = Assignment { weights: Matrix::from_rows(&[[1.0, 0.0]]), hard: vec![0] };
        b.momentum_update(2, &a, &Matrix::from_rows(&[t.row(0)])).unwrap();
        assert_eq!(b.class_prototypes(2).row(1), before.class_prototypes(2).row(1));
        assert_ne!(b.class_prototypes(2).row(0), before.class_prototypes(2).row(0));
        assert_eq!(b.class_prototypes(0), before.class_prototypes(0));
        assert_eq!(b.class_prototypes(1), before.class_prototypes(1));
    }

    #[test]
    fn local_loss_limits() {
        let protos = vec![
            Matrix::from_rows(&[basis(3, 0)]),
            Matrix::from_rows(&[basis(3, 1)]),
            Matrix::from_rows(&[basis(3, 2)]),
        ];
        let bank = MemoryBank::from_prototypes(protos, 0.8, InitMode::TextSeeded).unwrap();
        let tok = Matrix::from_rows(&[basis(3, 1), basis(3, 1)]);
        assert!(local_loss(&bank, &tok, 1, 0.01).unwrap() < 0.01);
        assert!(matches!(local_loss(&bank, &tok, 3, 0.01), Err(Error::LabelOutOfRange { .. })));

        let same = vec![Matrix::from_rows(&[[1.0, 1.0, 0.0]]); 4];
        let bank = MemoryBank::from_prototypes(same, 0.8, InitMode::TextSeeded).unwrap();
        assert_abs_diff_eq!(local_loss(&bank, &tok, 2, 0.01).unwrap(), 4f64.ln(), epsilon = 1e-12);
    }
}
