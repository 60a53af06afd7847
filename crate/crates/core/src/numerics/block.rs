//! Pre-norm transformer block with separate query and key/value inputs.
//!
//! ```text
//! t   = MultiHead(LN_q(Q), LN_kv(KV), LN_kv(KV)) + Q
//! out = FFN(LN_ffn(t)) + t
//! ```
//!
//! Self-attention is the special case `KV = Q`. Inputs are row-major token
//! matrices and every projection multiplies from the right (`X · W + b`).

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Result};
use crate::rng::SeededRng;

use super::matrix::Matrix;
use super::ops::{gelu, layer_norm, softmax_unchecked};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self { gamma: Matrix::filled(1, width, 1.0), beta: Matrix::zeros(1, width) }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        layer_norm(x, self.gamma.data(), self.beta.data())
    }
}

/// Scales for random block initialization: input-side projections
/// (`wq`, `wk`, `wv`, `w1`) are drawn with `std = in_scale / sqrt(fan_in)`,
/// output-side projections (`wo`, `w2`) with `std = out_scale / sqrt(fan_in)`.
/// Biases start at zero and layer norms at identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInit {
    pub in_scale: f64,
    pub out_scale: f64,
}

impl Default for BlockInit {
    fn default() -> Self {
        Self { in_scale: 1.0, out_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlockParams {
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln_ffn: LayerNormParams,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl TransformerBlockParams {
    /// All projections and FFN weights zero, layer norms at identity. The block
    /// is then exactly the identity on its query input.
    pub fn zeros(width: usize, heads: usize, ffn_width: usize) -> Result<Self> {
        check_heads(width, heads)?;
        let d = width;
        let f = ffn_width;
        Ok(Self {
            width,
            heads,
            ffn_width,
            ln_q: LayerNormParams::identity(d),
            ln_kv: LayerNormParams::identity(d),
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln_ffn: LayerNormParams::identity(d),
            w1: Matrix::zeros(d, f),
            b1: Matrix::zeros(1, f),
            w2: Matrix::zeros(f, d),
            b2: Matrix::zeros(1, d),
        })
    }

    pub fn random(
        width: usize,
        heads: usize,
        ffn_width: usize,
        init: BlockInit,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut p = Self::zeros(width, heads, ffn_width)?;
        let d = width as f64;
        let f = ffn_width as f64;
        let mut fill = |m: &mut Matrix, std: f64| {
            m.data_mut().iter_mut().for_each(|v| *v = std * rng.gaussian());
        };
        fill(&mut p.wq, init.in_scale / d.sqrt());
        fill(&mut p.wk, init.in_scale / d.sqrt());
        fill(&mut p.wv, init.in_scale / d.sqrt());
        fill(&mut p.wo, init.out_scale / d.sqrt());
        fill(&mut p.w1, init.in_scale / d.sqrt());
        fill(&mut p.w2, init.out_scale / f.sqrt());
        Ok(p)
    }

    /// Every entry (weights, biases, norm parameters) drawn as `std · N(0,1)`,
    /// with layer-norm gains centred on one. Used for gradient checks at
    /// generic parameter points.
    pub fn random_dense(
        width: usize,
        heads: usize,
        ffn_width: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut p = Self::zeros(width, heads, ffn_width)?;
        for (name, m) in p.tensors_mut() {
            let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            m.data_mut().iter_mut().for_each(|v| *v = centre + std * rng.gaussian());
        }
        Ok(p)
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Named parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("ln_q.gamma", &self.ln_q.gamma),
            ("ln_q.beta", &self.ln_q.beta),
            ("ln_kv.gamma", &self.ln_kv.gamma),
            ("ln_kv.beta", &self.ln_kv.beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln_ffn.gamma", &self.ln_ffn.gamma),
            ("ln_ffn.beta", &self.ln_ffn.beta),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("ln_q.gamma", &mut self.ln_q.gamma),
            ("ln_q.beta", &mut self.ln_q.beta),
            ("ln_kv.gamma", &mut self.ln_kv.gamma),
            ("ln_kv.beta", &mut self.ln_kv.beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln_ffn.gamma", &mut self.ln_ffn.gamma),
            ("ln_ffn.beta", &mut self.ln_ffn.beta),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `6d + 4(d² + d) + 2df + f + d`: three layer norms, four attention
    /// projections with bias, and the two FFN layers.
    pub fn param_count_formula(width: usize, ffn_width: usize) -> usize {
        let d = width;
        let f = ffn_width;
        6 * d + 4 * (d * d + d) + 2 * d * f + f + d
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.width, self.heads)?;
        let d = self.width;
        let f = self.ffn_width;
        let expect: [(usize, usize); 18] = [
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, f),
            (1, f),
            (f, d),
            (1, d),
        ];
        for ((name, m), shape) in self.tensors().into_iter().zip(expect) {
            if m.shape() != shape {
                return Err(dim_mismatch(format!("{name} has shape {:?}, want {shape:?}", m.shape())));
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.round_to_f32();
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
    }

    /// Overwrite all parameters from a flat slice; returns values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        at
    }

    /// Multi-head attention output (before the residual) for pre-normalized
    /// queries and keys/values.
    fn attend(&self, qn: &Matrix, kvn: &Matrix) -> Matrix {
        let q = qn.matmul(&self.wq).add_row(self.bq.data());
        let k = kvn.matmul(&self.wk).add_row(self.bk.data());
        let v = kvn.matmul(&self.wv).add_row(self.bv.data());
        let dh = self.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let mut scores = qh.matmul_t(&kh).scale(scale);
            for r in 0..scores.rows() {
                let p = softmax_unchecked(scores.row(r), 1.0);
                scores.row_mut(r).copy_from_slice(&p);
            }
            heads.push(scores.matmul(&vh));
        }
        let refs: Vec<&Matrix> = heads.iter().collect();
        Matrix::concat_cols(&refs).matmul(&self.wo).add_row(self.bo.data())
    }

    /// Cross-attention block forward pass: `q` is `n_q×d`, `kv` is `n_kv×d`.
    pub fn forward(&self, q: &Matrix, kv: &Matrix) -> Result<Matrix> {
        if q.cols() != self.width || kv.cols() != self.width {
            return Err(dim_mismatch(format!(
                "block width {} vs inputs {} and {}",
                self.width,
                q.cols(),
                kv.cols()
            )));
        }
        if kv.rows() == 0 {
            return Err(dim_mismatch("attention needs at least one key"));
        }
        let qn = self.ln_q.apply(q);
        let kvn = self.ln_kv.apply(kv);
        let t = q.add(&self.attend(&qn, &kvn));
        let h = self.ln_ffn.apply(&t).matmul(&self.w1).add_row(self.b1.data()).map(gelu);
        let f = h.matmul(&self.w2).add_row(self.b2.data());
        Ok(t.add(&f))
    }

    pub fn self_attention(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x, x)
    }
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
        return Err(dim_mismatch(format!("width {width} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Multiply-accumulate count of one forward pass with `n_q` queries over
/// `n_kv` keys.
pub fn block_flops(width: usize, heads: usize, ffn_width: usize, n_q: usize, n_kv: usize) -> u64 {
    let (d, f, q, kv, h) = (width as u64, ffn_width as u64, n_q as u64, n_kv as u64, heads as u64);
    let norms = 5 * d * (q + kv);
    let projections = q * d * d + 2 * kv * d * d + q * d * d;
    // scores, softmax, weighted values, summed over heads (d = heads · dh)
    let attention = q * kv * d + 3 * q * kv * h + q * kv * d;
    let ffn = q * d * f * 2 + 8 * q * f + 5 * q * d;
    norms + projections + attention + ffn + 2 * q * d
}
