//! Minimal reverse-mode tape over [`Matrix`] values.
//!
//! Only the operations the fusion modules and losses need are provided. Each
//! node records its forward value; [`Tape::backward`] walks the nodes in
//! reverse and accumulates adjoints for every node that depends on a
//! parameter leaf.

use super::block::TransformerBlockParams;
use super::matrix::{dot, norm, Matrix};
use super::ops::{gelu, gelu_grad, softmax_unchecked, KL_FLOOR, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    NormalizeRows(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    KlToConst { p: Var, log_q: Vec<f64> },
    AbsMeanDiff { a: Var, sign: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; untracked nodes have none.
pub struct Grads(Vec<Option<Matrix>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of the given shape when `v` received none.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Trainable input.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    /// Add a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let v = self.value(x).add_row(self.value(bias).data());
        let t = self.tracked(&[x, bias]);
        self.push(v, Op::AddRow(x, bias), t)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let t = self.tracked(&[x]);
        self.push(v, Op::Scale(x, s), t)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let d = xm.cols();
        let mut xhat = xm.clone();
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * inv;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        let t = self.tracked(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let p = softmax_unchecked(v.row(r), 1.0);
            v.row_mut(r).copy_from_slice(&p);
        }
        let t = self.tracked(&[x]);
        self.push(v, Op::SoftmaxRows(x), t)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let t = self.tracked(&[x]);
        self.push(v, Op::Gelu(x), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&refs);
        let t = self.tracked(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&refs);
        let t = self.tracked(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let t = self.tracked(&[x]);
        self.push(v, Op::SliceRows(x, start), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        let t = self.tracked(&[x]);
        self.push(v, Op::SliceCols(x, start), t)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = Matrix::row_vector(self.value(x).mean_row());
        let t = self.tracked(&[x]);
        self.push(v, Op::MeanRows(x), t)
    }

    /// Row-wise L2 normalization. Rows must be nonzero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let n = norm(v.row(r));
            v.row_mut(r).iter_mut().for_each(|e| *e /= n);
        }
        let t = self.tracked(&[x]);
        self.push(v, Op::NormalizeRows(x), t)
    }

    /// `-log softmax(logits)[label]` for a `1×C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits).data();
        let probs = softmax_unchecked(z, 1.0);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let t = self.tracked(&[logits]);
        self.push(Matrix::row_vector(vec![loss]), Op::CrossEntropy { logits, label, probs }, t)
    }

    /// KL(p ‖ q) for a `1×n` distribution `p` on the tape and a constant `q`.
    pub fn kl_to_const(&mut self, p: Var, q: &[f64]) -> Var {
        let log_q: Vec<f64> = q.iter().map(|v| v.max(KL_FLOOR).ln()).collect();
        let pv = self.value(p).data();
        let loss: f64 = pv
            .iter()
            .zip(&log_q)
            .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
            .sum();
        let t = self.tracked(&[p]);
        self.push(Matrix::row_vector(vec![loss]), Op::KlToConst { p, log_q }, t)
    }

    /// Mean absolute difference between `a` and a constant of equal shape.
    pub fn abs_mean_diff(&mut self, a: Var, b: &Matrix) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), b.shape(), "abs_mean_diff shape");
        let n = av.len() as f64;
        let diffs: Vec<f64> = av.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let loss = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
        let sign = diffs.iter().map(|d| d.signum() * (*d != 0.0) as u8 as f64).collect();
        let t = self.tracked(&[a]);
        self.push(Matrix::row_vector(vec![loss]), Op::AbsMeanDiff { a, sign }, t)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let t = self.tracked(&vars);
        self.push(Matrix::row_vector(vec![s]), Op::WeightedSum(terms.to_vec()), t)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(self.value(*b)));
                acc(*b, g.t_matmul(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                acc(*b, Matrix::row_vector(g.column_sums()));
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data();
                let d = g.cols();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = Matrix::zeros(g.rows(), d);
                for (r, &istd) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, xr) / d as f64;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = istd * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gamma, Matrix::row_vector(dgamma));
                acc(*beta, Matrix::row_vector(dbeta));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, j) * (g.get(r, j) - s);
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(a, b)| a * gelu_grad(*b)).collect();
                acc(*x, Matrix::new(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    acc(*p, g.slice_rows(at, n));
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    acc(*p, g.slice_cols(at, n));
                    at += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let row: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                acc(*x, Matrix::from_rows(&vec![row; n]));
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = norm(xv.row(r));
                    let s = dot(y.row(r), g.row(r));
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (g.get(r, j) - y.get(r, j) * s) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = g.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                d[*label] -= s;
                acc(*logits, Matrix::row_vector(d));
            }
            Op::KlToConst { p, log_q } => {
                let s = g.data()[0];
                let pv = self.value(*p).data();
                let d = pv
                    .iter()
                    .zip(log_q)
                    .map(|(&pi, &lq)| s * (pi.max(f64::MIN_POSITIVE).ln() - lq + 1.0))
                    .collect();
                acc(*p, Matrix::row_vector(d));
            }
            Op::AbsMeanDiff { a, sign } => {
                let s = g.data()[0] / sign.len() as f64;
                let av = self.value(*a);
                let data = sign.iter().map(|v| v * s).collect();
                acc(*a, Matrix::new(av.rows(), av.cols(), data).expect("shape"));
            }
            Op::WeightedSum(terms) => {
                let s = g.data()[0];
                for (v, w) in terms {
                    acc(*v, Matrix::filled(1, 1, w * s));
                }
            }
        }
    }
}

/// Tape handles for every tensor of a [`TransformerBlockParams`], in
/// canonical order.
pub struct BlockVars {
    pub vars: Vec<Var>,
    width: usize,
    heads: usize,
}

impl BlockVars {
    /// Register the block on the tape, trainable or constant.
    pub fn register(tape: &mut Tape, params: &TransformerBlockParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        Self { vars, width: params.width, heads: params.heads }
    }

    /// Same computation as [`TransformerBlockParams::forward`], on the tape.
    pub fn forward(&self, tape: &mut Tape, q: Var, kv: Var) -> Var {
        let v = &self.vars;
        let (ln_q_g, ln_q_b, ln_kv_g, ln_kv_b) = (v[0], v[1], v[2], v[3]);
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11]);
        let (ln_f_g, ln_f_b, w1, b1, w2, b2) = (v[12], v[13], v[14], v[15], v[16], v[17]);

        let qn = tape.layer_norm(q, ln_q_g, ln_q_b);
        let kvn = tape.layer_norm(kv, ln_kv_g, ln_kv_b);
        let qp = tape.matmul(qn, wq);
        let qp = tape.add_row(qp, bq);
        let kp = tape.matmul(kvn, wk);
        let kp = tape.add_row(kp, bk);
        let vp = tape.matmul(kvn, wv);
        let vp = tape.add_row(vp, bv);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(qp, h * dh, dh);
            let kh = tape.slice_cols(kp, h * dh, dh);
            let vh = tape.slice_cols(vp, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            heads.push(tape.matmul(a, vh));
        }
        let o = tape.concat_cols(&heads);
        let o = tape.matmul(o, wo);
        let o = tape.add_row(o, bo);
        let t = tape.add(q, o);
        let tn = tape.layer_norm(t, ln_f_g, ln_f_b);
        let h = tape.matmul(tn, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let f = tape.matmul(h, w2);
        let f = tape.add_row(f, b2);
        tape.add(t, f)
    }

    /// Collect adjoints into a flat vector in canonical tensor order.
    pub fn flat_grad(&self, grads: &Grads, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for v in &self.vars {
            let (r, c) = tape.value(*v).shape();
            out.extend_from_slice(grads.get_or_zeros(*v, r, c).data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gaussian())
    }

    /// Central differences of a scalar tape function with respect to one input.
    fn numeric_grad(build: &dyn Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (build(&xp) - build(&xm)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn block_tape_matches_plain_forward() {
        let mut rng = SeededRng::new(9);
        let p = TransformerBlockParams::random_dense(8, 2, 12, 0.4, &mut rng).unwrap();
        let q = rand_matrix(&mut rng, 3, 8);
        let kv = rand_matrix(&mut rng, 5, 8);
        let mut tape = Tape::new();
        let bv = BlockVars::register(&mut tape, &p, true);
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = bv.forward(&mut tape, qv, kvv);
        let plain = p.forward(&q, &kv).unwrap();
        assert!(tape.value(out).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn composite_ops_gradients() {
        // loss = CE(normalize(mean(softmax(LN(x)·W))) · Tᵀ / 0.1, 1)
        //      + KL(softmax(x₀), q) + |x·W - c|
        let mut rng = SeededRng::new(21);
        let x0 = rand_matrix(&mut rng, 4, 3);
        let w = rand_matrix(&mut rng, 3, 3);
        let t = rand_matrix(&mut rng, 5, 3);
        let c = rand_matrix(&mut rng, 4, 3);
        let gam = Matrix::from_fn(1, 3, |_, _| 1.0 + 0.3 * rng.gaussian());
        let bet = Matrix::from_fn(1, 3, |_, _| 0.3 * rng.gaussian());
        let q = [0.2, 0.5, 0.3];

        let build = |x: &Matrix, tape: &mut Tape| -> (Var, Var) {
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let g = tape.constant(gam.clone());
            let b = tape.constant(bet.clone());
            let tv = tape.constant(t.clone());
            let ln = tape.layer_norm(xv, g, b);
            let h = tape.matmul(ln, wv);
            let h = tape.gelu(h);
            let s = tape.softmax_rows(h);
            let m = tape.mean_rows(s);
            let n = tape.normalize_rows(m);
            let tn = tape.normalize_rows(tv);
            let logits = tape.matmul_t(n, tn);
            let logits = tape.scale(logits, 10.0);
            let ce = tape.cross_entropy(logits, 1);
            let first = tape.slice_rows(xv, 0, 1);
            let p = tape.softmax_rows(first);
            let kl = tape.kl_to_const(p, &q);
            let xw = tape.matmul(xv, wv);
            let l1 = tape.abs_mean_diff(xw, &c);
            let cat = tape.concat_rows(&[xv, xv]);
            let cols = tape.slice_cols(cat, 1, 2);
            let mr = tape.mean_rows(cols);
            let mr = tape.matmul_t(mr, mr);
            let total = tape.weighted_sum(&[(ce, 1.0), (kl, 0.7), (l1, 2.0), (mr, 0.3)]);
            (xv, total)
        };
        let f = |x: &Matrix| {
            let mut tape = Tape::new();
            let (_, l) = build(x, &mut tape);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let (xv, l) = build(&x0, &mut tape);
        let g = tape.backward(l);
        let analytic = g.get(xv).unwrap();
        let numeric = numeric_grad(&f, &x0);
        assert!(analytic.max_abs_diff(&numeric) < 1e-6, "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn block_param_gradients() {
        let mut rng = SeededRng::new(4);
        let p = TransformerBlockParams::random_dense(4, 2, 6, 0.5, &mut rng).unwrap();
        let q = rand_matrix(&mut rng, 2, 4);
        let kv = rand_matrix(&mut rng, 3, 4);
        let target = rand_matrix(&mut rng, 2, 4);
        let loss_of = |flat: &[f64]| {
            let mut pp = p.clone();
            pp.load_flat(flat);
            let out = pp.forward(&q, &kv).unwrap();
            out.data().iter().zip(target.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let bv = BlockVars::register(&mut tape, &p, true);
        let qv = tape.param(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = bv.forward(&mut tape, qv, kvv);
        // Σ_r ⟨out_r, target_r⟩
        let mut parts = Vec::new();
        for r in 0..2 {
            let row = tape.slice_rows(out, r, 1);
            let trow = tape.constant(target.slice_rows(r, 1));
            parts.push((tape.matmul_t(row, trow), 1.0));
        }
        let loss = tape.weighted_sum(&parts);
        let grads = tape.backward(loss);
        let analytic = bv.flat_grad(&grads, &tape);
        let base = p.flatten();
        for i in 0..base.len() {
            let h = 1e-6;
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * analytic[i].abs().max(1.0), "param {i}: {fd} vs {}", analytic[i]);
        }
    }
}
