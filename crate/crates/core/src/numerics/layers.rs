//! Layers with hand-written reverse passes.
//!
//! Each layer's `backward` accumulates parameter gradients into a
//! same-shaped gradient struct (`+=`) and returns the gradient with respect
//! to its input.

use std::hash::{DefaultHasher, Hasher};

use crate::rng::SeedRng;

use super::{softmax_backward, softmax_in_place, Matrix};

/// A collection of named parameter blocks visited in a fixed order.
///
/// The same type doubles as its own gradient buffer.
pub trait ParamSet {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));

    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.visit_named("", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_named_mut("", f)
    }

    fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |_, m| acc += m.norm_sq());
        acc.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    fn scale_all(&mut self, alpha: f64) {
        self.visit_mut(&mut |_, m| m.scale(alpha));
    }

    /// Hash of every parameter bit; used to detect stale forward caches.
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit(&mut |_, m| {
            h.write_usize(m.rows());
            h.write_usize(m.cols());
            for v in m.as_slice() {
                h.write_u64(v.to_bits());
            }
        });
        h.finish()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Symmetric uniform initialisation in `[-scale, scale]`.
pub(crate) fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SeedRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-scale, scale))
}

/// Affine map `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Weights uniform in `±1/√input`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut SeedRng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_matrix(input, output, scale, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.mul_nn(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        self.accumulate(x, dy, grad);
        dy.mul_nt(&self.weight)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) {
        grad.weight.add_assign(&x.mul_tn(dy));
        grad.bias.add_assign(&dy.column_sums());
    }
}

impl ParamSet for Linear {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }
}

/// Layer normalisation over the feature (column) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Matrix::filled(1, width, 1.0),
            bias: Matrix::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.gain.cols()
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols();
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let yr = y.row_mut(r);
            for (c, out) in yr.iter_mut().enumerate() {
                *out = xhat[(r, c)] * self.gain.as_slice()[c] + self.bias.as_slice()[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Matrix, cache: &LayerNormCache, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let gain = self.gain.as_slice();
        let mut dx = Matrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            {
                let gg = grad.gain.as_mut_slice();
                for c in 0..d {
                    gg[c] += dyr[c] * xh[c];
                }
            }
            {
                let gb = grad.bias.as_mut_slice();
                for c in 0..d {
                    gb[c] += dyr[c];
                }
            }
            let dxhat: Vec<f64> = dyr.iter().zip(gain).map(|(g, w)| g * w).collect();
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let scale = cache.inv_std[r] / d as f64;
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = scale * (d as f64 * dxhat[c] - sum_dxhat - xh[c] * sum_dxhat_xhat);
            }
        }
        dx
    }
}

impl ParamSet for LayerNorm {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Matrix::zeros(1, self.width()),
            bias: Matrix::zeros(1, self.width()),
        }
    }
}

/// Multi-head scaled dot-product self-attention.
///
/// The input stacks one or more independent sequences of equal length row
/// by row; attention never crosses sequence boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    seq_len: usize,
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights, indexed `seq * heads + head`, each `seq_len x seq_len`.
    attn: Vec<Matrix>,
    concat: Matrix,
}

impl MhaCache {
    pub fn attention(&self, seq: usize, head: usize, heads: usize) -> &Matrix {
        &self.attn[seq * heads + head]
    }
}

fn sub_block(m: &Matrix, row0: usize, rows: usize, col0: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(row0 + r)[col0..col0 + cols]);
    }
    out
}

fn add_sub_block(m: &mut Matrix, row0: usize, col0: usize, block: &Matrix) {
    for r in 0..block.rows() {
        let dst = &mut m.row_mut(row0 + r)[col0..col0 + block.cols()];
        for (d, s) in dst.iter_mut().zip(block.row(r)) {
            *d += s;
        }
    }
}

impl MultiHeadAttention {
    pub fn init(width: usize, heads: usize, rng: &mut SeedRng) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width must divide into heads");
        Self {
            heads,
            query: Linear::init(width, width, rng),
            key: Linear::init(width, width, rng),
            value: Linear::init(width, width, rng),
            output: Linear::init(width, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.query.input_dim()
    }

    fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: &Matrix, seq_len: usize) -> (Matrix, MhaCache) {
        assert!(seq_len > 0 && x.rows().is_multiple_of(seq_len), "rows must split into sequences");
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = x.rows() / seq_len;
        let mut concat = Matrix::zeros(x.rows(), self.width());
        let mut attn = Vec::with_capacity(n_seq * self.heads);
        for s in 0..n_seq {
            let row0 = s * seq_len;
            for h in 0..self.heads {
                let col0 = h * dh;
                let qh = sub_block(&q, row0, seq_len, col0, dh);
                let kh = sub_block(&k, row0, seq_len, col0, dh);
                let vh = sub_block(&v, row0, seq_len, col0, dh);
                let mut a = qh.mul_nt(&kh);
                a.scale(scale);
                for r in 0..seq_len {
                    softmax_in_place(a.row_mut(r));
                }
                let oh = a.mul_nn(&vh);
                add_sub_block(&mut concat, row0, col0, &oh);
                attn.push(a);
            }
        }
        let y = self.output.forward(&concat);
        (
            y,
            MhaCache {
                seq_len,
                x: x.clone(),
                q,
                k,
                v,
                attn,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        dy: &Matrix,
        cache: &MhaCache,
        grad: &mut MultiHeadAttention,
    ) -> Matrix {
        let dconcat = self.output.backward(&cache.concat, dy, &mut grad.output);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let l = cache.seq_len;
        let n_seq = cache.x.rows() / l;
        let mut dq = Matrix::zeros(cache.x.rows(), self.width());
        let mut dk = Matrix::zeros(cache.x.rows(), self.width());
        let mut dv = Matrix::zeros(cache.x.rows(), self.width());
        for s in 0..n_seq {
            let row0 = s * l;
            for h in 0..self.heads {
                let col0 = h * dh;
                let a = &cache.attn[s * self.heads + h];
                let qh = sub_block(&cache.q, row0, l, col0, dh);
                let kh = sub_block(&cache.k, row0, l, col0, dh);
                let vh = sub_block(&cache.v, row0, l, col0, dh);
                let doh = sub_block(&dconcat, row0, l, col0, dh);
                let da = doh.mul_nt(&vh);
                add_sub_block(&mut dv, row0, col0, &a.mul_tn(&doh));
                let mut ds = Matrix::zeros(l, l);
                for r in 0..l {
                    let g = softmax_backward(a.row(r), da.row(r));
                    for (d, gv) in ds.row_mut(r).iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
                add_sub_block(&mut dq, row0, col0, &ds.mul_nn(&kh));
                add_sub_block(&mut dk, row0, col0, &ds.mul_tn(&qh));
            }
        }
        let mut dx = self.query.backward(&cache.x, &dq, &mut grad.query);
        dx.add_assign(&self.key.backward(&cache.x, &dk, &mut grad.key));
        dx.add_assign(&self.value.backward(&cache.x, &dv, &mut grad.value));
        dx
    }
}

impl ParamSet for MultiHeadAttention {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.query.visit_named(&join(prefix, "query"), f);
        self.key.visit_named(&join(prefix, "key"), f);
        self.value.visit_named(&join(prefix, "value"), f);
        self.output.visit_named(&join(prefix, "output"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.query.visit_named_mut(&join(prefix, "query"), f);
        self.key.visit_named_mut(&join(prefix, "key"), f);
        self.value.visit_named_mut(&join(prefix, "value"), f);
        self.output.visit_named_mut(&join(prefix, "output"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut SeedRng) -> Matrix {
        uniform_matrix(rows, cols, 1.0, rng)
    }

    /// Fixed random projection of the output to a scalar.
    fn probe(y: &Matrix, w: &Matrix) -> f64 {
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_gradients() {
        let mut rng = SeedRng::new(11);
        let layer = Linear::init(5, 3, &mut rng);
        let x = random(4, 5, &mut rng);
        let w = random(4, 3, &mut rng);
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &w, &mut g);
        check_params(&layer, &g, 1e-5, |p| probe(&p.forward(&x), &w));
        check_input(&x, &dx, 1e-5, |xx| probe(&layer.forward(xx), &w));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = SeedRng::new(12);
        let mut ln = LayerNorm::new(6);
        ln.gain = random(1, 6, &mut rng);
        ln.bias = random(1, 6, &mut rng);
        let x = random(3, 6, &mut rng);
        let w = random(3, 6, &mut rng);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&w, &cache, &mut g);
        check_params(&ln, &g, 1e-5, |p| probe(&p.forward(&x).0, &w));
        check_input(&x, &dx, 1e-5, |xx| probe(&ln.forward(xx).0, &w));
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let mut rng = SeedRng::new(5);
        let x = random(4, 16, &mut rng);
        let (y, _) = LayerNorm::new(16).forward(&x);
        for row in y.row_iter() {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_gradients_multiple_sequences() {
        let mut rng = SeedRng::new(13);
        let mha = MultiHeadAttention::init(8, 2, &mut rng);
        let x = random(6, 8, &mut rng);
        let w = random(6, 8, &mut rng);
        let (_, cache) = mha.forward(&x, 3);
        let mut g = mha.zeros_like();
        let dx = mha.backward(&w, &cache, &mut g);
        check_params(&mha, &g, 1e-5, |p| probe(&p.forward(&x, 3).0, &w));
        check_input(&x, &dx, 1e-5, |xx| probe(&mha.forward(xx, 3).0, &w));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = SeedRng::new(14);
        let mha = MultiHeadAttention::init(8, 4, &mut rng);
        let x = random(5, 8, &mut rng);
        let (_, cache) = mha.forward(&x, 5);
        for h in 0..4 {
            for row in cache.attention(0, h, 4).row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut rng = SeedRng::new(1);
        let mut layer = Linear::init(3, 3, &mut rng);
        let before = layer.fingerprint();
        assert_eq!(before, layer.clone().fingerprint());
        layer.bias[(0, 1)] += 1e-12;
        assert_ne!(before, layer.fingerprint());
    }
}
