//! Frame-probability decoders: a single-layer bidirectional LSTM and a
//! single post-norm transformer encoder block, each ending in a sigmoid unit.

use crate::error::{Error, Result};
use crate::numerics::layers::{
    join, uniform_matrix, LayerNorm, LayerNormCache, Linear, MhaCache, MultiHeadAttention, ParamSet,
};
use crate::numerics::{gelu, gelu_grad, sigmoid, Matrix};
use crate::rng::SeedRng;
use crate::sampling::{FrameProbabilities, PROB_CLAMP};

pub const DEFAULT_LSTM_HIDDEN: usize = 256;
pub const DEFAULT_TRANSFORMER_HEADS: usize = 16;
pub const DEFAULT_FFN_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.25;
/// Longest sequence the positional table covers.
pub const MAX_TRANSFORMER_FRAMES: usize = 750;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One LSTM direction. Gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub bias: Matrix,
}

impl LstmCell {
    pub fn init(input: usize, hidden: usize, rng: &mut SeedRng) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut bias = Matrix::zeros(1, 4 * hidden);
        bias.row_mut(0)[hidden..2 * hidden].fill(1.0);
        Self {
            w_x: uniform_matrix(input, 4 * hidden, scale, rng),
            w_h: uniform_matrix(hidden, 4 * hidden, scale, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    /// Runs the cell over `x` in forward or reversed time order. Rows of the
    /// returned trace stay indexed by time.
    fn run(&self, x: &Matrix, reverse: bool) -> LstmTrace {
        let n = x.rows();
        let hd = self.hidden();
        let mut gates = x.mul_nn(&self.w_x);
        gates.add_row_broadcast(&self.bias);
        let mut c = Matrix::zeros(n, hd);
        let mut h = Matrix::zeros(n, hd);
        let mut h_prev = vec![0.0; hd];
        let mut c_prev = vec![0.0; hd];
        for t in time_order(n, reverse) {
            let g = gates.row_mut(t);
            for (k, &hk) in h_prev.iter().enumerate() {
                if hk != 0.0 {
                    for (gv, w) in g.iter_mut().zip(self.w_h.row(k)) {
                        *gv += hk * w;
                    }
                }
            }
            for j in 0..hd {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[hd + j]);
                let cc = g[2 * hd + j].tanh();
                let o = sigmoid(g[3 * hd + j]);
                g[j] = i;
                g[hd + j] = f;
                g[2 * hd + j] = cc;
                g[3 * hd + j] = o;
                c_prev[j] = f * c_prev[j] + i * cc;
                h_prev[j] = o * c_prev[j].tanh();
            }
            c.row_mut(t).copy_from_slice(&c_prev);
            h.row_mut(t).copy_from_slice(&h_prev);
        }
        LstmTrace {
            reverse,
            gates,
            c,
            h,
        }
    }

    /// Backpropagation through time. `dh` is the loss gradient with respect
    /// to every hidden state; returns the gradient with respect to `x`.
    fn backward(&self, x: &Matrix, trace: &LstmTrace, dh: &Matrix, grad: &mut LstmCell) -> Matrix {
        let n = x.rows();
        let hd = self.hidden();
        let mut dgates = Matrix::zeros(n, 4 * hd);
        let mut h_prev = Matrix::zeros(n, hd);
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let order: Vec<usize> = time_order(n, trace.reverse).collect();
        for (step, &t) in order.iter().enumerate().rev() {
            let prev = step.checked_sub(1).map(|s| order[s]);
            if let Some(p) = prev {
                h_prev.row_mut(t).copy_from_slice(trace.h.row(p));
            }
            let g = trace.gates.row(t);
            let dg = dgates.row_mut(t);
            for j in 0..hd {
                let (i, f, cc, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let c_prev = prev.map_or(0.0, |p| trace.c[(p, j)]);
                let tc = trace.c[(t, j)].tanh();
                let dhj = dh[(t, j)] + dh_next[j];
                let dc = dhj * o * (1.0 - tc * tc) + dc_next[j];
                dg[j] = dc * cc * i * (1.0 - i);
                dg[hd + j] = dc * c_prev * f * (1.0 - f);
                dg[2 * hd + j] = dc * i * (1.0 - cc * cc);
                dg[3 * hd + j] = dhj * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            for (k, d) in dh_next.iter_mut().enumerate() {
                *d = self.w_h.row(k).iter().zip(dg.iter()).map(|(w, v)| w * v).sum();
            }
        }
        grad.w_x.add_assign(&x.mul_tn(&dgates));
        grad.w_h.add_assign(&h_prev.mul_tn(&dgates));
        grad.bias.add_assign(&dgates.column_sums());
        dgates.mul_nt(&self.w_x)
    }
}

fn time_order(n: usize, reverse: bool) -> Box<dyn DoubleEndedIterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

impl ParamSet for LstmCell {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w_x"), &self.w_x);
        f(&join(prefix, "w_h"), &self.w_h);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w_x"), &mut self.w_x);
        f(&join(prefix, "w_h"), &mut self.w_h);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_x: Matrix::zeros(self.w_x.rows(), self.w_x.cols()),
            w_h: Matrix::zeros(self.w_h.rows(), self.w_h.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

#[derive(Clone, Debug)]
struct LstmTrace {
    reverse: bool,
    /// Post-activation gates per time step.
    gates: Matrix,
    c: Matrix,
    h: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmDecoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// Reads `[h_forward, h_backward]`.
    pub head: Linear,
}

impl LstmDecoder {
    pub fn init(input: usize, hidden: usize, rng: &mut SeedRng) -> Self {
        Self {
            forward: LstmCell::init(input, hidden, rng),
            backward: LstmCell::init(input, hidden, rng),
            head: Linear::init(2 * hidden, 1, rng),
        }
    }
}

impl ParamSet for LstmDecoder {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.forward.visit_named(&join(prefix, "forward"), f);
        self.backward.visit_named(&join(prefix, "backward"), f);
        self.head.visit_named(&join(prefix, "head"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.forward.visit_named_mut(&join(prefix, "forward"), f);
        self.backward.visit_named_mut(&join(prefix, "backward"), f);
        self.head.visit_named_mut(&join(prefix, "head"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

/// Sinusoidal positional table, `rows x width`.
pub fn positional_encoding(rows: usize, width: usize) -> Matrix {
    Matrix::from_fn(rows, width, |pos, c| {
        let pair = (c / 2) as f64 * 2.0;
        let angle = pos as f64 / 10000f64.powf(pair / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerDecoder {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    pub head: Linear,
    /// Drop probability on the feed-forward hidden layer in training.
    pub dropout: f64,
}

impl TransformerDecoder {
    pub fn init(
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if width == 0 || heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "transformer width {width} is not divisible by {heads} heads"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            mha: MultiHeadAttention::init(width, heads, rng),
            norm1: LayerNorm::new(width),
            ffn_in: Linear::init(width, ffn_hidden, rng),
            ffn_out: Linear::init(ffn_hidden, width, rng),
            norm2: LayerNorm::new(width),
            head: Linear::init(width, 1, rng),
            dropout,
        })
    }
}

impl ParamSet for TransformerDecoder {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.mha.visit_named(&join(prefix, "mha"), f);
        self.norm1.visit_named(&join(prefix, "norm1"), f);
        self.ffn_in.visit_named(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_named(&join(prefix, "ffn_out"), f);
        self.norm2.visit_named(&join(prefix, "norm2"), f);
        self.head.visit_named(&join(prefix, "head"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.mha.visit_named_mut(&join(prefix, "mha"), f);
        self.norm1.visit_named_mut(&join(prefix, "norm1"), f);
        self.ffn_in.visit_named_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_named_mut(&join(prefix, "ffn_out"), f);
        self.norm2.visit_named_mut(&join(prefix, "norm2"), f);
        self.head.visit_named_mut(&join(prefix, "head"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            mha: self.mha.zeros_like(),
            norm1: self.norm1.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            norm2: self.norm2.zeros_like(),
            head: self.head.zeros_like(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Lstm(LstmDecoder),
    Transformer(TransformerDecoder),
}

impl ParamSet for Decoder {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            Decoder::Lstm(d) => d.visit_named(&join(prefix, "lstm"), f),
            Decoder::Transformer(d) => d.visit_named(&join(prefix, "transformer"), f),
        }
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            Decoder::Lstm(d) => d.visit_named_mut(&join(prefix, "lstm"), f),
            Decoder::Transformer(d) => d.visit_named_mut(&join(prefix, "transformer"), f),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Decoder::Lstm(d) => Decoder::Lstm(d.zeros_like()),
            Decoder::Transformer(d) => Decoder::Transformer(d.zeros_like()),
        }
    }
}

#[derive(Clone, Debug)]
enum Trace {
    Lstm {
        x: Matrix,
        forward: LstmTrace,
        backward: LstmTrace,
        hidden: Matrix,
    },
    Transformer(Box<TransformerTrace>),
}

#[derive(Clone, Debug)]
struct TransformerTrace {
    mha: MhaCache,
    norm1: LayerNormCache,
    y1: Matrix,
    pre: Matrix,
    /// Inverted-dropout multipliers, `None` when dropout was off.
    keep: Option<Matrix>,
    dropped: Matrix,
    norm2: LayerNormCache,
    y2: Matrix,
}

/// Everything the reverse pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    fingerprint: u64,
    /// `dp/du` per frame; zero where the probability clamp is active.
    slope: Vec<f64>,
    trace: Trace,
}

fn probabilities(logits: &Matrix) -> Result<(FrameProbabilities, Vec<f64>)> {
    if !logits.is_finite() {
        return Err(Error::Numeric("decoder produced non-finite logits".into()));
    }
    let mut p = Vec::with_capacity(logits.rows());
    let mut slope = Vec::with_capacity(logits.rows());
    for &u in logits.as_slice() {
        let s = sigmoid(u);
        if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
            p.push(s);
            slope.push(s * (1.0 - s));
        } else {
            p.push(s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
            slope.push(0.0);
        }
    }
    Ok((FrameProbabilities::clamped(p), slope))
}

/// Maps fused features `N x f` to per-frame inclusion probabilities.
///
/// `rng` is only drawn from in training mode with a non-zero dropout rate.
pub fn decode_forward(
    x: &Matrix,
    decoder: &Decoder,
    mode: Mode,
    rng: &mut SeedRng,
) -> Result<(FrameProbabilities, DecoderCache)> {
    if x.rows() == 0 {
        return Err(Error::Dimension("cannot decode an empty sequence".into()));
    }
    let (logits, trace) = match decoder {
        Decoder::Lstm(d) => {
            if x.cols() != d.forward.w_x.rows() {
                return Err(width_error(x.cols(), d.forward.w_x.rows()));
            }
            let fwd = d.forward.run(x, false);
            let bwd = d.backward.run(x, true);
            let hd = d.forward.hidden();
            let mut hidden = Matrix::zeros(x.rows(), 2 * hd);
            hidden.add_column_block(0, &fwd.h);
            hidden.add_column_block(hd, &bwd.h);
            let logits = d.head.forward(&hidden);
            let trace = Trace::Lstm {
                x: x.clone(),
                forward: fwd,
                backward: bwd,
                hidden,
            };
            (logits, trace)
        }
        Decoder::Transformer(d) => {
            let (logits, trace) = transformer_forward(x, d, mode, rng)?;
            (logits, Trace::Transformer(Box::new(trace)))
        }
    };
    let (p, slope) = probabilities(&logits)?;
    Ok((
        p,
        DecoderCache {
            fingerprint: decoder.fingerprint(),
            slope,
            trace,
        },
    ))
}

fn width_error(got: usize, want: usize) -> Error {
    Error::Dimension(format!("decoder expects {want} feature columns, got {got}"))
}

fn transformer_forward(
    x: &Matrix,
    d: &TransformerDecoder,
    mode: Mode,
    rng: &mut SeedRng,
) -> Result<(Matrix, TransformerTrace)> {
    let (n, f) = x.shape();
    if n > MAX_TRANSFORMER_FRAMES {
        return Err(Error::Length {
            len: n,
            max: MAX_TRANSFORMER_FRAMES,
        });
    }
    if f != d.norm1.width() {
        return Err(width_error(f, d.norm1.width()));
    }
    let mut embedded = positional_encoding(n, f);
    embedded.add_assign(x);
    let (mut z1, mha) = d.mha.forward(&embedded, n);
    z1.add_assign(&embedded);
    let (y1, norm1) = d.norm1.forward(&z1);
    let pre = d.ffn_in.forward(&y1);
    let mut dropped = pre.map(gelu);
    let keep = (mode == Mode::Train && d.dropout > 0.0).then(|| {
        let scale = 1.0 / (1.0 - d.dropout);
        Matrix::from_fn(pre.rows(), pre.cols(), |_, _| {
            if rng.bernoulli(d.dropout) {
                0.0
            } else {
                scale
            }
        })
    });
    if let Some(k) = &keep {
        for (v, m) in dropped.as_mut_slice().iter_mut().zip(k.as_slice()) {
            *v *= m;
        }
    }
    let mut z2 = d.ffn_out.forward(&dropped);
    z2.add_assign(&y1);
    let (y2, norm2) = d.norm2.forward(&z2);
    if !y2.is_finite() {
        return Err(Error::Numeric("transformer activations are not finite".into()));
    }
    let logits = d.head.forward(&y2);
    Ok((
        logits,
        TransformerTrace {
            mha,
            norm1,
            y1,
            pre,
            keep,
            dropped,
            norm2,
            y2,
        },
    ))
}

/// Reverse pass from `dL/dp`. Parameter gradients are added into `grad`;
/// the gradient with respect to the decoder input is returned.
pub fn decode_backward(
    grad_p: &[f64],
    cache: &DecoderCache,
    decoder: &Decoder,
    grad: &mut Decoder,
) -> Result<Matrix> {
    if grad_p.len() != cache.slope.len() {
        return Err(Error::StaleCache("probability gradient length differs from the forward pass"));
    }
    if cache.fingerprint != decoder.fingerprint() {
        return Err(Error::StaleCache("decoder parameters changed since the forward pass"));
    }
    let du = Matrix::column_vector(
        &grad_p.iter().zip(&cache.slope).map(|(g, s)| g * s).collect::<Vec<_>>(),
    );
    match (decoder, grad, &cache.trace) {
        (
            Decoder::Lstm(d),
            Decoder::Lstm(g),
            Trace::Lstm {
                x,
                forward,
                backward,
                hidden,
            },
        ) => {
            let dh = d.head.backward(hidden, &du, &mut g.head);
            let hd = d.forward.hidden();
            let mut dx = d
                .forward
                .backward(x, forward, &dh.column_block(0, hd), &mut g.forward);
            dx.add_assign(&d.backward.backward(
                x,
                backward,
                &dh.column_block(hd, hd),
                &mut g.backward,
            ));
            Ok(dx)
        }
        (Decoder::Transformer(d), Decoder::Transformer(g), Trace::Transformer(t)) => {
            let dy2 = d.head.backward(&t.y2, &du, &mut g.head);
            let dz2 = d.norm2.backward(&dy2, &t.norm2, &mut g.norm2);
            let mut dact = d.ffn_out.backward(&t.dropped, &dz2, &mut g.ffn_out);
            if let Some(k) = &t.keep {
                for (v, m) in dact.as_mut_slice().iter_mut().zip(k.as_slice()) {
                    *v *= m;
                }
            }
            for (v, p) in dact.as_mut_slice().iter_mut().zip(t.pre.as_slice()) {
                *v *= gelu_grad(*p);
            }
            let mut dy1 = d.ffn_in.backward(&t.y1, &dact, &mut g.ffn_in);
            dy1.add_assign(&dz2);
            let dz1 = d.norm1.backward(&dy1, &t.norm1, &mut g.norm1);
            let mut dx = d.mha.backward(&dz1, &t.mha, &mut g.mha);
            dx.add_assign(&dz1);
            Ok(dx)
        }
        _ => Err(Error::StaleCache("decoder kind differs from the forward pass")),
    }
}
