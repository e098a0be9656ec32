//! Attention ensemble that fuses the K encoder streams into one vector per
//! frame.
//!
//! Per frame the K encoder vectors form a short sequence. It goes through
//! multi-head self-attention, a residual add and layer normalisation, and is
//! then collapsed by a softmax-weighted average whose scores come from a
//! learned vector.

use crate::error::{Error, Result};
use crate::numerics::layers::{join, LayerNorm, LayerNormCache, MhaCache, MultiHeadAttention, ParamSet};
use crate::numerics::{softmax_backward, softmax_in_place, Matrix};
use crate::rng::SeedRng;

pub const DEFAULT_FUSION_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
    /// Scoring vector, `f x 1`.
    pub w_attn: Matrix,
}

impl FusionParams {
    pub fn init(width: usize, heads: usize, rng: &mut SeedRng) -> Result<Self> {
        if width == 0 || heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "fusion width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            mha: MultiHeadAttention::init(width, heads, rng),
            norm: LayerNorm::new(width),
            w_attn: Matrix::zeros(width, 1),
        })
    }

    pub fn width(&self) -> usize {
        self.norm.width()
    }
}

impl ParamSet for FusionParams {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.mha.visit_named(&join(prefix, "mha"), f);
        self.norm.visit_named(&join(prefix, "norm"), f);
        f(&join(prefix, "w_attn"), &self.w_attn);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.mha.visit_named_mut(&join(prefix, "mha"), f);
        self.norm.visit_named_mut(&join(prefix, "norm"), f);
        f(&join(prefix, "w_attn"), &mut self.w_attn);
    }

    fn zeros_like(&self) -> Self {
        Self {
            mha: self.mha.zeros_like(),
            norm: self.norm.zeros_like(),
            w_attn: Matrix::zeros(self.w_attn.rows(), 1),
        }
    }
}

/// Intermediates of one forward call.
#[derive(Clone, Debug)]
pub struct FusionCache {
    fingerprint: u64,
    streams: usize,
    frames: usize,
    mha: MhaCache,
    norm: LayerNormCache,
    /// Normalised rows, stacked `t * K + k`.
    y: Matrix,
    /// Softmax weights over the streams, `N x K`.
    weights: Matrix,
}

impl FusionCache {
    /// Per-frame stream weights of the final average.
    pub fn stream_weights(&self) -> &Matrix {
        &self.weights
    }

    /// Attention map over the streams for one frame and head.
    pub fn attention(&self, frame: usize, head: usize, heads: usize) -> &Matrix {
        self.mha.attention(frame, head, heads)
    }
}

fn stack(streams: &[&Matrix]) -> Matrix {
    let k = streams.len();
    let (n, f) = streams[0].shape();
    let mut x = Matrix::zeros(n * k, f);
    for (s, m) in streams.iter().enumerate() {
        for t in 0..n {
            x.row_mut(t * k + s).copy_from_slice(m.row(t));
        }
    }
    x
}

/// Fuses K aligned `N x f` streams into a single `N x f` matrix.
pub fn fuse_forward(streams: &[&Matrix], params: &FusionParams) -> Result<(Matrix, FusionCache)> {
    let Some(first) = streams.first() else {
        return Err(Error::Dimension("fusion needs at least one stream".into()));
    };
    let (n, f) = first.shape();
    if f != params.width() || streams.iter().any(|m| m.shape() != (n, f)) {
        return Err(Error::Dimension(format!(
            "fusion expects {} columns and aligned streams, got {:?}",
            params.width(),
            streams.iter().map(|m| m.shape()).collect::<Vec<_>>()
        )));
    }
    let k = streams.len();
    let x = stack(streams);
    let (mut z, mha) = params.mha.forward(&x, k);
    z.add_assign(&x);
    let (y, norm) = params.norm.forward(&z);
    let scores = y.mul_nn(&params.w_attn);
    let mut weights = Matrix::from_vec(n, k, scores.into_vec())?;
    let mut fused = Matrix::zeros(n, f);
    for t in 0..n {
        softmax_in_place(weights.row_mut(t));
        let out = fused.row_mut(t);
        for s in 0..k {
            let a = weights[(t, s)];
            for (o, v) in out.iter_mut().zip(y.row(t * k + s)) {
                *o += a * v;
            }
        }
    }
    let cache = FusionCache {
        fingerprint: params.fingerprint(),
        streams: k,
        frames: n,
        mha,
        norm,
        y,
        weights,
    };
    Ok((fused, cache))
}

/// Reverse pass. Parameter gradients are added into `grad`; the gradients
/// with respect to each input stream are returned.
pub fn fuse_backward(
    d_fused: &Matrix,
    cache: &FusionCache,
    params: &FusionParams,
    grad: &mut FusionParams,
) -> Result<Vec<Matrix>> {
    let (n, k, f) = (cache.frames, cache.streams, params.width());
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache("fusion parameters changed since the forward pass"));
    }
    if d_fused.shape() != (n, f) {
        return Err(Error::StaleCache("fusion output gradient does not match the cached forward"));
    }
    let w = params.w_attn.as_slice();
    let mut dy = Matrix::zeros(n * k, f);
    let mut dscore = Matrix::zeros(n * k, 1);
    for t in 0..n {
        let g = d_fused.row(t);
        let alpha = cache.weights.row(t);
        let dalpha: Vec<f64> = (0..k)
            .map(|s| g.iter().zip(cache.y.row(t * k + s)).map(|(a, b)| a * b).sum())
            .collect();
        let ds = softmax_backward(alpha, &dalpha);
        for s in 0..k {
            let row = t * k + s;
            dscore[(row, 0)] = ds[s];
            for ((d, gv), wv) in dy.row_mut(row).iter_mut().zip(g).zip(w) {
                *d = alpha[s] * gv + ds[s] * wv;
            }
        }
    }
    grad.w_attn.add_assign(&cache.y.mul_tn(&dscore));
    let dz = params.norm.backward(&dy, &cache.norm, &mut grad.norm);
    let mut dx = params.mha.backward(&dz, &cache.mha, &mut grad.mha);
    dx.add_assign(&dz);
    Ok((0..k)
        .map(|s| Matrix::from_fn(n, f, |t, c| dx[(t * k + s, c)]))
        .collect())
}
