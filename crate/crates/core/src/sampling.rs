//! Turning per-frame probabilities into summary masks.
//!
//! Training uses stochastic samplers (simple Bernoulli per frame, or
//! Bernoulli trials on moving-average segments); inference uses the
//! deterministic top-25%-frames and top-15%-segments rules.

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` so that
/// log-probabilities stay finite.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_SEGMENT_WINDOW: usize = 5;

/// Per-frame inclusion probabilities, strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameProbabilities(Vec<f64>);

impl FrameProbabilities {
    /// Clamps every entry into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
                .collect(),
        )
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Numeric(format!("probability {bad} outside (0, 1)")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Per-frame binary inclusion vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SummaryMask(Vec<bool>);

impl SummaryMask {
    pub fn new(selected: Vec<bool>) -> Self {
        Self(selected)
    }

    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = vec![false; len];
        for i in indices {
            m[i] = true;
        }
        Self(m)
    }

    /// Mask whose bits are the low `len` bits of `bits` (frame 0 = bit 0).
    pub fn from_bits(len: usize, bits: u64) -> Self {
        Self((0..len).map(|t| bits >> t & 1 == 1).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of selected frames.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }
}

/// Moving averages of frame probabilities with stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentProbabilities {
    /// Effective window; shorter than requested when the video is.
    pub window: usize,
    pub averages: Vec<f64>,
}

pub fn segment_average(p: &FrameProbabilities, window: usize) -> SegmentProbabilities {
    let n = p.len();
    let window = window.max(1);
    if n < window {
        log::warn!("video of {n} frames is shorter than the {window}-frame segment window; using one segment");
        return SegmentProbabilities {
            window: n,
            averages: vec![p.mean()],
        };
    }
    let values = p.as_slice();
    let averages = values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    SegmentProbabilities { window, averages }
}

/// Simple Bernoulli sampling: frame `t` is selected with probability `p_t`.
pub fn sample_sbs(p: &FrameProbabilities, rng: &mut SeedRng) -> SummaryMask {
    SummaryMask(p.as_slice().iter().map(|&pt| rng.bernoulli(pt)).collect())
}

/// One segment-average Bernoulli draw: per-segment decisions and the union
/// mask they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDraw {
    pub window: usize,
    pub accepted: Vec<bool>,
    pub mask: SummaryMask,
}

fn union_of_segments(n: usize, window: usize, accepted: &[bool]) -> SummaryMask {
    let mut mask = vec![false; n];
    for (start, _) in accepted.iter().enumerate().filter(|(_, &a)| a) {
        mask[start..start + window].iter_mut().for_each(|m| *m = true);
    }
    SummaryMask(mask)
}

pub fn sample_sab(p: &FrameProbabilities, window: usize, rng: &mut SeedRng) -> SegmentDraw {
    let seg = segment_average(p, window);
    let accepted: Vec<bool> = seg.averages.iter().map(|&q| rng.bernoulli(q)).collect();
    let mask = union_of_segments(p.len(), seg.window, &accepted);
    SegmentDraw {
        window: seg.window,
        accepted,
        mask,
    }
}

/// `ceil(n * percent / 100)` in exact integer arithmetic.
fn quota(n: usize, percent: usize) -> usize {
    (n * percent).div_ceil(100)
}

/// Indices sorted by descending score, ties broken by lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Top 25% of frames by probability.
pub fn infer_t25(p: &FrameProbabilities) -> SummaryMask {
    let k = quota(p.len(), 25);
    SummaryMask::from_indices(p.len(), ranked(p.as_slice()).into_iter().take(k))
}

/// Top 15% of moving-average segments, expanded to the union of their frames.
pub fn infer_t15s(p: &FrameProbabilities, window: usize) -> SummaryMask {
    let (window, starts) = t15s_segments(p, window);
    let mut accepted = vec![false; p.len() + 1 - window];
    for i in starts {
        accepted[i] = true;
    }
    union_of_segments(p.len(), window, &accepted)
}

/// Start indices of the segments chosen by [`infer_t15s`], with the
/// effective window.
pub fn t15s_segments(p: &FrameProbabilities, window: usize) -> (usize, Vec<usize>) {
    let seg = segment_average(p, window);
    let k = quota(seg.averages.len(), 15);
    let mut starts: Vec<usize> = ranked(&seg.averages).into_iter().take(k).collect();
    starts.sort_unstable();
    (seg.window, starts)
}

/// Log-likelihood of a mask under independent per-frame Bernoulli trials.
pub fn log_prob(mask: &SummaryMask, p: &FrameProbabilities) -> f64 {
    mask.0
        .iter()
        .zip(p.as_slice())
        .map(|(&a, &pt)| if a { pt.ln() } else { (1.0 - pt).ln() })
        .sum()
}

/// A sampled action sequence together with enough information to evaluate
/// its likelihood and score function.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Frames(SummaryMask),
    Segments(SegmentDraw),
}

impl Action {
    pub fn mask(&self) -> &SummaryMask {
        match self {
            Action::Frames(m) => m,
            Action::Segments(d) => &d.mask,
        }
    }

    pub fn log_prob(&self, p: &FrameProbabilities) -> f64 {
        match self {
            Action::Frames(m) => log_prob(m, p),
            Action::Segments(d) => {
                let seg = segment_average(p, d.window);
                seg.averages
                    .iter()
                    .zip(&d.accepted)
                    .map(|(&q, &s)| if s { q.ln() } else { (1.0 - q).ln() })
                    .sum()
            }
        }
    }

    /// `∂ log p(action) / ∂ p_t` for every frame.
    pub fn grad_log_prob(&self, p: &FrameProbabilities) -> Vec<f64> {
        match self {
            Action::Frames(m) => m
                .0
                .iter()
                .zip(p.as_slice())
                .map(|(&a, &pt)| if a { 1.0 / pt } else { -1.0 / (1.0 - pt) })
                .collect(),
            Action::Segments(d) => {
                let seg = segment_average(p, d.window);
                let w = seg.window as f64;
                let mut grad = vec![0.0; p.len()];
                for (start, (&q, &s)) in seg.averages.iter().zip(&d.accepted).enumerate() {
                    let g = if s { 1.0 / q } else { -1.0 / (1.0 - q) } / w;
                    grad[start..start + seg.window].iter_mut().for_each(|x| *x += g);
                }
                grad
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainSampler {
    Sbs,
    Sab { window: usize },
}

impl TrainSampler {
    pub fn sample(&self, p: &FrameProbabilities, rng: &mut SeedRng) -> Action {
        match *self {
            TrainSampler::Sbs => Action::Frames(sample_sbs(p, rng)),
            TrainSampler::Sab { window } => Action::Segments(sample_sab(p, window, rng)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferSampler {
    T25,
    T15s { window: usize },
}

impl InferSampler {
    pub fn select(&self, p: &FrameProbabilities) -> SummaryMask {
        match *self {
            InferSampler::T25 => infer_t25(p),
            InferSampler::T15s { window } => infer_t15s(p, window),
        }
    }
}
