//! Summary rewards: representativeness, diversity, classifier bias, the
//! SSIM transition reward, and their weighted total.

mod ssim;

pub use ssim::{
    compute_ssim, least_squares_slope, normalized_signal, reward_ssim, signal_from_matrix,
    ssim_matrix, ssim_pipeline, SsimOrientation, SsimSignal, DEFAULT_SLOPE_WINDOW, SSIM_C1,
    SSIM_C2,
};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, euclidean_distance, Matrix};
use crate::sampling::SummaryMask;

/// Frames further apart than this count as maximally diverse.
pub const DEFAULT_DIVERSITY_LAMBDA: usize = 20;

/// `exp(-mean_t min_{s in S} ||x_t - x_s||)`; 0 for an empty summary.
pub fn reward_rep(features: &Matrix, mask: &SummaryMask) -> f64 {
    let selected = mask.indices();
    if selected.is_empty() {
        return 0.0;
    }
    let total: f64 = features
        .row_iter()
        .map(|x| {
            selected
                .iter()
                .map(|&s| euclidean_distance(x, features.row(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    (-total / features.rows() as f64).exp()
}

/// Mean pairwise dissimilarity over ordered pairs of selected frames.
///
/// Pairs more than `lambda` frames apart count as 1; closer pairs use
/// `1 - cosine`, clamped to `[0, 1]`. Fewer than two selected frames give 0.
pub fn reward_div(features: &Matrix, mask: &SummaryMask, lambda: usize) -> f64 {
    let selected = mask.indices();
    let k = selected.len();
    if k < 2 {
        log::debug!("diversity reward of a {k}-frame summary is 0");
        return 0.0;
    }
    let mut total = 0.0;
    for (a, &t) in selected.iter().enumerate() {
        for &i in &selected[a + 1..] {
            let d = if i - t > lambda {
                1.0
            } else {
                (1.0 - cosine_similarity(features.row(t), features.row(i))).clamp(0.0, 1.0)
            };
            // d is symmetric, so each unordered pair stands for two ordered ones
            total += 2.0 * d;
        }
    }
    total / (k * (k - 1)) as f64
}

/// Mean classifier score of the selected frames; 0 for an empty summary.
pub fn reward_clsf(scores: &[f64], mask: &SummaryMask) -> f64 {
    let selected = mask.indices();
    if selected.is_empty() {
        return 0.0;
    }
    selected.iter().map(|&i| scores[i]).sum::<f64>() / selected.len() as f64
}

/// Weights of the four reward terms; they must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardWeights {
    pub clsf: f64,
    pub ssim: f64,
    pub rep: f64,
    pub div: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::FULL
    }
}

impl RewardWeights {
    /// Classifier-heavy mix of all four terms.
    pub const FULL: Self = Self {
        clsf: 2.0 / 3.0,
        ssim: 1.0 / 9.0,
        rep: 1.0 / 9.0,
        div: 1.0 / 9.0,
    };

    /// Classifier and SSIM terms only, as used in the reward ablations.
    pub const CLSF_SSIM: Self = Self {
        clsf: 2.0 / 3.0,
        ssim: 1.0 / 3.0,
        rep: 0.0,
        div: 0.0,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::FULL),
            "clsf_ssim" => Some(Self::CLSF_SSIM),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.clsf, self.ssim, self.rep, self.div];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("reward weights must be non-negative: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("reward weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// The four components and their weighted total, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBreakdown {
    pub rep: f64,
    pub div: f64,
    pub clsf: f64,
    pub ssim: f64,
    pub total: f64,
}

pub fn reward_total(
    rep: f64,
    div: f64,
    clsf: f64,
    ssim: f64,
    weights: &RewardWeights,
) -> Result<RewardBreakdown> {
    weights.validate()?;
    Ok(combine(rep, div, clsf, ssim, weights))
}

fn combine(rep: f64, div: f64, clsf: f64, ssim: f64, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown {
        rep,
        div,
        clsf,
        ssim,
        total: w.clsf * clsf + w.ssim * ssim + w.rep * rep + w.div * div,
    }
}

/// Everything needed to score candidate summaries of one video.
#[derive(Clone, Debug)]
pub struct RewardContext<'a> {
    /// Features the representativeness and diversity terms see (the fused
    /// features during training).
    pub features: &'a Matrix,
    pub scores: &'a [f64],
    /// Normalised SSIM signal, see [`normalized_signal`].
    pub ssim_norm: Vec<f64>,
    pub weights: RewardWeights,
    pub lambda: usize,
}

impl<'a> RewardContext<'a> {
    pub fn new(
        features: &'a Matrix,
        scores: &'a [f64],
        ssim: &SsimSignal,
        orientation: SsimOrientation,
        weights: RewardWeights,
        lambda: usize,
    ) -> Result<Self> {
        weights.validate()?;
        let n = features.rows();
        if scores.len() != n || ssim.sig.len() != n {
            return Err(Error::Alignment(format!(
                "{n} feature rows, {} scores, {} SSIM entries",
                scores.len(),
                ssim.sig.len()
            )));
        }
        Ok(Self {
            features,
            scores,
            ssim_norm: normalized_signal(ssim, orientation),
            weights,
            lambda,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.features.rows()
    }

    pub fn evaluate(&self, mask: &SummaryMask) -> RewardBreakdown {
        combine(
            if self.weights.rep > 0.0 { reward_rep(self.features, mask) } else { 0.0 },
            if self.weights.div > 0.0 { reward_div(self.features, mask, self.lambda) } else { 0.0 },
            reward_clsf(self.scores, mask),
            ssim::reward_from_normalized(&self.ssim_norm, mask),
            &self.weights,
        )
    }

    /// Highest-reward mask by exhaustive enumeration; at most 20 frames.
    pub fn exhaustive_best(&self) -> Result<(SummaryMask, RewardBreakdown)> {
        let n = self.frame_count();
        if n > 20 {
            return Err(Error::Dimension(format!("exhaustive search over {n} frames")));
        }
        let mut best = (SummaryMask::empty(n), self.evaluate(&SummaryMask::empty(n)));
        for bits in 1..1u64 << n {
            let mask = SummaryMask::from_bits(n, bits);
            let r = self.evaluate(&mask);
            if r.total > best.1.total {
                best = (mask, r);
            }
        }
        Ok(best)
    }
}
