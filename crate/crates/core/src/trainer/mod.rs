//! REINFORCE training of the fusion block and decoder.
//!
//! Each step draws `E` action sequences from the current frame
//! probabilities, scores them, and follows
//! `(1/E) Σ (R_e − b) ∇ log p(a_e)` with a per-video moving-average
//! baseline `b`. A penalty `β (mean p − ε)²` keeps the selection rate near
//! `ε`. Gradients are clipped by global norm and applied with Adam.

mod checkpoint;
mod model;

use std::path::{Path, PathBuf};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{DecoderKind, Model, ModelCache, ModelOutput, ModelSpec};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::numerics::layers::ParamSet;
use crate::numerics::Matrix;
use crate::policy::Mode;
use crate::rewards::{RewardContext, RewardWeights, SsimOrientation, SsimSignal, DEFAULT_DIVERSITY_LAMBDA};
use crate::rng::SeedRng;
use crate::sampling::{FrameProbabilities, TrainSampler};

/// File name of the checkpoint rewritten after every epoch.
/// Adam step size used for training unless configured otherwise.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

pub const CHECKPOINT_FILE: &str = "checkpoint.vsck";

// Labels mixed into the master seed for each independent random stream.
const SEED_INIT: u64 = 0;
const SEED_ORDER: u64 = 1;
const SEED_STEP: u64 = 2;

/// Shape of the selection-rate penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegForm {
    /// `(mean p − ε)²`
    #[default]
    Squared,
    /// `|mean p − ε|`
    Absolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub episodes: usize,
    pub epochs: usize,
    pub sampler: TrainSampler,
    pub reward_weights: RewardWeights,
    pub ssim_orientation: SsimOrientation,
    pub diversity_lambda: usize,
    pub reg_form: RegForm,
    pub adam: AdamConfig,
    pub seed: u64,
    pub baseline_decay: f64,
    /// Global-norm clipping threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            epsilon: 0.5,
            episodes: 10,
            epochs: 30,
            sampler: TrainSampler::Sbs,
            reward_weights: RewardWeights::default(),
            ssim_orientation: SsimOrientation::default(),
            diversity_lambda: DEFAULT_DIVERSITY_LAMBDA,
            reg_form: RegForm::default(),
            adam: AdamConfig {
                lr: DEFAULT_LEARNING_RATE,
                ..AdamConfig::default()
            },
            seed: 0,
            baseline_decay: 0.9,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be a non-negative number, got {}", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.episodes == 0 {
            return fail("episodes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return fail(format!("baseline_decay must lie in [0, 1), got {}", self.baseline_decay));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if let TrainSampler::Sab { window: 0 } = self.sampler {
            return fail("SAB window must be at least 1".into());
        }
        self.reward_weights.validate()
    }
}

/// One training video with everything the reward needs precomputed.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub id: String,
    /// Row-normalised feature streams, all `N x f`.
    pub streams: Vec<Matrix>,
    pub scores: Vec<f64>,
    pub ssim: SsimSignal,
}

impl TrainVideo {
    pub fn new(id: impl Into<String>, streams: Vec<Matrix>, scores: Vec<f64>, ssim: SsimSignal) -> Result<Self> {
        let id = id.into();
        let check = || -> Result<()> {
            let first = streams
                .first()
                .ok_or_else(|| Error::Alignment("no feature streams".into()))?;
            let n = first.rows();
            if streams.iter().any(|s| s.shape() != first.shape()) {
                return Err(Error::Alignment("feature streams differ in shape".into()));
            }
            if scores.len() != n || ssim.sig.len() != n {
                return Err(Error::Alignment(format!(
                    "{n} feature rows, {} scores, {} SSIM frames",
                    scores.len(),
                    ssim.sig.len()
                )));
            }
            Ok(())
        };
        check().map_err(|e| e.in_video(&id))?;
        Ok(Self {
            id,
            streams,
            scores,
            ssim,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.streams[0].rows()
    }

    pub fn width(&self) -> usize {
        self.streams[0].cols()
    }

    pub fn stream_refs(&self) -> Vec<&Matrix> {
        self.streams.iter().collect()
    }
}

/// Selection-rate penalty and its derivative with respect to each `p_t`.
pub fn reg_loss(p: &FrameProbabilities, epsilon: f64) -> f64 {
    reg_loss_with(p, epsilon, RegForm::Squared).0
}

pub fn reg_loss_with(p: &FrameProbabilities, epsilon: f64, form: RegForm) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let d = p.mean() - epsilon;
    let (loss, slope) = match form {
        RegForm::Squared => (d * d, 2.0 * d),
        RegForm::Absolute => (d.abs(), d.signum() * (d != 0.0) as u8 as f64),
    };
    (loss, vec![slope / n; p.len()])
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub reg: f64,
    /// `β L_reg − mean reward`
    pub loss: f64,
    pub rewards: Vec<f64>,
}

/// Policy-gradient estimate of `∇(β L_reg − J)` for one video.
///
/// Gradients come back unclipped; [`apply_update`] clips them.
pub fn policy_gradient_step(
    video: &TrainVideo,
    model: &Model,
    config: &TrainConfig,
    baseline: f64,
    rng: &mut SeedRng,
) -> Result<(Model, StepStats)> {
    let out = model.forward(&video.stream_refs(), Mode::Train, rng)?;
    let ctx = RewardContext::new(
        &out.fused,
        &video.scores,
        &video.ssim,
        config.ssim_orientation,
        config.reward_weights,
        config.diversity_lambda,
    )?;
    let n = video.frame_count();
    let e = config.episodes as f64;
    let mut grad_p = vec![0.0; n];
    let mut rewards = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let action = config.sampler.sample(&out.probs, rng);
        let r = ctx.evaluate(action.mask()).total;
        let advantage = r - baseline;
        if advantage != 0.0 {
            for (g, s) in grad_p.iter_mut().zip(action.grad_log_prob(&out.probs)) {
                *g -= advantage * s / e;
            }
        }
        rewards.push(r);
    }
    let (reg, reg_grad) = reg_loss_with(&out.probs, config.epsilon, config.reg_form);
    for (g, r) in grad_p.iter_mut().zip(reg_grad) {
        *g += config.beta * r;
    }
    let mut grads = model.zeros_like();
    model.backward(&grad_p, &out.cache, &mut grads)?;
    if !grads.all_finite() {
        return Err(Error::Numeric("policy gradient is not finite".into()));
    }
    let mean_reward = rewards.iter().sum::<f64>() / e;
    Ok((
        grads,
        StepStats {
            mean_reward,
            reg,
            loss: config.beta * reg - mean_reward,
            rewards,
        },
    ))
}

/// Adam state for every parameter block, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let mut states = Vec::new();
        model.visit(&mut |_, m| states.push(AdamState::for_param(m, config)));
        Self { config, states }
    }

    pub fn step(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}

/// Clips `grads` to `clip_norm` and applies one Adam step. Returns the
/// gradient norm before clipping.
pub fn apply_update(model: &mut Model, grads: &mut Model, opt: &mut Optimizer, clip_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale_all(clip_norm / norm);
    }
    let mut blocks = Vec::with_capacity(opt.states.len());
    grads.visit(&mut |_, g| blocks.push(g.clone()));
    let mut result = Ok(());
    let mut i = 0;
    model.visit_mut(&mut |_, p| {
        if result.is_ok() {
            result = adam_step(p, &blocks[i], &mut opt.states[i]);
        }
        i += 1;
    });
    result.map(|_| norm)
}

/// Everything needed to continue training: model, optimiser, baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub spec: ModelSpec,
    pub model: Model,
    pub optimizer: Optimizer,
    pub baselines: Vec<f64>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn init(spec: ModelSpec, config: &TrainConfig, videos: usize) -> Result<Self> {
        let mut rng = SeedRng::derived(config.seed, &[SEED_INIT]);
        let model = Model::init(&spec, &mut rng)?;
        let optimizer = Optimizer::new(&model, config.adam);
        Ok(Self {
            spec,
            model,
            optimizer,
            baselines: vec![0.0; videos],
            epochs_done: 0,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_reg: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs epochs `state.epochs_done .. config.epochs`.
///
/// Video order is reshuffled each epoch and every step gets its own random
/// stream derived from `(seed, epoch, video)`, so resuming from a checkpoint
/// reproduces an uninterrupted run exactly. With `checkpoint_dir` set, the
/// state is written there after every epoch.
pub fn train(
    dataset: &[TrainVideo],
    config: &TrainConfig,
    state: &mut TrainState,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one video".into()));
    }
    if state.baselines.len() != dataset.len() {
        return Err(Error::Config(format!(
            "state tracks {} videos but the dataset has {}",
            state.baselines.len(),
            dataset.len()
        )));
    }
    for v in dataset {
        if v.width() != state.spec.width {
            return Err(Error::Alignment(format!(
                "features are {} wide, model expects {}",
                v.width(),
                state.spec.width
            ))
            .in_video(&v.id));
        }
    }
    let checkpoint = checkpoint_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(path) = &checkpoint {
        save_checkpoint(state, path)?;
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        checkpoint: checkpoint.clone(),
    };
    let decay = config.baseline_decay;
    for epoch in state.epochs_done..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        SeedRng::derived(config.seed, &[SEED_ORDER, epoch as u64]).shuffle(&mut order);
        let mut totals = EpochStats {
            epoch: epoch + 1,
            ..EpochStats::default()
        };
        for &vi in &order {
            let video = &dataset[vi];
            let mut rng = SeedRng::derived(config.seed, &[SEED_STEP, epoch as u64, vi as u64]);
            let (mut grads, stats) =
                policy_gradient_step(video, &state.model, config, state.baselines[vi], &mut rng)
                    .map_err(|e| e.in_video(&video.id))?;
            apply_update(&mut state.model, &mut grads, &mut state.optimizer, config.clip_norm)?;
            state.baselines[vi] = decay * state.baselines[vi] + (1.0 - decay) * stats.mean_reward;
            totals.mean_reward += stats.mean_reward;
            totals.mean_reg += stats.reg;
            totals.mean_loss += stats.loss;
        }
        let count = dataset.len() as f64;
        totals.mean_reward /= count;
        totals.mean_reg /= count;
        totals.mean_loss /= count;
        log::info!(
            "epoch {}/{}: reward {:.4}, reg {:.5}, loss {:.4}",
            totals.epoch,
            config.epochs,
            totals.mean_reward,
            totals.mean_reg,
            totals.mean_loss
        );
        state.epochs_done = epoch + 1;
        report.epochs.push(totals);
        if let Some(path) = &checkpoint {
            save_checkpoint(state, path)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
