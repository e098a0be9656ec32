//! Run configuration: a flat UTF-8 file of `key = value` lines.
//!
//! `#` starts a comment, blank lines are ignored and unknown keys are
//! rejected. Later assignments override earlier ones, which is how command
//! line overrides are layered on top of a file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{CorpusSpec, BUILTIN_ENCODERS};
use crate::error::{Error, Result};
use crate::evaluation::{Reducer, DEFAULT_THRESHOLD};
use crate::fusion::DEFAULT_FUSION_HEADS;
use crate::numerics::AdamConfig;
use crate::policy::{DEFAULT_DROPOUT, DEFAULT_FFN_HIDDEN, DEFAULT_LSTM_HIDDEN, DEFAULT_TRANSFORMER_HEADS};
use crate::rewards::{RewardWeights, SsimOrientation, DEFAULT_DIVERSITY_LAMBDA, DEFAULT_SLOPE_WINDOW};
use crate::sampling::{InferSampler, TrainSampler, DEFAULT_SEGMENT_WINDOW};
use crate::trainer::{DecoderKind, ModelSpec, RegForm, TrainConfig};

/// Every recognised key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset root directory"),
    ("out", "output directory for every command"),
    ("encoders", "comma-separated feature streams to fuse"),
    ("feature_width", "pad/truncate loaded features to this width (0 keeps the stored width)"),
    ("decoder", "lstm | transformer"),
    ("train_sampler", "sbs | sab"),
    ("infer_sampler", "t25 | t15s"),
    ("segment_window", "window for SAB and T15S segments"),
    ("reward", "full | clsf_ssim | custom"),
    ("w_clsf", "classifier reward weight (reward = custom)"),
    ("w_ssim", "SSIM reward weight (reward = custom)"),
    ("w_rep", "representativeness weight (reward = custom)"),
    ("w_div", "diversity weight (reward = custom)"),
    ("ssim_orientation", "dissimilarity | literal"),
    ("slope_window", "SSIM signal slope window"),
    ("diversity_lambda", "temporal window of the diversity reward"),
    ("beta", "regulariser weight"),
    ("epsilon", "target mean selection probability"),
    ("reg_form", "squared | absolute"),
    ("episodes", "episodes per video per step"),
    ("epochs", "training epochs"),
    ("lr", "Adam step size"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("baseline_decay", "reward baseline moving-average decay"),
    ("clip_norm", "global gradient-norm clip"),
    ("seed", "master seed"),
    ("fusion_heads", "attention heads in the fusion block"),
    ("lstm_hidden", "Bi-LSTM hidden size per direction"),
    ("transformer_heads", "transformer attention heads"),
    ("ffn_hidden", "transformer feed-forward width"),
    ("dropout", "transformer feed-forward dropout"),
    ("threshold", "feature-similarity threshold"),
    ("reducer", "pca2 | none"),
    ("eval_features", "feature stream used for feature metrics"),
    ("synth_videos", "videos in the synthetic corpus"),
    ("synth_frames", "frames per synthetic video"),
    ("synth_height", "synthetic frame height"),
    ("synth_width", "synthetic frame width"),
    ("synth_noise", "synthetic pixel noise amplitude"),
    ("synth_feature_width", "width of the synthetic feature files"),
    ("grid_encoders", "encoder sets separated by `;`"),
    ("grid_decoders", "comma-separated decoders"),
    ("grid_samplers", "comma-separated training samplers"),
    ("grid_rewards", "comma-separated reward presets"),
    ("grid_seeds", "number of model seeds per grid cell"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub encoders: Vec<String>,
    pub feature_width: Option<usize>,
    pub decoder: DecoderKind,
    pub train_sampler: String,
    pub infer_sampler: String,
    pub segment_window: usize,
    pub reward: String,
    pub custom_weights: RewardWeights,
    pub ssim_orientation: SsimOrientation,
    pub slope_window: usize,
    pub diversity_lambda: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub reg_form: RegForm,
    pub episodes: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub baseline_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub fusion_heads: usize,
    pub lstm_hidden: usize,
    pub transformer_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub threshold: f64,
    pub reducer: Reducer,
    pub eval_features: Option<String>,
    pub synth: CorpusSpec,
    pub grid_encoders: Vec<Vec<String>>,
    pub grid_decoders: Vec<DecoderKind>,
    pub grid_samplers: Vec<String>,
    pub grid_rewards: Vec<String>,
    pub grid_seeds: usize,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let encoders: Vec<String> = BUILTIN_ENCODERS.iter().map(|s| s.to_string()).collect();
        Self {
            data: None,
            out: PathBuf::from("out"),
            encoders: encoders.clone(),
            feature_width: None,
            decoder: DecoderKind::Lstm,
            train_sampler: "sbs".into(),
            infer_sampler: "t15s".into(),
            segment_window: DEFAULT_SEGMENT_WINDOW,
            reward: "full".into(),
            custom_weights: RewardWeights::FULL,
            ssim_orientation: train.ssim_orientation,
            slope_window: DEFAULT_SLOPE_WINDOW,
            diversity_lambda: DEFAULT_DIVERSITY_LAMBDA,
            beta: train.beta,
            epsilon: train.epsilon,
            reg_form: train.reg_form,
            episodes: train.episodes,
            epochs: train.epochs,
            adam: train.adam,
            baseline_decay: train.baseline_decay,
            clip_norm: train.clip_norm,
            seed: 0,
            fusion_heads: DEFAULT_FUSION_HEADS,
            lstm_hidden: DEFAULT_LSTM_HIDDEN,
            transformer_heads: DEFAULT_TRANSFORMER_HEADS,
            ffn_hidden: DEFAULT_FFN_HIDDEN,
            dropout: DEFAULT_DROPOUT,
            threshold: DEFAULT_THRESHOLD,
            reducer: Reducer::default(),
            eval_features: None,
            synth: CorpusSpec::default(),
            grid_encoders: vec![encoders],
            grid_decoders: vec![DecoderKind::Lstm, DecoderKind::Transformer],
            grid_samplers: vec!["sbs".into(), "sab".into()],
            grid_rewards: vec!["full".into(), "clsf_ssim".into()],
            grid_seeds: 5,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_with<T>(key: &str, value: &str, choices: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("`{key}` must be one of {}, got `{value}`", names.join(", ")))
        })
}

fn check_choice(key: &str, value: &str, choices: &[&str]) -> Result<String> {
    if choices.contains(&value) {
        Ok(value.to_string())
    } else {
        Err(Error::Config(format!(
            "`{key}` must be one of {}, got `{value}`",
            choices.join(", ")
        )))
    }
}

const TRAIN_SAMPLERS: &[&str] = &["sbs", "sab"];
const INFER_SAMPLERS: &[&str] = &["t25", "t15s"];
const REWARDS: &[&str] = &["full", "clsf_ssim", "custom"];

impl Config {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    /// Applies `key=value` (the command-line override form).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "encoders" => self.encoders = parse_list(value),
            "feature_width" => {
                let w: usize = parse_num(key, value)?;
                self.feature_width = (w > 0).then_some(w);
            }
            "decoder" => self.decoder = value.parse()?,
            "train_sampler" => self.train_sampler = check_choice(key, value, TRAIN_SAMPLERS)?,
            "infer_sampler" => self.infer_sampler = check_choice(key, value, INFER_SAMPLERS)?,
            "segment_window" => self.segment_window = parse_num(key, value)?,
            "reward" => self.reward = check_choice(key, value, REWARDS)?,
            "w_clsf" => self.custom_weights.clsf = parse_num(key, value)?,
            "w_ssim" => self.custom_weights.ssim = parse_num(key, value)?,
            "w_rep" => self.custom_weights.rep = parse_num(key, value)?,
            "w_div" => self.custom_weights.div = parse_num(key, value)?,
            "ssim_orientation" => {
                self.ssim_orientation = parse_with(
                    key,
                    value,
                    &[
                        ("dissimilarity", SsimOrientation::Dissimilarity),
                        ("literal", SsimOrientation::Literal),
                    ],
                )?
            }
            "slope_window" => self.slope_window = parse_num(key, value)?,
            "diversity_lambda" => self.diversity_lambda = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "reg_form" => {
                self.reg_form = parse_with(
                    key,
                    value,
                    &[("squared", RegForm::Squared), ("absolute", RegForm::Absolute)],
                )?
            }
            "episodes" => self.episodes = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.adam.lr = parse_num(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam.eps = parse_num(key, value)?,
            "baseline_decay" => self.baseline_decay = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fusion_heads" => self.fusion_heads = parse_num(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_num(key, value)?,
            "transformer_heads" => self.transformer_heads = parse_num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "threshold" => self.threshold = parse_num(key, value)?,
            "reducer" => self.reducer = value.parse()?,
            "eval_features" => self.eval_features = Some(value.to_string()),
            "synth_videos" => self.synth.videos = parse_num(key, value)?,
            "synth_frames" => self.synth.frame_count = parse_num(key, value)?,
            "synth_height" => self.synth.height = parse_num(key, value)?,
            "synth_width" => self.synth.width = parse_num(key, value)?,
            "synth_noise" => self.synth.noise = parse_num(key, value)?,
            "synth_feature_width" => self.synth.feature_width = parse_num(key, value)?,
            "grid_encoders" => {
                self.grid_encoders = value
                    .split(';')
                    .map(parse_list)
                    .filter(|l| !l.is_empty())
                    .collect()
            }
            "grid_decoders" => {
                self.grid_decoders = parse_list(value)
                    .iter()
                    .map(|d| d.parse())
                    .collect::<Result<_>>()?
            }
            "grid_samplers" => {
                self.grid_samplers = parse_list(value)
                    .iter()
                    .map(|s| check_choice(key, s, TRAIN_SAMPLERS))
                    .collect::<Result<_>>()?
            }
            "grid_rewards" => {
                self.grid_rewards = parse_list(value)
                    .iter()
                    .map(|s| check_choice(key, s, REWARDS))
                    .collect::<Result<_>>()?
            }
            "grid_seeds" => self.grid_seeds = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn reward_weights(&self) -> Result<RewardWeights> {
        let w = match self.reward.as_str() {
            "custom" => self.custom_weights,
            name => RewardWeights::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown reward preset `{name}`")))?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn train_sampler(&self) -> TrainSampler {
        match self.train_sampler.as_str() {
            "sab" => TrainSampler::Sab {
                window: self.segment_window,
            },
            _ => TrainSampler::Sbs,
        }
    }

    pub fn infer_sampler(&self) -> InferSampler {
        match self.infer_sampler.as_str() {
            "t25" => InferSampler::T25,
            _ => InferSampler::T15s {
                window: self.segment_window,
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            episodes: self.episodes,
            epochs: self.epochs,
            sampler: self.train_sampler(),
            reward_weights: self.reward_weights()?,
            ssim_orientation: self.ssim_orientation,
            diversity_lambda: self.diversity_lambda,
            reg_form: self.reg_form,
            adam: self.adam,
            seed: self.seed,
            baseline_decay: self.baseline_decay,
            clip_norm: self.clip_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self, width: usize) -> ModelSpec {
        ModelSpec {
            width,
            fusion_heads: self.fusion_heads,
            decoder: self.decoder,
            lstm_hidden: self.lstm_hidden,
            transformer_heads: self.transformer_heads,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset configured (set `data`)".into()))?;
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    /// Checks the settings every command depends on.
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("`encoders` lists no feature streams".into()));
        }
        if self.segment_window == 0 || self.slope_window == 0 {
            return Err(Error::Config("windows must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.train_config()?;
        Ok(())
    }

    /// Canonical text form: every key in [`KEYS`] order, parseable by
    /// [`Config::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let w = self.custom_weights;
        let mut lines = Vec::new();
        for (key, _) in KEYS {
            let value = match *key {
                "data" => match &self.data {
                    Some(d) => d.display().to_string(),
                    None => continue,
                },
                "out" => self.out.display().to_string(),
                "encoders" => join(&self.encoders),
                "feature_width" => self.feature_width.unwrap_or(0).to_string(),
                "decoder" => self.decoder.to_string(),
                "train_sampler" => self.train_sampler.clone(),
                "infer_sampler" => self.infer_sampler.clone(),
                "segment_window" => self.segment_window.to_string(),
                "reward" => self.reward.clone(),
                "w_clsf" => w.clsf.to_string(),
                "w_ssim" => w.ssim.to_string(),
                "w_rep" => w.rep.to_string(),
                "w_div" => w.div.to_string(),
                "ssim_orientation" => match self.ssim_orientation {
                    SsimOrientation::Dissimilarity => "dissimilarity".into(),
                    SsimOrientation::Literal => "literal".into(),
                },
                "slope_window" => self.slope_window.to_string(),
                "diversity_lambda" => self.diversity_lambda.to_string(),
                "beta" => self.beta.to_string(),
                "epsilon" => self.epsilon.to_string(),
                "reg_form" => match self.reg_form {
                    RegForm::Squared => "squared".into(),
                    RegForm::Absolute => "absolute".into(),
                },
                "episodes" => self.episodes.to_string(),
                "epochs" => self.epochs.to_string(),
                "lr" => self.adam.lr.to_string(),
                "adam_beta1" => self.adam.beta1.to_string(),
                "adam_beta2" => self.adam.beta2.to_string(),
                "adam_eps" => self.adam.eps.to_string(),
                "baseline_decay" => self.baseline_decay.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "seed" => self.seed.to_string(),
                "fusion_heads" => self.fusion_heads.to_string(),
                "lstm_hidden" => self.lstm_hidden.to_string(),
                "transformer_heads" => self.transformer_heads.to_string(),
                "ffn_hidden" => self.ffn_hidden.to_string(),
                "dropout" => self.dropout.to_string(),
                "threshold" => self.threshold.to_string(),
                "reducer" => self.reducer.to_string(),
                "eval_features" => match &self.eval_features {
                    Some(e) => e.clone(),
                    None => continue,
                },
                "synth_videos" => self.synth.videos.to_string(),
                "synth_frames" => self.synth.frame_count.to_string(),
                "synth_height" => self.synth.height.to_string(),
                "synth_width" => self.synth.width.to_string(),
                "synth_noise" => self.synth.noise.to_string(),
                "synth_feature_width" => self.synth.feature_width.to_string(),
                "grid_encoders" => self
                    .grid_encoders
                    .iter()
                    .map(|s| join(s))
                    .collect::<Vec<_>>()
                    .join(";"),
                "grid_decoders" => self
                    .grid_decoders
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                "grid_samplers" => join(&self.grid_samplers),
                "grid_rewards" => join(&self.grid_rewards),
                "grid_seeds" => self.grid_seeds.to_string(),
                _ => unreachable!("every key is listed"),
            };
            lines.push(format!("{key} = {value}"));
        }
        lines.join("\n") + "\n"
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
