use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_forward, FusionCache, FusionParams, DEFAULT_FUSION_HEADS};
use crate::numerics::layers::{join, ParamSet};
use crate::numerics::Matrix;
use crate::policy::{
    decode_backward, decode_forward, Decoder, DecoderCache, LstmDecoder, Mode, TransformerDecoder,
    DEFAULT_DROPOUT, DEFAULT_FFN_HIDDEN, DEFAULT_LSTM_HIDDEN, DEFAULT_TRANSFORMER_HEADS,
};
use crate::rng::SeedRng;
use crate::sampling::FrameProbabilities;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderKind {
    #[default]
    Lstm,
    Transformer,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Lstm => "lstm",
            DecoderKind::Transformer => "transformer",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(DecoderKind::Lstm),
            "transformer" => Ok(DecoderKind::Transformer),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Shape-determining hyperparameters of the fusion + decoder model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub width: usize,
    pub fusion_heads: usize,
    pub decoder: DecoderKind,
    pub lstm_hidden: usize,
    pub transformer_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(width: usize, decoder: DecoderKind) -> Self {
        Self {
            width,
            fusion_heads: DEFAULT_FUSION_HEADS,
            decoder,
            lstm_hidden: DEFAULT_LSTM_HIDDEN,
            transformer_heads: DEFAULT_TRANSFORMER_HEADS,
            ffn_hidden: DEFAULT_FFN_HIDDEN,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// Stable one-line text form, also stored in checkpoints.
    pub fn canonical(&self) -> String {
        format!(
            "width={};fusion_heads={};decoder={};lstm_hidden={};transformer_heads={};ffn_hidden={};dropout={:?}",
            self.width,
            self.fusion_heads,
            self.decoder,
            self.lstm_hidden,
            self.transformer_heads,
            self.ffn_hidden,
            self.dropout
        )
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed model description `{text}`"));
        let mut spec = ModelSpec::new(0, DecoderKind::Lstm);
        let mut seen = 0;
        for part in text.split(';') {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            let int = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "width" => spec.width = int()?,
                "fusion_heads" => spec.fusion_heads = int()?,
                "decoder" => spec.decoder = value.parse().map_err(|_| bad())?,
                "lstm_hidden" => spec.lstm_hidden = int()?,
                "transformer_heads" => spec.transformer_heads = int()?,
                "ffn_hidden" => spec.ffn_hidden = int()?,
                "dropout" => spec.dropout = value.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(bad());
        }
        Ok(spec)
    }

    /// First eight bytes of the SHA-256 of [`ModelSpec::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Fusion block and decoder, trained jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub fusion: FusionParams,
    pub decoder: Decoder,
}

impl Model {
    pub fn init(spec: &ModelSpec, rng: &mut SeedRng) -> Result<Self> {
        let fusion = FusionParams::init(spec.width, spec.fusion_heads, rng)?;
        let decoder = match spec.decoder {
            DecoderKind::Lstm => {
                if spec.lstm_hidden == 0 {
                    return Err(Error::Config("lstm_hidden must be positive".into()));
                }
                Decoder::Lstm(LstmDecoder::init(spec.width, spec.lstm_hidden, rng))
            }
            DecoderKind::Transformer => Decoder::Transformer(TransformerDecoder::init(
                spec.width,
                spec.transformer_heads,
                spec.ffn_hidden,
                spec.dropout,
                rng,
            )?),
        };
        Ok(Self { fusion, decoder })
    }

    /// Fuses the streams and decodes frame probabilities.
    pub fn forward(&self, streams: &[&Matrix], mode: Mode, rng: &mut SeedRng) -> Result<ModelOutput> {
        let (fused, fusion_cache) = fuse_forward(streams, &self.fusion)?;
        let (probs, decoder_cache) = decode_forward(&fused, &self.decoder, mode, rng)?;
        Ok(ModelOutput {
            fused,
            probs,
            cache: ModelCache {
                fusion: fusion_cache,
                decoder: decoder_cache,
            },
        })
    }

    /// Adds `dL/dθ` into `grad` given `dL/dp`.
    pub fn backward(&self, grad_p: &[f64], cache: &ModelCache, grad: &mut Model) -> Result<()> {
        let d_fused = decode_backward(grad_p, &cache.decoder, &self.decoder, &mut grad.decoder)?;
        fuse_backward(&d_fused, &cache.fusion, &self.fusion, &mut grad.fusion)?;
        Ok(())
    }
}

impl ParamSet for Model {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.fusion.visit_named(&join(prefix, "fusion"), f);
        self.decoder.visit_named(&join(prefix, "decoder"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.fusion.visit_named_mut(&join(prefix, "fusion"), f);
        self.decoder.visit_named_mut(&join(prefix, "decoder"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    fusion: FusionCache,
    decoder: DecoderCache,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub fused: Matrix,
    pub probs: FrameProbabilities,
    pub cache: ModelCache,
}
