//! Per-frame feature streams: loading precomputed encoder outputs, cheap
//! built-in encoders, image/mask feature mixing, and per-frame
//! normalisation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frames::{Frame, Video};
use crate::numerics::{l2_norm, Matrix};
use crate::vstf::{self, Tensor};

pub const DEFAULT_FEATURE_WIDTH: usize = 512;
pub const HISTOGRAM_BINS: usize = 64;

/// Feature vectors from one encoder, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub encoder_name: String,
    pub features: Matrix,
}

impl FeatureStream {
    pub fn new(encoder_name: impl Into<String>, features: Matrix) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::Numeric("feature stream contains non-finite values".into()));
        }
        Ok(Self {
            encoder_name: encoder_name.into(),
            features,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// `K` aligned streams over the same frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEnsemble {
    streams: Vec<FeatureStream>,
}

impl FeatureEnsemble {
    pub fn new(streams: Vec<FeatureStream>) -> Result<Self> {
        let first = streams
            .first()
            .ok_or_else(|| Error::Alignment("an ensemble needs at least one stream".into()))?;
        let (n, f) = first.features.shape();
        for s in &streams[1..] {
            if s.features.shape() != (n, f) {
                return Err(Error::Alignment(format!(
                    "stream {} is {:?}, expected {:?} like {}",
                    s.encoder_name,
                    s.features.shape(),
                    (n, f),
                    first.encoder_name
                )));
            }
        }
        Ok(Self { streams })
    }

    pub fn streams(&self) -> &[FeatureStream] {
        &self.streams
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.streams[0].frame_count()
    }

    pub fn width(&self) -> usize {
        self.streams[0].width()
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.streams.iter().map(|s| &s.features).collect()
    }

    /// Every stream normalised to unit-norm rows.
    pub fn normalized(&self) -> Self {
        Self {
            streams: self.streams.iter().map(normalize).collect(),
        }
    }
}

/// Zero-pads or truncates columns to `width`.
pub fn fit_width(m: &Matrix, width: usize) -> Matrix {
    if m.cols() == width {
        return m.clone();
    }
    Matrix::from_fn(m.rows(), width, |r, c| if c < m.cols() { m[(r, c)] } else { 0.0 })
}

/// Loads a rank-2 feature file and checks it covers `expected_frames` rows.
/// With `width` set, columns are zero-padded or truncated to that width.
pub fn load_stream(
    path: impl AsRef<Path>,
    expected_frames: usize,
    width: Option<usize>,
) -> Result<FeatureStream> {
    let path = path.as_ref();
    let features = vstf::read_tensor(path)?
        .into_matrix()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    if features.rows() != expected_frames {
        return Err(Error::Alignment(format!(
            "{} has {} rows but the video has {expected_frames} frames",
            path.display(),
            features.rows()
        )));
    }
    let features = match width {
        Some(w) => fit_width(&features, w),
        None => features,
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("stream")
        .to_string();
    FeatureStream::new(name, features)
}

pub fn save_stream(stream: &FeatureStream, path: impl AsRef<Path>) -> Result<()> {
    vstf::write_tensor(path, &Tensor::from_matrix(&stream.features))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Bilinear thumbnail of the frame, intensities scaled to `[0, 1]`.
    Downsample,
    /// 64-bin intensity histogram (fractions of pixels), tiled to width.
    Histogram,
    /// Thumbnail of the frame thresholded at its mean intensity; a crude
    /// foreground mask.
    Mask,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Downsample => "downsample",
            EncoderKind::Histogram => "histogram",
            EncoderKind::Mask => "mask",
        }
    }
}

/// Side of the square thumbnail grid used for a given feature width.
pub fn thumbnail_side(width: usize) -> usize {
    ((width as f64).sqrt().floor() as usize).clamp(1, 16)
}

fn bilinear_thumbnail(pixels: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let sample = |y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = pixels[y0 * w + x0] * (1.0 - fx) + pixels[y0 * w + x1] * fx;
        let bottom = pixels[y1 * w + x0] * (1.0 - fx) + pixels[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let y = (i as f64 + 0.5) * h as f64 / side as f64 - 0.5;
        for j in 0..side {
            let x = (j as f64 + 0.5) * w as f64 / side as f64 - 0.5;
            out.push(sample(y, x));
        }
    }
    out
}

fn encode_frame(frame: &Frame, kind: EncoderKind, width: usize) -> Vec<f64> {
    let (h, w) = (frame.height(), frame.width());
    let mut row = vec![0.0; width];
    match kind {
        EncoderKind::Downsample => {
            let scaled: Vec<f64> = frame.pixels().iter().map(|p| p / 255.0).collect();
            let thumb = bilinear_thumbnail(&scaled, h, w, thumbnail_side(width));
            for (r, t) in row.iter_mut().zip(thumb) {
                *r = t;
            }
        }
        EncoderKind::Mask => {
            let mean = frame.pixels().iter().sum::<f64>() / frame.pixels().len() as f64;
            let binary: Vec<f64> = frame
                .pixels()
                .iter()
                .map(|&p| if p > mean { 1.0 } else { 0.0 })
                .collect();
            let thumb = bilinear_thumbnail(&binary, h, w, thumbnail_side(width));
            for (r, t) in row.iter_mut().zip(thumb) {
                *r = t;
            }
        }
        EncoderKind::Histogram => {
            let mut hist = [0.0; HISTOGRAM_BINS];
            for &p in frame.pixels() {
                let bin = ((p / 256.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                hist[bin] += 1.0;
            }
            let total = frame.pixels().len() as f64;
            for (j, r) in row.iter_mut().enumerate() {
                *r = hist[j % HISTOGRAM_BINS] / total;
            }
        }
    }
    row
}

/// Built-in frame encoder producing a `frame_count x width` stream.
pub fn encode_builtin(video: &Video, kind: EncoderKind, width: usize) -> FeatureStream {
    let rows: Vec<Vec<f64>> = video
        .frames()
        .iter()
        .map(|f| encode_frame(f, kind, width))
        .collect();
    FeatureStream {
        encoder_name: kind.name().to_string(),
        features: Matrix::from_rows(&rows).expect("rows share the configured width"),
    }
}

/// Weights of the image and mask features in [`mix_segmentation_features`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixWeights {
    pub image: f64,
    pub mask: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            image: 0.7,
            mask: 0.3,
        }
    }
}

/// Elementwise `image_w * image + mask_w * mask`.
pub fn mix_segmentation_features(
    image: &FeatureStream,
    mask: &FeatureStream,
    weights: MixWeights,
) -> Result<FeatureStream> {
    if image.features.shape() != mask.features.shape() {
        return Err(Error::Alignment(format!(
            "image features {:?} vs mask features {:?}",
            image.features.shape(),
            mask.features.shape()
        )));
    }
    let mut mixed = image.features.clone();
    mixed.scale(weights.image);
    mixed.axpy(weights.mask, &mask.features);
    FeatureStream::new("segmentation", mixed)
}

/// Scales every row to unit L2 norm; zero rows stay zero.
pub fn normalize(stream: &FeatureStream) -> FeatureStream {
    let mut features = stream.features.clone();
    for r in 0..features.rows() {
        let row = features.row_mut(r);
        let n = l2_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    FeatureStream {
        encoder_name: stream.encoder_name.clone(),
        features,
    }
}
