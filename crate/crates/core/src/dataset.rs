//! Dataset directories and the synthetic corpus.
//!
//! Layout under a dataset root, one directory per video:
//!
//! ```text
//! <id>/frames/00000.vstf ...
//! <id>/features/<encoder>.vstf
//! <id>/scores.vstf
//! <id>/gt.vstf          (optional)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{
    encode_builtin, load_stream, mix_segmentation_features, normalize, save_stream, EncoderKind,
    FeatureStream, MixWeights,
};
use crate::frames::{corpus_spec, generate_synthetic, load_video, save_video, FrameFormat, Video};
use crate::rewards::ssim_pipeline;
use crate::sampling::SummaryMask;
use crate::trainer::TrainVideo;
use crate::vstf::{self, Tensor};

/// Encoders written by the synthetic generator, in ensemble order.
pub const BUILTIN_ENCODERS: [&str; 3] = ["downsample", "histogram", "segmentation"];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub videos: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub feature_width: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            videos: 10,
            frame_count: 100,
            height: 64,
            width: 64,
            noise: 6.0,
            feature_width: crate::features::DEFAULT_FEATURE_WIDTH,
            seed: 0,
        }
    }
}

/// Everything known about one video.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub id: String,
    pub video: Video,
    pub streams: Vec<FeatureStream>,
    pub scores: Vec<f64>,
    pub gt: Option<SummaryMask>,
}

/// The three built-in streams. The segmentation stream mixes the thumbnail
/// with its foreground mask before any normalisation.
pub fn builtin_streams(video: &Video, width: usize) -> Result<Vec<FeatureStream>> {
    let image = encode_builtin(video, EncoderKind::Downsample, width);
    let mask = encode_builtin(video, EncoderKind::Mask, width);
    let segmentation = mix_segmentation_features(&image, &mask, MixWeights::default())?;
    let histogram = encode_builtin(video, EncoderKind::Histogram, width);
    Ok(vec![image, histogram, segmentation])
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:03}")
}

/// Generates the synthetic corpus in memory.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<VideoRecord>> {
    if spec.videos == 0 {
        return Err(Error::InvalidSpec("corpus needs at least one video".into()));
    }
    (0..spec.videos)
        .map(|i| {
            let s = corpus_spec(i, spec.frame_count, spec.height, spec.width, spec.noise, spec.seed);
            let synth = generate_synthetic(&s)?;
            Ok(VideoRecord {
                id: video_id(i),
                streams: builtin_streams(&synth.video, spec.feature_width)?,
                video: synth.video,
                scores: synth.classifier_scores,
                gt: Some(synth.ground_truth),
            })
        })
        .collect()
}

pub fn write_record(root: impl AsRef<Path>, record: &VideoRecord) -> Result<()> {
    let dir = root.as_ref().join(&record.id);
    save_video(&record.video, dir.join("frames"), FrameFormat::Vstf)?;
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    for s in &record.streams {
        save_stream(s, feature_dir.join(format!("{}.vstf", s.encoder_name)))?;
    }
    vstf::write_tensor(dir.join("scores.vstf"), &Tensor::from_values(&record.scores))?;
    if let Some(gt) = &record.gt {
        vstf::write_tensor(dir.join("gt.vstf"), &Tensor::from_mask(gt.as_slice()))?;
    }
    Ok(())
}

/// Video ids under `root`, sorted.
pub fn list_videos(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("frames").is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if ids.is_empty() {
        return Err(Error::Format(format!("no videos found under {}", root.display())));
    }
    ids.sort();
    Ok(ids)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SummaryMask> {
    Ok(SummaryMask::new(vstf::read_tensor(path)?.into_mask()?))
}

/// Loads one video with the named feature streams, padding or truncating
/// them to `width` when given.
pub fn load_record(
    root: impl AsRef<Path>,
    id: &str,
    encoders: &[String],
    width: Option<usize>,
) -> Result<VideoRecord> {
    let load = || -> Result<VideoRecord> {
        let dir = root.as_ref().join(id);
        let video = load_video(dir.join("frames"))?;
        let n = video.frame_count();
        let streams = encoders
            .iter()
            .map(|e| load_stream(dir.join("features").join(format!("{e}.vstf")), n, width))
            .collect::<Result<Vec<_>>>()?;
        let scores = vstf::read_tensor(dir.join("scores.vstf"))?.into_values()?;
        if scores.len() != n {
            return Err(Error::Alignment(format!("{} scores for {n} frames", scores.len())));
        }
        let gt_path = dir.join("gt.vstf");
        let gt = if gt_path.exists() {
            let gt = read_mask(&gt_path)?;
            if gt.len() != n {
                return Err(Error::Alignment(format!("ground truth covers {} of {n} frames", gt.len())));
            }
            Some(gt)
        } else {
            None
        };
        Ok(VideoRecord {
            id: id.to_string(),
            video,
            streams,
            scores,
            gt,
        })
    };
    load().map_err(|e| e.in_video(id))
}

/// Normalised feature matrices in ensemble order.
pub fn normalized_streams(record: &VideoRecord) -> Vec<crate::numerics::Matrix> {
    record.streams.iter().map(|s| normalize(s).features).collect()
}

/// Normalises the streams and runs the SSIM pipeline.
pub fn to_train_video(record: &VideoRecord, slope_window: usize) -> Result<TrainVideo> {
    let ssim = ssim_pipeline(&record.video, slope_window);
    TrainVideo::new(record.id.clone(), normalized_streams(record), record.scores.clone(), ssim)
}
