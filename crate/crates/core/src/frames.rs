//! Frame and video data model, on-disk frame formats, and the synthetic
//! video generator used for desk-scale verification.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::sampling::SummaryMask;
use crate::vstf::{self, Tensor};

pub const MIN_SIDE: usize = 8;

/// Grayscale frame, intensities in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Format(format!(
                "frame {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Format(format!(
                "{} pixels for a {height}x{width} frame",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::Format(format!("pixel value {bad} outside [0, 255]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Nonempty sequence of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: Vec<Frame>,
}

impl Video {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Format("video has no frames".into()))?;
        let dims = (first.height, first.width);
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| (f.height, f.width) != dims)
        {
            return Err(Error::Format(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.height, f.width, dims.0, dims.1
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Vstf,
    Pgm,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Vstf => "vstf",
            FrameFormat::Pgm => "pgm",
        }
    }
}

/// Encodes an 8-bit binary PGM (P5, maxval 255). Pixels are rounded.
pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.pixels.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Frame> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(origin, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let number = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(origin, format!("bad {what} {s:?}")))
    };
    let width = number(&fields[1], "width")?;
    let height = number(&fields[2], "height")?;
    let maxval = number(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::parse(origin, format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == width * height)
        .ok_or_else(|| Error::parse(origin, "raster size does not match header"))?;
    Frame::new(height, width, raster.iter().map(|&b| f64::from(b)).collect())
        .map_err(|e| Error::parse(origin, e.to_string()))
}

pub fn frame_to_tensor(frame: &Frame) -> Tensor {
    Tensor {
        dims: vec![frame.height, frame.width],
        data: frame.pixels.iter().map(|&p| p as f32).collect(),
    }
}

pub fn frame_from_tensor(t: Tensor, origin: &Path) -> Result<Frame> {
    if t.rank() != 2 {
        return Err(Error::parse(origin, format!("frame tensor has rank {}", t.rank())));
    }
    Frame::new(
        t.dims[0],
        t.dims[1],
        t.data.into_iter().map(f64::from).collect(),
    )
    .map_err(|e| Error::parse(origin, e.to_string()))
}

fn numeric_key(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Loads every `.vstf` / `.pgm` frame in `dir`, ordered by the number in
/// each filename.
pub fn load_video(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("vstf") | Some("pgm")) {
            continue;
        }
        let key = numeric_key(&path)
            .ok_or_else(|| Error::parse(&path, "frame filename carries no frame number"))?;
        files.push((key, path));
    }
    if files.is_empty() {
        return Err(Error::Format(format!("no frames found in {}", dir.display())));
    }
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for (_, path) in &files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let frame = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            decode_pgm(&bytes, path)?
        } else {
            frame_from_tensor(Tensor::decode(&bytes, path)?, path)?
        };
        frames.push(frame);
    }
    Video::new(frames)
}

/// Writes one file per frame as `00000.<ext>`, `00001.<ext>`, ...
pub fn save_video(video: &Video, dir: impl AsRef<Path>, format: FrameFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in video.frames.iter().enumerate() {
        let path = dir.join(format!("{i:05}.{}", format.extension()));
        match format {
            FrameFormat::Vstf => vstf::write_tensor(&path, &frame_to_tensor(frame))?,
            FrameFormat::Pgm => fs::write(&path, encode_pgm(frame)).map_err(|e| Error::io(&path, e))?,
        }
    }
    Ok(())
}

/// Visual pattern of one synthetic segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Static textureless tissue under a bright pleural line.
    Uniform,
    /// Horizontal reverberation bands drifting down one row per frame
    /// (A-line-like, normal).
    MovingBand,
    /// Bright vertical streaks hanging from the pleural line (B-line-like,
    /// abnormal).
    BrightVerticalLines,
}

impl Pattern {
    pub fn is_abnormal(self) -> bool {
        matches!(self, Pattern::BrightVerticalLines)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    /// First frame index of every segment after the first.
    pub boundaries: Vec<usize>,
    /// One pattern per segment (`boundaries.len() + 1` entries).
    pub patterns: Vec<Pattern>,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    /// Uniform noise amplitude on classifier scores, at most 0.5.
    pub score_noise: f64,
    /// Ground-truth window width centred on each boundary.
    pub gt_window: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frame_count: 100,
            height: 64,
            width: 64,
            boundaries: vec![50],
            patterns: vec![Pattern::Uniform, Pattern::BrightVerticalLines],
            noise: 6.0,
            score_noise: 0.1,
            gt_window: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::InvalidSpec("no segments".into()));
        }
        if self.patterns.len() != self.boundaries.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "{} boundaries need {} patterns, got {}",
                self.boundaries.len(),
                self.boundaries.len() + 1,
                self.patterns.len()
            )));
        }
        if self.frame_count == 0 {
            return Err(Error::InvalidSpec("frame_count is 0".into()));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::InvalidSpec(format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}")));
        }
        let mut prev = 0;
        for &b in &self.boundaries {
            if b <= prev || b >= self.frame_count {
                return Err(Error::InvalidSpec(format!(
                    "boundaries {:?} must be strictly increasing inside (0, {})",
                    self.boundaries, self.frame_count
                )));
            }
            prev = b;
        }
        if !(0.0..=0.5).contains(&self.score_noise) || !(self.noise >= 0.0) {
            return Err(Error::InvalidSpec("noise amplitudes out of range".into()));
        }
        Ok(())
    }

    fn segment_of(&self, t: usize) -> usize {
        self.boundaries.iter().take_while(|&&b| b <= t).count()
    }

    fn segment_start(&self, seg: usize) -> usize {
        if seg == 0 {
            0
        } else {
            self.boundaries[seg - 1]
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video: Video,
    pub ground_truth: SummaryMask,
    pub classifier_scores: Vec<f64>,
}

/// Per-segment appearance parameters drawn once from the seed.
struct SegmentLook {
    pattern: Pattern,
    level: f64,
    pleura_row: usize,
    line_cols: Vec<f64>,
    band_phase: usize,
}

fn render(look: &SegmentLook, local: usize, h: usize, w: usize) -> Vec<f64> {
    let mut px = vec![0.0; h * w];
    let band_period = (h / 4).max(4);
    let band_thickness = (h / 16).max(1);
    let line_half = (w / 64).max(1) as f64;
    let sway = 1.5 * (2.0 * PI * local as f64 / 16.0).sin();
    for r in 0..h {
        for c in 0..w {
            let depth = r as f64 / h as f64;
            let mut v = match look.pattern {
                Pattern::Uniform => look.level + 25.0 * depth,
                _ => look.level * 0.6,
            };
            if r > look.pleura_row {
                match look.pattern {
                    Pattern::Uniform => {}
                    Pattern::MovingBand => {
                        let shifted = (r + band_period * 8 - local % band_period + look.band_phase) % band_period;
                        if shifted < band_thickness {
                            v = 170.0 - 60.0 * depth;
                        }
                    }
                    Pattern::BrightVerticalLines => {
                        let near = look
                            .line_cols
                            .iter()
                            .any(|&lc| (c as f64 - (lc + sway)).abs() <= line_half);
                        if near {
                            v = 235.0 - 30.0 * depth;
                        }
                    }
                }
            }
            if r.abs_diff(look.pleura_row) <= 1 {
                v = 210.0;
            }
            px[r * w + c] = v;
        }
    }
    px
}

/// Generates a deterministic synthetic video with ground truth and
/// classifier scores.
///
/// Frames within `gt_window / 2` of a boundary are rendered as a noisy
/// cross-fade between the neighbouring segments, mimicking the probe sweep
/// between scan positions. Pixels are quantised to integers so the video
/// round-trips exactly through both frame formats.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SeedRng::new(spec.seed);
    let looks: Vec<SegmentLook> = spec
        .patterns
        .iter()
        .map(|&pattern| {
            let level = rng.uniform_range(60.0, 90.0);
            let pleura_row = (h as f64 * rng.uniform_range(0.15, 0.25)) as usize;
            let line_cols = (0..3)
                .map(|i| w as f64 * (0.2 + 0.3 * i as f64) + rng.uniform_range(-2.0, 2.0))
                .collect();
            let band_phase = rng.below(h.max(1));
            SegmentLook {
                pattern,
                level,
                pleura_row,
                line_cols,
                band_phase,
            }
        })
        .collect();

    let half = spec.gt_window / 2;
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut scores = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let seg = spec.segment_of(t);
        let local = t - spec.segment_start(seg);
        let mut px = render(&looks[seg], local, h, w);
        let mut amplitude = spec.noise;

        let nearest = spec
            .boundaries
            .iter()
            .enumerate()
            .find(|(_, &b)| t + half >= b && t <= b + half);
        if let Some((bi, &b)) = nearest {
            // cross-fade from segment bi into bi + 1
            let alpha = (t + half + 1 - b) as f64 / (2 * half + 2) as f64;
            let prev_start = spec.segment_start(bi);
            let before = render(&looks[bi], t.saturating_sub(prev_start), h, w);
            let after = render(&looks[bi + 1], t.saturating_sub(b), h, w);
            for ((p, a), bb) in px.iter_mut().zip(&before).zip(&after) {
                *p = (1.0 - alpha) * a + alpha * bb;
            }
            amplitude = (3.0 * spec.noise).max(30.0);
        }
        for p in px.iter_mut() {
            *p = (*p + rng.uniform_range(-amplitude, amplitude)).round().clamp(0.0, 255.0);
        }
        frames.push(Frame::new(h, w, px)?);

        let base = if looks[seg].pattern.is_abnormal() { 1.0 } else { 0.0 };
        let s = base + rng.uniform_range(-spec.score_noise, spec.score_noise);
        scores.push(s.clamp(0.0, 1.0));
    }

    let mut gt = vec![false; spec.frame_count];
    for &b in &spec.boundaries {
        let lo = b.saturating_sub(half);
        let hi = (b + half).min(spec.frame_count - 1);
        gt[lo..=hi].iter_mut().for_each(|g| *g = true);
    }
    for (t, g) in gt.iter_mut().enumerate() {
        if looks[spec.segment_of(t)].pattern.is_abnormal() {
            *g = true;
        }
    }

    Ok(SyntheticVideo {
        video: Video::new(frames)?,
        ground_truth: SummaryMask::new(gt),
        classifier_scores: scores,
    })
}

/// Spec for video `index` of the standard synthetic corpus: a normal
/// segment, one abnormal segment of 12-18 frames, then another normal one.
pub fn corpus_spec(
    index: usize,
    frame_count: usize,
    height: usize,
    width: usize,
    noise: f64,
    master_seed: u64,
) -> SyntheticSpec {
    let mut rng = SeedRng::derived(master_seed, &[0xC0_4B05, index as u64]);
    let abnormal_len = (12 + rng.below(7)).min(frame_count / 3).max(1);
    let lo = (frame_count / 5).max(1);
    let hi = frame_count.saturating_sub(abnormal_len + frame_count / 5).max(lo + 1);
    let start = lo + rng.below(hi - lo);
    let normals = [Pattern::Uniform, Pattern::MovingBand];
    let first = normals[rng.below(2)];
    let last = normals[rng.below(2)];
    SyntheticSpec {
        frame_count,
        height,
        width,
        boundaries: vec![start, start + abnormal_len],
        patterns: vec![first, Pattern::BrightVerticalLines, last],
        noise,
        score_noise: 0.1,
        gt_window: 5,
        seed: crate::rng::derive_seed(master_seed, &[0xF4A3E, index as u64]),
    }
}
