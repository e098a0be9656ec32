//! Structural similarity and the SSIM-matrix transition signal.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with half-sample
//! symmetric padding at the borders and the usual constants for 8-bit
//! data. The video-level pipeline builds the pairwise SSIM matrix, collapses
//! it to a per-frame signal by row sums, fits sliding-window least-squares
//! slopes, and thresholds their magnitude at the mean to mark transitions.

use crate::error::{Error, Result};
use crate::frames::{Frame, Video};
use crate::numerics::Matrix;
use crate::sampling::SummaryMask;

pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const DEFAULT_SLOPE_WINDOW: usize = 10;

fn gaussian_taps() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut taps = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - WINDOW_RADIUS as f64;
        *t = (-x * x / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with reflective borders.
fn blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = WINDOW_RADIUS as isize;
    let col_idx: Vec<Vec<usize>> = (0..w)
        .map(|c| (-r..=r).map(|d| reflect(c as isize + d, w)).collect())
        .collect();
    let row_idx: Vec<Vec<usize>> = (0..h)
        .map(|rr| (-r..=r).map(|d| reflect(rr as isize + d, h)).collect())
        .collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = col_idx[x].iter().zip(&taps).map(|(&c, t)| row[c] * t).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, &src_row) in row_idx[y].iter().enumerate() {
            let t = taps[k];
            let s = &tmp[src_row * w..(src_row + 1) * w];
            for (o, v) in out[y * w..(y + 1) * w].iter_mut().zip(s) {
                *o += t * v;
            }
        }
    }
    out
}

/// Per-frame local statistics reused across every pair the frame is in.
struct FrameStats {
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

impl FrameStats {
    fn new(frame: &Frame) -> Self {
        let (h, w) = (frame.height(), frame.width());
        let sq: Vec<f64> = frame.pixels().iter().map(|p| p * p).collect();
        Self {
            mean: blur(frame.pixels(), h, w),
            mean_sq: blur(&sq, h, w),
        }
    }
}

fn ssim_with_stats(a: &Frame, sa: &FrameStats, b: &Frame, sb: &FrameStats) -> f64 {
    let (h, w) = (a.height(), a.width());
    let prod: Vec<f64> = a.pixels().iter().zip(b.pixels()).map(|(x, y)| x * y).collect();
    let cross = blur(&prod, h, w);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (sa.mean[i], sb.mean[i]);
        let va = sa.mean_sq[i] - ma * ma;
        let vb = sb.mean_sq[i] - mb * mb;
        let cov = cross[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / (h * w) as f64
}

/// Mean local SSIM between two equally sized frames.
pub fn compute_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Dimension(format!(
            "ssim of {}x{} and {}x{} frames",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(ssim_with_stats(a, &FrameStats::new(a), b, &FrameStats::new(b)))
}

/// The pairwise SSIM matrix and everything derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimSignal {
    pub matrix: Matrix,
    /// Row sums of `matrix`.
    pub sig: Vec<f64>,
    /// Window slopes aligned to window start, tail padded with the last slope.
    pub slope: Vec<f64>,
    pub keyframe_mask: SummaryMask,
}

/// Pairwise SSIM matrix using symmetry: only the upper triangle is computed.
pub fn ssim_matrix(video: &Video) -> Matrix {
    let frames = video.frames();
    let n = frames.len();
    let stats: Vec<FrameStats> = frames.iter().map(FrameStats::new).collect();
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let s = ssim_with_stats(&frames[i], &stats[i], &frames[j], &stats[j]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    m
}

/// Least-squares slope of `y` against `0, 1, ..., len - 1`.
pub fn least_squares_slope(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (v - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Sliding-window slopes padded to `sig.len()`, plus the number of real
/// windows before padding.
fn window_slopes(sig: &[f64], window: usize) -> (Vec<f64>, usize) {
    let n = sig.len();
    if n < window.max(2) {
        return (vec![least_squares_slope(sig); n], 1);
    }
    let mut slopes: Vec<f64> = sig.windows(window).map(least_squares_slope).collect();
    let real = slopes.len();
    let last = slopes[real - 1];
    slopes.resize(n, last);
    (slopes, real)
}

/// Builds the SSIM matrix, its row-sum signal, slopes and keyframe mask.
pub fn ssim_pipeline(video: &Video, slope_window: usize) -> SsimSignal {
    signal_from_matrix(ssim_matrix(video), slope_window)
}

/// Derives the signal, slopes and keyframe mask from a precomputed matrix.
pub fn signal_from_matrix(matrix: Matrix, slope_window: usize) -> SsimSignal {
    let sig: Vec<f64> = matrix.row_iter().map(|r| r.iter().sum()).collect();
    if sig.len() < slope_window {
        log::warn!(
            "{} frames is shorter than the {slope_window}-frame slope window; fitting one slope",
            sig.len()
        );
    }
    let (slope, real) = window_slopes(&sig, slope_window);
    let threshold = slope[..real].iter().map(|s| s.abs()).sum::<f64>() / real as f64;
    let keyframe_mask = SummaryMask::new(slope.iter().map(|s| s.abs() > threshold).collect());
    SsimSignal {
        matrix,
        sig,
        slope,
        keyframe_mask,
    }
}

/// Which end of the SSIM signal is rewarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsimOrientation {
    /// Frames with low summed similarity (transitions) score high.
    #[default]
    Dissimilarity,
    /// Frames with high summed similarity score high.
    Literal,
}

/// Signal mapped to `[0, 1]` by min-max scaling in the chosen orientation.
/// A flat signal maps to all zeros.
pub fn normalized_signal(signal: &SsimSignal, orientation: SsimOrientation) -> Vec<f64> {
    let max = signal.sig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = signal.sig.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    signal
        .sig
        .iter()
        .map(|&s| {
            if range <= 0.0 {
                0.0
            } else {
                match orientation {
                    SsimOrientation::Dissimilarity => (max - s) / range,
                    SsimOrientation::Literal => (s - min) / range,
                }
            }
        })
        .collect()
}

/// Mean normalised signal over the selected frames; 0 for an empty mask.
pub fn reward_ssim(signal: &SsimSignal, mask: &SummaryMask, orientation: SsimOrientation) -> f64 {
    reward_from_normalized(&normalized_signal(signal, orientation), mask)
}

pub(crate) fn reward_from_normalized(norm: &[f64], mask: &SummaryMask) -> f64 {
    let selected = mask.indices();
    if selected.is_empty() {
        return 0.0;
    }
    selected.iter().map(|&i| norm[i]).sum::<f64>() / selected.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{generate_synthetic, SyntheticSpec};
    use crate::rng::SeedRng;

    fn random_frame(h: usize, w: usize, rng: &mut SeedRng) -> Frame {
        Frame::new(h, w, (0..h * w).map(|_| rng.uniform_range(0.0, 255.0).round()).collect()).unwrap()
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 8), 0);
        assert_eq!(reflect(-3, 8), 2);
        assert_eq!(reflect(8, 8), 7);
        assert_eq!(reflect(10, 8), 5);
        assert_eq!(reflect(3, 8), 3);
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = SeedRng::new(1);
        let a = random_frame(16, 12, &mut rng);
        assert!((compute_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn black_versus_white_matches_closed_form() {
        let a = Frame::filled(16, 16, 0.0).unwrap();
        let b = Frame::filled(16, 16, 255.0).unwrap();
        // means 0 and 255, no variance: (C1 * C2) / ((255^2 + C1) * C2)
        let expected = (SSIM_C1 * SSIM_C2) / ((255.0 * 255.0 + SSIM_C1) * SSIM_C2);
        let got = compute_ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = SeedRng::new(2);
        for _ in 0..5 {
            let a = random_frame(10, 14, &mut rng);
            let b = random_frame(10, 14, &mut rng);
            let ab = compute_ssim(&a, &b).unwrap();
            let ba = compute_ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let a = Frame::filled(8, 8, 0.0).unwrap();
        let b = Frame::filled(8, 9, 0.0).unwrap();
        assert!(compute_ssim(&a, &b).is_err());
    }

    #[test]
    fn identical_frames_give_flat_signal() {
        let mut rng = SeedRng::new(3);
        let f = random_frame(16, 16, &mut rng);
        let v = Video::new(vec![f; 25]).unwrap();
        let s = ssim_pipeline(&v, 10);
        assert!(s.sig.iter().all(|&x| x == 25.0));
        assert!(s.slope.iter().all(|&x| x == 0.0));
        assert_eq!(s.keyframe_mask.count(), 0);
        assert_eq!(s.keyframe_mask.len(), 25);
    }

    #[test]
    fn signal_matches_full_matrix_oracle() {
        let spec = SyntheticSpec {
            frame_count: 14,
            height: 16,
            width: 16,
            boundaries: vec![7],
            ..SyntheticSpec::default()
        };
        let v = generate_synthetic(&spec).unwrap().video;
        let s = ssim_pipeline(&v, 10);
        for i in 0..14 {
            let mut row = 0.0;
            for j in 0..14 {
                let direct = compute_ssim(&v.frames()[i], &v.frames()[j]).unwrap();
                assert!((direct - s.matrix[(i, j)]).abs() < 1e-9);
                row += direct;
            }
            assert!((row - s.sig[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn boundary_shows_in_signal_and_mask() {
        let spec = SyntheticSpec {
            frame_count: 100,
            height: 32,
            width: 32,
            ..SyntheticSpec::default()
        };
        let v = generate_synthetic(&spec).unwrap().video;
        let s = ssim_pipeline(&v, 10);
        let argmin = (0..100).min_by(|&a, &b| s.sig[a].total_cmp(&s.sig[b])).unwrap();
        assert!((45..=55).contains(&argmin), "minimum at {argmin}");
        let steepest = (0..99)
            .max_by(|&a, &b| (s.sig[a] - s.sig[a + 1]).total_cmp(&(s.sig[b] - s.sig[b + 1])))
            .unwrap();
        assert!((45..=52).contains(&steepest), "steepest drop after {steepest}");
        let hits = s.keyframe_mask.indices();
        assert!(hits.iter().any(|&i| (40..=60).contains(&i)), "mask {hits:?}");
        for i in 0..100 {
            assert!((s.matrix[(i, i)] - 1.0).abs() < 1e-6);
            for j in 0..100 {
                assert!((s.matrix[(i, j)] - s.matrix[(j, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn short_video_uses_one_slope() {
        let mut rng = SeedRng::new(4);
        let v = Video::new((0..4).map(|_| random_frame(8, 8, &mut rng)).collect()).unwrap();
        let s = ssim_pipeline(&v, 10);
        assert_eq!(s.slope.len(), 4);
        assert!(s.slope.iter().all(|&x| x == s.slope[0]));
    }

    #[test]
    fn slope_of_a_line() {
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        assert!((least_squares_slope(&y) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn reward_orientation_endpoints() {
        let sig = vec![5.0, 3.0, 4.0, 1.0, 5.0];
        let signal = SsimSignal {
            matrix: Matrix::identity(5),
            slope: vec![0.0; 5],
            keyframe_mask: SummaryMask::empty(5),
            sig,
        };
        let only_min = SummaryMask::from_indices(5, [3]);
        assert_eq!(reward_ssim(&signal, &only_min, SsimOrientation::Dissimilarity), 1.0);
        assert_eq!(reward_ssim(&signal, &only_min, SsimOrientation::Literal), 0.0);
        assert_eq!(reward_ssim(&signal, &SummaryMask::empty(5), SsimOrientation::Dissimilarity), 0.0);
        let two = SummaryMask::from_indices(5, [1, 2]);
        let expected = ((5.0 - 3.0) / 4.0 + (5.0 - 4.0) / 4.0) / 2.0;
        assert!((reward_ssim(&signal, &two, SsimOrientation::Dissimilarity) - expected).abs() < 1e-15);
    }
}
