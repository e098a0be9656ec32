//! Summary quality metrics.
//!
//! Temporal scores use a swapped convention: precision divides the overlap
//! by the ground-truth size and recall divides it by the summary size. The feature-level scores compare every
//! frame against the ground-truth keyframes by cosine similarity in a
//! reduced space and use the conventional `tp / (tp + fp)` and
//! `tp / (tp + fn)`. Everything is reported in percent.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Matrix};
use crate::sampling::SummaryMask;

pub const DEFAULT_THRESHOLD: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn check_lengths(mask: &SummaryMask, gt: &SummaryMask) -> Result<()> {
    if mask.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "summary covers {} frames, ground truth {}",
            mask.len(),
            gt.len()
        )));
    }
    if gt.count() == 0 {
        return Err(Error::UndefinedMetric("ground truth selects no frames".into()));
    }
    Ok(())
}

/// `P = |S ∩ GT| / |GT|`, `R = |S ∩ GT| / |S|` (0 for an empty summary).
pub fn temporal_prf(mask: &SummaryMask, gt: &SummaryMask) -> Result<Prf> {
    check_lengths(mask, gt)?;
    let overlap = mask
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .filter(|(a, b)| **a && **b)
        .count();
    Ok(Prf::new(percent(overlap, gt.count()), percent(overlap, mask.count())))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reducer {
    /// Projection onto the two leading principal components.
    #[default]
    Pca2,
    /// Full-dimension cosine.
    None,
}

impl FromStr for Reducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca2" => Ok(Reducer::Pca2),
            "none" => Ok(Reducer::None),
            other => Err(Error::Config(format!("unknown reducer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reducer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reducer::Pca2 => "pca2",
            Reducer::None => "none",
        })
    }
}

/// Projects centred rows onto the two leading principal axes. Each axis is
/// signed so that its largest-magnitude loading is positive.
pub fn pca2(features: &Matrix) -> Result<Matrix> {
    let (n, f) = features.shape();
    if n < 2 {
        return Err(Error::Dimension(format!("cannot reduce {n} frame(s) to two components")));
    }
    let x = DMatrix::from_row_slice(n, f, features.as_slice());
    let mean = x.row_mean();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Matrix::zeros(n, 2);
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut axis = eig.eigenvectors.column(k).into_owned();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.neg_mut();
        }
        let proj = &centred * axis;
        for r in 0..n {
            out[(r, c)] = proj[r];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMetrics {
    pub prf: Prf,
    pub threshold: f64,
    pub reducer: Reducer,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Best cosine similarity of every frame to any ground-truth frame.
pub fn max_cosine_to_gt(reduced: &Matrix, gt: &SummaryMask) -> Vec<f64> {
    let keys = gt.indices();
    reduced
        .row_iter()
        .map(|row| {
            keys.iter()
                .map(|&g| cosine_similarity(row, reduced.row(g)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Feature-similarity precision and recall at threshold `th`.
pub fn feature_prf(
    features: &Matrix,
    mask: &SummaryMask,
    gt: &SummaryMask,
    th: f64,
    reducer: Reducer,
) -> Result<FeatureMetrics> {
    check_lengths(mask, gt)?;
    if features.rows() != mask.len() {
        return Err(Error::Alignment(format!(
            "{} feature rows for a {}-frame summary",
            features.rows(),
            mask.len()
        )));
    }
    if features.rows() < 2 {
        return Err(Error::Dimension("feature metrics need at least two frames".into()));
    }
    let reduced = match reducer {
        Reducer::Pca2 => pca2(features)?,
        Reducer::None => features.clone(),
    };
    let sims = max_cosine_to_gt(&reduced, gt);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&selected, &s) in mask.as_slice().iter().zip(&sims) {
        match (selected, s > th) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(FeatureMetrics {
        prf: Prf::new(percent(tp, tp + fp), percent(tp, tp + fn_)),
        threshold: th,
        reducer,
        tp,
        fp,
        fn_,
    })
}

/// `100 (1 − |S| / N)`.
pub fn reduction_factor(mask: &SummaryMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::UndefinedMetric("reduction factor of an empty video".into()));
    }
    Ok(100.0 * (1.0 - mask.fraction()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub temporal: Prf,
    pub feature: Option<FeatureMetrics>,
    pub reduction: f64,
}

/// Temporal metrics and reduction, plus feature metrics when features are
/// supplied.
pub fn evaluate(
    mask: &SummaryMask,
    gt: &SummaryMask,
    features: Option<&Matrix>,
    th: f64,
    reducer: Reducer,
) -> Result<EvalReport> {
    Ok(EvalReport {
        temporal: temporal_prf(mask, gt)?,
        feature: features
            .map(|x| feature_prf(x, mask, gt, th, reducer))
            .transpose()?,
        reduction: reduction_factor(mask)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn mean_prf<'a>(items: impl Iterator<Item = &'a Prf> + Clone) -> Prf {
    // averaged component-wise; F1 is the mean of per-item F1 values
    Prf {
        precision: mean(items.clone().map(|p| p.precision)),
        recall: mean(items.clone().map(|p| p.recall)),
        f1: mean(items.map(|p| p.f1)),
    }
}

/// Unweighted mean of every metric. Feature metrics are averaged only when
/// every report has them; their counts are summed.
pub fn corpus_report(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric("no reports to average".into()));
    }
    let feature = reports
        .iter()
        .map(|r| r.feature)
        .collect::<Option<Vec<_>>>()
        .map(|fs| FeatureMetrics {
            prf: mean_prf(fs.iter().map(|f| &f.prf)),
            threshold: fs[0].threshold,
            reducer: fs[0].reducer,
            tp: fs.iter().map(|f| f.tp).sum(),
            fp: fs.iter().map(|f| f.fp).sum(),
            fn_: fs.iter().map(|f| f.fn_).sum(),
        });
    Ok(EvalReport {
        temporal: mean_prf(reports.iter().map(|r| &r.temporal)),
        feature,
        reduction: mean(reports.iter().map(|r| r.reduction)),
    })
}

/// Sample mean and standard deviation (n − 1 denominator, 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

/// Metric names and values in report order.
pub fn metric_values(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("precision", r.temporal.precision),
        ("recall", r.temporal.recall),
        ("f_score", r.temporal.f1),
        ("reduction", r.reduction),
    ];
    if let Some(f) = &r.feature {
        out.extend([
            ("feature_precision", f.prf.precision),
            ("feature_recall", f.prf.recall),
            ("feature_f_score", f.prf.f1),
        ]);
    }
    out
}

/// Mean and SD of every metric across runs (e.g. model seeds).
pub fn seed_summary(runs: &[EvalReport]) -> Vec<(&'static str, f64, f64)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let names: Vec<&'static str> = metric_values(first).iter().map(|(n, _)| *n).collect();
    names
        .iter()
        .enumerate()
        .filter_map(|(i, &name)| {
            let vals: Option<Vec<f64>> =
                runs.iter().map(|r| metric_values(r).get(i).map(|(_, v)| *v)).collect();
            vals.map(|v| {
                let (m, sd) = mean_sd(&v);
                (name, m, sd)
            })
        })
        .collect()
}

/// Fixed-width text table, one row per labelled report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let with_feature = rows.iter().all(|(_, r)| r.feature.is_some()) && !rows.is_empty();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = write!(
        out,
        "{:<label_w$}  {:>9}  {:>9}  {:>9}  {:>9}",
        "Video", "Precision", "Recall", "F-Score", "Reduction"
    );
    if with_feature {
        let _ = write!(out, "  {:>9}  {:>9}  {:>9}", "Feat-P", "Feat-R", "Feat-F");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(
            out,
            "{:<label_w$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9.2}",
            label, r.temporal.precision, r.temporal.recall, r.temporal.f1, r.reduction
        );
        if let (true, Some(f)) = (with_feature, &r.feature) {
            let _ = write!(out, "  {:>9.2}  {:>9.2}  {:>9.2}", f.prf.precision, f.prf.recall, f.prf.f1);
        }
        out.push('\n');
    }
    out
}

/// `label.metric = value` lines.
pub fn format_key_values(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    for (label, r) in rows {
        for (name, v) in metric_values(r) {
            let _ = writeln!(out, "{label}.{name} = {v:.6}");
        }
        if let Some(f) = &r.feature {
            let _ = writeln!(out, "{label}.threshold = {}", f.threshold);
            let _ = writeln!(out, "{label}.reducer = {}", f.reducer);
            let _ = writeln!(out, "{label}.tp = {}", f.tp);
            let _ = writeln!(out, "{label}.fp = {}", f.fp);
            let _ = writeln!(out, "{label}.fn = {}", f.fn_);
        }
    }
    out
}
