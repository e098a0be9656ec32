//! The work behind each command-line subcommand. Every output lands under
//! the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::dataset::{
    list_videos, load_record, normalized_streams, read_mask, synth_corpus, to_train_video,
    write_record, VideoRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_report, evaluate, format_key_values, format_table, seed_summary, EvalReport};
use crate::frames::{encode_pgm, load_video};
use crate::policy::Mode;
use crate::rewards::{ssim_pipeline, SsimSignal};
use crate::rng::SeedRng;
use crate::sampling::{FrameProbabilities, InferSampler, SummaryMask};
use crate::trainer::{load_checkpoint, train, Model, TrainReport, TrainState, TrainVideo, CHECKPOINT_FILE};
use crate::vstf::{self, Tensor};

pub const TRAIN_REPORT_FILE: &str = "train_report.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const MASK_FILE: &str = "mask.vstf";
pub const PROBS_FILE: &str = "probs.vstf";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the synthetic corpus, seeded by the master seed, under `out`.
pub fn cmd_synth(cfg: &Config) -> Result<Vec<String>> {
    let spec = crate::dataset::CorpusSpec {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let corpus = synth_corpus(&spec)?;
    create_dir(&cfg.out)?;
    for record in &corpus {
        write_record(&cfg.out, record)?;
    }
    Ok(corpus.into_iter().map(|r| r.id).collect())
}

/// Loads every video of the configured dataset with the configured streams.
pub fn load_dataset(cfg: &Config, encoders: &[String]) -> Result<Vec<VideoRecord>> {
    let root = cfg.data_dir()?;
    list_videos(root)?
        .iter()
        .map(|id| load_record(root, id, encoders, cfg.feature_width))
        .collect()
}

fn training_set(cfg: &Config, records: &[VideoRecord]) -> Result<Vec<TrainVideo>> {
    records
        .iter()
        .map(|r| to_train_video(r, cfg.slope_window))
        .collect()
}

fn dataset_width(records: &[VideoRecord]) -> Result<usize> {
    records
        .first()
        .and_then(|r| r.streams.first())
        .map(|s| s.width())
        .ok_or_else(|| Error::Format("dataset has no feature streams".into()))
}

fn report_text(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tmean_reward\tmean_reg\tmean_loss\n");
    for e in &report.epochs {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, e.mean_reward, e.mean_reg, e.mean_loss);
    }
    out
}

/// Trains on the configured dataset. With `resume`, continues from the
/// checkpoint already in the output directory.
pub fn cmd_train(cfg: &Config, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let train_cfg = cfg.train_config()?;
    let records = load_dataset(cfg, &cfg.encoders)?;
    let data = training_set(cfg, &records)?;
    let spec = cfg.model_spec(dataset_width(&records)?);
    create_dir(&cfg.out)?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let mut state = if resume && ckpt.exists() {
        let state = load_checkpoint(&ckpt, Some(&spec))?;
        if state.baselines.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tracks {} videos, dataset has {}",
                state.baselines.len(),
                data.len()
            )));
        }
        state
    } else {
        TrainState::init(spec, &train_cfg, data.len())?
    };
    let report = train(&data, &train_cfg, &mut state, Some(&cfg.out))?;
    write_text(&cfg.out.join(CONFIG_ECHO_FILE), &cfg.to_text())?;
    write_text(&cfg.out.join(TRAIN_REPORT_FILE), &report_text(&report))?;
    Ok(report)
}

/// Inference-mode probabilities and the summary chosen by `sampler`.
pub fn summarize_record(model: &Model, record: &VideoRecord, sampler: InferSampler) -> Result<(FrameProbabilities, SummaryMask)> {
    let streams = normalized_streams(record);
    let refs: Vec<_> = streams.iter().collect();
    let out = model
        .forward(&refs, Mode::Infer, &mut SeedRng::new(0))
        .map_err(|e| e.in_video(&record.id))?;
    let mask = sampler.select(&out.probs);
    Ok((out.probs, mask))
}

/// Per video: `<out>/<id>/mask.vstf`, `probs.vstf`, `probs.csv` and the
/// selected frames as PGM files under `summary/`.
pub fn cmd_summarize(cfg: &Config, checkpoint: &Path, videos: &[String]) -> Result<Vec<(String, SummaryMask)>> {
    cfg.validate()?;
    let root = cfg.data_dir()?;
    let ids = if videos.is_empty() {
        list_videos(root)?
    } else {
        videos.to_vec()
    };
    let mut state: Option<TrainState> = None;
    let mut results = Vec::new();
    for id in &ids {
        let record = load_record(root, id, &cfg.encoders, cfg.feature_width)?;
        if state.is_none() {
            let spec = cfg.model_spec(dataset_width(std::slice::from_ref(&record))?);
            state = Some(load_checkpoint(checkpoint, Some(&spec))?);
        }
        let model = &state.as_ref().expect("loaded above").model;
        let (probs, mask) = summarize_record(model, &record, cfg.infer_sampler())?;
        let dir = cfg.out.join(id);
        let frame_dir = dir.join("summary");
        create_dir(&frame_dir)?;
        vstf::write_tensor(dir.join(MASK_FILE), &Tensor::from_mask(mask.as_slice()))?;
        vstf::write_tensor(dir.join(PROBS_FILE), &Tensor::from_values(probs.as_slice()))?;
        let mut csv = String::from("frame,probability,selected\n");
        for (t, (p, s)) in probs.as_slice().iter().zip(mask.as_slice()).enumerate() {
            let _ = writeln!(csv, "{t},{p},{}", u8::from(*s));
        }
        write_text(&dir.join("probs.csv"), &csv)?;
        for t in mask.indices() {
            let path = frame_dir.join(format!("{t:05}.pgm"));
            fs::write(&path, encode_pgm(&record.video.frames()[t])).map_err(|e| Error::io(&path, e))?;
        }
        results.push((id.clone(), mask));
    }
    Ok(results)
}

/// Scores `<masks>/<id>/mask.vstf` against every video's ground truth and
/// writes a table and a key-value report. Returns per-video reports and
/// their mean.
pub fn cmd_evaluate(cfg: &Config, masks: &Path) -> Result<(Vec<(String, EvalReport)>, EvalReport)> {
    cfg.validate()?;
    let root = cfg.data_dir()?;
    let eval_stream = cfg
        .eval_features
        .clone()
        .unwrap_or_else(|| cfg.encoders[0].clone());
    let mut rows = Vec::new();
    for id in list_videos(root)? {
        let record = load_record(root, &id, std::slice::from_ref(&eval_stream), cfg.feature_width)?;
        let Some(gt) = &record.gt else {
            log::warn!("{id}: no ground truth, skipped");
            continue;
        };
        let mask = read_mask(masks.join(&id).join(MASK_FILE)).map_err(|e| e.in_video(&id))?;
        let report = evaluate(&mask, gt, Some(&record.streams[0].features), cfg.threshold, cfg.reducer)
            .map_err(|e| e.in_video(&id))?;
        rows.push((id, report));
    }
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = corpus_report(&reports)?;
    write_reports(&cfg.out, &rows, &mean)?;
    Ok((rows, mean))
}

fn write_reports(out: &Path, rows: &[(String, EvalReport)], mean: &EvalReport) -> Result<()> {
    create_dir(out)?;
    let mut all = rows.to_vec();
    all.push(("mean".to_string(), *mean));
    write_text(&out.join(REPORT_TABLE_FILE), &format_table(&all))?;
    write_text(&out.join(REPORT_KV_FILE), &format_key_values(&all))
}

/// SSIM analysis of one frame directory: `ssim.csv` (one row per frame),
/// `ssim_matrix.vstf` and `keyframes.vstf`.
pub fn cmd_ssim(cfg: &Config, frames: &Path) -> Result<SsimSignal> {
    if cfg.slope_window == 0 {
        return Err(Error::Config("slope_window must be at least 1".into()));
    }
    let video = load_video(frames)?;
    let signal = ssim_pipeline(&video, cfg.slope_window);
    create_dir(&cfg.out)?;
    let mut csv = String::from("frame,ssim_sig,slope,keyframe\n");
    for t in 0..signal.sig.len() {
        let _ = writeln!(
            csv,
            "{t},{},{},{}",
            signal.sig[t],
            signal.slope[t],
            u8::from(signal.keyframe_mask.as_slice()[t])
        );
    }
    write_text(&cfg.out.join("ssim.csv"), &csv)?;
    vstf::write_tensor(cfg.out.join("ssim_matrix.vstf"), &Tensor::from_matrix(&signal.matrix))?;
    vstf::write_tensor(
        cfg.out.join("keyframes.vstf"),
        &Tensor::from_mask(signal.keyframe_mask.as_slice()),
    )?;
    Ok(signal)
}

/// One ablation cell of the grid.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub label: String,
    pub runs: Vec<EvalReport>,
}

/// Trains and evaluates every combination of encoder set, decoder, training
/// sampler and reward preset over `grid_seeds` seeds, then writes
/// `grid.txt` (mean ± SD per cell) and `grid.kv`.
pub fn cmd_grid(cfg: &Config) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    if cfg.grid_seeds == 0 {
        return Err(Error::Config("grid_seeds must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for encoders in &cfg.grid_encoders {
        let records = load_dataset(cfg, encoders)?;
        if records.iter().any(|r| r.gt.is_none()) {
            return Err(Error::Format("grid evaluation needs ground truth for every video".into()));
        }
        let data = training_set(cfg, &records)?;
        let width = dataset_width(&records)?;
        for &decoder in &cfg.grid_decoders {
            for sampler in &cfg.grid_samplers {
                for reward in &cfg.grid_rewards {
                    let mut cell = cfg.clone();
                    cell.decoder = decoder;
                    cell.train_sampler = sampler.clone();
                    cell.reward = reward.clone();
                    let label = format!("{}|{decoder}|{sampler}|{reward}", encoders.join("+"));
                    let mut runs = Vec::new();
                    for seed in 0..cfg.grid_seeds as u64 {
                        cell.seed = cfg.seed + seed;
                        let train_cfg = cell.train_config()?;
                        let mut state = TrainState::init(cell.model_spec(width), &train_cfg, data.len())?;
                        train(&data, &train_cfg, &mut state, None)?;
                        let mut reports = Vec::new();
                        for record in &records {
                            let (_, mask) = summarize_record(&state.model, record, cell.infer_sampler())?;
                            let gt = record.gt.as_ref().expect("checked above");
                            reports.push(evaluate(&mask, gt, None, cfg.threshold, cfg.reducer)?);
                        }
                        runs.push(corpus_report(&reports)?);
                    }
                    log::info!("grid cell {label} done");
                    rows.push(GridRow { label, runs });
                }
            }
        }
    }
    write_grid(&cfg.out, &rows)?;
    Ok(rows)
}

fn write_grid(out: &Path, rows: &[GridRow]) -> Result<()> {
    create_dir(out)?;
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
    let mut table = format!(
        "{:<label_w$}  {:>15}  {:>15}  {:>15}  {:>15}\n",
        "Cell", "Precision", "Recall", "F-Score", "Reduction"
    );
    let mut kv = String::new();
    for row in rows {
        let stats = seed_summary(&row.runs);
        let _ = write!(table, "{:<label_w$}", row.label);
        for (name, mean, sd) in &stats {
            let _ = write!(table, "  {:>15}", format!("{mean:.2} ± {sd:.2}"));
            let _ = writeln!(kv, "{}.{name}.mean = {mean:.6}", row.label);
            let _ = writeln!(kv, "{}.{name}.sd = {sd:.6}", row.label);
        }
        table.push('\n');
    }
    write_text(&out.join("grid.txt"), &table)?;
    write_text(&out.join("grid.kv"), &kv)
}

/// Default checkpoint location for a configuration.
pub fn default_checkpoint(cfg: &Config) -> PathBuf {
    cfg.out.join(CHECKPOINT_FILE)
}
