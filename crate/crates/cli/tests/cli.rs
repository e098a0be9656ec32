use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vsumm::config::Config;
use vsumm::frames::{generate_synthetic, save_video, Frame, FrameFormat, SyntheticSpec, Video};
use vsumm::trainer::{load_checkpoint, TrainConfig, TrainState};
use vsumm::vstf;

fn vsumm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsumm"))
        .current_dir(dir)
        .env_remove("VSUMM_CONFIG")
        .args(args)
        .args(["--quiet"])
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vsumm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--set", "synth_videos=2",
    "--set", "synth_frames=30",
    "--set", "synth_height=16",
    "--set", "synth_width=16",
    "--set", "synth_feature_width=16",
];

fn synth(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

const TRAIN_CFG: &str = "data = data\nout = run\nepochs = 2\nlstm_hidden = 8\nfusion_heads = 2\n";

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    assert!(!ta.is_empty());
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    let differing: Vec<&PathBuf> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k).collect();
    assert!(differing.is_empty(), "files differ: {differing:?}");
}

#[test]
fn synth_writes_the_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    for id in ["video_000", "video_001"] {
        let v = dir.path().join("data").join(id);
        assert!(v.join("gt.vstf").is_file());
        assert!(v.join("scores.vstf").is_file());
        for enc in ["downsample", "histogram", "segmentation"] {
            assert!(v.join("features").join(format!("{enc}.vstf")).is_file());
        }
        assert_eq!(fs::read_dir(v.join("frames")).unwrap().count(), 30);
    }
}

#[test]
fn default_synth_config_has_ten_videos() {
    assert_eq!(Config::default().synth.videos, 10);
    assert_eq!(Config::default().synth.frame_count, 100);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", &["--set", "seed=5"]);
    synth(dir.path(), "b", &["--set", "seed=5"]);
    synth(dir.path(), "c", &["--set", "seed=6"]);
    assert_same_tree(&dir.path().join("a"), &dir.path().join("b"));
    assert!(tree(&dir.path().join("a")) != tree(&dir.path().join("c")));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg_path = write_config(dir.path(), &TRAIN_CFG.replace("epochs = 2", "epochs = 0"));
    ok(dir.path(), &["train", "--config", cfg_path.to_str().unwrap()]);
    let cfg = Config::load(&cfg_path).unwrap();
    let spec = cfg.model_spec(16);
    let saved = load_checkpoint(dir.path().join("run/checkpoint.vsck"), Some(&spec)).unwrap();
    let fresh = TrainState::init(spec, &TrainConfig::default(), 2).unwrap();
    assert_eq!(saved.model, fresh.model);
    assert_eq!(saved.epochs_done, 0);
}

#[test]
fn training_report_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = write_config(dir.path(), &TRAIN_CFG.replace("epochs = 2", "epochs = 30"));
    ok(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    let report = fs::read_to_string(dir.path().join("run/train_report.tsv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows[29].starts_with("30\t"));
}

#[test]
fn identical_invocations_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = write_config(dir.path(), TRAIN_CFG);
    let c = cfg.to_str().unwrap();
    for kept in ["one", "two"] {
        ok(dir.path(), &["train", "--config", c]);
        ok(dir.path(), &["summarize", "--config", c]);
        fs::rename(dir.path().join("run"), dir.path().join(kept)).unwrap();
    }
    assert_same_tree(&dir.path().join("one"), &dir.path().join("two"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = write_config(dir.path(), &TRAIN_CFG.replace("epochs = 2", "epochs = 3"));
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["train", "--config", c, "--out", "full"]);
    ok(dir.path(), &["train", "--config", c, "--out", "split", "--set", "epochs=1"]);
    ok(dir.path(), &["train", "--config", c, "--out", "split", "--resume"]);
    assert_eq!(
        fs::read(dir.path().join("full/checkpoint.vsck")).unwrap(),
        fs::read(dir.path().join("split/checkpoint.vsck")).unwrap()
    );
}

#[test]
fn t25_dumps_a_quarter_of_the_frames() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth", "--out", "data", "--set", "synth_videos=1", "--set", "synth_frames=100",
            "--set", "synth_height=16", "--set", "synth_width=16", "--set", "synth_feature_width=16",
        ],
    );
    let cfg = write_config(dir.path(), &format!("{TRAIN_CFG}infer_sampler = t25\n"));
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["train", "--config", c]);
    let stdout = ok(dir.path(), &["summarize", "--config", c, "--video", "video_000"]);
    assert!(stdout.contains("25 of 100"));
    let dumped = fs::read_dir(dir.path().join("run/video_000/summary")).unwrap().count();
    assert_eq!(dumped, 25);
    let first = fs::read(dir.path().join("run/video_000/mask.vstf")).unwrap();
    ok(dir.path(), &["summarize", "--config", c, "--video", "video_000"]);
    assert_eq!(first, fs::read(dir.path().join("run/video_000/mask.vstf")).unwrap());
}

#[test]
fn summaries_round_trip_through_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = write_config(dir.path(), TRAIN_CFG);
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["train", "--config", c]);
    ok(dir.path(), &["summarize", "--config", c]);
    let table = ok(dir.path(), &["evaluate", "--config", c, "--masks", "run", "--out", "eval"]);
    assert!(table.contains("video_000") && table.contains("mean"));
    assert!(dir.path().join("eval/report.kv").is_file());
}

fn parse_kv(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k.to_string(), v)))
        .collect()
}

#[test]
fn perfect_masks_score_100_and_reports_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    for id in ["video_000", "video_001"] {
        let m = dir.path().join("masks").join(id);
        fs::create_dir_all(&m).unwrap();
        fs::copy(dir.path().join("data").join(id).join("gt.vstf"), m.join("mask.vstf")).unwrap();
    }
    ok(dir.path(), &["evaluate", "--data", "data", "--masks", "masks", "--out", "eval"]);
    let table = fs::read_to_string(dir.path().join("eval/report.txt")).unwrap();
    let kv = parse_kv(&fs::read_to_string(dir.path().join("eval/report.kv")).unwrap());
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(&header[1..5], &["Precision", "Recall", "F-Score", "Reduction"]);
    let keys = ["precision", "recall", "f_score", "reduction", "feature_precision", "feature_recall", "feature_f_score"];
    for line in table.lines().skip(1) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        let label = cells[0];
        for (i, key) in keys.iter().enumerate() {
            let shown: f64 = cells[i + 1].parse().unwrap();
            let exact = kv[&format!("{label}.{key}")];
            assert!((shown - exact).abs() <= 0.005 + 1e-9, "{label}.{key}: {shown} vs {exact}");
        }
        for key in ["precision", "recall", "f_score"] {
            assert_eq!(kv[&format!("{label}.{key}")], 100.0);
        }
    }
}

#[test]
fn ssim_on_identical_frames_has_no_keyframes() {
    let dir = tempfile::tempdir().unwrap();
    let frame = Frame::filled(16, 16, 90.0).unwrap();
    save_video(&Video::new(vec![frame; 12]).unwrap(), dir.path().join("flat"), FrameFormat::Pgm).unwrap();
    ok(dir.path(), &["ssim-reward", "--frames", "flat", "--out", "ssim"]);
    let csv = fs::read_to_string(dir.path().join("ssim/ssim.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12 + 1);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
    let mask = vstf::read_tensor(dir.path().join("ssim/keyframes.vstf")).unwrap().into_mask().unwrap();
    assert!(mask.iter().all(|m| !m));
}

#[test]
fn ssim_keyframes_hit_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let synth = generate_synthetic(&SyntheticSpec::default()).unwrap();
    save_video(&synth.video, dir.path().join("frames"), FrameFormat::Vstf).unwrap();
    ok(dir.path(), &["ssim-reward", "--frames", "frames", "--out", "ssim"]);
    let csv = fs::read_to_string(dir.path().join("ssim/ssim.csv")).unwrap();
    assert_eq!(csv.lines().count(), 100 + 1);
    let mask = vstf::read_tensor(dir.path().join("ssim/keyframes.vstf")).unwrap().into_mask().unwrap();
    assert!(mask[40..=60].iter().any(|&m| m));
}

#[test]
fn grid_writes_mean_and_sd_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = write_config(
        dir.path(),
        &format!(
            "{TRAIN_CFG}epochs = 1\ngrid_encoders = downsample,histogram;segmentation\n\
             grid_decoders = lstm\ngrid_samplers = sbs\ngrid_rewards = full,clsf_ssim\ngrid_seeds = 2\n"
        ),
    );
    ok(dir.path(), &["grid", "--config", cfg.to_str().unwrap(), "--out", "grid"]);
    let table = fs::read_to_string(dir.path().join("grid/grid.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(table.contains("±"));
    let kv = parse_kv(&fs::read_to_string(dir.path().join("grid/grid.kv")).unwrap());
    assert!(kv.contains_key("downsample+histogram|lstm|sbs|full.precision.sd"));
}

fn assert_fails(dir: &Path, args: &[&str], code: i32) {
    let out = vsumm(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "diagnostic: {stderr}");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    assert_fails(dir.path(), &["frobnicate"], 1);
    assert_fails(dir.path(), &["train", "--set", "epochz=3"], 1);
    assert_fails(dir.path(), &["train", "--data", "missing"], 1);
    fs::write(dir.path().join("bad.cfg"), "this is not a config\n").unwrap();
    assert_fails(dir.path(), &["train", "--config", "bad.cfg"], 1);
    assert_fails(dir.path(), &["ssim-reward", "--frames", "missing"], 2);

    synth(dir.path(), "data", &[]);
    fs::write(dir.path().join("fake.vsck"), b"not a checkpoint").unwrap();
    assert_fails(dir.path(), &["summarize", "--data", "data", "--checkpoint", "fake.vsck"], 2);
    let cfg = write_config(dir.path(), TRAIN_CFG);
    ok(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_fails(
        dir.path(),
        &["summarize", "--config", cfg.to_str().unwrap(), "--set", "lstm_hidden=4"],
        2,
    );
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    write_config(dir.path(), TRAIN_CFG);
    let out = Command::new(env!("CARGO_BIN_EXE_vsumm"))
        .current_dir(dir.path())
        .env("VSUMM_CONFIG", "run.cfg")
        .args(["train", "--quiet", "--set", "epochs=1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = fs::read_to_string(dir.path().join("run/train_report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = vsumm(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "summarize", "evaluate", "ssim-reward", "grid"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
