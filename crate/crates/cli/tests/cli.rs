use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qarc_core::trace::{read_quality_csv, BandwidthTrace};
use qarc_core::vqpn::{QualityInput, VqpnConfig, VqpnModel};

fn qarc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qarc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = qarc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A config small enough for every command to finish in seconds.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        "seed = 5\nout = {:?}\nworkers = 1\n\
         [data]\ntrain_traces = 3\neval_traces = 2\ntrace_slots = 30\nseries_per_profile = 10\nseries_slots = 30\n\
         [vqpn]\nfilters = 8\nhidden = 8\nmax_epochs = 2\nlr = 1e-3\n\
         [vqrl]\nfilters = 8\nmerge = 16\niterations = 12\nforecast = \"persistence\"\n{extra}",
        dir.join("out")
    );
    fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path).lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else if !p.to_string_lossy().ends_with(".toml") {
            out.push((p.clone(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_counted_and_parseable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    let out = tmp.path().join("out");
    let first = tree(&out);
    ok(&["--config", cfg, "gen-data"]);
    assert_eq!(tree(&out), first);

    let count = |d: &str| fs::read_dir(out.join(d)).unwrap().count();
    assert_eq!(count("traces/train"), 3);
    assert_eq!(count("traces/eval"), 2);
    assert_eq!(count("content/eval"), 2);
    assert_eq!(count("quality"), 30);
    for entry in fs::read_dir(out.join("traces/train")).unwrap() {
        let p = entry.unwrap().path();
        let t = BandwidthTrace::parse("t", &read(&p)).unwrap();
        assert_eq!(t.slot_count(1.0), 30);
    }
    let q = read_quality_csv(fs::File::open(out.join("quality/dynamic_003.csv")).unwrap()).unwrap();
    assert_eq!(q.len(), 30);
    assert!(out.join("gen-data.config.toml").exists());
}

#[test]
fn frame_clips_are_written_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let text = read(&cfg).replace("series_slots = 30\n", "series_slots = 30\nframes = true\n");
    fs::write(&cfg, text).unwrap();
    ok(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    let clip = fs::File::open(tmp.path().join("out/quality/static_000.frames")).unwrap();
    assert_eq!(qarc_core::trace::read_frame_clip(clip).unwrap().slots(), 30);
}

#[test]
fn train_vqpn_logs_early_stopping_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    ok(&["--config", cfg, "train-vqpn"]);
    let out = tmp.path().join("out");

    let log = csv_rows(&out.join("vqpn_train_log.csv"));
    assert_eq!(log[0], ["epoch", "train_loss", "val_loss", "param_norm"]);
    assert_eq!(log.len(), 3);
    let metrics = csv_rows(&out.join("vqpn_metrics.csv"));
    assert_eq!(metrics[0], ["set", "model_smape_pct", "persistence_smape_pct"]);
    assert_eq!(metrics.len(), 3);

    // The checkpoint reloads into identical forward outputs.
    let cfg = VqpnConfig { filters: 8, hidden: 8, ..VqpnConfig::default() };
    let load = || {
        let mut m = VqpnModel::new(cfg).unwrap();
        m.load(&out.join("vqpn.qarc")).unwrap();
        m
    };
    let input = QualityInput::Curves(vec![[0.3, 0.5, 0.6, 0.7, 0.75]; 5]);
    assert_eq!(load().predict(&input).unwrap(), load().predict(&input).unwrap());

    // Training can resume from a checkpoint.
    let rdir = tmp.path().join("resume");
    fs::create_dir_all(&rdir).unwrap();
    let extra = format!("[paths]\nresume = {:?}\ndata = {out:?}\n", out.join("vqpn.qarc"));
    let cfg2 = small_config(&rdir, &extra);
    ok(&["--config", cfg2.to_str().unwrap(), "train-vqpn"]);
    assert!(rdir.join("out/vqpn.qarc").exists());
    let missing = small_config(&rdir, "[paths]\nresume = \"/nonexistent.qarc\"\n");
    assert_eq!(qarc(&["--config", missing.to_str().unwrap(), "train-vqpn"]).status.code(), Some(3));
}

#[test]
fn missing_inputs_and_bad_configs_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    // No corpus yet: data error.
    assert_eq!(qarc(&["--config", cfg, "train-vqpn"]).status.code(), Some(3));
    assert_eq!(qarc(&["--config", cfg, "eval", "--policy", "loss"]).status.code(), Some(3));
    // Unreadable or invalid configuration: config error.
    assert_eq!(qarc(&["--config", "/nonexistent/x.toml", "eval"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "sed = 3\n").unwrap();
    assert_eq!(qarc(&["--config", bad.to_str().unwrap(), "eval"]).status.code(), Some(2));
    assert_eq!(qarc(&["--config", cfg, "--workers", "0", "eval"]).status.code(), Some(2));
    ok(&["--config", cfg, "gen-data"]);
    assert_eq!(qarc(&["--config", cfg, "eval", "--policy", "fixed:9"]).status.code(), Some(2));
    // Missing policy checkpoint: data error.
    assert_eq!(qarc(&["--config", cfg, "eval", "--policy", "qarc"]).status.code(), Some(3));
}

#[test]
fn train_vqrl_single_worker_log_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    ok(&["--config", cfg, "train-vqrl"]);
    let log_path = tmp.path().join("out/vqrl_train_log.csv");
    let first = read(&log_path);
    ok(&["--config", cfg, "train-vqrl"]);
    assert_eq!(read(&log_path), first);
    let rows = csv_rows(&log_path);
    assert_eq!(rows[0], ["iter", "mean_reward", "entropy", "value_loss", "policy_loss", "version"]);
    assert_eq!(rows.len(), 13);
    assert!(tmp.path().join("out/policy.qarc").exists() && tmp.path().join("out/value.qarc").exists());
    let resolved = read(&tmp.path().join("out/train-vqrl.config.toml"));
    assert!(resolved.contains("iterations = 12"));
}

#[test]
fn sanity_environment_learning_curve_rises() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "env = \"sanity\"\n");
    let text = read(&cfg).replace("iterations = 12", "iterations = 400");
    fs::write(&cfg, text).unwrap();
    ok(&["--config", cfg.to_str().unwrap(), "--seed", "2", "train-vqrl"]);
    let rows = csv_rows(&tmp.path().join("out/vqrl_train_log.csv"));
    let rewards: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let tenth = rewards.len() / 10;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&rewards[..tenth]), mean(&rewards[rewards.len() - tenth..]));
    assert!(late > early, "early {early}, late {late}");
}

#[test]
fn eval_rows_cover_every_policy_and_trace_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    ok(&["--config", cfg, "train-vqrl"]);
    ok(&["--config", cfg, "eval"]);
    let path = tmp.path().join("out/comparison.csv");
    let rows = csv_rows(&path);
    assert_eq!(rows[0], ["policy", "trace_id", "avg_quality", "avg_send_mbps", "avg_p95_qdelay_s", "avg_loss", "qoe"]);
    // qarc, five fixed, loss, delay, offline-optimal over two traces.
    assert_eq!(rows.len() - 1, 9 * 2);
    for trace in ["trace_000", "trace_001"] {
        let n = rows.iter().filter(|r| r[0] == "offline-optimal" && r[1] == trace).count();
        assert_eq!(n, 1);
    }
    let first = read(&path);
    ok(&["--config", cfg, "eval"]);
    assert_eq!(read(&path), first);

    ok(&["--config", cfg, "eval", "--policy", "loss,delay,loss", "--preset", "beta10-qoe"]);
    let rows = csv_rows(&path);
    let policies: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(policies, ["loss", "loss", "delay", "delay", "offline-optimal", "offline-optimal"]);
    assert!(tmp.path().join("out/trajectories/delay_trace_001.csv").exists());
}

#[test]
fn predictor_sweep_covers_the_full_grid_with_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[sweep]\nvqpn_rows = [[4, 4], [4, 8], [8, 4], [8, 8], [16, 4], [16, 8]]\n");
    let text = read(&cfg).replace("max_epochs = 2", "max_epochs = 1");
    fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    ok(&["--config", cfg, "sweep", "vqpn-table1"]);
    let rows = csv_rows(&tmp.path().join("out/sweep_vqpn.csv"));
    assert_eq!(rows[0], ["filters", "hidden", "lr", "smape_pct", "seed"]);
    assert_eq!(rows.len() - 1, 6 * 4);
    let mut seeds: Vec<&str> = rows[1..].iter().map(|r| r[4].as_str()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 24);
}

#[test]
fn agent_sweep_covers_requested_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[sweep]\nvqrl_pairs = [[5, 8], [10, 64]]\nvqrl_backbones = [\"conv1d\", \"gru\"]\nvqrl_iterations = 2\n");
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "gen-data"]);
    ok(&["--config", cfg, "sweep", "vqrl-fig7"]);
    let rows = csv_rows(&tmp.path().join("out/sweep_vqrl.csv"));
    assert_eq!(rows[0], ["backbone", "k", "c", "mean_qoe", "seed"]);
    let cells: Vec<(&str, &str, &str)> = rows[1..].iter().map(|r| (r[0].as_str(), r[1].as_str(), r[2].as_str())).collect();
    assert_eq!(cells, [("conv1d", "5", "8"), ("conv1d", "10", "64"), ("gru", "5", "8"), ("gru", "10", "64")]);
    assert!(rows[1..].iter().all(|r| r[3].parse::<f64>().unwrap().is_finite() && r[4].parse::<u64>().is_ok()));
}
