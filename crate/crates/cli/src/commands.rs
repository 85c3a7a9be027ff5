use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};

use qarc_core::netsim::{run_session, write_trajectory_csv, Controller};
use qarc_core::qoe::{write_comparison_csv, ComparisonRow, DelayBased, FixedBitrate, LossBased, OfflineOptimal};
use qarc_core::seed::{derive_indexed, derive_seed};
use qarc_core::trace::{
    gen_frame_clip, gen_markov_trace, gen_quality_curves, read_frame_clip, read_quality_csv, split_dataset, write_frame_clip, write_quality_csv,
    BandwidthTrace, FrameClip, MarkovTraceConfig, QualityCurveSeries, QualityProfile, QualityVector,
};
use qarc_core::vqpn::{
    dataset_from_series, model_smape, persistence_smape, predict_series, sweep_hyperparams, train as train_predictor, write_sweep_csv, QualitySample,
    SweepCell, VqpnModel,
};
use qarc_core::vqrl::{evaluate, write_train_log, Episode, QarcAgent, Trainer};

use crate::config::{Env, ExperimentConfig, Forecast};
use crate::{Classify, Failure};

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Per-slot content of the sanity environment: quality rises by 0.225 per
/// level, more than the bitrate penalty of any step, so the top bitrate is
/// the unique best action on a link that fits it.
pub const SANITY_CURVE: QualityVector = [0.1, 0.325, 0.55, 0.775, 1.0];
pub const SANITY_MBPS: f64 = 2.0;

/// A quality series plus its frame clip when one was generated.
#[derive(Debug, Clone)]
struct Content {
    name: String,
    series: QualityCurveSeries,
    clip: Option<Arc<FrameClip>>,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes the resolved configuration next to the command's outputs.
fn record_config(cfg: &ExperimentConfig, command: &str) -> Outcome {
    let text = cfg.to_toml().config()?;
    let path = cfg.out.join(format!("{command}.config.toml"));
    fs::create_dir_all(&cfg.out)
        .and_then(|_| fs::write(&path, text))
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn files_with_extension(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == ext));
    files.sort();
    if files.is_empty() {
        return Err(anyhow!("no .{ext} files in {}", dir.display()));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_traces(dir: &Path) -> anyhow::Result<Vec<BandwidthTrace>> {
    files_with_extension(dir, "txt")?
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            BandwidthTrace::read(stem(p), f).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn load_content(dir: &Path, need_clips: bool) -> anyhow::Result<Vec<Content>> {
    files_with_extension(dir, "csv")?
        .iter()
        .map(|p| {
            let series = read_quality_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?;
            let frames = p.with_extension("frames");
            let clip = if need_clips {
                let f = File::open(&frames).with_context(|| format!("frame mode needs {}", frames.display()))?;
                Some(Arc::new(read_frame_clip(f).with_context(|| format!("parsing {}", frames.display()))?))
            } else {
                None
            };
            Ok(Content { name: stem(p), series, clip })
        })
        .collect()
}

fn write_series(path: &Path, series: &QualityCurveSeries, with_frames: bool, seed: u64) -> anyhow::Result<()> {
    write_quality_csv(create(path)?, series)?;
    if with_frames {
        let clip = gen_frame_clip(series, derive_seed(seed, "frames"));
        write_frame_clip(create(&path.with_extension("frames"))?, &clip)?;
    }
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "gen-data")?;
    let d = &cfg.data;
    let root = cfg.data_dir();
    for (split, count) in [("train", d.train_traces), ("eval", d.eval_traces)] {
        for i in 0..count {
            let id = format!("trace_{i:03}");
            let seed = derive_indexed(cfg.seed, &format!("trace-{split}"), i as u64);
            let markov = MarkovTraceConfig::uniform_switching(d.states.clone(), d.switch_prob, d.noise_std, d.trace_slots, seed);
            let trace = gen_markov_trace(&id, &markov).config()?;
            let path = root.join("traces").join(split).join(format!("{id}.txt"));
            let mut f = create(&path).runtime()?;
            f.write_all(trace.to_text().as_bytes()).and_then(|_| f.flush()).runtime()?;
            // Session content for the same trace index.
            let seed = derive_indexed(cfg.seed, &format!("content-{split}"), i as u64);
            let series = gen_quality_curves(QualityProfile::Hybrid, d.trace_slots, seed).config()?;
            let path = root.join("content").join(split).join(format!("content_{i:03}.csv"));
            write_series(&path, &series, d.frames, seed).runtime()?;
        }
    }
    for profile in QualityProfile::ALL {
        for i in 0..d.series_per_profile {
            let seed = derive_indexed(cfg.seed, &format!("quality-{}", profile.name()), i as u64);
            let series = gen_quality_curves(profile, d.series_slots, seed).config()?;
            let path = root.join("quality").join(format!("{}_{i:03}.csv", profile.name()));
            write_series(&path, &series, d.frames, seed).runtime()?;
        }
    }
    eprintln!(
        "wrote {} traces, {} quality series to {}",
        d.train_traces + d.eval_traces,
        3 * d.series_per_profile,
        root.display()
    );
    Ok(())
}

/// Train/validation/test windows, split per profile so every set sees
/// every kind of content.
fn predictor_datasets(cfg: &ExperimentConfig) -> Outcome<[Vec<QualitySample>; 3]> {
    let mode = cfg.vqpn_model().mode;
    let content = load_content(&cfg.data_dir().join("quality"), cfg.vqpn.mode == crate::config::Mode::Frames).data()?;
    let mut sets: [Vec<QualitySample>; 3] = Default::default();
    let mut groups: Vec<(String, Vec<Content>)> = Vec::new();
    for c in content {
        let profile = c.name.rsplit_once('_').map_or(c.name.clone(), |(p, _)| p.to_string());
        match groups.iter_mut().find(|(p, _)| *p == profile) {
            Some((_, g)) => g.push(c),
            None => groups.push((profile, vec![c])),
        }
    }
    let v = &cfg.vqpn;
    for (profile, group) in &groups {
        let seed = derive_seed(cfg.seed, &format!("vqpn-split-{profile}"));
        let (train, rest) = split_dataset(group, v.train_fraction, seed).config()?;
        let (val, test) = split_dataset(&rest, v.val_fraction / (1.0 - v.train_fraction), derive_seed(seed, "rest")).config()?;
        for (set, part) in sets.iter_mut().zip([train, val, test]) {
            for c in part {
                set.extend(dataset_from_series(&c.series, c.clip.as_ref(), mode).data()?);
            }
        }
    }
    if sets.iter().any(Vec::is_empty) {
        return Err(Failure::Data(anyhow!(
            "quality corpus too small to fill train, validation and test sets"
        )));
    }
    Ok(sets)
}

pub fn train_vqpn(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "train-vqpn")?;
    let [train, val, test] = predictor_datasets(cfg)?;
    let mut model = VqpnModel::new(cfg.vqpn_model()).config()?;
    if let Some(resume) = &cfg.paths.resume {
        model.load(resume).with_context(|| format!("loading {}", resume.display())).data()?;
    }
    eprintln!("training quality predictor on {} windows ({} validation)", train.len(), val.len());
    let report = train_predictor(&mut model, &train, &val, &cfg.vqpn_train()).runtime()?;
    let out = cfg.vqpn_path();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).runtime()?;
    }
    model.save(&out).runtime()?;
    report.write_csv(create(&cfg.out.join("vqpn_train_log.csv")).runtime()?).runtime()?;
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("vqpn_metrics.csv")).runtime()?);
    w.write_record(["set", "model_smape_pct", "persistence_smape_pct"]).runtime()?;
    for (name, set) in [("validation", &val), ("test", &test)] {
        let (m, p) = (model_smape(&model, set).runtime()?, persistence_smape(set).runtime()?);
        w.write_record([name.to_string(), m.to_string(), p.to_string()]).runtime()?;
        eprintln!("{name}: SMAPE {m:.3}% (persistence {p:.3}%)");
    }
    w.flush().runtime()?;
    eprintln!("best epoch {} of {}, checkpoint {}", report.best_epoch, report.records.len(), out.display());
    Ok(())
}

fn forecasts(cfg: &ExperimentConfig, content: &Content, model: Option<&VqpnModel>) -> Outcome<Vec<QualityVector>> {
    let slots = content.series.slots();
    Ok(match (cfg.vqrl.forecast, model) {
        (Forecast::Vqpn, Some(m)) => predict_series(m, &content.series, content.clip.as_ref()).runtime()?,
        (Forecast::Persistence, _) => (0..slots.len()).map(|n| slots[n.saturating_sub(1)]).collect(),
        _ => slots.to_vec(),
    })
}

fn load_predictor(cfg: &ExperimentConfig) -> Outcome<VqpnModel> {
    let mut model = VqpnModel::new(cfg.vqpn_model()).config()?;
    let path = cfg.vqpn_path();
    model
        .load(&path)
        .with_context(|| format!("loading quality predictor {} (run train-vqpn first)", path.display()))
        .data()?;
    Ok(model)
}

/// Episodes of `split`: trace `i` paired with content `i`. The quality
/// predictor is only loaded when `with_forecast` asks for it.
fn episodes(cfg: &ExperimentConfig, split: &str, with_forecast: bool) -> Outcome<Vec<Episode>> {
    let root = cfg.data_dir();
    let traces = load_traces(&root.join("traces").join(split)).data()?;
    let needs_model = with_forecast && cfg.vqrl.forecast == Forecast::Vqpn;
    let frames = needs_model && cfg.vqpn.mode == crate::config::Mode::Frames;
    let content = load_content(&root.join("content").join(split), frames).data()?;
    let model = if needs_model { Some(load_predictor(cfg)?) } else { None };
    traces
        .into_iter()
        .enumerate()
        .map(|(i, trace)| {
            let c = &content[i % content.len()];
            Ok(Episode {
                predictions: forecasts(cfg, c, model.as_ref())?,
                quality: c.series.clone(),
                trace,
            })
        })
        .collect()
}

pub fn sanity_episode(slots: usize) -> qarc_core::Result<Episode> {
    let quality = QualityCurveSeries::new(vec![SANITY_CURVE; slots])?;
    Ok(Episode {
        trace: BandwidthTrace::constant("sanity", SANITY_MBPS, slots)?,
        predictions: quality.slots().to_vec(),
        quality,
    })
}

fn run_trainer(mut trainer: Trainer, label: &str) -> Outcome<Trainer> {
    let total = trainer.cfg.iterations;
    let chunk = (total / 10).max(1);
    while trainer.completed() < total {
        let rows = trainer.run(chunk.min(total - trainer.completed())).runtime()?;
        let reward = rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len() as f64;
        eprintln!("{label}: iteration {}/{total}, mean reward {reward:.4}", trainer.completed());
    }
    Ok(trainer)
}

pub fn train_vqrl(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "train-vqrl")?;
    let tcfg = cfg.trainer().config()?;
    let eps = match cfg.vqrl.env {
        Env::Sanity => vec![sanity_episode(cfg.data.trace_slots).config()?],
        Env::Corpus => episodes(cfg, "train", true)?,
    };
    let trainer = run_trainer(Trainer::new(tcfg, eps).config()?, "train-vqrl")?;
    trainer.save(&cfg.out).runtime()?;
    if let Some(p) = &cfg.paths.policy {
        fs::copy(cfg.out.join("policy.qarc"), p).with_context(|| format!("copying policy to {}", p.display())).runtime()?;
    }
    write_train_log(create(&cfg.out.join("vqrl_train_log.csv")).runtime()?, trainer.log()).runtime()?;
    eprintln!("wrote {}", cfg.out.join("policy.qarc").display());
    Ok(())
}

/// Controller names from the comma-separated list; offline-optimal is
/// always included, once.
pub fn policy_names(list: &str) -> Outcome<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for raw in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let expanded: Vec<String> = match raw {
            "all" => ["qarc", "fixed:0", "fixed:1", "fixed:2", "fixed:3", "fixed:4", "loss", "delay"]
                .map(String::from)
                .to_vec(),
            "qarc" | "loss" | "delay" | "offline-optimal" => vec![raw.to_string()],
            s if s.strip_prefix("fixed:").and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < 5) => vec![s.to_string()],
            s => return Err(Failure::Config(anyhow!("unknown policy {s:?}"))),
        };
        for n in expanded {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    if !names.iter().any(|n| n == "offline-optimal") {
        names.push("offline-optimal".into());
    }
    Ok(names)
}

fn controller(name: &str, cfg: &ExperimentConfig, trace: &BandwidthTrace, agent: Option<&QarcAgent>) -> Outcome<Box<dyn Controller>> {
    Ok(match name {
        "qarc" => Box::new(agent.expect("agent loaded when qarc is requested").clone()),
        "loss" => Box::new(LossBased::default()),
        "delay" => Box::new(DelayBased::default()),
        "offline-optimal" => Box::new(OfflineOptimal::new(trace, cfg.sim.slot)),
        fixed => {
            let idx = fixed.trim_start_matches("fixed:").parse::<usize>().map_err(|e| Failure::Config(e.into()))?;
            Box::new(FixedBitrate::new(idx).config()?)
        }
    })
}

pub fn eval(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "eval")?;
    let names = policy_names(&cfg.policy)?;
    let with_agent = names.iter().any(|n| n == "qarc");
    let eps = episodes(cfg, "eval", with_agent)?;
    let agent = if with_agent {
        let path = cfg.policy_path();
        Some(
            QarcAgent::load(cfg.net(), &path)
                .with_context(|| format!("loading policy {} (run train-vqrl first)", path.display()))
                .data()?,
        )
    } else {
        None
    };
    let weights = cfg.weights().config()?;
    let mut rows = Vec::new();
    for name in &names {
        for (i, ep) in eps.iter().enumerate() {
            let session = cfg.session(derive_indexed(cfg.seed, "eval-session", i as u64)).config()?;
            let mut c = controller(name, cfg, &ep.trace, agent.as_ref())?;
            let steps = run_session(c.as_mut(), &ep.trace, &ep.quality, ep.predictions.clone(), session).runtime()?;
            let file = cfg.out.join("trajectories").join(format!("{}_{}.csv", name.replace(':', "-"), ep.trace.id));
            write_trajectory_csv(create(&file).runtime()?, &steps).runtime()?;
            rows.push(ComparisonRow::from_steps(name, &ep.trace.id, &steps, &weights).runtime()?);
        }
    }
    write_comparison_csv(create(&cfg.out.join("comparison.csv")).runtime()?, &rows).runtime()?;
    for name in &names {
        let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| &r.policy == name).collect();
        let mean = mine.iter().map(|r| r.qoe).sum::<f64>() / mine.len() as f64;
        eprintln!("{name:>16}: mean QoE {mean:.3}");
    }
    Ok(())
}

pub fn sweep_vqpn(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "sweep-vqpn-table1")?;
    let [train, val, test] = predictor_datasets(cfg)?;
    let cells: Vec<SweepCell> = cfg
        .sweep
        .vqpn_rows
        .iter()
        .flat_map(|&[filters, hidden]| cfg.sweep.vqpn_lrs.iter().map(move |&lr| SweepCell { filters, hidden, lr }))
        .collect();
    if cells.is_empty() {
        return Err(Failure::Config(anyhow!("empty predictor sweep grid")));
    }
    eprintln!("sweeping {} predictor cells", cells.len());
    let rows = sweep_hyperparams(&cells, cfg.vqpn_model(), &cfg.vqpn_train(), &train, &val, &test).runtime()?;
    write_sweep_csv(create(&cfg.out.join("sweep_vqpn.csv")).runtime()?, &rows).runtime()?;
    Ok(())
}

pub const VQRL_SWEEP_HEADER: [&str; 5] = ["backbone", "k", "c", "mean_qoe", "seed"];

pub fn sweep_vqrl(cfg: &ExperimentConfig) -> Outcome {
    record_config(cfg, "sweep-vqrl-fig7")?;
    let (train, test) = (episodes(cfg, "train", true)?, episodes(cfg, "eval", true)?);
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("sweep_vqrl.csv")).runtime()?);
    w.write_record(VQRL_SWEEP_HEADER).runtime()?;
    let mut index = 0u64;
    for &backbone in &cfg.sweep.vqrl_backbones {
        for &[k, c] in &cfg.sweep.vqrl_pairs {
            let mut cell = cfg.clone();
            cell.seed = derive_indexed(cfg.seed, "vqrl-sweep", index);
            index += 1;
            cell.sim.history = k;
            cell.vqrl.filters = c;
            cell.vqrl.backbone = backbone;
            cell.vqrl.iterations = cfg.sweep.vqrl_iterations;
            let label = format!("{} k={k} c={c}", backbone_name(backbone));
            let trainer = run_trainer(Trainer::new(cell.trainer().config()?, train.clone()).config()?, &label)?;
            let mut agent = QarcAgent::new(trainer.policy().runtime()?);
            let runs = evaluate(&mut agent, &test, cell.session(derive_seed(cell.seed, "eval-session")).config()?).runtime()?;
            let weights = cell.weights().config()?;
            let qoe = runs
                .iter()
                .map(|s| ComparisonRow::from_steps("qarc", "", s, &weights).map(|r| r.qoe))
                .collect::<qarc_core::Result<Vec<f64>>>()
                .runtime()?;
            let mean = qoe.iter().sum::<f64>() / qoe.len() as f64;
            eprintln!("{label}: mean QoE {mean:.3}");
            w.write_record([backbone_name(backbone).to_string(), k.to_string(), c.to_string(), mean.to_string(), cell.seed.to_string()])
                .runtime()?;
            w.flush().runtime()?;
        }
    }
    Ok(())
}

fn backbone_name(b: crate::config::BackboneName) -> &'static str {
    qarc_core::vqrl::Backbone::from(b).name()
}
