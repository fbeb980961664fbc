//! Commands behind the `rcfuse` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rcfuse_core::config::DataLayout;
use rcfuse_core::decoder::min_pairwise_distance;
use rcfuse_core::eval::{evaluate, DetectionMetrics};
use rcfuse_core::head::Detection;
use rcfuse_core::io::{load_checkpoint, read_scenes, save_checkpoint, write_scenes};
use rcfuse_core::radar::{empty_cell_fraction, BevGeometry};
use rcfuse_core::sim::{apply_drop, gen_scene, sequence};
use rcfuse_core::tracker::{track_sequence, tracking_metrics, Labeled};
use rcfuse_core::train::train;
use rcfuse_core::{Detector, Error, Result, RunConfig, Scene};

#[derive(Debug, Parser)]
#[command(name = "rcfuse", version, about = "Radar-camera 3D detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes (JSONL) plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Scenes sampled for the sparsity report in the manifest.
        #[arg(long, default_value_t = 100)]
        stats_scenes: usize,
    },
    /// Train a detector and write a checkpoint and a JSONL loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Detection metrics of a checkpoint on a scene file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-scene detections (JSONL) with wall-clock latency.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Override the number of decoder layers run at inference.
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Track detections through the scene sequence (JSONL per frame and id).
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Use the model's detections; without it ground truth is tracked.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detection metrics under every configured sensor-drop pattern.
    Robust {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::CheckpointMismatch(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Detector> {
    let mut det = Detector::new(cfg.model.clone(), 0)?;
    load_checkpoint(checkpoint, &mut det.store)?;
    Ok(det)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, stats_scenes } => gen_data(&common, stats_scenes),
        Command::Train { common, data } => cmd_train(&common, &data),
        Command::Eval { common, model } => cmd_eval(&common, &model),
        Command::Infer { common, model, layers } => cmd_infer(&common, &model, layers),
        Command::Track {
            common,
            data,
            checkpoint,
        } => cmd_track(&common, &data, checkpoint.as_deref()),
        Command::Robust { common, model } => cmd_robust(&common, &model),
    }
}

pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Vec<Scene>> {
    let n = cfg.data.frames;
    if n == 0 {
        return Ok(Vec::new());
    }
    match cfg.data.layout {
        DataLayout::Sequence => sequence(seed, n, &cfg.sim),
        DataLayout::Independent => (0..n as u64)
            .map(|i| {
                let mut s = gen_scene(seed.wrapping_add(i), &cfg.sim)?;
                s.frame_index = i as usize;
                Ok(s)
            })
            .collect(),
    }
}

fn gen_data(c: &Common, stats_scenes: usize) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let scenes = generate(&cfg, c.seed)?;
    write_scenes(&c.out, &scenes)?;
    // sparsity at the 128×128 reference grid over independent seeds
    let grid = BevGeometry::new(&cfg.sim.range, 128, 128)?;
    let mut fractions = Vec::with_capacity(stats_scenes);
    for i in 0..stats_scenes as u64 {
        let s = gen_scene(c.seed.wrapping_add(1_000_000 + i), &cfg.sim)?;
        fractions.push(empty_cell_fraction(&s.radar, &grid));
    }
    let mean = if fractions.is_empty() {
        None
    } else {
        Some(fractions.iter().sum::<f64>() / fractions.len() as f64)
    };
    let manifest = json!({
        "format_version": rcfuse_core::io::SCENE_FORMAT_VERSION,
        "seed": c.seed,
        "config_hash": cfg.hash(),
        "frames": scenes.len(),
        "data_file": c.out.file_name().and_then(|n| n.to_str()),
        "sparsity": {
            "grid": [128, 128],
            "scenes": fractions.len(),
            "mean_empty_fraction": mean,
            "min_empty_fraction": fractions.iter().copied().reduce(f64::min),
            "max_empty_fraction": fractions.iter().copied().reduce(f64::max),
        },
    });
    write_json(&sibling(&c.out, ".manifest.json"), &manifest)?;
    emit(json!({"event": "gen_data", "frames": scenes.len(), "out": c.out, "mean_empty_fraction": mean}));
    Ok(())
}

fn cmd_train(c: &Common, data: &Path) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let scenes = read_scenes(data)?;
    let mut det = Detector::new(cfg.model.clone(), c.seed)?;
    let log_path = sibling(&c.out, ".log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut write_err: Option<std::io::Error> = None;
    let started = Instant::now();
    let result = train(&mut det, &scenes, &cfg.loss, &cfg.train, c.seed, |step| {
        let line = serde_json::to_string(step).expect("step log serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let logs = match result {
        Ok(l) => l,
        Err(e @ Error::Numerical(_)) => {
            let dump = json!({"error": e.to_string(), "config_hash": cfg.hash(), "seed": c.seed});
            write_json(&sibling(&c.out, ".nan_dump.json"), &dump)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let meta = json!({
        "model": cfg.model,
        "config_hash": cfg.hash(),
        "seed": c.seed,
        "steps": logs.len(),
        "initial_loss": logs.first().map(|l| l.loss),
        "final_loss": logs.last().map(|l| l.loss),
    });
    save_checkpoint(&c.out, &det.store, meta)?;
    emit(json!({
        "event": "train",
        "steps": logs.len(),
        "initial_loss": logs.first().map(|l| l.loss),
        "final_loss": logs.last().map(|l| l.loss),
        "seconds": started.elapsed().as_secs_f64(),
        "checkpoint": c.out,
    }));
    Ok(())
}

fn detections(det: &Detector, scenes: &[Scene]) -> Result<Vec<(Vec<Detection>, Vec<rcfuse_core::GtBox>)>> {
    scenes
        .iter()
        .map(|s| Ok((det.detect(&s.input())?, s.objects.clone())))
        .collect()
}

fn metrics_json(m: &DetectionMetrics, class_names: &[String]) -> serde_json::Value {
    let per_class: serde_json::Map<String, serde_json::Value> = m
        .per_class
        .iter()
        .map(|c| {
            let name = class_names.get(c.class).cloned().unwrap_or_else(|| c.class.to_string());
            (name, json!({"num_gt": c.num_gt, "ap": c.ap}))
        })
        .collect();
    json!({
        "mAP": m.map,
        "thresholds": m.thresholds,
        "ap_by_threshold": m.ap_by_threshold,
        "per_class_ap": per_class,
        "mATE": m.mate,
        "mAVE": m.mave,
    })
}

fn class_names(cfg: &RunConfig) -> Vec<String> {
    cfg.sim.classes.iter().map(|c| c.name.clone()).collect()
}

fn cmd_eval(c: &Common, m: &ModelArgs) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let det = load_model(&cfg, &m.checkpoint)?;
    let scenes = read_scenes(&m.data)?;
    let metrics = evaluate(&detections(&det, &scenes)?, cfg.model.num_classes)?;
    let out = metrics_json(&metrics, &class_names(&cfg));
    write_json(&c.out, &out)?;
    emit(json!({"event": "eval", "scenes": scenes.len(), "metrics": out}));
    Ok(())
}

fn cmd_infer(c: &Common, m: &ModelArgs, layers: Option<usize>) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let mut det = load_model(&cfg, &m.checkpoint)?;
    if let Some(n) = layers {
        if n == 0 || n > det.decoder.layers.len() {
            return Err(Error::Config(format!(
                "--layers must be in 1..={}",
                det.decoder.layers.len()
            )));
        }
        det.decoder.inference_layers = n;
    }
    let scenes = read_scenes(&m.data)?;
    let mut w = BufWriter::new(fs::File::create(&c.out)?);
    let mut latencies = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let t = Instant::now();
        let dets = det.detect(&s.input())?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        latencies.push(ms);
        let centers: Vec<[f64; 2]> = dets.iter().map(|d| [d.center[0], d.center[1]]).collect();
        let rec = json!({
            "frame": s.frame_index,
            "latency_ms": ms,
            "min_query_distance_m": min_pairwise_distance(&centers),
            "detections": dets,
        });
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied();
    emit(json!({
        "event": "infer",
        "scenes": scenes.len(),
        "decoder_layers": det.decoder.inference_layers,
        "median_latency_ms": median,
    }));
    Ok(())
}

fn cmd_track(c: &Common, data: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let scenes = read_scenes(data)?;
    let frames: Vec<Vec<Detection>> = match checkpoint {
        Some(p) => {
            let det = load_model(&cfg, p)?;
            scenes.iter().map(|s| det.detect(&s.input())).collect::<Result<_>>()?
        }
        None => scenes
            .iter()
            .map(|s| s.objects.iter().map(|o| Detection::from_gt(o, 1.0)).collect())
            .collect(),
    };
    let records = track_sequence(&frames, cfg.sim.frame_interval, &cfg.tracker)?;
    let mut w = BufWriter::new(fs::File::create(&c.out)?);
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    let gt: Vec<Vec<Labeled>> = scenes
        .iter()
        .map(|s| {
            s.objects
                .iter()
                .map(|o| Labeled {
                    id: o.track_id,
                    xy: [o.center[0], o.center[1]],
                })
                .collect()
        })
        .collect();
    let mut pred: Vec<Vec<Labeled>> = vec![Vec::new(); scenes.len()];
    for r in &records {
        pred[r.frame].push(Labeled { id: r.id, xy: [r.x, r.y] });
    }
    let metrics = tracking_metrics(&gt, &pred, cfg.tracker.match_radius)?;
    write_json(&sibling(&c.out, ".metrics.json"), &metrics)?;
    emit(json!({"event": "track", "frames": scenes.len(), "records": records.len(), "metrics": metrics}));
    Ok(())
}

fn cmd_robust(c: &Common, m: &ModelArgs) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let det = load_model(&cfg, &m.checkpoint)?;
    let scenes = read_scenes(&m.data)?;
    let names = class_names(&cfg);
    let mut grid = vec![json!({
        "drop": "none",
        "metrics": metrics_json(&evaluate(&detections(&det, &scenes)?, cfg.model.num_classes)?, &names),
    })];
    for p in &cfg.robust.patterns {
        let dropped = scenes.iter().map(|s| apply_drop(s, p)).collect::<Result<Vec<_>>>()?;
        let metrics = evaluate(&detections(&det, &dropped)?, cfg.model.num_classes)?;
        grid.push(json!({"drop": p, "metrics": metrics_json(&metrics, &names)}));
    }
    let out = json!({"scenes": scenes.len(), "grid": grid});
    write_json(&c.out, &out)?;
    emit(json!({"event": "robust", "patterns": grid.len()}));
    Ok(())
}
