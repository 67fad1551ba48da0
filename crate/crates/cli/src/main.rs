use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use ptd_core::checks::micro_gradcheck;
use ptd_core::config::{RunConfig, SwitchMode};
use ptd_core::eval::evaluate;
use ptd_core::model::{rollout, PredictionSource, PtdModel};
use ptd_core::report::{emit_report, trace_scene};
use ptd_core::scene::{read_dataset, write_dataset};
use ptd_core::synth::generate_dataset;
use ptd_core::train::{train, write_metrics};

/// Gradient checks must stay under this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "ptd", version, about = "Persistent-transient duality motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.json, metrics.csv, config.txt and
    /// validation.jsonl into the output directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model and write the report files.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Separately trained persistent-only model; by default the
        /// evaluated model with its switch forced off.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Scene whose attention weights and edges are dumped (default:
        /// first scene with an interaction).
        #[arg(long)]
        trace_scene: Option<String>,
    },
    /// Roll out a model on every scene of a file and write predictions as JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the whole model on a three-entity scene.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    println!("# resolved config");
    print!("{}", cfg.to_text());
    Ok(cfg)
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.json")
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<PtdModel> {
    let path = model_path(p);
    PtdModel::load(&path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            println!("seed = {}", cfg.gen.seed);
            let scenes = generate_dataset(&cfg.gen)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_dataset(&scenes, &out)?;
            let inter = scenes.iter().filter(|s| s.has_interaction()).count();
            println!("wrote {} scenes ({inter} with interactions) to {}", scenes.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            println!("seed = {}", cfg.train.seed);
            let scenes = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            if scenes.is_empty() {
                bail!("{} contains no scenes", data.display());
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let outcome = train(&cfg.model, &cfg.train, &scenes)?;
            outcome.model.save(out.join("model.json"))?;
            write_metrics(&outcome.log, out.join("metrics.csv"))?;
            write_dataset(&outcome.validation, out.join("validation.jsonl"))?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: L_pred {:.6} L_switch {:.6} val ADE {:.3} mm switch F1 {:.4}",
                    last.epoch, last.l_pred, last.l_switch, last.val_ade_mm, last.switch_f1
                );
            }
            println!("model written to {}", out.display());
        }
        Command::Eval {
            model,
            data,
            out,
            baseline,
            trace_scene: trace_id,
        } => {
            let m = load_model(&model)?;
            print!("# model config\n{}", model_config_text(&m));
            let scenes = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            if scenes.is_empty() {
                bail!("{} contains no scenes", data.display());
            }
            let report = evaluate(&m, &scenes)?;
            let base_model = match baseline {
                Some(p) => load_model(&p)?,
                None => {
                    let mut b = m.clone();
                    b.config.switch_mode = SwitchMode::Off;
                    b
                }
            };
            let base = evaluate(&base_model, &scenes)?;
            let traced = match &trace_id {
                Some(id) => scenes
                    .iter()
                    .find(|s| &s.scene_id == id)
                    .with_context(|| format!("no scene `{id}` in {}", data.display()))?,
                None => {
                    let mut sorted: Vec<_> = scenes.iter().collect();
                    sorted.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
                    sorted.iter().find(|s| s.has_interaction()).copied().unwrap_or(sorted[0])
                }
            };
            let trace = trace_scene(&m, traced)?;
            let files = emit_report(&report, Some(&base), Some(&trace), &out)?;
            println!(
                "ADE {:.3} mm (persistent-only {:.3} mm), switch precision {:.4} recall {:.4} F1 {:.4}",
                report.ade_mm, base.ade_mm, report.switch.precision, report.switch.recall, report.switch.f1
            );
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Predict { model, scene, out } => {
            let m = load_model(&model)?;
            print!("# model config\n{}", model_config_text(&m));
            let scenes = read_dataset(&scene).with_context(|| format!("reading {}", scene.display()))?;
            let mut records = Vec::new();
            for s in &scenes {
                records.push(predict_record(&m, s)?);
            }
            let text = serde_json::to_string_pretty(&records)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote predictions for {} scenes to {}", scenes.len(), out.display());
        }
        Command::Gradcheck { seed } => {
            println!("seed = {seed}");
            let mut ok = true;
            for mode in [SwitchMode::On, SwitchMode::Off, SwitchMode::Learned] {
                let start = std::time::Instant::now();
                let r = micro_gradcheck(seed, mode, 1.0)?;
                let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!(
                    "switch {:<7} checked {:>6} (unused {:>5})  max relative error {:.3e} ({} [{}])  {:.1}s  {}",
                    mode.as_str(),
                    r.checked,
                    r.unused,
                    r.max_rel_error,
                    r.worst_param,
                    r.worst_index,
                    start.elapsed().as_secs_f64(),
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn model_config_text(m: &PtdModel) -> String {
    let cfg = RunConfig {
        model: m.config.clone(),
        ..RunConfig::default()
    };
    cfg.to_text().lines().take_while(|l| !l.starts_with("lambda")).map(|l| format!("{l}\n")).collect()
}

#[derive(serde::Serialize)]
struct EntityPrediction {
    id: usize,
    source: String,
    features: Vec<Vec<f64>>,
}

#[derive(serde::Serialize)]
struct PredictionRecord {
    scene_id: String,
    obs_steps: usize,
    horizon: usize,
    entities: Vec<EntityPrediction>,
    switch_scores: std::collections::BTreeMap<usize, Vec<f64>>,
    switch_status: std::collections::BTreeMap<usize, Vec<u8>>,
}

fn predict_record(m: &PtdModel, s: &ptd_core::scene::Scene) -> Result<PredictionRecord> {
    let mut tape = ptd_core::autodiff::Tape::new();
    let out = rollout(&mut tape, m, s)?;
    let layout = &out.layout;
    let entities = (0..layout.len())
        .map(|i| EntityPrediction {
            id: layout.ids[i],
            source: out
                .sources
                .iter()
                .map(|step| match step[i] {
                    PredictionSource::Persistent => "P".to_string(),
                    PredictionSource::Transient(c) => format!("T{}", layout.ids[c]),
                })
                .collect::<Vec<_>>()
                .join(" "),
            features: out.predictions.iter().map(|step| tape.value(step[i]).to_vec()).collect(),
        })
        .collect();
    let mut scores = std::collections::BTreeMap::new();
    let mut status = std::collections::BTreeMap::new();
    for step in &out.switches {
        for h in step {
            let id = layout.ids[h.human];
            scores.entry(id).or_insert_with(Vec::new).push(h.value);
            status.entry(id).or_insert_with(Vec::new).push(h.on as u8);
        }
    }
    Ok(PredictionRecord {
        scene_id: s.scene_id.clone(),
        obs_steps: m.config.obs_steps,
        horizon: m.config.horizon,
        entities,
        switch_scores: scores,
        switch_status: status,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    info!("ptd {}", env!("CARGO_PKG_VERSION"));
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
