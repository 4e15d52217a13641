//! Command-line front end.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Overrides, RunConfig};
use crate::data::{build_samples, generate_synthetic, load_jsonl_with, split, write_jsonl, Extent, GenConfig, IngestOptions, Sample, Scene, Stream};
use crate::error::{Error, Result};
use crate::gradcheck::{check_variant, GradcheckConfig};
use crate::metrics::{evaluate, predictions_csv, Prediction};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{load_checkpoint, save_checkpoint};
use crate::train::{log_csv, train, TrainOutcome};

pub const MANIFEST: &str = "manifest.json";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn stream_file(stream: Stream) -> String {
    format!("stream_{stream}.jsonl")
}

#[derive(Debug, Parser)]
#[command(name = "smn", version, about = "Pedestrian trajectory prediction with spatial memory")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// sa, sha, smn, sa_ir, sha_ir or smn_ir.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Memory grid side (W = H).
    #[arg(long, global = true)]
    pub map: Option<usize>,
    /// Hidden size of every recurrent unit.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Observed steps.
    #[arg(long, global = true)]
    pub obs: Option<usize>,
    /// Predicted steps.
    #[arg(long, global = true)]
    pub pred: Option<usize>,
    /// Seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read; `train` writes here instead of `<out>/checkpoint.json`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            variant: self.variant,
            map: self.map,
            hidden: self.hidden,
            t_obs: self.obs,
            t_pred: self.pred,
            seed: self.seed,
            epochs: self.epochs,
            data_dir: self.data.clone(),
            out_dir: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    Validation,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paired I/R scenes and write them as JSON Lines.
    Generate {
        /// Number of scenes (overrides the config).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a model and write its checkpoint and log.
    Train,
    /// Write predicted trajectories for one split.
    Predict {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        /// Also write per-frame predicted trajectories.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Write memory cell norms and read statistics for one sample.
    DumpMemory {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        /// Index into the chosen split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Parse { .. } | Error::Ingestion(_) | Error::Contract(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::Shape { .. } => 1,
    }
}

/// Description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// SHA-256 of the generator configuration's JSON form.
    pub config_hash: String,
    pub generator: GenConfig,
    pub scenes: usize,
    pub files: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = cli.common.overrides();
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let explicit_model = cli.common.config.is_some() || overrides.touches_model();
    match cli.command {
        Command::Generate { scenes } => {
            if let Some(n) = scenes {
                cfg.generator.scenes = n;
            }
            cmd_generate(&cfg).map(|_| ())
        }
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Predict { split } => {
            let (model, samples) = load_for_inference(&mut cfg, explicit_model, split)?;
            cmd_predict(&cfg, &model, &samples).map(|_| ())
        }
        Command::Evaluate { split, dump_trajectories } => {
            let (model, samples) = load_for_inference(&mut cfg, explicit_model, split)?;
            cmd_evaluate(&cfg, &model, &samples, dump_trajectories)
        }
        Command::Gradcheck => cmd_gradcheck(&cfg, cli.common.variant),
        Command::DumpMemory { split, sample } => {
            let (model, samples) = load_for_inference(&mut cfg, explicit_model, split)?;
            cmd_dump_memory(&cfg, &model, &samples, sample)
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required for this command")))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = required(&cfg.out_dir, "--out")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_toml()?;
    info!("effective configuration:\n{text}");
    write(&dir.join(EFFECTIVE_CONFIG), &text)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.generator.validate()?;
    let dir = out_dir(cfg)?;
    let scenes = generate_synthetic(&cfg.generator, cfg.seed)?;
    let mut files = Vec::new();
    for stream in [Stream::I, Stream::R] {
        let part: Vec<Scene> = scenes.iter().filter(|s| s.stream == stream).cloned().collect();
        let name = stream_file(stream);
        write_jsonl(&dir.join(&name), &part)?;
        files.push(name);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash(&cfg.generator),
        generator: cfg.generator.clone(),
        scenes: cfg.generator.scenes,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST), &format!("{text}\n"))?;
    echo_config(cfg, dir)?;
    info!("wrote {} scenes to {}", manifest.scenes, dir.display());
    Ok(manifest)
}

/// Scenes of both streams found in a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub has_radar: bool,
    pub manifest: Option<Manifest>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", manifest_path.display())))?)
    } else {
        None
    };
    let mut opts = IngestOptions::default();
    if let Some(m) = &manifest {
        opts.extent = Some(m.generator.scene_extent()?);
        opts.i_fps = m.generator.i_rate as f64;
        opts.r_fps = m.generator.r_rate as f64;
    }
    let video_path = dir.join(stream_file(Stream::I));
    let video = load_jsonl_with(&video_path, &opts)?;
    if video.clamped > 0 {
        warn!("{} I points clamped onto the scene extent", video.clamped);
    }
    let mut scenes = video.scenes;
    if opts.extent.is_none() {
        opts.extent = Extent::bounding(&scenes);
    }
    let radar_path = dir.join(stream_file(Stream::R));
    let mut has_radar = false;
    if radar_path.exists() {
        let radar = load_jsonl_with(&radar_path, &opts)?.scenes;
        has_radar = radar.iter().any(|s| !s.trajectories.is_empty());
        scenes.extend(radar);
    }
    info!(
        "loaded {} scenes from {}{}",
        scenes.iter().filter(|s| s.stream == Stream::I).count(),
        dir.display(),
        if has_radar { " with R stream" } else { "" }
    );
    Ok(Dataset {
        scenes,
        has_radar,
        manifest,
    })
}

/// Train, test and validation samples of a dataset.
pub fn dataset_samples(cfg: &RunConfig, data: &Dataset) -> Result<[Vec<Sample>; 3]> {
    if cfg.model.needs_radar() && !data.has_radar {
        return Err(Error::Config(format!(
            "variant {} needs R-stream data, but the dataset has none",
            cfg.model.variant
        )));
    }
    if data.scenes.is_empty() {
        return Err(Error::Contract("dataset has no scenes".into()));
    }
    let parts = split(&data.scenes, cfg.data.split, cfg.seed)?;
    let opts = cfg.sample_options();
    let with_r = cfg.model.needs_radar();
    Ok([
        build_samples(&parts.train, &opts, with_r)?,
        build_samples(&parts.test, &opts, with_r)?,
        build_samples(&parts.validation, &opts, with_r)?,
    ])
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(required(&cfg.data_dir, "--data")?)?;
    let [train_set, _, val_set] = dataset_samples(cfg, &data)?;
    let dir = out_dir(cfg)?;
    echo_config(cfg, dir)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    info!("{} model with {} trainable parameters", cfg.model.variant, model.param_count());
    let outcome = train(model, &train_set, &val_set, &cfg.train, cfg.seed, |row, _| {
        info!(
            "epoch {} train_loss {:.6} val_ade {}",
            row.epoch,
            row.train_loss,
            row.val_ade.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
        ControlFlow::Continue(())
    })?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT));
    save_checkpoint(&checkpoint, &outcome.model.config, &outcome.model.params)?;
    write(&dir.join(TRAIN_LOG), &log_csv(&outcome.log))?;
    info!("checkpoint written to {}", checkpoint.display());
    Ok(outcome)
}

/// Checkpoint plus the samples of `which`. The model layout is the stored
/// one unless a config file or model flag was given.
fn load_for_inference(cfg: &mut RunConfig, explicit_model: bool, which: SplitChoice) -> Result<(Model, Vec<Sample>)> {
    let path = required(&cfg.checkpoint, "--checkpoint")?.to_path_buf();
    let (stored, params): (ModelConfig, _) = load_checkpoint(&path)?;
    if !explicit_model {
        cfg.model = stored;
    }
    cfg.validate()?;
    let model = Model::from_parts(cfg.model.clone(), params)
        .map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{} does not fit the model configuration: {m}", path.display())),
            other => other,
        })?;
    let data = load_dataset(required(&cfg.data_dir, "--data")?)?;
    let [train_set, test_set, val_set] = dataset_samples(cfg, &data)?;
    let samples = match which {
        SplitChoice::Train => train_set,
        SplitChoice::Test => test_set,
        SplitChoice::Validation => val_set,
        SplitChoice::All => [train_set, test_set, val_set].concat(),
    };
    Ok((model, samples))
}

pub fn cmd_predict(cfg: &RunConfig, model: &Model, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let dir = out_dir(cfg)?;
    echo_config(cfg, dir)?;
    let start = Instant::now();
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let predicted = model.predict(s)?.into_iter().map(|p| s.denormalize(p)).collect();
        preds.push(Prediction {
            id: s.id,
            frames: s.frames[s.t_obs..].to_vec(),
            predicted,
            truth: s.future().iter().map(|&p| s.denormalize(p)).collect(),
        });
    }
    info!("{} predictions in {:.3}s", preds.len(), start.elapsed().as_secs_f64());
    write(&dir.join("predictions.csv"), &predictions_csv(&preds))?;
    Ok(preds)
}

pub fn cmd_evaluate(cfg: &RunConfig, model: &Model, samples: &[Sample], dump_trajectories: bool) -> Result<()> {
    let dir = out_dir(cfg)?;
    echo_config(cfg, dir)?;
    let (report, preds) = evaluate(model, samples, &cfg.train.metrics)?;
    write(&dir.join("metrics.csv"), &report.aggregate_csv())?;
    write(&dir.join("per_sample.csv"), &report.per_sample_csv())?;
    if dump_trajectories {
        write(&dir.join("trajectories.csv"), &predictions_csv(&preds))?;
    }
    println!("{report}");
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, only: Option<Variant>) -> Result<()> {
    let gc = GradcheckConfig::default();
    let variants: Vec<Variant> = match only {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for v in variants {
        let start = Instant::now();
        let report = check_variant(v, &gc, cfg.seed)?;
        print!("{report}");
        println!(
            "{:<7} max rel err {:.3e} in {:.1}s: {}",
            v.name(),
            report.max_error(),
            start.elapsed().as_secs_f64(),
            if report.passed() { "PASS" } else { "FAIL" }
        );
        for m in report.failing() {
            failed.push(format!("{}/{}", v.name(), m.module));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} in {}",
            gc.tolerance,
            failed.join(", ")
        )))
    }
}

pub fn cmd_dump_memory(cfg: &RunConfig, model: &Model, samples: &[Sample], index: usize) -> Result<()> {
    if !model.config.variant.memory() {
        return Err(Error::Config(format!("variant {} has no memory", model.config.variant)));
    }
    let sample = samples
        .get(index)
        .ok_or_else(|| Error::Contract(format!("sample {index} out of range ({} samples)", samples.len())))?;
    let dir = out_dir(cfg)?;
    echo_config(cfg, dir)?;
    let (_, trace) = model.trace(sample)?;
    let side = model.config.map;
    let mut cells = String::from("step,stream,x,y,norm\n");
    let mut layers = String::from("step,stream,layer,cells,update_min,update_max,compose_min,compose_max,state_min,state_max,mean_state_norm\n");
    for t in &trace {
        for (k, n) in t.cell_norms.iter().enumerate() {
            cells.push_str(&format!("{},{},{},{},{}\n", t.step, t.stream, k % side, k / side, n));
        }
        for (j, l) in t.layers.iter().enumerate() {
            layers.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                t.step,
                t.stream,
                j,
                l.cells,
                l.update_gate.0,
                l.update_gate.1,
                l.compose_gate.0,
                l.compose_gate.1,
                l.state.0,
                l.state.1,
                l.mean_state_norm
            ));
        }
    }
    write(&dir.join("memory_cells.csv"), &cells)?;
    write(&dir.join("memory_layers.csv"), &layers)?;
    info!("memory trace of sample {} ({} reads) written to {}", sample.id, trace.len(), dir.display());
    Ok(())
}
