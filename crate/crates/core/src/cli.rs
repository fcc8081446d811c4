//! Subcommands behind the `duskforge` binary. Each returns a JSON summary;
//! the binary prints it and maps errors to exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DarkenerChoice, Settings};
use crate::darken::{Darkener, MappingEstimator};
use crate::data::shapescenes::generate;
use crate::data::{load_image, save_image, Dataset, DatasetManifest};
use crate::diagnostics::{mmd::mmd, registry};
use crate::error::{Error, Result};
use crate::model::AdaptationModel;
use crate::tensor::{Real, Tensor};
use crate::train::{self, RunLog};

/// Exposure levels reported after darkener training.
pub const FIDELITY_LEVELS: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];

#[derive(Debug, Parser)]
#[command(name = "duskforge", version, about = "Zero-shot day-to-night adaptation on a desk-scale toy benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set stage1.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural day/night dataset.
    GenerateData(ConfigArgs),
    /// Train extractor and classifier on daytime images.
    Pretrain(ConfigArgs),
    /// Train the darkener against the frozen day model.
    TrainDarkener(ConfigArgs),
    /// Adapt the day model against the frozen darkener.
    Adapt(ConfigArgs),
    /// Accuracy and day/night feature metrics for a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test_night")]
        split: String,
    },
    /// Darken one image.
    Darken {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        /// A constant level in [0, 1] or a PPM whose channel average is the map.
        #[arg(long)]
        exposure: String,
        /// Darkener checkpoint; not needed for heuristic families.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every registered op, loss and objective.
    Gradcheck(ConfigArgs),
    /// MMD² between the features of two splits.
    MmdReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test_day")]
        split_a: String,
        #[arg(long, default_value = "test_night")]
        split_b: String,
    },
}

pub fn load_split(root: &Path, split: &str) -> Result<Dataset<Real>> {
    let m = DatasetManifest::load(&root.join(format!("{split}.manifest")))?;
    if m.split.as_deref().is_some_and(|s| s != split) {
        return Err(Error::Dataset(format!("manifest for {split} is tagged {:?}", m.split)));
    }
    Dataset::load(&m)
}

fn resolve(a: &ConfigArgs) -> Result<(Config, Settings)> {
    let cfg = Config::resolve(a.config.as_deref(), &a.overrides)?;
    let s = cfg.settings()?;
    Ok((cfg, s))
}

fn require_path(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("{key} must be set")))
}

pub fn load_model(s: &Settings, path: &Path) -> Result<AdaptationModel<Real>> {
    let mut m = train::init_model(s)?;
    m.load(&Checkpoint::load(path)?)?;
    Ok(m)
}

fn load_resume(s: &Settings) -> Result<Option<Checkpoint>> {
    s.resume.as_deref().map(Checkpoint::load).transpose()
}

fn record(rec: &Option<crate::losses::LossRecord>) -> Value {
    serde_json::to_value(rec).unwrap_or(Value::Null)
}

fn save_state(s: &Settings, stage: &str, state: &Checkpoint) -> Result<Value> {
    let path = s.out_dir.join(format!("{stage}.state.ckpt"));
    state.save(&path)?;
    Ok(json!({"stopped_at": s.stop_at, "state": path}))
}

pub fn generate_data(a: &ConfigArgs) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    let (_, summaries) = generate(&s.scenes, s.seed, &s.data_root)?;
    cfg.write_resolved(&s.data_root)?;
    Ok(json!({"root": s.data_root, "splits": summaries}))
}

pub fn pretrain(a: &ConfigArgs) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    cfg.write_resolved(&s.out_dir)?;
    let trainset = load_split(&s.data_root, "train")?;
    let val = load_split(&s.data_root, "val")?;
    let resume = load_resume(&s)?;
    let start = resume.as_ref().map(|r| r.scalar("state/step")).transpose()?.map(|v| v as usize);
    let mut log = RunLog::create(&s.out_dir.join("pretrain.jsonl"), start)?;
    let out = train::pretrain_day(&s, &trainset, &val, resume.as_ref(), &mut log)?;
    if let Some(state) = &out.state {
        return save_state(&s, "pretrain", state);
    }
    let mut ckpt = Checkpoint::new();
    out.model.save_day(&mut ckpt);
    let path = s.out_dir.join("day.ckpt");
    ckpt.save(&path)?;
    Ok(json!({
        "checkpoint": path,
        "best_val_top1": out.best_val_top1,
        "first": record(&out.first),
        "last": record(&out.last),
    }))
}

pub fn train_darkener(a: &ConfigArgs) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    if let DarkenerChoice::Heuristic(_) = s.darkener_choice {
        return Err(Error::Config("curve.family names a heuristic; nothing to train".into()));
    }
    cfg.write_resolved(&s.out_dir)?;
    let day = load_model(&s, &require_path(&s.day_ckpt, "paths.day_ckpt")?)?;
    let trainset = load_split(&s.data_root, "train")?;
    let resume = load_resume(&s)?;
    let start = resume.as_ref().map(|r| r.scalar("state/step")).transpose()?.map(|v| v as usize);
    let mut log = RunLog::create(&s.out_dir.join("train_darkener.jsonl"), start)?;
    let out = train::train_darkener(&s, &day, &trainset, resume.as_ref(), &mut log)?;
    if let Some(state) = &out.state {
        return save_state(&s, "train_darkener", state);
    }
    let mut ckpt = Checkpoint::new();
    out.darkener.save_into(&mut ckpt);
    let path = s.out_dir.join("darkener.ckpt");
    ckpt.save(&path)?;
    let val = load_split(&s.data_root, "val")?;
    let fidelity = train::exposure_fidelity(&out.darkener, &val.images, &FIDELITY_LEVELS, s.eval_batch)?;
    let sim_initial = train::held_out_sim(&train::fresh_darkener(&s)?, &day, &val.images, s.eval_seed, s.eval_batch)?;
    let sim_final = train::held_out_sim(&out.darkener, &day, &val.images, s.eval_seed, s.eval_batch)?;
    let sim = json!({"initial": sim_initial, "final": sim_final, "ratio": sim_final / sim_initial});
    log.push_eval(s.stage1.steps, &json!({"split": "val", "exposure_fidelity": fidelity, "held_out_sim": sim}))?;
    Ok(json!({
        "checkpoint": path,
        "first": record(&out.first),
        "last": record(&out.last),
        "held_out_sim": sim,
        "exposure_fidelity": fidelity.iter().map(|(e, err)| json!({"exposure": e, "mean_abs_error": err})).collect::<Vec<_>>(),
    }))
}

pub fn stage2_darkener(s: &Settings) -> Result<Darkener<Real>> {
    let ckpt = s.darkener_ckpt.as_deref().map(Checkpoint::load).transpose()?;
    train::make_darkener(s, ckpt.as_ref())
}

pub fn adapt(a: &ConfigArgs) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    cfg.write_resolved(&s.out_dir)?;
    let model = load_model(&s, &require_path(&s.day_ckpt, "paths.day_ckpt")?)?;
    let darkener = stage2_darkener(&s)?;
    let trainset = load_split(&s.data_root, "train")?;
    let resume = load_resume(&s)?;
    let start = resume.as_ref().map(|r| r.scalar("state/step")).transpose()?.map(|v| v as usize);
    let mut log = RunLog::create(&s.out_dir.join("adapt.jsonl"), start)?;
    let out = train::adapt(&s, model, darkener, &trainset, resume.as_ref(), &mut log)?;
    if let Some(state) = &out.state {
        return save_state(&s, "adapt", state);
    }
    let mut ckpt = Checkpoint::new();
    out.model.save_into(&mut ckpt);
    let path = s.out_dir.join("adapted.ckpt");
    ckpt.save(&path)?;
    Ok(json!({"checkpoint": path, "first": record(&out.first), "last": record(&out.last)}))
}

pub fn evaluate(a: &ConfigArgs, checkpoint: &Path, split: &str) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    cfg.write_resolved(&s.out_dir)?;
    let model = load_model(&s, checkpoint)?;
    let data = load_split(&s.data_root, split)?;
    let day_pair = if split == "test_night" {
        Some(load_split(&s.data_root, "test_day")?)
    } else {
        None
    };
    let metrics = train::evaluate(&model, split, &data, day_pair.as_ref().map(|d| (&d.images, &data.images)), s.eval_batch)?;
    let mut out = serde_json::to_value(&metrics)?;
    // With a darkener available, also report against synthetic night.
    if s.darkener_ckpt.is_some() || matches!(s.darkener_choice, DarkenerChoice::Heuristic(_)) {
        let darkener = stage2_darkener(&s)?;
        // Darken day images: the paired day split when evaluating night.
        let day = day_pair.as_ref().unwrap_or(&data);
        let night = train::synthetic_night(&darkener, &day.images, &s, s.eval_seed)?;
        let pm = train::pair_metrics(&model, &day.images, &night, s.eval_batch)?;
        let top1 = train::accuracy(&train::predict(&model, &night, s.eval_batch)?, &day.labels);
        out["synthetic_night"] = json!({
            "top1": top1,
            "mean_day_night_cosine": pm.mean_day_night_cosine,
            "mmd": pm.mmd.mmd2,
        });
    }
    let mut log = RunLog::create(&s.out_dir.join(format!("evaluate_{split}.jsonl")), None)?;
    log.push_eval(0, &out)?;
    Ok(out)
}

fn parse_exposure(arg: &str, h: usize, w: usize) -> Result<Tensor<Real>> {
    if let Ok(level) = arg.parse::<f64>() {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::InvalidArgument(format!("exposure {level} outside [0, 1]")));
        }
        return Ok(Tensor::full(&[1, 1, h, w], level as Real));
    }
    let map: Tensor<Real> = load_image(Path::new(arg))?;
    if map.shape()[1..] != [h, w] {
        return Err(Error::InvalidArgument(format!("exposure map is {:?}, image is {h}x{w}", &map.shape()[1..])));
    }
    let d = map.data();
    let plane = h * w;
    let avg: Vec<Real> = (0..plane).map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0).collect();
    Tensor::new(vec![1, 1, h, w], avg)
}

pub fn darken(a: &ConfigArgs, input: &Path, exposure: &str, checkpoint: Option<&Path>, output: &Path) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    let image: Tensor<Real> = load_image(input)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let e = parse_exposure(exposure, h, w)?;
    let darkener = match s.darkener_choice {
        DarkenerChoice::Heuristic(hh) => Darkener::Heuristic(hh),
        DarkenerChoice::Curve(_) => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .or_else(|| s.darkener_ckpt.clone())
                .ok_or_else(|| Error::InvalidArgument("--checkpoint is required for a learned darkener".into()))?;
            let mut est = MappingEstimator::<Real>::uninitialized(s.darkener.clone())?;
            est.load(&Checkpoint::load(&path)?)?;
            Darkener::Learned(est)
        }
    };
    let batch = image.reshape(&[1, 3, h, w])?;
    let out = darkener.apply(&batch, &e)?.reshape(&[3, h, w])?;
    save_image(&out, output)?;
    let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.write_resolved(dir)?;
    Ok(json!({
        "output": output,
        "input_mean": image.mean() as f64,
        "output_mean": out.mean() as f64,
        "exposure_mean": e.mean() as f64,
    }))
}

pub fn gradcheck(a: &ConfigArgs) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    cfg.write_resolved(&s.out_dir)?;
    let reports = registry::run_all()?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{}[{}]", r.name, r.dtype)).collect();
    let out = json!({"passed": failed.is_empty(), "failed": failed, "checks": reports});
    if !failed.is_empty() {
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Err(Error::GradcheckFailed(failed.join(", ")));
    }
    Ok(out)
}

pub fn mmd_report(a: &ConfigArgs, checkpoint: &Path, split_a: &str, split_b: &str) -> Result<Value> {
    let (cfg, s) = resolve(a)?;
    cfg.write_resolved(&s.out_dir)?;
    let model = load_model(&s, checkpoint)?;
    let fa = train::features(&model, &load_split(&s.data_root, split_a)?.images, s.eval_batch)?;
    let fb = train::features(&model, &load_split(&s.data_root, split_b)?.images, s.eval_batch)?;
    let rows = |t: &Tensor<Real>| -> Vec<Vec<f64>> {
        let d = t.shape()[1];
        t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    let report = mmd(&rows(&fa), &rows(&fb))?;
    Ok(json!({"split_a": split_a, "split_b": split_b, "report": report}))
}

pub fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::TrainDarkener(a) => train_darkener(a),
        Command::Adapt(a) => adapt(a),
        Command::Evaluate { cfg, checkpoint, split } => evaluate(cfg, checkpoint, split),
        Command::Darken {
            cfg,
            input,
            exposure,
            checkpoint,
            output,
        } => darken(cfg, input, exposure, checkpoint.as_deref(), output),
        Command::Gradcheck(a) => gradcheck(a),
        Command::MmdReport {
            cfg,
            checkpoint,
            split_a,
            split_b,
        } => mmd_report(cfg, checkpoint, split_a, split_b),
    }
}
