//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files and `--set` overrides may only name known
//! keys; unknown ones are reported together. The fully resolved table is
//! written next to run outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::darken::{CurveFamily, Heuristic, MappingEstimatorSpec, B_MIN};
use crate::data::shapescenes::{NightSpec, ShapeSceneSpec};
use crate::error::{Error, Result};
use crate::exposure::NoiseSpec;
use crate::losses::LossWeights;
use crate::model::ModelSpec;
use crate::optim::Schedule;

/// `(key, default)` for every recognized key.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.root", "data/shapescenes"),
    ("data.num_classes", "10"),
    ("data.image_size", "32"),
    ("data.train_per_class", "200"),
    ("data.val_per_class", "40"),
    ("data.test_per_class", "50"),
    ("data.augment", "false"),
    ("model.widths", "16,32,64"),
    ("model.head_hidden", "128"),
    ("model.head_out", "64"),
    ("model.tau", "0.99"),
    ("darkener.widths", "16,16,16,16"),
    ("darkener.b_min", "0.05"),
    ("darkener.per_iteration_maps", "false"),
    ("curve.family", "iterative_quadratic"),
    ("curve.iterations", "8"),
    ("curve.brightness_factor", "0.15"),
    ("curve.gamma", "3.0"),
    ("loss.lambda_sim_d", "1"),
    ("loss.lambda_c_exp", "10"),
    ("loss.lambda_col", "5"),
    ("loss.lambda_ltv", "1"),
    ("loss.lambda_flex", "1"),
    ("loss.lambda_sim_f", "1"),
    ("loss.lambda_task", "1"),
    ("loss.alpha_ltv", "0.1"),
    ("exposure.sigma_pixel", "0.01"),
    ("exposure.sigma_patch", "0.03"),
    ("exposure.patch_size", "8"),
    ("exposure.floor", "0.01"),
    ("train.batch_size", "32"),
    ("train.stop_at", ""),
    ("train.log_every", "1"),
    ("pretrain.steps", "1500"),
    ("pretrain.lr", "1e-3"),
    ("pretrain.schedule", "cosine"),
    ("pretrain.eval_every", "250"),
    ("stage1.steps", "2000"),
    ("stage1.lr", "1e-3"),
    ("stage1.schedule", "cosine"),
    ("stage2.steps", "4000"),
    ("stage2.lr", "1e-4"),
    ("stage2.schedule", "cosine"),
    ("stage2.mode", "stepwise"),
    ("stage2.block", "100"),
    ("eval.batch_size", "128"),
    ("eval.seed", "12345"),
    ("paths.out", "runs/default"),
    ("paths.day_ckpt", ""),
    ("paths.darkener_ckpt", ""),
    ("paths.resume", ""),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply(parse_pairs(&text)?)?;
        }
        let mut pairs = Vec::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply(parse_pairs(text)?)?;
        Ok(cfg)
    }

    fn apply(&mut self, pairs: Vec<(String, String)>) -> Result<()> {
        let unknown: Vec<String> = pairs.iter().filter(|(k, _)| !self.values.contains_key(k)).map(|(k, _)| k.clone()).collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        for (k, v) in pairs {
            self.values.insert(k, v);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        self.apply(vec![(key.to_string(), value.into())])
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved.conf");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key);
        raw.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list entry {s:?}"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn optional_usize(&self, key: &str) -> Result<Option<usize>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.usize(key).map(Some)
        }
    }

    fn schedule(&self, key: &str, steps: usize) -> Result<Schedule> {
        match self.get(key) {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine { total: steps }),
            other => Err(Error::Config(format!("{key}: unknown schedule {other:?}"))),
        }
    }

    pub fn settings(&self) -> Result<Settings> {
        let family = match self.get("curve.family") {
            "iterative_quadratic" => DarkenerChoice::Curve(CurveFamily::IterativeQuadratic {
                iterations: self.usize("curve.iterations")?,
            }),
            "gamma_curve" => DarkenerChoice::Curve(CurveFamily::Gamma),
            "reciprocal_curve" => DarkenerChoice::Curve(CurveFamily::Reciprocal),
            "brightness" => DarkenerChoice::Heuristic(Heuristic::Brightness {
                factor: self.f64("curve.brightness_factor")?,
            }),
            "gamma_correction" => DarkenerChoice::Heuristic(Heuristic::GammaCorrection {
                gamma: self.f64("curve.gamma")?,
            }),
            other => return Err(Error::Config(format!("curve.family: unknown family {other:?}"))),
        };
        let image_size = self.usize("data.image_size")?;
        let num_classes = self.usize("data.num_classes")?;
        let weights = LossWeights {
            lambda_sim_d: self.f64("loss.lambda_sim_d")?,
            lambda_c_exp: self.f64("loss.lambda_c_exp")?,
            lambda_col: self.f64("loss.lambda_col")?,
            lambda_ltv: self.f64("loss.lambda_ltv")?,
            lambda_flex: self.f64("loss.lambda_flex")?,
            lambda_sim_f: self.f64("loss.lambda_sim_f")?,
            lambda_task: self.f64("loss.lambda_task")?,
            alpha_ltv: self.f64("loss.alpha_ltv")?,
        };
        weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        let noise = NoiseSpec {
            sigma_pixel: self.f64("exposure.sigma_pixel")?,
            sigma_patch: self.f64("exposure.sigma_patch")?,
            patch_size: self.usize("exposure.patch_size")?,
            floor: self.f64("exposure.floor")?,
        };
        noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        let model = ModelSpec {
            in_channels: 3,
            image_size,
            widths: self.usize_list("model.widths")?,
            num_classes,
            head_hidden: self.usize("model.head_hidden")?,
            head_out: self.usize("model.head_out")?,
            tau: self.f64("model.tau")?,
        };
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let curve = match family {
            DarkenerChoice::Curve(c) => c,
            DarkenerChoice::Heuristic(_) => CurveFamily::default(),
        };
        let darkener = MappingEstimatorSpec {
            widths: self.usize_list("darkener.widths")?,
            kernel: 3,
            image_channels: 3,
            b_min: self.f64("darkener.b_min")?,
            family: curve,
            per_iteration_maps: self.bool("darkener.per_iteration_maps")?,
        };
        if !(darkener.b_min > 0.0 && darkener.b_min < 1.0) {
            return Err(Error::Config(format!("darkener.b_min must be in (0, 1), default {B_MIN}")));
        }
        let stage = |prefix: &str| -> Result<StageSettings> {
            let steps = self.usize(&format!("{prefix}.steps"))?;
            let lr = self.f64(&format!("{prefix}.lr"))?;
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{prefix}.lr must be > 0")));
            }
            Ok(StageSettings {
                steps,
                lr,
                schedule: self.schedule(&format!("{prefix}.schedule"), steps)?,
            })
        };
        let mode = match self.get("stage2.mode") {
            "stepwise" => AdaptMode::Stepwise,
            "alternating" => AdaptMode::Alternating {
                block: self.usize("stage2.block")?.max(1),
            },
            other => return Err(Error::Config(format!("stage2.mode: unknown mode {other:?}"))),
        };
        let batch_size = self.usize("train.batch_size")?;
        if batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        Ok(Settings {
            seed: self.u64("seed")?,
            data_root: PathBuf::from(self.get("data.root")),
            scenes: ShapeSceneSpec {
                num_classes,
                image_size,
                train_per_class: self.usize("data.train_per_class")?,
                val_per_class: self.usize("data.val_per_class")?,
                test_per_class: self.usize("data.test_per_class")?,
                night: NightSpec::default(),
            },
            augment: self.bool("data.augment")?,
            model,
            darkener,
            darkener_choice: family,
            weights,
            noise,
            batch_size,
            stop_at: self.optional_usize("train.stop_at")?,
            log_every: self.usize("train.log_every")?.max(1),
            pretrain: stage("pretrain")?,
            pretrain_eval_every: self.usize("pretrain.eval_every")?.max(1),
            stage1: stage("stage1")?,
            stage2: stage("stage2")?,
            mode,
            eval_batch: self.usize("eval.batch_size")?.max(1),
            eval_seed: self.u64("eval.seed")?,
            out_dir: PathBuf::from(self.get("paths.out")),
            day_ckpt: self.path("paths.day_ckpt"),
            darkener_ckpt: self.path("paths.darkener_ckpt"),
            resume: self.path("paths.resume"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DarkenerChoice {
    Curve(CurveFamily),
    Heuristic(Heuristic),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdaptMode {
    Stepwise,
    /// Interleave blocks of darkener and extractor updates.
    Alternating { block: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
}

/// Typed view of a resolved [`Config`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub data_root: PathBuf,
    pub scenes: ShapeSceneSpec,
    pub augment: bool,
    pub model: ModelSpec,
    pub darkener: MappingEstimatorSpec,
    pub darkener_choice: DarkenerChoice,
    pub weights: LossWeights,
    pub noise: NoiseSpec,
    pub batch_size: usize,
    pub stop_at: Option<usize>,
    pub log_every: usize,
    pub pretrain: StageSettings,
    pub pretrain_eval_every: usize,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub mode: AdaptMode,
    pub eval_batch: usize,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
    pub day_ckpt: Option<PathBuf>,
    pub darkener_ckpt: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}
