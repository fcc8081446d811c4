//! Day pretraining, darkener training against a frozen extractor, and
//! adaptation of the extractor against the frozen darkener.
//!
//! Every step draws its batch order and random maps from streams derived
//! from `(seed, stage, step)`, so a run stopped at step `k` and resumed from
//! its state checkpoint reproduces the uninterrupted run exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{AdaptMode, DarkenerChoice, Settings, StageSettings};
use crate::darken::{Darkener, MappingEstimator};
use crate::data::{batch_indices, Dataset};
use crate::diagnostics::mmd::{mmd, MmdReport};
use crate::error::{Error, Result};
use crate::exposure::{sample_stage1, sample_stage2, stack_maps, ExposureMap};
use crate::losses::{
    byol_loss, color_loss, cross_entropy, exposure_loss, flex_loss, ltv_loss, sim_loss_d, total_loss_d, total_loss_f, DarkenerParts,
    LossRecord, LossWeights,
};
use crate::model::{AdaptationModel, OnlineBinding};
use crate::nn::{Bound, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::{Element, Real, Tensor};

const STAGE_PRETRAIN: u64 = 0;
const STAGE_DARKENER: u64 = 1;
const STAGE_ADAPT: u64 = 2;
const STAGE_ALT_DARKENER: u64 = 3;

/// Append-only JSON-lines log of loss and evaluation records.
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
    last_step: Option<usize>,
    file: Option<std::fs::File>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval: serde_json::Value,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Log backed by `path`. When resuming at `resume_step`, records from
    /// earlier steps are kept and later ones dropped.
    pub fn create(path: &Path, resume_step: Option<usize>) -> Result<Self> {
        let mut log = RunLog::default();
        if let (Some(k), Ok(text)) = (resume_step, std::fs::read_to_string(path)) {
            for line in text.lines() {
                let v: serde_json::Value = serde_json::from_str(line)?;
                let step = v["step"].as_u64().unwrap_or(0) as usize;
                if step < k {
                    log.lines.push(line.to_string());
                    log.last_step = Some(log.last_step.map_or(step, |s: usize| s.max(step)));
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for l in &log.lines {
            writeln!(file, "{l}").map_err(|e| Error::io(path, e))?;
        }
        log.file = Some(file);
        Ok(log)
    }

    fn push(&mut self, step: usize, line: String, strict: bool) -> Result<()> {
        if let Some(last) = self.last_step {
            if step < last || (strict && step == last) {
                return Err(Error::InvalidArgument(format!("run log steps must increase: {step} after {last}")));
            }
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::Io {
                path: PathBuf::from("<run log>"),
                source: e,
            })?;
        }
        self.lines.push(line);
        self.last_step = Some(step);
        Ok(())
    }

    pub fn push_loss(&mut self, rec: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        self.push(rec.step, line, true)
    }

    pub fn push_eval(&mut self, step: usize, eval: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(&EvalRecord {
            step,
            eval: serde_json::to_value(eval)?,
        })?;
        self.push(step, line, false)
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

fn check_finite(rec: &LossRecord) -> Result<()> {
    match rec.non_finite() {
        Some(component) => Err(Error::NonFiniteLoss { component, step: rec.step }),
        None => Ok(()),
    }
}

fn save_adam(ckpt: &mut Checkpoint, prefix: &str, adam: &Adam<Real>, params: &ParamSet<Real>) {
    for (i, (name, _)) in params.iter().enumerate() {
        ckpt.insert(format!("optim/{prefix}/m/{name}"), &adam.m[i]);
        ckpt.insert(format!("optim/{prefix}/v/{name}"), &adam.v[i]);
    }
    ckpt.insert_scalar(format!("optim/{prefix}/t"), adam.t as f64);
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, params: &ParamSet<Real>) -> Result<Adam<Real>> {
    let mut adam = Adam::new(params, AdamConfig::default());
    for (i, (name, _)) in params.iter().enumerate() {
        adam.m[i] = ckpt.require(&format!("optim/{prefix}/m/{name}"))?;
        adam.v[i] = ckpt.require(&format!("optim/{prefix}/v/{name}"))?;
    }
    adam.t = ckpt.scalar(&format!("optim/{prefix}/t"))? as u64;
    Ok(adam)
}

fn lr(stage: &StageSettings, step: usize) -> f64 {
    // Keep the final cosine step strictly positive.
    stage.schedule.lr_at(stage.lr, step).max(stage.lr * 1e-4)
}

fn batch(s: &Settings, data: &Dataset<Real>, stage: u64, step: usize) -> Result<(Tensor<Real>, Vec<usize>)> {
    let idx = batch_indices(data.len(), s.batch_size, seed::derive(&[s.seed, stage]), step);
    if s.augment {
        data.batch_augmented(&idx, &mut seed::rng(&[s.seed, stage, step as u64, 0xF11B]))
    } else {
        data.batch(&idx)
    }
}

/// Mean top-1 accuracy of a prediction against labels, in percent.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

/// Inference-mode features `[N, d]`, computed in chunks.
pub fn features(model: &AdaptationModel<Real>, images: &Tensor<Real>, chunk: usize) -> Result<Tensor<Real>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        parts.push(model.extract(&images.slice_rows(start, len)?)?);
        start += len;
    }
    let d = parts[0].shape()[1];
    let data: Vec<Real> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![n, d], data)
}

pub fn predict(model: &AdaptationModel<Real>, images: &Tensor<Real>, chunk: usize) -> Result<Vec<usize>> {
    let f = features(model, images, chunk)?;
    Ok(model.classify(&f)?.argmax_rows())
}

/// Darken every image with its own compound exposure map drawn from
/// `(seed, index)`.
pub fn synthetic_night(darkener: &Darkener<Real>, images: &Tensor<Real>, s: &Settings, seed_value: u64) -> Result<Tensor<Real>> {
    let sh = images.shape().to_vec();
    let n = sh[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = s.eval_batch.min(n - start);
        let maps: Vec<ExposureMap> = (start..start + len)
            .map(|i| sample_stage2(&mut seed::rng(&[seed_value, i as u64]), sh[2], sh[3], &s.noise))
            .collect();
        parts.push(darkener.apply(&images.slice_rows(start, len)?, &stack_maps(&maps)?)?);
        start += len;
    }
    let data: Vec<Real> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(sh, data)
}

#[derive(Debug, Clone, Serialize)]
pub struct PairMetrics {
    pub mean_day_night_cosine: f64,
    pub mmd: MmdReport,
}

fn rows_f64(t: &Tensor<Real>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Row-paired cosine similarity and MMD² between two feature matrices.
pub fn pair_metrics_from_features(day: &Tensor<Real>, night: &Tensor<Real>) -> Result<PairMetrics> {
    let (a, b) = (rows_f64(day), rows_f64(night));
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired feature sets differ in size".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let (nx, ny) = (x.iter().map(|v| v * v).sum::<f64>().sqrt(), y.iter().map(|v| v * v).sum::<f64>().sqrt());
        if nx <= crate::losses::COLLAPSE_NORM || ny <= crate::losses::COLLAPSE_NORM {
            return Err(Error::Collapse {
                op: "day_night_cosine",
                norm: nx.min(ny),
            });
        }
        total += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
    }
    Ok(PairMetrics {
        mean_day_night_cosine: total / a.len() as f64,
        mmd: mmd(&a, &b)?,
    })
}

pub fn pair_metrics(model: &AdaptationModel<Real>, day: &Tensor<Real>, night: &Tensor<Real>, chunk: usize) -> Result<PairMetrics> {
    pair_metrics_from_features(&features(model, day, chunk)?, &features(model, night, chunk)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub split: String,
    pub n: usize,
    pub top1: f64,
    pub mean_day_night_cosine: Option<f64>,
    pub mmd: Option<f64>,
}

/// Accuracy on `data`; with `paired_night` (same scenes, same order) also
/// the day/night feature cosine and MMD².
pub fn evaluate(model: &AdaptationModel<Real>, split: &str, data: &Dataset<Real>, paired: Option<(&Tensor<Real>, &Tensor<Real>)>, chunk: usize) -> Result<EvalMetrics> {
    let pred = predict(model, &data.images, chunk)?;
    let (cos, m) = match paired {
        Some((day, night)) => {
            let p = pair_metrics(model, day, night, chunk)?;
            (Some(p.mean_day_night_cosine), Some(p.mmd.mmd2))
        }
        None => (None, None),
    };
    Ok(EvalMetrics {
        split: split.to_string(),
        n: data.len(),
        top1: accuracy(&pred, &data.labels),
        mean_day_night_cosine: cos,
        mmd: m,
    })
}

// ---- stage 0: day pretraining ----------------------------------------------

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: AdaptationModel<Real>,
    pub best_val_top1: f64,
    pub first: Option<LossRecord>,
    pub last: Option<LossRecord>,
    /// Set when the run stopped at `train.stop_at`.
    pub state: Option<Checkpoint>,
}

/// Fresh model for `s`. Loading a day checkpoint into it reproduces the
/// in-memory result of [`pretrain_day`], heads included.
pub fn init_model(s: &Settings) -> Result<AdaptationModel<Real>> {
    AdaptationModel::new(s.model.clone(), seed::derive(&[s.seed, 0x0DE1]))
}

pub fn pretrain_day(s: &Settings, train: &Dataset<Real>, val: &Dataset<Real>, resume: Option<&Checkpoint>, log: &mut RunLog) -> Result<PretrainOutcome> {
    let mut model = init_model(s)?;
    let mut adam_e = Adam::new(&model.extractor, AdamConfig::default());
    let mut adam_c = Adam::new(&model.classifier, AdamConfig::default());
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut start = 0;
    if let Some(st) = resume {
        model.load(st)?;
        adam_e = load_adam(st, "extractor", &model.extractor)?;
        adam_c = load_adam(st, "classifier", &model.classifier)?;
        best.load(&st.extract_prefixed("best"))?;
        best_val = st.scalar("state/best_val")?;
        start = st.scalar("state/step")? as usize;
    }
    let (mut first, mut last) = (None, None);
    let total = s.pretrain.steps;
    for step in start..total {
        if s.stop_at == Some(step) {
            let mut st = Checkpoint::new();
            model.save_day(&mut st);
            save_adam(&mut st, "extractor", &adam_e, &model.extractor);
            save_adam(&mut st, "classifier", &adam_c, &model.classifier);
            let mut b = Checkpoint::new();
            best.save_day(&mut b);
            st.insert_prefixed("best", &b);
            st.insert_scalar("state/best_val", best_val);
            st.insert_scalar("state/step", step as f64);
            return Ok(PretrainOutcome {
                model: best,
                best_val_top1: best_val,
                first,
                last,
                state: Some(st),
            });
        }
        let (imgs, labels) = batch(s, train, STAGE_PRETRAIN, step)?;
        let mut g = Graph::new();
        let pe = model.extractor.bind(&mut g, true)?;
        let pc = model.classifier.bind(&mut g, true)?;
        let x = g.constant(imgs)?;
        let (f, stats) = model.features_graph(&mut g, &pe, x, true)?;
        let logits = model.logits_graph(&mut g, &pc, f)?;
        let ce = cross_entropy(&mut g, logits, &labels)?;
        let value = g.value(ce).item() as f64;
        let rec = LossRecord {
            step,
            l_task: Some(value),
            total: value,
            ..Default::default()
        };
        check_finite(&rec)?;
        g.backward(ce)?;
        let rate = lr(&s.pretrain, step);
        let grads = model.extractor.grads(&g, &pe);
    adam_e.step(&mut model.extractor, &grads, rate)?;
        let grads = model.classifier.grads(&g, &pc);
    adam_c.step(&mut model.classifier, &grads, rate)?;
        model.fold_stats(&stats);
        if step % s.log_every == 0 || step + 1 == total {
            log.push_loss(&rec)?;
        }
        if first.is_none() {
            first = Some(rec.clone());
        }
        last = Some(rec);
        if (step + 1) % s.pretrain_eval_every == 0 || step + 1 == total {
            let top1 = accuracy(&predict(&model, &val.images, s.eval_batch)?, &val.labels);
            log.push_eval(step, &serde_json::json!({"split": "val", "top1": top1}))?;
            info!("pretrain step {step}: loss {value:.4}, val top1 {top1:.2}");
            if top1 > best_val {
                best_val = top1;
                best = model.clone();
            }
        }
    }
    if total == 0 {
        best_val = accuracy(&predict(&model, &val.images, s.eval_batch)?, &val.labels);
    }
    // The target branch starts as a copy of the pretrained online branch.
    best.reset_target();
    Ok(PretrainOutcome {
        model: best,
        best_val_top1: best_val,
        first,
        last,
        state: None,
    })
}

// ---- stage 1: darkener ---------------------------------------------------

/// Darkener objective for images `iv` and exposure maps `ev`, with the
/// extractor in inference mode.
#[allow(clippy::too_many_arguments)]
pub fn stage1_graph<T: Element>(
    g: &mut Graph<T>,
    est: &MappingEstimator<T>,
    pd: &Bound,
    frozen: &AdaptationModel<T>,
    pe: &Bound,
    iv: Var,
    ev: Var,
    w: &LossWeights,
) -> Result<(DarkenerParts, Var)> {
    let n = g.shape(iv)[0];
    let (dark, maps) = est.darken_graph(g, pd, iv, ev)?;
    let both = g.concat(&[iv, dark], 0)?;
    let (f, _) = frozen.features_graph(g, pe, both, false)?;
    let fi = g.slice(f, 0, 0, n)?;
    let fd = g.slice(f, 0, n, n)?;
    let parts = DarkenerParts {
        sim: sim_loss_d(g, fi, fd)?,
        c_exp: exposure_loss(g, dark, ev)?,
        col: color_loss(g, dark)?,
        ltv: ltv_loss(g, maps.a, w.alpha_ltv)?,
        flex: flex_loss(g, maps.b)?,
    };
    let total = total_loss_d(g, &parts, w)?;
    Ok((parts, total))
}

#[allow(clippy::too_many_arguments)]
fn stage1_step(
    s: &Settings,
    est: &mut MappingEstimator<Real>,
    adam: &mut Adam<Real>,
    frozen: &AdaptationModel<Real>,
    train: &Dataset<Real>,
    stream: u64,
    step: usize,
    rate: f64,
) -> Result<LossRecord> {
    let (imgs, _) = batch(s, train, stream, step)?;
    let sh = imgs.shape().to_vec();
    let mut rng = seed::rng(&[s.seed, stream, step as u64, 0xE1]);
    let maps: Vec<ExposureMap> = (0..sh[0]).map(|_| sample_stage1(&mut rng, sh[2], sh[3])).collect();
    let e = stack_maps(&maps)?;
    let mut g = Graph::new();
    let pd = est.params.bind(&mut g, true)?;
    let pe = frozen.extractor.bind(&mut g, false)?;
    let iv = g.constant(imgs)?;
    let ev = g.constant(e)?;
    let (parts, total) = stage1_graph(&mut g, est, &pd, frozen, &pe, iv, ev, &s.weights)?;
    let v = |x| g.value(x).item() as f64;
    let rec = LossRecord {
        step,
        l_sim_d: Some(v(parts.sim)),
        l_c_exp: Some(v(parts.c_exp)),
        l_col: Some(v(parts.col)),
        l_ltv: Some(v(parts.ltv)),
        l_flex: Some(v(parts.flex)),
        total: v(total),
        ..Default::default()
    };
    check_finite(&rec)?;
    g.backward(total)?;
    let grads = est.params.grads(&g, &pd);
    adam.step(&mut est.params, &grads, rate)?;
    Ok(rec)
}

#[derive(Debug)]
pub struct DarkenerOutcome {
    pub darkener: MappingEstimator<Real>,
    pub first: Option<LossRecord>,
    pub last: Option<LossRecord>,
    pub state: Option<Checkpoint>,
}

/// The darkener as initialized at the start of stage 1.
pub fn fresh_darkener(s: &Settings) -> Result<MappingEstimator<Real>> {
    MappingEstimator::new(s.darkener.clone(), seed::derive(&[s.seed, 0xDA4C]))
}

/// Train the darkener with the extractor frozen in inference mode.
pub fn train_darkener(s: &Settings, frozen: &AdaptationModel<Real>, train: &Dataset<Real>, resume: Option<&Checkpoint>, log: &mut RunLog) -> Result<DarkenerOutcome> {
    let before = frozen.online_fingerprint();
    let mut est = fresh_darkener(s)?;
    let mut adam = Adam::new(&est.params, AdamConfig::default());
    let mut start = 0;
    if let Some(st) = resume {
        est.load(st)?;
        adam = load_adam(st, "darkener", &est.params)?;
        start = st.scalar("state/step")? as usize;
    }
    let (mut first, mut last) = (None, None);
    let total = s.stage1.steps;
    for step in start..total {
        if s.stop_at == Some(step) {
            let mut st = Checkpoint::new();
            est.save_into(&mut st);
            save_adam(&mut st, "darkener", &adam, &est.params);
            st.insert_scalar("state/step", step as f64);
            return Ok(DarkenerOutcome {
                darkener: est,
                first,
                last,
                state: Some(st),
            });
        }
        let rec = stage1_step(s, &mut est, &mut adam, frozen, train, STAGE_DARKENER, step, lr(&s.stage1, step))?;
        if step % s.log_every == 0 || step + 1 == total {
            log.push_loss(&rec)?;
        }
        if step % 100 == 0 {
            info!(
                "stage1 step {step}: total {:.4} sim {:.4} exp {:.4}",
                rec.total,
                rec.l_sim_d.unwrap_or(f64::NAN),
                rec.l_c_exp.unwrap_or(f64::NAN)
            );
        }
        if first.is_none() {
            first = Some(rec.clone());
        }
        last = Some(rec);
    }
    if frozen.online_fingerprint() != before {
        return Err(Error::FrozenChanged("extractor"));
    }
    Ok(DarkenerOutcome {
        darkener: est,
        first,
        last,
        state: None,
    })
}

/// Day/darkened feature cosine of the frozen model over `images`, each
/// darkened with a stage-1 exposure map drawn from `(seed_value, index)`.
/// Less noisy than the per-batch training value.
pub fn held_out_sim(est: &MappingEstimator<Real>, frozen: &AdaptationModel<Real>, images: &Tensor<Real>, seed_value: u64, chunk: usize) -> Result<f64> {
    let sh = images.shape().to_vec();
    let n = sh[0];
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let maps: Vec<ExposureMap> = (start..start + len)
            .map(|i| sample_stage1(&mut seed::rng(&[seed_value, i as u64]), sh[2], sh[3]))
            .collect();
        let day = images.slice_rows(start, len)?;
        let dark = est.darken_image(&day, &stack_maps(&maps)?)?;
        let mut g = Graph::new();
        let fd = g.constant(frozen.extract(&day)?)?;
        let fn_ = g.constant(frozen.extract(&dark)?)?;
        let sim = sim_loss_d(&mut g, fd, fn_)?;
        total += g.value(sim).item() as f64 * len as f64;
        start += len;
    }
    Ok(total / n as f64)
}

/// Mean `|mean_c(D(I, E)) - E|` over every pixel of `images`, per constant
/// exposure level.
pub fn exposure_fidelity(est: &MappingEstimator<Real>, images: &Tensor<Real>, levels: &[f64], chunk: usize) -> Result<Vec<(f64, f64)>> {
    let sh = images.shape().to_vec();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = Vec::new();
    for &level in levels {
        let mut err = 0.0;
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let e = Tensor::<Real>::full(&[len, 1, h, w], level as Real);
            let d = est.darken_image(&images.slice_rows(start, len)?, &e)?;
            let dd = d.data();
            for b in 0..len {
                for p in 0..h * w {
                    let avg = (0..c).map(|ch| dd[(b * c + ch) * h * w + p] as f64).sum::<f64>() / c as f64;
                    err += (avg - level).abs();
                }
            }
            start += len;
        }
        out.push((level, err / (n * h * w) as f64));
    }
    Ok(out)
}

// ---- stage 2: adaptation ---------------------------------------------------

pub struct AdaptOptim {
    pub extractor: Adam<Real>,
    pub classifier: Adam<Real>,
    pub head_q: Adam<Real>,
    pub head_z: Adam<Real>,
}

impl AdaptOptim {
    pub fn new(m: &AdaptationModel<Real>) -> Self {
        AdaptOptim {
            extractor: Adam::new(&m.extractor, AdamConfig::default()),
            classifier: Adam::new(&m.classifier, AdamConfig::default()),
            head_q: Adam::new(&m.head_q, AdamConfig::default()),
            head_z: Adam::new(&m.head_z, AdamConfig::default()),
        }
    }

    fn save(&self, ckpt: &mut Checkpoint, m: &AdaptationModel<Real>) {
        save_adam(ckpt, "extractor", &self.extractor, &m.extractor);
        save_adam(ckpt, "classifier", &self.classifier, &m.classifier);
        save_adam(ckpt, "head_q", &self.head_q, &m.head_q);
        save_adam(ckpt, "head_z", &self.head_z, &m.head_z);
    }

    fn load(ckpt: &Checkpoint, m: &AdaptationModel<Real>) -> Result<Self> {
        Ok(AdaptOptim {
            extractor: load_adam(ckpt, "extractor", &m.extractor)?,
            classifier: load_adam(ckpt, "classifier", &m.classifier)?,
            head_q: load_adam(ckpt, "head_q", &m.head_q)?,
            head_z: load_adam(ckpt, "head_z", &m.head_z)?,
        })
    }
}

pub struct Stage2Vars<T: Element> {
    pub sim: Var,
    pub task: Var,
    pub total: Var,
    pub stats: Vec<(usize, BatchStats<T>)>,
}

/// Adaptation objective for day images `iv` and their darkened twins `dv`
/// (both constants). The online branch uses batch statistics.
pub fn stage2_graph<T: Element>(
    g: &mut Graph<T>,
    model: &AdaptationModel<T>,
    b: &OnlineBinding,
    iv: Var,
    dv: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Stage2Vars<T>> {
    let n = g.shape(iv)[0];
    let both = g.concat(&[iv, dv], 0)?;
    let (f, stats) = model.features_graph(g, &b.extractor, both, true)?;
    let logits = model.logits_graph(g, &b.classifier, f)?;
    let twice: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let task = cross_entropy(g, logits, &twice)?;
    let pred = model.online_prediction(g, b, f)?;
    let target = model.target_projection(g, both)?;
    // Row i of the day half predicts the target of its darkened twin and
    // vice versa.
    let t_dark = g.slice(target, 0, n, n)?;
    let t_day = g.slice(target, 0, 0, n)?;
    let swapped = g.concat(&[t_dark, t_day], 0)?;
    let byol = byol_loss(g, pred, swapped)?;
    let sim = g.scale(byol, T::from_f64_lossy(2.0))?;
    let total = total_loss_f(g, sim, task, w)?;
    Ok(Stage2Vars { sim, task, total, stats })
}

/// One adaptation step: forward, backward, optimizer step, then EMA.
pub fn stage2_step(
    s: &Settings,
    model: &mut AdaptationModel<Real>,
    opt: &mut AdaptOptim,
    darkener: &Darkener<Real>,
    train: &Dataset<Real>,
    step: usize,
    rate: f64,
) -> Result<LossRecord> {
    let (imgs, labels) = batch(s, train, STAGE_ADAPT, step)?;
    let sh = imgs.shape().to_vec();
    let n = sh[0];
    let mut rng = seed::rng(&[s.seed, STAGE_ADAPT, step as u64, 0xE2]);
    let maps: Vec<ExposureMap> = (0..n).map(|_| sample_stage2(&mut rng, sh[2], sh[3], &s.noise)).collect();
    let dark = darkener.apply(&imgs, &stack_maps(&maps)?)?;
    let mut g = Graph::new();
    let b = model.bind_online(&mut g, true)?;
    let iv = g.constant(imgs)?;
    let dv = g.constant(dark)?;
    let out = stage2_graph(&mut g, model, &b, iv, dv, &labels, &s.weights)?;
    let (sim, task, total, stats) = (out.sim, out.task, out.total, out.stats);
    let v = |x| g.value(x).item() as f64;
    let rec = LossRecord {
        step,
        l_sim_f: Some(v(sim)),
        l_task: Some(v(task)),
        total: v(total),
        ..Default::default()
    };
    check_finite(&rec)?;
    g.backward(total)?;
    let grads = model.extractor.grads(&g, &b.extractor);
    opt.extractor.step(&mut model.extractor, &grads, rate)?;
    let grads = model.classifier.grads(&g, &b.classifier);
    opt.classifier.step(&mut model.classifier, &grads, rate)?;
    let grads = model.head_q.grads(&g, &b.q);
    opt.head_q.step(&mut model.head_q, &grads, rate)?;
    let grads = model.head_z.grads(&g, &b.z);
    opt.head_z.step(&mut model.head_z, &grads, rate)?;
    model.fold_stats(&stats);
    model.ema_update()?;
    Ok(rec)
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub model: AdaptationModel<Real>,
    /// The darkener after the stage; only alternating mode changes it.
    pub darkener: Darkener<Real>,
    pub first: Option<LossRecord>,
    pub last: Option<LossRecord>,
    pub state: Option<Checkpoint>,
}

/// Build the stage-2 darkener from settings and an optional trained
/// estimator checkpoint.
pub fn make_darkener(s: &Settings, ckpt: Option<&Checkpoint>) -> Result<Darkener<Real>> {
    match s.darkener_choice {
        DarkenerChoice::Heuristic(h) => Ok(Darkener::Heuristic(h)),
        DarkenerChoice::Curve(_) => {
            let ckpt = ckpt.ok_or_else(|| Error::InvalidArgument("a learned darkener needs paths.darkener_ckpt".into()))?;
            let mut est = MappingEstimator::<Real>::uninitialized(s.darkener.clone())?;
            est.load(ckpt)?;
            Ok(Darkener::Learned(est))
        }
    }
}

/// Adapt `model` (initialized from the day checkpoint) against `darkener`.
pub fn adapt(s: &Settings, mut model: AdaptationModel<Real>, mut darkener: Darkener<Real>, train: &Dataset<Real>, resume: Option<&Checkpoint>, log: &mut RunLog) -> Result<AdaptOutcome> {
    let mut opt = AdaptOptim::new(&model);
    let mut dk_adam = match &darkener {
        Darkener::Learned(est) => Some(Adam::new(&est.params, AdamConfig::default())),
        Darkener::Heuristic(_) => None,
    };
    let mut start = 0;
    if let Some(st) = resume {
        model.load(st)?;
        opt = AdaptOptim::load(st, &model)?;
        start = st.scalar("state/step")? as usize;
        if let (AdaptMode::Alternating { .. }, Darkener::Learned(est)) = (s.mode, &mut darkener) {
            est.load(st)?;
            dk_adam = Some(load_adam(st, "darkener", &est.params)?);
        }
    }
    let darkener_before = darkener.fingerprint();
    let (mut first, mut last) = (None, None);
    let total = s.stage2.steps;
    for step in start..total {
        if s.stop_at == Some(step) {
            let mut st = Checkpoint::new();
            model.save_into(&mut st);
            opt.save(&mut st, &model);
            if let (AdaptMode::Alternating { .. }, Darkener::Learned(est), Some(a)) = (s.mode, &darkener, &dk_adam) {
                est.save_into(&mut st);
                save_adam(&mut st, "darkener", a, &est.params);
            }
            st.insert_scalar("state/step", step as f64);
            return Ok(AdaptOutcome {
                model,
                darkener,
                first,
                last,
                state: Some(st),
            });
        }
        let darkener_turn = match s.mode {
            AdaptMode::Alternating { block } => (step / block) % 2 == 0 && matches!(darkener, Darkener::Learned(_)),
            AdaptMode::Stepwise => false,
        };
        let rec = if darkener_turn {
            let Darkener::Learned(est) = &mut darkener else { unreachable!() };
            let adam = dk_adam.as_mut().expect("learned darkener has an optimizer");
            stage1_step(s, est, adam, &model, train, STAGE_ALT_DARKENER, step, lr(&s.stage1, step))?
        } else {
            stage2_step(s, &mut model, &mut opt, &darkener, train, step, lr(&s.stage2, step))?
        };
        if step % s.log_every == 0 || step + 1 == total {
            log.push_loss(&rec)?;
        }
        if step % 100 == 0 {
            info!("stage2 step {step}: total {:.4}", rec.total);
        }
        if first.is_none() {
            first = Some(rec.clone());
        }
        last = Some(rec);
    }
    if s.mode == AdaptMode::Stepwise && darkener.fingerprint() != darkener_before {
        return Err(Error::FrozenChanged("darkener"));
    }
    Ok(AdaptOutcome {
        model,
        darkener,
        first,
        last,
        state: None,
    })
}
