//! Every differentiable op, loss, and the two stage objectives, each with a
//! small fixed input set for finite-difference checking.

use crate::autodiff::{Conv2dOpts, Graph, Var};
use crate::darken::{curve, darken_graph, CurveFamily, MapVars, MappingEstimator, MappingEstimatorSpec};
use crate::diagnostics::gradcheck::{check, FnObjective, GradcheckOpts, GradcheckReport};
use crate::error::Result;
use crate::losses::{byol_loss, color_loss, cross_entropy, exposure_loss, flex_loss, ltv_loss, sim_loss_d, total_loss_f, LossWeights};
use crate::model::{AdaptationModel, ModelSpec};
use crate::nn::{Bound, ParamSet};
use crate::objective;
use crate::seed;
use crate::tensor::{numel, Element, Tensor};
use crate::train::{stage1_graph, stage2_graph};

pub struct Entry {
    pub kind: &'static str,
    pub objective: FnObjective,
    pub inputs: Vec<Tensor<f64>>,
}

/// Uniform values in `[lo, hi)` from a fixed stream.
fn uniform(shape: &[usize], lo: f64, hi: f64, stream: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = seed::rng(&[0x6C4E, stream]);
    let v: Vec<f64> = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape matches data")
}

fn constant<T: Element>(g: &mut Graph<T>, t: &Tensor<f64>) -> Result<Var> {
    g.constant(t.cast())
}

/// `sum(y * W)` with fixed weights, so every output element matters.
fn weigh<T: Element>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let w = uniform(g.shape(y), -1.0, 1.0, 0xFEED);
    let wv = constant(g, &w)?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

macro_rules! unary {
    ($fname:ident, |$g:ident, $x:ident| $body:expr) => {
        fn $fname<T: Element>($g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
            let $x = v[0];
            let y = $body?;
            weigh($g, y)
        }
    };
}

macro_rules! binary {
    ($fname:ident, $method:ident) => {
        fn $fname<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
            let y = g.$method(v[0], v[1])?;
            weigh(g, y)
        }
    };
}

binary!(op_add, add);
binary!(op_sub, sub);
binary!(op_mul, mul);
binary!(op_div, div);
binary!(op_pow, pow);
binary!(op_matmul, matmul);
unary!(op_pow_scalar, |g, x| g.pow_scalar(x, T::from_f64_lossy(1.7)));
unary!(op_square, |g, x| g.square(x));
unary!(op_scale, |g, x| g.scale(x, T::from_f64_lossy(-2.5)));
unary!(op_neg, |g, x| g.neg(x));
unary!(op_add_scalar, |g, x| g.add_scalar(x, T::from_f64_lossy(0.3)));
unary!(op_rsub_scalar, |g, x| g.rsub_scalar(T::one(), x));
unary!(op_exp, |g, x| g.exp(x));
unary!(op_ln, |g, x| g.ln(x));
unary!(op_sqrt, |g, x| g.sqrt(x));
unary!(op_sigmoid, |g, x| g.sigmoid(x));
unary!(op_relu, |g, x| g.relu(x));
unary!(op_abs, |g, x| g.abs(x));
unary!(op_clamp, |g, x| g.clamp(x, T::from_f64_lossy(-0.3), T::from_f64_lossy(0.4)));
unary!(op_max_scalar, |g, x| g.max_scalar(x, T::from_f64_lossy(0.1)));
unary!(op_min_scalar, |g, x| g.min_scalar(x, T::from_f64_lossy(0.1)));
unary!(op_avg_pool2d, |g, x| g.avg_pool2d(x, 2));
unary!(op_sum_axes, |g, x| g.sum_axes(x, &[0, 2], true));
unary!(op_mean_axes, |g, x| g.mean_axes(x, &[1], false));
unary!(op_l2norm, |g, x| g.l2norm(x));
unary!(op_log_softmax, |g, x| g.log_softmax(x));
unary!(op_broadcast_to, |g, x| g.broadcast_to(x, &[3, 2, 4]));
unary!(op_reshape, |g, x| g.reshape(x, &[4, 3]));
unary!(op_slice, |g, x| g.slice(x, 1, 1, 2));

fn op_concat<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.concat(&[v[0], v[1]], 1)?;
    weigh(g, y)
}

fn op_conv2d<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts { stride: 1, padding: 1 })?;
    weigh(g, y)
}

fn op_conv2d_strided<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], None, Conv2dOpts { stride: 2, padding: 0 })?;
    weigh(g, y)
}

fn op_batch_norm_train<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let (y, _) = g.batch_norm(v[0], v[1], v[2], None, T::from_f64_lossy(1e-5))?;
    weigh(g, y)
}

fn op_batch_norm_eval<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let mean = [T::from_f64_lossy(0.1), T::from_f64_lossy(-0.2)];
    let var = [T::from_f64_lossy(0.5), T::from_f64_lossy(1.5)];
    let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), T::from_f64_lossy(1e-5))?;
    weigh(g, y)
}

fn family_curve<T: Element>(g: &mut Graph<T>, v: &[Var], family: CurveFamily) -> Result<Var> {
    let y = curve(g, v[0], v[1], family)?;
    weigh(g, y)
}

fn op_curve_quadratic<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    family_curve(g, v, CurveFamily::IterativeQuadratic { iterations: 8 })
}

fn op_curve_gamma<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    family_curve(g, v, CurveFamily::Gamma)
}

fn op_curve_reciprocal<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    family_curve(g, v, CurveFamily::Reciprocal)
}

fn op_darken<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = darken_graph(g, v[0], MapVars { a: v[1], b: v[2] }, CurveFamily::default())?;
    weigh(g, y)
}

fn loss_sim_d<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    sim_loss_d(g, v[0], v[1])
}

fn loss_exposure<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    exposure_loss(g, v[0], v[1])
}

fn loss_ltv<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    ltv_loss(g, v[0], 0.1)
}

fn loss_flex<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    flex_loss(g, v[0])
}

fn loss_color<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    color_loss(g, v[0])
}

fn loss_byol<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let target = constant(g, &uniform(&[3, 8], -1.0, 1.0, 77))?;
    byol_loss(g, v[0], target)
}

fn loss_cross_entropy<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    cross_entropy(g, v[0], &[1, 0, 2])
}

fn loss_total_f<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let target = constant(g, &uniform(&[3, 8], -1.0, 1.0, 78))?;
    let sim = byol_loss(g, v[0], target)?;
    let task = cross_entropy(g, v[1], &[2, 2, 0])?;
    total_loss_f(g, sim, task, &LossWeights::default())
}

fn tiny_model_spec() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        widths: vec![4, 6],
        num_classes: 3,
        head_hidden: 8,
        head_out: 5,
        ..Default::default()
    }
}

fn tiny_darkener_spec() -> MappingEstimatorSpec {
    MappingEstimatorSpec {
        widths: vec![4, 4],
        ..Default::default()
    }
}

/// Replace the bound handle of parameter `name` with `var`.
fn substitute<T: Element>(bound: &mut Bound, set: &ParamSet<T>, name: &str, var: Var) {
    let i = set.iter().position(|(n, _)| n == name).expect("registered parameter name");
    bound.vars[i] = var;
}

/// Stage-1 objective w.r.t. the image and both darkener output heads.
fn composite_stage1<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let est = MappingEstimator::<T>::new(tiny_darkener_spec(), 11)?;
    let model = AdaptationModel::<T>::new(tiny_model_spec(), 12)?;
    let mut pd = est.params.bind(g, false)?;
    substitute(&mut pd, &est.params, "head_a.weight", v[1]);
    substitute(&mut pd, &est.params, "head_b.weight", v[2]);
    let pe = model.extractor.bind(g, false)?;
    let ev = constant(g, &Tensor::full(&[1, 1, 8, 8], 0.2))?;
    let (_, total) = stage1_graph(g, &est, &pd, &model, &pe, v[0], ev, &LossWeights::default())?;
    Ok(total)
}

/// Stage-2 objective w.r.t. one extractor conv, the classifier and both
/// head input layers.
fn composite_stage2<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let mut model = AdaptationModel::<T>::new(tiny_model_spec(), 13)?;
    // Separate the target from the online branch as after some training.
    for (_, t) in model.target_q.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = *x * T::from_f64_lossy(0.9));
    }
    let day = uniform(&[1, 3, 8, 8], 0.3, 0.9, 21);
    let dark = day.map(|x| 0.25 * x * x);
    let mut b = model.bind_online(g, false)?;
    substitute(&mut b.extractor, &model.extractor, "stage1.conv2.weight", v[0]);
    substitute(&mut b.classifier, &model.classifier, "fc.weight", v[1]);
    let qname = model.head_q.iter().next().expect("non-empty head").0.to_string();
    substitute(&mut b.q, &model.head_q, &qname, v[2]);
    let zname = model.head_z.iter().next().expect("non-empty head").0.to_string();
    substitute(&mut b.z, &model.head_z, &zname, v[3]);
    let iv = constant(g, &day)?;
    let dv = constant(g, &dark)?;
    Ok(stage2_graph(g, &model, &b, iv, dv, &[2], &LossWeights::default())?.total)
}

fn param_value(set: &ParamSet<f64>, name: &str) -> Tensor<f64> {
    set.iter().find(|(n, _)| *n == name).expect("registered parameter name").1.clone()
}

fn entry(kind: &'static str, objective: FnObjective, inputs: Vec<Tensor<f64>>) -> Entry {
    Entry { kind, objective, inputs }
}

/// The full registered list.
pub fn registered() -> Vec<Entry> {
    let u = uniform;
    let est = MappingEstimator::<f64>::new(tiny_darkener_spec(), 11).expect("valid spec");
    let model = AdaptationModel::<f64>::new(tiny_model_spec(), 13).expect("valid spec");
    let q0 = model.head_q.iter().next().expect("non-empty head").1.clone();
    let z0 = model.head_z.iter().next().expect("non-empty head").1.clone();
    vec![
        entry("op", objective!("add", op_add), vec![u(&[2, 3], -1.0, 1.0, 1), u(&[3], -1.0, 1.0, 2)]),
        entry("op", objective!("sub", op_sub), vec![u(&[2, 1], -1.0, 1.0, 3), u(&[2, 3], -1.0, 1.0, 4)]),
        entry("op", objective!("mul", op_mul), vec![u(&[2, 3], -1.0, 1.0, 5), u(&[1, 3], -1.0, 1.0, 6)]),
        entry("op", objective!("div", op_div), vec![u(&[2, 3], -1.0, 1.0, 7), u(&[2, 3], 0.5, 2.0, 8)]),
        entry("op", objective!("pow", op_pow), vec![u(&[2, 3], 0.2, 1.5, 9), u(&[2, 3], -1.0, 2.0, 10)]),
        entry("op", objective!("pow_scalar", op_pow_scalar), vec![u(&[2, 3], 0.2, 1.5, 11)]),
        entry("op", objective!("square", op_square), vec![u(&[2, 3], -1.0, 1.0, 12)]),
        entry("op", objective!("scale", op_scale), vec![u(&[2, 3], -1.0, 1.0, 13)]),
        entry("op", objective!("neg", op_neg), vec![u(&[2, 3], -1.0, 1.0, 14)]),
        entry("op", objective!("add_scalar", op_add_scalar), vec![u(&[2, 3], -1.0, 1.0, 15)]),
        entry("op", objective!("rsub_scalar", op_rsub_scalar), vec![u(&[2, 3], -1.0, 1.0, 16)]),
        entry("op", objective!("exp", op_exp), vec![u(&[2, 3], -1.0, 1.0, 17)]),
        entry("op", objective!("ln", op_ln), vec![u(&[2, 3], 0.3, 2.0, 18)]),
        entry("op", objective!("sqrt", op_sqrt), vec![u(&[2, 3], 0.3, 2.0, 19)]),
        entry("op", objective!("sigmoid", op_sigmoid), vec![u(&[2, 3], -3.0, 3.0, 20)]),
        entry("op", objective!("relu", op_relu), vec![u(&[3, 4], -1.0, 1.0, 21)]),
        entry("op", objective!("abs", op_abs), vec![u(&[3, 4], -1.0, 1.0, 22)]),
        entry("op", objective!("clamp", op_clamp), vec![u(&[3, 4], -1.0, 1.0, 23)]),
        entry("op", objective!("max_scalar", op_max_scalar), vec![u(&[3, 4], -1.0, 1.0, 24)]),
        entry("op", objective!("min_scalar", op_min_scalar), vec![u(&[3, 4], -1.0, 1.0, 25)]),
        entry("op", objective!("matmul", op_matmul), vec![u(&[2, 3], -1.0, 1.0, 26), u(&[3, 4], -1.0, 1.0, 27)]),
        entry(
            "op",
            objective!("conv2d", op_conv2d),
            vec![u(&[2, 2, 5, 5], -1.0, 1.0, 28), u(&[3, 2, 3, 3], -1.0, 1.0, 29), u(&[3], -1.0, 1.0, 30)],
        ),
        entry(
            "op",
            objective!("conv2d_strided", op_conv2d_strided),
            vec![u(&[1, 2, 6, 6], -1.0, 1.0, 31), u(&[2, 2, 2, 2], -1.0, 1.0, 32)],
        ),
        entry("op", objective!("avg_pool2d", op_avg_pool2d), vec![u(&[2, 2, 4, 4], -1.0, 1.0, 33)]),
        entry("op", objective!("sum_axes", op_sum_axes), vec![u(&[2, 3, 4], -1.0, 1.0, 34)]),
        entry("op", objective!("mean_axes", op_mean_axes), vec![u(&[2, 3, 4], -1.0, 1.0, 35)]),
        entry("op", objective!("l2norm", op_l2norm), vec![u(&[3, 4], -1.0, 1.0, 36)]),
        entry("op", objective!("log_softmax", op_log_softmax), vec![u(&[3, 5], -2.0, 2.0, 37)]),
        entry("op", objective!("broadcast_to", op_broadcast_to), vec![u(&[2, 1], -1.0, 1.0, 38)]),
        entry("op", objective!("reshape", op_reshape), vec![u(&[2, 6], -1.0, 1.0, 39)]),
        entry("op", objective!("slice", op_slice), vec![u(&[2, 4, 3], -1.0, 1.0, 40)]),
        entry("op", objective!("concat", op_concat), vec![u(&[2, 1, 3], -1.0, 1.0, 41), u(&[2, 2, 3], -1.0, 1.0, 42)]),
        entry(
            "op",
            objective!("batch_norm_train", op_batch_norm_train),
            vec![u(&[3, 2, 2, 2], -1.0, 1.0, 43), u(&[2], 0.5, 1.5, 44), u(&[2], -0.5, 0.5, 45)],
        ),
        entry(
            "op",
            objective!("batch_norm_eval", op_batch_norm_eval),
            vec![u(&[3, 2, 2, 2], -1.0, 1.0, 46), u(&[2], 0.5, 1.5, 47), u(&[2], -0.5, 0.5, 48)],
        ),
        entry("op", objective!("curve_quadratic", op_curve_quadratic), vec![u(&[3, 4], 0.05, 0.95, 49), u(&[3, 4], 0.0, 1.0, 50)]),
        entry("op", objective!("curve_gamma", op_curve_gamma), vec![u(&[3, 4], 0.05, 0.95, 51), u(&[3, 4], 0.0, 1.0, 52)]),
        entry("op", objective!("curve_reciprocal", op_curve_reciprocal), vec![u(&[3, 4], 0.05, 0.95, 53), u(&[3, 4], 0.0, 1.0, 54)]),
        entry(
            "op",
            objective!("darken", op_darken),
            vec![u(&[1, 3, 4, 4], 0.05, 0.95, 55), u(&[1, 3, 4, 4], 0.0, 1.0, 56), u(&[1, 3, 4, 4], 0.05, 1.0, 57)],
        ),
        entry("loss", objective!("sim_loss_d", loss_sim_d), vec![u(&[3, 8], -1.0, 1.0, 60), u(&[3, 8], -1.0, 1.0, 61)]),
        entry(
            "loss",
            objective!("exposure_loss", loss_exposure),
            vec![u(&[1, 3, 8, 8], 0.0, 1.0, 62), u(&[1, 1, 8, 8], 0.0, 0.5, 63)],
        ),
        entry("loss", objective!("ltv_loss", loss_ltv), vec![u(&[3, 8, 8], 0.0, 0.3, 64)]),
        entry("loss", objective!("flex_loss", loss_flex), vec![u(&[3, 8, 8], 0.05, 1.0, 65)]),
        entry("loss", objective!("color_loss", loss_color), vec![u(&[1, 3, 8, 8], 0.0, 1.0, 66)]),
        entry("loss", objective!("byol_loss", loss_byol), vec![u(&[3, 8], -1.0, 1.0, 67)]),
        entry("loss", objective!("cross_entropy", loss_cross_entropy), vec![u(&[3, 5], -2.0, 2.0, 68)]),
        entry("loss", objective!("total_loss_f", loss_total_f), vec![u(&[3, 8], -1.0, 1.0, 69), u(&[3, 4], -2.0, 2.0, 70)]),
        entry(
            "composite",
            objective!("stage1_objective", composite_stage1),
            vec![
                u(&[1, 3, 8, 8], 0.3, 0.9, 80),
                param_value(&est.params, "head_a.weight"),
                param_value(&est.params, "head_b.weight"),
            ],
        ),
        entry(
            "composite",
            objective!("stage2_objective", composite_stage2),
            vec![
                param_value(&model.extractor, "stage1.conv2.weight"),
                param_value(&model.classifier, "fc.weight"),
                q0,
                z0,
            ],
        ),
    ]
}

/// Check every registered entry at both precisions.
pub fn run_all() -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for e in registered() {
        out.push(check::<f32, _>(&e.objective, &e.inputs, GradcheckOpts::f32())?);
        out.push(check::<f64, _>(&e.objective, &e.inputs, GradcheckOpts::f64())?);
    }
    Ok(out)
}
