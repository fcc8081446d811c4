//! Training objectives for the darkener and for the adapted extractor.
//!
//! Spatial sums are taken as means so loss weights do not depend on image
//! resolution. Batched inputs average over the batch as well.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Norms at or below this are treated as collapsed features.
pub const COLLAPSE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_sim_d: f64,
    pub lambda_c_exp: f64,
    pub lambda_col: f64,
    pub lambda_ltv: f64,
    pub lambda_flex: f64,
    pub lambda_sim_f: f64,
    pub lambda_task: f64,
    pub alpha_ltv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sim_d: 1.0,
            lambda_c_exp: 10.0,
            lambda_col: 5.0,
            lambda_ltv: 1.0,
            lambda_flex: 1.0,
            lambda_sim_f: 1.0,
            lambda_task: 1.0,
            alpha_ltv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sim_d,
            self.lambda_c_exp,
            self.lambda_col,
            self.lambda_ltv,
            self.lambda_flex,
            self.lambda_sim_f,
            self.lambda_task,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        if !(self.alpha_ltv > 0.0 && self.alpha_ltv <= 0.5) {
            return Err(Error::InvalidArgument(format!("alpha_ltv must be in (0, 0.5], got {}", self.alpha_ltv)));
        }
        Ok(())
    }
}

fn need_rank(g: &Graph<impl Element>, x: Var, rank: usize, op: &'static str) -> Result<()> {
    if g.shape(x).len() != rank {
        return Err(Error::InvalidShape {
            shape: g.shape(x).to_vec(),
            reason: format!("{op} expects rank {rank}"),
        });
    }
    Ok(())
}

/// Row-wise cosine similarity of two `[N, d]` matrices, shape `[N]`.
pub fn cosine_rows<T: Element>(g: &mut Graph<T>, a: Var, b: Var, op: &'static str) -> Result<Var> {
    need_rank(g, a, 2, op)?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let na = g.l2norm(a)?;
    let nb = g.l2norm(b)?;
    let smallest = g.value(na).min().min(g.value(nb).min()).as_f64();
    if smallest <= COLLAPSE_NORM {
        return Err(Error::Collapse { op, norm: smallest });
    }
    let prod = g.mul(a, b)?;
    let dot = g.sum_axes(prod, &[1], false)?;
    let den = g.mul(na, nb)?;
    g.div(dot, den)
}

/// Mean cosine similarity between day and darkened-image features.
pub fn sim_loss_d<T: Element>(g: &mut Graph<T>, feat_day: Var, feat_dark: Var) -> Result<Var> {
    let c = cosine_rows(g, feat_day, feat_dark, "sim_loss_d")?;
    g.mean(c)
}

/// Mean over pixels of `|mean_c(dark) - E|`. `dark: [N, C, H, W]`, `e: [N, 1, H, W]`.
pub fn exposure_loss<T: Element>(g: &mut Graph<T>, dark: Var, e: Var) -> Result<Var> {
    need_rank(g, dark, 4, "exposure_loss")?;
    let (sd, se) = (g.shape(dark).to_vec(), g.shape(e).to_vec());
    if se.len() != 4 || se[1] != 1 || sd[0] != se[0] || sd[2..] != se[2..] {
        return Err(Error::ShapeMismatch {
            op: "exposure_loss",
            lhs: sd,
            rhs: se,
        });
    }
    let avg = g.mean_axes(dark, &[1], true)?;
    let d = g.sub(avg, e)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `h(x) = max(alpha - |x - alpha|, 0)` applied to `|x|`, then squared.
fn loose_penalty<T: Element>(g: &mut Graph<T>, diff: Var, alpha: T) -> Result<Var> {
    let a = g.abs(diff)?;
    let shifted = g.add_scalar(a, -alpha)?;
    let dist = g.abs(shifted)?;
    let tent = g.rsub_scalar(alpha, dist)?;
    let h = g.relu(tent)?;
    g.square(h)
}

/// Loose total variation over the last two axes of `a` (rank 3 or 4).
pub fn ltv_loss<T: Element>(g: &mut Graph<T>, a: Var, alpha: f64) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() < 3 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "ltv_loss needs [.., C, H, W] with H, W >= 2".into(),
        });
    }
    let (wa, ha) = (s.len() - 1, s.len() - 2);
    let (w, h) = (s[wa], s[ha]);
    let alpha = T::from_f64_lossy(alpha);
    let right = g.slice(a, wa, 1, w - 1)?;
    let left = g.slice(a, wa, 0, w - 1)?;
    let dx = g.sub(right, left)?;
    let px = loose_penalty(g, dx, alpha)?;
    let lx = g.mean(px)?;
    let down = g.slice(a, ha, 1, h - 1)?;
    let up = g.slice(a, ha, 0, h - 1)?;
    let dy = g.sub(down, up)?;
    let py = loose_penalty(g, dy, alpha)?;
    let ly = g.mean(py)?;
    g.add(lx, ly)
}

/// Mean of `1 - B`.
pub fn flex_loss<T: Element>(g: &mut Graph<T>, b: Var) -> Result<Var> {
    let m = g.mean(b)?;
    g.rsub_scalar(T::one(), m)
}

/// Sum over channel pairs of squared differences of channel means,
/// averaged over the batch. `dark: [N, 3, H, W]`.
pub fn color_loss<T: Element>(g: &mut Graph<T>, dark: Var) -> Result<Var> {
    need_rank(g, dark, 4, "color_loss")?;
    if g.shape(dark)[1] != 3 {
        return Err(Error::InvalidShape {
            shape: g.shape(dark).to_vec(),
            reason: "color_loss needs exactly 3 channels".into(),
        });
    }
    let j = g.mean_axes(dark, &[2, 3], false)?;
    let ch: Vec<Var> = (0..3).map(|c| g.slice(j, 1, c, 1)).collect::<Result<_>>()?;
    let mut total = None;
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        let d = g.sub(ch[p], ch[q])?;
        let d2 = g.square(d)?;
        total = Some(match total {
            None => d2,
            Some(t) => g.add(t, d2)?,
        });
    }
    g.mean(total.expect("three pairs"))
}

/// Graph handles for the five darkener loss components.
#[derive(Debug, Clone, Copy)]
pub struct DarkenerParts {
    pub sim: Var,
    pub c_exp: Var,
    pub col: Var,
    pub ltv: Var,
    pub flex: Var,
}

pub fn total_loss_d<T: Element>(g: &mut Graph<T>, parts: &DarkenerParts, w: &LossWeights) -> Result<Var> {
    weighted_sum(
        g,
        &[
            (parts.sim, w.lambda_sim_d),
            (parts.c_exp, w.lambda_c_exp),
            (parts.col, w.lambda_col),
            (parts.ltv, w.lambda_ltv),
            (parts.flex, w.lambda_flex),
        ],
    )
}

pub fn weighted_sum<T: Element>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, T::from_f64_lossy(w))?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.scalar(T::zero()),
    }
}

/// `mean(2 - 2 cos(online, target))`. The target must not carry gradients.
pub fn byol_loss<T: Element>(g: &mut Graph<T>, online: Var, target: Var) -> Result<Var> {
    if g.requires_grad(target) {
        return Err(Error::InvalidArgument("byol target branch must be detached".into()));
    }
    let c = cosine_rows(g, online, target, "byol_loss")?;
    let m = g.mean(c)?;
    let m2 = g.scale(m, T::from_f64_lossy(-2.0))?;
    g.add_scalar(m2, T::from_f64_lossy(2.0))
}

/// Mean softmax cross-entropy. `logits: [N, K]`.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    need_rank(g, logits, 2, "cross_entropy")?;
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    let mut onehot = Tensor::<T>::zeros(&[n, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::OutOfRange {
                op: "cross_entropy",
                detail: format!("label {l} with {k} classes"),
            });
        }
        onehot.data_mut()[i * k + l] = T::one();
    }
    let ls = g.log_softmax(logits)?;
    let oh = g.constant(onehot)?;
    let picked = g.mul(ls, oh)?;
    let s = g.sum(picked)?;
    g.scale(s, T::from_f64_lossy(-1.0 / n as f64))
}

pub fn total_loss_f<T: Element>(g: &mut Graph<T>, sim: Var, task: Var, w: &LossWeights) -> Result<Var> {
    weighted_sum(g, &[(sim, w.lambda_sim_f), (task, w.lambda_task)])
}

/// One run-log line. Components that the active stage does not compute are null.
#[derive(Debug, Clone, Default, Serialize, serde::Deserialize, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_sim_d: Option<f64>,
    pub l_c_exp: Option<f64>,
    pub l_col: Option<f64>,
    pub l_ltv: Option<f64>,
    pub l_flex: Option<f64>,
    pub l_sim_f: Option<f64>,
    pub l_task: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    /// First non-finite component, by log name.
    pub fn non_finite(&self) -> Option<&'static str> {
        let named = [
            ("l_sim_d", self.l_sim_d),
            ("l_c_exp", self.l_c_exp),
            ("l_col", self.l_col),
            ("l_ltv", self.l_ltv),
            ("l_flex", self.l_flex),
            ("l_sim_f", self.l_sim_f),
            ("l_task", self.l_task),
            ("total", Some(self.total)),
        ];
        named.into_iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())).map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::gradcheck::{check, GradcheckOpts};
    use crate::objective;
    use proptest::prelude::*;

    fn run<F>(inputs: &[Tensor<f64>], f: F) -> f64
    where
        F: FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vs).unwrap();
        g.value(out).item()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = crate::tensor::numel(shape);
        let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        t(shape, &v)
    }

    #[test]
    fn sim_loss_analytic() {
        let a = t(&[1, 2], &[1.0, 0.0]);
        assert!((run(&[a.clone(), a.clone()], |g, v| sim_loss_d(g, v[0], v[1])) - 1.0).abs() < 1e-12);
        assert!(run(&[a.clone(), t(&[1, 2], &[0.0, 1.0])], |g, v| sim_loss_d(g, v[0], v[1])).abs() < 1e-12);
        assert!((run(&[a, t(&[1, 2], &[-3.0, 0.0])], |g, v| sim_loss_d(g, v[0], v[1])) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sim_loss_rejects_zero_vector() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let b = g.constant(Tensor::ones(&[2, 4])).unwrap();
        assert!(matches!(sim_loss_d(&mut g, a, b), Err(Error::Collapse { .. })));
    }

    #[test]
    fn exposure_loss_values() {
        let dark = Tensor::full(&[1, 3, 4, 4], 0.3);
        let e = Tensor::full(&[1, 1, 4, 4], 0.3);
        assert!(run(&[dark, e], |g, v| exposure_loss(g, v[0], v[1])).abs() < 1e-12);
        let dark = Tensor::full(&[1, 3, 4, 4], 0.1);
        let e = Tensor::full(&[1, 1, 4, 4], 0.4);
        assert!((run(&[dark, e], |g, v| exposure_loss(g, v[0], v[1])) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn exposure_loss_matches_loops() {
        let (n, c, h, w) = (2, 3, 5, 4);
        let dark = pseudo(&[n, c, h, w], 3);
        let e = pseudo(&[n, 1, h, w], 4);
        let got = run(&[dark.clone(), e.clone()], |g, v| exposure_loss(g, v[0], v[1]));
        let mut acc = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += dark.data()[((b * c + ch) * h + y) * w + x];
                    }
                    acc += (s / c as f64 - e.data()[(b * h + y) * w + x]).abs();
                }
            }
        }
        assert!((got - acc / (n * h * w) as f64).abs() < 1e-6);
    }

    fn ramp(d: f64) -> Tensor<f64> {
        // every horizontal neighbor differs by d, every vertical by 0
        let v: Vec<f64> = (0..12).map(|i| (i % 4) as f64 * d).collect();
        t(&[1, 3, 4], &v)
    }

    #[test]
    fn ltv_pair_contributions() {
        let alpha = 0.1;
        for (d, expected) in [(0.0, 0.0), (alpha, alpha * alpha), (2.0 * alpha, 0.0)] {
            let got = run(&[ramp(d)], |g, v| ltv_loss(g, v[0], alpha));
            assert!((got - expected).abs() < 1e-12, "d={d} got={got}");
        }
        assert_eq!(run(&[Tensor::full(&[2, 3, 3], 0.7)], |g, v| ltv_loss(g, v[0], alpha)), 0.0);
    }

    fn ltv_oracle(a: &Tensor<f64>, alpha: f64) -> f64 {
        let s = a.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let hf = |x: f64| (alpha - (x - alpha).abs()).max(0.0);
        let at = |ch: usize, y: usize, x: usize| a.data()[(ch * h + y) * w + x];
        let (mut sx, mut sy) = (0.0, 0.0);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        sx += hf((at(ch, y, x + 1) - at(ch, y, x)).abs()).powi(2);
                    }
                    if y + 1 < h {
                        sy += hf((at(ch, y + 1, x) - at(ch, y, x)).abs()).powi(2);
                    }
                }
            }
        }
        sx / (c * h * (w - 1)) as f64 + sy / (c * (h - 1) * w) as f64
    }

    #[test]
    fn ltv_matches_loops() {
        let a = pseudo(&[3, 6, 5], 9).map(|v| v * 0.3);
        let got = run(std::slice::from_ref(&a), |g, v| ltv_loss(g, v[0], 0.1));
        assert!((got - ltv_oracle(&a, 0.1)).abs() < 1e-6);
    }

    #[test]
    fn flex_values() {
        assert_eq!(run(&[Tensor::ones(&[2, 3])], |g, v| flex_loss(g, v[0])), 0.0);
        assert_eq!(run(&[Tensor::full(&[2, 3], 0.5)], |g, v| flex_loss(g, v[0])), 0.5);
        assert_eq!(run(&[t(&[4], &[0.25, 0.75, 0.25, 0.75])], |g, v| flex_loss(g, v[0])), 0.5);
    }

    #[test]
    fn color_values() {
        assert_eq!(run(&[Tensor::full(&[1, 3, 2, 2], 0.4)], |g, v| color_loss(g, v[0])), 0.0);
        let mut img = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        img.data_mut()[..4].iter_mut().for_each(|v| *v = 1.0);
        assert!((run(&[img], |g, v| color_loss(g, v[0])) - 2.0).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(color_loss(&mut g, x).is_err());
    }

    #[test]
    fn color_matches_pairs() {
        let img = pseudo(&[1, 3, 4, 5], 11);
        let j: Vec<f64> = (0..3).map(|c| img.data()[c * 20..(c + 1) * 20].iter().sum::<f64>() / 20.0).collect();
        let want = (j[0] - j[1]).powi(2) + (j[0] - j[2]).powi(2) + (j[1] - j[2]).powi(2);
        assert!((run(&[img], |g, v| color_loss(g, v[0])) - want).abs() < 1e-7);
    }

    #[test]
    fn total_d_weighting() {
        let parts = [3.0, 1.0, 2.0, 0.5, 0.25];
        let inputs: Vec<Tensor<f64>> = parts.iter().map(|&p| Tensor::scalar(p)).collect();
        let zero = LossWeights {
            lambda_sim_d: 0.0,
            lambda_c_exp: 0.0,
            lambda_col: 0.0,
            lambda_ltv: 0.0,
            lambda_flex: 0.0,
            ..Default::default()
        };
        let mk = |v: &[Var]| DarkenerParts {
            sim: v[0],
            c_exp: v[1],
            col: v[2],
            ltv: v[3],
            flex: v[4],
        };
        assert_eq!(run(&inputs, |g, v| total_loss_d(g, &mk(v), &zero)), 0.0);
        let single = LossWeights { lambda_sim_d: 2.0, ..zero };
        assert_eq!(run(&inputs, |g, v| total_loss_d(g, &mk(v), &single)), 6.0);
        let d = LossWeights::default();
        let want = 3.0 + 10.0 * 1.0 + 5.0 * 2.0 + 0.5 + 0.25;
        assert!((run(&inputs, |g, v| total_loss_d(g, &mk(v), &d)) - want).abs() < 1e-12);
    }

    #[test]
    fn byol_analytic() {
        let a = t(&[1, 2], &[1.0, 0.0]);
        for (b, want) in [([2.0, 0.0], 0.0), ([0.0, 1.0], 2.0), ([-1.0, 0.0], 4.0)] {
            let got = run(&[a.clone(), t(&[1, 2], &b)], |g, v| byol_loss(g, v[0], v[1]));
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn byol_rejects_grad_target() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[1, 2])).unwrap();
        let b = g.param(Tensor::ones(&[1, 2])).unwrap();
        assert!(byol_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let got = run(&[Tensor::zeros(&[4, 10])], |g, v| cross_entropy(g, v[0], &[0, 3, 9, 5]));
        assert!((got - 10f64.ln()).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(cross_entropy(&mut g, l, &[3]).is_err());
    }

    #[test]
    fn total_f_without_task() {
        let w = LossWeights {
            lambda_task: 0.0,
            lambda_sim_f: 1.5,
            ..Default::default()
        };
        let got = run(&[Tensor::scalar(2.0), Tensor::scalar(7.0)], |g, v| total_loss_f(g, v[0], v[1], &w));
        assert_eq!(got, 3.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha_ltv: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_col: -1.0, ..Default::default() }.validate().is_err());
    }

    fn g_sim<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        sim_loss_d(g, v[0], v[1])
    }
    fn g_exp<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        exposure_loss(g, v[0], v[1])
    }
    fn g_ltv<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        ltv_loss(g, v[0], 0.1)
    }
    fn g_flex<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        flex_loss(g, v[0])
    }
    fn g_col<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        color_loss(g, v[0])
    }
    fn g_byol<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let fixed = pseudo(&[3, 8], 9).map(|x| x - 0.5);
        let target = g.constant(Tensor::from_f64(fixed.shape().to_vec(), fixed.data())?)?;
        byol_loss(g, v[0], target)
    }
    fn g_ce<T: Element>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        cross_entropy(g, v[0], &[1, 0, 2])
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cases: Vec<(crate::diagnostics::gradcheck::FnObjective, Vec<Tensor<f64>>)> = vec![
            (objective!("sim_loss_d", g_sim), vec![pseudo(&[3, 8], 1), pseudo(&[3, 8], 2)]),
            (objective!("exposure_loss", g_exp), vec![pseudo(&[1, 3, 8, 8], 3), pseudo(&[1, 1, 8, 8], 4)]),
            (objective!("ltv_loss", g_ltv), vec![pseudo(&[3, 8, 8], 5).map(|v| v * 0.3)]),
            (objective!("flex_loss", g_flex), vec![pseudo(&[3, 8, 8], 6)]),
            (objective!("color_loss", g_col), vec![pseudo(&[1, 3, 8, 8], 7)]),
            (objective!("byol_loss", g_byol), vec![pseudo(&[3, 8], 8)]),
            (objective!("cross_entropy", g_ce), vec![pseudo(&[3, 5], 10)]),
        ];
        for (obj, inputs) in &cases {
            let r = check::<f64, _>(obj, inputs, GradcheckOpts::f64()).unwrap();
            assert!(r.passed, "{r:?}");
            let r = check::<f32, _>(obj, inputs, GradcheckOpts::f32()).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn ltv_shift_invariant(seed in 0u64..1000, shift in -0.5f64..0.5) {
            let a = pseudo(&[2, 4, 5], seed).map(|v| v * 0.4);
            let b = a.map(|v| v + shift);
            let la = run(&[a], |g, v| ltv_loss(g, v[0], 0.1));
            let lb = run(&[b], |g, v| ltv_loss(g, v[0], 0.1));
            prop_assert!((la - lb).abs() < 1e-9);
        }

        #[test]
        fn color_permutation_invariant(seed in 0u64..1000, perm in 0usize..6) {
            let img = pseudo(&[1, 3, 3, 3], seed);
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let o = orders[perm];
            let mut v = Vec::with_capacity(27);
            for &c in &o {
                v.extend_from_slice(&img.data()[c * 9..(c + 1) * 9]);
            }
            let permuted = t(&[1, 3, 3, 3], &v);
            let a = run(&[img], |g, v| color_loss(g, v[0]));
            let b = run(&[permuted], |g, v| color_loss(g, v[0]));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn byol_in_range(seed in 0u64..1000) {
            let l = run(&[pseudo(&[4, 6], seed).map(|v| v - 0.5), pseudo(&[4, 6], seed + 1).map(|v| v - 0.5)],
                |g, v| byol_loss(g, v[0], v[1]));
            prop_assert!((0.0..=4.0).contains(&l));
        }
    }
}
