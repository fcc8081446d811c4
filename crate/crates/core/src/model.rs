//! Feature extractor, classifier, BYOL-style heads and the EMA target twin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{update_running_stats, BatchNorm, Bound, Conv2d, ForwardCtx, Linear, Mlp, ParamSet};
use crate::tensor::{Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each conv stage; the last one is the feature dim.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub tau: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 3,
            image_size: 32,
            widths: vec![16, 32, 64],
            num_classes: 10,
            head_hidden: 128,
            head_out: 64,
            tau: 0.99,
        }
    }
}

impl ModelSpec {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("model widths must be non-empty and positive".into()));
        }
        let div = 1usize << self.widths.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of {div} for {} stages",
                self.image_size,
                self.widths.len()
            )));
        }
        if self.num_classes < 2 || self.head_hidden == 0 || self.head_out == 0 {
            return Err(Error::InvalidArgument("num_classes >= 2 and head sizes > 0 required".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

/// Conv stages of (conv, norm, ReLU) x2 then 2x2 average pooling, then a
/// global average pool.
#[derive(Debug, Clone)]
pub struct ExtractorArch {
    stages: Vec<Stage>,
    in_channels: usize,
    image_size: usize,
}

impl ExtractorArch {
    fn build<T: Element>(spec: &ModelSpec, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = spec.in_channels;
        let mut stages = Vec::new();
        for (i, &w) in spec.widths.iter().enumerate() {
            let conv1 = Conv2d::new(params, rng, &format!("stage{i}.conv1"), cin, w, 3, false, 1.0);
            let bn1 = BatchNorm::new(params, buffers, &format!("stage{i}.bn1"), w);
            let conv2 = Conv2d::new(params, rng, &format!("stage{i}.conv2"), w, w, 3, false, 1.0);
            let bn2 = BatchNorm::new(params, buffers, &format!("stage{i}.bn2"), w);
            stages.push(Stage { conv1, bn1, conv2, bn2 });
            cin = w;
        }
        ExtractorArch {
            stages,
            in_channels: spec.in_channels,
            image_size: spec.image_size,
        }
    }

    /// `x: [N, C, S, S] -> [N, d]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::ShapeMismatch {
                op: "extract",
                lhs: s.to_vec(),
                rhs: vec![0, self.in_channels, self.image_size, self.image_size],
            });
        }
        let mut h = x;
        for st in &self.stages {
            h = st.conv1.forward(g, p, h)?;
            h = st.bn1.forward(g, p, ctx, h)?;
            h = g.relu(h)?;
            h = st.conv2.forward(g, p, h)?;
            h = st.bn2.forward(g, p, ctx, h)?;
            h = g.relu(h)?;
            h = g.avg_pool2d(h, 2)?;
        }
        g.mean_axes(h, &[2, 3], false)
    }
}

/// Layer layout shared by online and target branches.
#[derive(Debug, Clone)]
pub struct Arch {
    pub extractor: ExtractorArch,
    pub classifier: Linear,
    pub q: Mlp,
    pub z: Mlp,
}

/// Online network `(F, classifier, q, z)` plus the EMA target `(F', q')`.
#[derive(Debug, Clone)]
pub struct AdaptationModel<T: Element> {
    pub spec: ModelSpec,
    pub arch: Arch,
    pub extractor: ParamSet<T>,
    pub extractor_bn: ParamSet<T>,
    pub classifier: ParamSet<T>,
    pub head_q: ParamSet<T>,
    pub head_z: ParamSet<T>,
    pub target_extractor: ParamSet<T>,
    pub target_bn: ParamSet<T>,
    pub target_q: ParamSet<T>,
}

/// Handles for the online sets bound in one graph.
pub struct OnlineBinding {
    pub extractor: Bound,
    pub classifier: Bound,
    pub q: Bound,
    pub z: Bound,
}

impl<T: Element> AdaptationModel<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut extractor, mut extractor_bn) = (ParamSet::new(), ParamSet::new());
        let ext = ExtractorArch::build(&spec, &mut extractor, &mut extractor_bn, &mut rng);
        let d = spec.feature_dim();
        let mut classifier = ParamSet::new();
        let cls = Linear::new(&mut classifier, &mut rng, "fc", d, spec.num_classes, 1.0);
        let mut head_q = ParamSet::new();
        let q = Mlp::new(&mut head_q, &mut rng, "mlp", d, spec.head_hidden, spec.head_out);
        let mut head_z = ParamSet::new();
        let z = Mlp::new(&mut head_z, &mut rng, "mlp", spec.head_out, spec.head_hidden, spec.head_out);
        Ok(AdaptationModel {
            target_extractor: extractor.clone(),
            target_bn: extractor_bn.clone(),
            target_q: head_q.clone(),
            spec,
            arch: Arch {
                extractor: ext,
                classifier: cls,
                q,
                z,
            },
            extractor,
            extractor_bn,
            classifier,
            head_q,
            head_z,
        })
    }

    /// Copy the online extractor and projection head into the target.
    pub fn reset_target(&mut self) {
        self.target_extractor = self.extractor.clone();
        self.target_bn = self.extractor_bn.clone();
        self.target_q = self.head_q.clone();
    }

    pub fn bind_online(&self, g: &mut Graph<T>, trainable: bool) -> Result<OnlineBinding> {
        Ok(OnlineBinding {
            extractor: self.extractor.bind(g, trainable)?,
            classifier: self.classifier.bind(g, trainable)?,
            q: self.head_q.bind(g, trainable)?,
            z: self.head_z.bind(g, trainable)?,
        })
    }

    /// Online features; `train` selects batch statistics, whose values are
    /// returned for folding into the running buffers.
    pub fn features_graph(&self, g: &mut Graph<T>, b: &Bound, x: Var, train: bool) -> Result<(Var, Vec<(usize, crate::autodiff::BatchStats<T>)>)> {
        let mut ctx = if train {
            ForwardCtx::train(&self.extractor_bn)
        } else {
            ForwardCtx::eval(&self.extractor_bn)
        };
        let f = self.arch.extractor.forward(g, b, &mut ctx, x)?;
        Ok((f, ctx.stats))
    }

    pub fn logits_graph(&self, g: &mut Graph<T>, b: &Bound, feat: Var) -> Result<Var> {
        let d = g.shape(feat);
        if d.len() != 2 || d[1] != self.spec.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: d.to_vec(),
                rhs: vec![0, self.spec.feature_dim()],
            });
        }
        self.arch.classifier.forward(g, b, feat)
    }

    /// `z(q(feat))`.
    pub fn online_prediction(&self, g: &mut Graph<T>, b: &OnlineBinding, feat: Var) -> Result<Var> {
        let proj = self.arch.q.forward(g, &b.q, feat)?;
        self.arch.z.forward(g, &b.z, proj)
    }

    /// `q'(F'(x))`, bound as constants and using batch statistics.
    pub fn target_projection(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let te = self.target_extractor.bind(g, false)?;
        let tq = self.target_q.bind(g, false)?;
        let mut ctx = ForwardCtx::train(&self.target_bn);
        let f = self.arch.extractor.forward(g, &te, &mut ctx, x)?;
        self.arch.q.forward(g, &tq, f)
    }

    /// Online projection `q(F(x))` with batch statistics, bound as
    /// constants. Comparable to [`Self::target_projection`].
    pub fn online_projection(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let e = self.extractor.bind(g, false)?;
        let q = self.head_q.bind(g, false)?;
        let mut ctx = ForwardCtx::train(&self.extractor_bn);
        let f = self.arch.extractor.forward(g, &e, &mut ctx, x)?;
        self.arch.q.forward(g, &q, f)
    }

    /// Inference-mode features `[N, d]`.
    pub fn extract(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.extractor.bind(&mut g, false)?;
        let x = g.constant(images.clone())?;
        let (f, _) = self.features_graph(&mut g, &b, x, false)?;
        Ok(g.value(f).clone())
    }

    /// Inference-mode logits `[N, K]` from features.
    pub fn classify(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.classifier.bind(&mut g, false)?;
        let f = g.constant(feat.clone())?;
        let l = self.logits_graph(&mut g, &b, f)?;
        Ok(g.value(l).clone())
    }

    pub fn fold_stats(&mut self, stats: &[(usize, crate::autodiff::BatchStats<T>)]) {
        update_running_stats(&mut self.extractor_bn, stats, BN_MOMENTUM);
    }

    /// EMA of the online extractor (including norm buffers) and projection
    /// head into the target.
    pub fn ema_update(&mut self) -> Result<()> {
        let tau = self.spec.tau;
        ema_update(&mut self.target_extractor, &self.extractor, tau)?;
        ema_update(&mut self.target_bn, &self.extractor_bn, tau)?;
        ema_update(&mut self.target_q, &self.head_q, tau)
    }

    /// Fingerprint of everything the classifier output depends on.
    pub fn online_fingerprint(&self) -> u64 {
        let mut h = self.extractor.fingerprint();
        for f in [self.extractor_bn.fingerprint(), self.classifier.fingerprint()] {
            h = h.rotate_left(17) ^ f;
        }
        h
    }

    pub fn save_day(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_set("extractor", &self.extractor);
        ckpt.insert_set("extractor", &self.extractor_bn);
        ckpt.insert_set("classifier", &self.classifier);
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        self.save_day(ckpt);
        ckpt.insert_set("head_q", &self.head_q);
        ckpt.insert_set("head_z", &self.head_z);
        ckpt.insert_set("target_extractor", &self.target_extractor);
        ckpt.insert_set("target_extractor", &self.target_bn);
        ckpt.insert_set("target_q", &self.target_q);
        ckpt.insert_scalar("ema/tau", self.spec.tau);
    }

    /// Load extractor and classifier. Heads and target are loaded when
    /// present; otherwise the target is re-initialized from the online net.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_set("extractor", &mut self.extractor)?;
        ckpt.load_set("extractor", &mut self.extractor_bn)?;
        ckpt.load_set("classifier", &mut self.classifier)?;
        if ckpt.has_prefix("head_q/") {
            ckpt.load_set("head_q", &mut self.head_q)?;
            ckpt.load_set("head_z", &mut self.head_z)?;
            ckpt.load_set("target_extractor", &mut self.target_extractor)?;
            ckpt.load_set("target_extractor", &mut self.target_bn)?;
            ckpt.load_set("target_q", &mut self.target_q)?;
            self.spec.tau = ckpt.scalar("ema/tau")?;
        } else {
            self.reset_target();
        }
        Ok(())
    }
}

/// `target = tau * target + (1 - tau) * online`, element by element.
pub fn ema_update<T: Element>(target: &mut ParamSet<T>, online: &ParamSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must be in [0, 1], got {tau}")));
    }
    if target.len() != online.len() {
        return Err(Error::InvalidArgument("ema: parameter sets differ in length".into()));
    }
    let t = T::from_f64_lossy(tau);
    let s = T::from_f64_lossy(1.0 - tau);
    for ((_, tv), (_, ov)) in target.iter_mut().zip(online.iter()) {
        if tv.shape() != ov.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: tv.shape().to_vec(),
                rhs: ov.shape().to_vec(),
            });
        }
        for (a, &b) in tv.data_mut().iter_mut().zip(ov.data()) {
            *a = t * *a + s * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::gradcheck::{check, GradcheckOpts, Objective};
    use crate::losses::{byol_loss, cross_entropy};

    fn small_spec() -> ModelSpec {
        ModelSpec {
            image_size: 8,
            widths: vec![4, 6],
            head_hidden: 8,
            head_out: 5,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn images(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * 3 * s * s).map(|_| rng.gen()).collect();
        Tensor::from_f64(vec![n, 3, s, s], &v).unwrap()
    }

    #[test]
    fn extract_is_deterministic_and_shaped() {
        let m = AdaptationModel::<f32>::new(small_spec(), 3).unwrap();
        let x = images(2, 8, 1).cast::<f32>();
        let a = m.extract(&x).unwrap();
        assert_eq!(a.shape(), &[2, 6]);
        assert_eq!(a, m.extract(&x).unwrap());
        assert!(m.extract(&images(1, 16, 1).cast()).is_err());
    }

    #[test]
    fn zero_final_layer_collapses_features() {
        let mut m = AdaptationModel::<f64>::new(small_spec(), 3).unwrap();
        for (name, t) in m.extractor.iter_mut() {
            if name.starts_with("stage1.bn2") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let f = m.extract(&images(2, 8, 2)).unwrap();
        assert_eq!(f.max(), 0.0);
        let mut g = Graph::<f64>::new();
        let a = g.constant(f.clone()).unwrap();
        let b = g.constant(f).unwrap();
        assert!(crate::losses::sim_loss_d(&mut g, a, b).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = AdaptationModel::<f64>::new(small_spec(), 4).unwrap();
        m.classifier.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let logits = m.classify(&Tensor::zeros(&[2, 6])).unwrap();
        assert_eq!(logits.max(), 0.0);
        assert_eq!(logits.min(), 0.0);
        assert!(m.classify(&Tensor::zeros(&[2, 5])).is_err());
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits).unwrap();
        let ce = cross_entropy(&mut g, l, &[0, 2]).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_equals_online_at_init() {
        let m = AdaptationModel::<f32>::new(small_spec(), 5).unwrap();
        let x = images(3, 8, 3).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let on = m.online_projection(&mut g, xv).unwrap();
        let ta = m.target_projection(&mut g, xv).unwrap();
        assert_eq!(g.value(on), g.value(ta));
    }

    #[test]
    fn ema_closed_form() {
        let mut online = ParamSet::<f64>::new();
        online.insert("w", Tensor::from_f64(vec![3], &[0.0, 2.0, -1.5]).unwrap());
        for tau in [0.0, 0.5, 1.0] {
            let mut target = ParamSet::new();
            target.insert("w", Tensor::from_f64(vec![3], &[1.0, 1.0, 4.0]).unwrap());
            let before = target.at(0).clone();
            ema_update(&mut target, &online, tau).unwrap();
            for i in 0..3 {
                let want = tau * before.data()[i] + (1.0 - tau) * online.at(0).data()[i];
                assert_eq!(target.at(0).data()[i], want);
            }
        }
        let mut target = ParamSet::new();
        target.insert("w", Tensor::scalar(1.0));
        let mut zero = ParamSet::new();
        zero.insert("w", Tensor::scalar(0.0));
        ema_update(&mut target, &zero, 0.99).unwrap();
        assert_eq!(target.at(0).item(), 0.99);
        let mut bad = ParamSet::new();
        bad.insert("w", Tensor::<f64>::zeros(&[2]));
        assert!(ema_update(&mut target, &bad, 0.5).is_err());
    }

    #[test]
    fn ema_contracts_by_tau() {
        let mut m = AdaptationModel::<f64>::new(small_spec(), 6).unwrap();
        for (_, t) in m.head_q.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        let dist = |m: &AdaptationModel<f64>| -> f64 {
            m.target_q
                .iter()
                .zip(m.head_q.iter())
                .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
                .sum::<f64>()
                .sqrt()
        };
        let mut d = dist(&m);
        for _ in 0..5 {
            m.ema_update().unwrap();
            let nd = dist(&m);
            assert!((nd / d - 0.99).abs() < 1e-9);
            d = nd;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = AdaptationModel::<f32>::new(small_spec(), 7).unwrap();
        m.head_z.at_mut(0).data_mut()[0] = 42.0;
        let mut c = Checkpoint::new();
        m.save_into(&mut c);
        let c = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let mut other = AdaptationModel::<f32>::new(small_spec(), 8).unwrap();
        other.load(&c).unwrap();
        assert_eq!(other.head_z.fingerprint(), m.head_z.fingerprint());
        assert_eq!(other.online_fingerprint(), m.online_fingerprint());
        assert_eq!(other.target_extractor.fingerprint(), m.target_extractor.fingerprint());
    }

    struct MeanFeature;
    impl Objective for MeanFeature {
        fn name(&self) -> String {
            "mean_feature".into()
        }
        fn eval<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            let m = AdaptationModel::<T>::new(small_spec(), 9)?;
            let b = m.extractor.bind(g, false)?;
            let (f, _) = m.features_graph(g, &b, inputs[0], true)?;
            g.mean(f)
        }
    }

    #[test]
    fn extractor_gradcheck() {
        let x = images(2, 8, 10);
        let r = check::<f64, _>(&MeanFeature, std::slice::from_ref(&x), GradcheckOpts::f64()).unwrap();
        assert!(r.passed, "{r:?}");
        let r = check::<f32, _>(&MeanFeature, &[x], GradcheckOpts::f32()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn target_branch_gets_no_grads() {
        let m = AdaptationModel::<f64>::new(small_spec(), 11).unwrap();
        let mut g = Graph::new();
        let b = m.bind_online(&mut g, true).unwrap();
        let x = g.constant(images(4, 8, 12)).unwrap();
        let (f, _) = m.features_graph(&mut g, &b.extractor, x, true).unwrap();
        let p = m.online_prediction(&mut g, &b, f).unwrap();
        let t = m.target_projection(&mut g, x).unwrap();
        let target_leaves: Vec<Var> = g.vars().filter(|&v| !g.requires_grad(v)).collect();
        let l = byol_loss(&mut g, p, t).unwrap();
        g.backward(l).unwrap();
        assert!(target_leaves.iter().all(|&v| g.grad(v).is_none()));
        assert!(m.extractor.grads(&g, &b.extractor).iter().all(|gr| gr.is_some()));
    }
}
