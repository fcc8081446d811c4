//! Exposure-guided pixel-wise darkening.
//!
//! The darkened image is `B * f(clamp(I / B, 0, 1), A)` where `f` is a
//! monotone darkening curve parameterized per pixel and channel by `A`, and
//! `B` is an auxiliary divisor map bounded below by `b_min`. Both maps come
//! from a small convolutional mapping estimator fed the image together with
//! an exposure map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamSet};
use crate::tensor::{Element, Tensor};

/// Singularity margin for the gamma and reciprocal curves.
pub const CURVE_EPS: f64 = 1e-3;
/// Default lower bound of the divisor map.
pub const B_MIN: f64 = 0.05;
pub const CHECKPOINT_PREFIX: &str = "darkener";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveFamily {
    /// `h(x, a) = a x^2 + (1 - a) x` composed `iterations` times.
    IterativeQuadratic { iterations: usize },
    /// `x^(1/a)` with `a` remapped into `(CURVE_EPS, 1]`.
    Gamma,
    /// `(1 - a) x / (1 - a x)` with `a` clamped to `[0, 1 - CURVE_EPS]`.
    Reciprocal,
}

impl Default for CurveFamily {
    fn default() -> Self {
        CurveFamily::IterativeQuadratic { iterations: 8 }
    }
}

impl CurveFamily {
    pub fn iterations(&self) -> usize {
        match self {
            CurveFamily::IterativeQuadratic { iterations } => *iterations,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CurveFamily::IterativeQuadratic { .. } => "iterative_quadratic",
            CurveFamily::Gamma => "gamma_curve",
            CurveFamily::Reciprocal => "reciprocal_curve",
        }
    }

    /// Parameter value at which the curve is the identity.
    pub fn identity_alpha(&self) -> f64 {
        match self {
            CurveFamily::IterativeQuadratic { .. } | CurveFamily::Reciprocal => 0.0,
            CurveFamily::Gamma => 1.0,
        }
    }
}

/// Parameterless darkeners used as ablation stand-ins for the learned one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Heuristic {
    /// `I * factor`.
    Brightness { factor: f64 },
    /// `I^gamma`.
    GammaCorrection { gamma: f64 },
}

impl Heuristic {
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        match *self {
            Heuristic::Brightness { factor } => g.scale(image, T::from_f64_lossy(factor)),
            Heuristic::GammaCorrection { gamma } => g.pow_scalar(image, T::from_f64_lossy(gamma)),
        }
    }
}

/// Adjustment maps as plain tensors.
#[derive(Debug, Clone)]
pub struct AdjustmentMaps<T: Element> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// Adjustment maps living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub a: Var,
    pub b: Var,
}

/// Apply the curve on the graph. `alpha` holds either `C` channels shared
/// by every iteration or `C * iterations` channels, one block per iteration.
pub fn curve<T: Element>(g: &mut Graph<T>, x: Var, alpha: Var, family: CurveFamily) -> Result<Var> {
    let one = T::one();
    let eps = T::from_f64_lossy(CURVE_EPS);
    match family {
        CurveFamily::IterativeQuadratic { iterations } => {
            let xc = g.shape(x).get(1).copied().unwrap_or(1);
            let ac = g.shape(alpha).get(1).copied().unwrap_or(1);
            let per_iteration = g.shape(alpha).len() == 4 && ac == xc * iterations && iterations > 1;
            let mut y = x;
            for k in 0..iterations {
                let a = if per_iteration { g.slice(alpha, 1, k * xc, xc)? } else { alpha };
                // Convex form keeps a = 0 and a = 1 exact, so tiny values
                // square instead of cancelling to zero.
                let om = g.rsub_scalar(one, a)?;
                let lin = g.mul(om, y)?;
                let sq = g.mul(y, y)?;
                let quad = g.mul(a, sq)?;
                y = g.add(lin, quad)?;
            }
            Ok(y)
        }
        CurveFamily::Gamma => {
            let a = g.scale(alpha, one - eps)?;
            let a = g.add_scalar(a, eps)?;
            let e = g.pow_scalar(a, -one)?;
            g.pow(x, e)
        }
        CurveFamily::Reciprocal => {
            let a = g.min_scalar(alpha, one - eps)?;
            let om = g.rsub_scalar(one, a)?;
            let num = g.mul(om, x)?;
            let ax = g.mul(a, x)?;
            let den = g.rsub_scalar(one, ax)?;
            g.div(num, den)
        }
    }
}

/// `B * f(clamp(I / B, 0, 1), A)`.
pub fn darken_graph<T: Element>(g: &mut Graph<T>, image: Var, maps: MapVars, family: CurveFamily) -> Result<Var> {
    let ratio = g.div(image, maps.b)?;
    let ratio = g.clamp(ratio, T::zero(), T::one())?;
    let curved = curve(g, ratio, maps.a, family)?;
    g.mul(maps.b, curved)
}

fn check_range<T: Element>(t: &Tensor<T>, lo: f64, hi: f64, what: &'static str) -> Result<()> {
    let (mn, mx) = (t.min().as_f64(), t.max().as_f64());
    if mn < lo || mx > hi {
        return Err(Error::OutOfRange {
            op: what,
            detail: format!("values span [{mn}, {mx}], allowed [{lo}, {hi}]"),
        });
    }
    Ok(())
}

/// Evaluate a curve on plain tensors. Inputs must already be in range.
pub fn curve_f<T: Element>(x: &Tensor<T>, alpha: &Tensor<T>, family: CurveFamily) -> Result<Tensor<T>> {
    check_range(x, 0.0, 1.0, "curve_f x")?;
    check_range(alpha, 0.0, 1.0, "curve_f alpha")?;
    if x.shape() != alpha.shape() {
        return Err(Error::ShapeMismatch {
            op: "curve_f",
            lhs: x.shape().to_vec(),
            rhs: alpha.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let av = g.constant(alpha.clone())?;
    let y = curve(&mut g, xv, av, family)?;
    Ok(g.value(y).clone())
}

/// Darken plain tensors with given maps.
pub fn darken<T: Element>(image: &Tensor<T>, maps: &AdjustmentMaps<T>, family: CurveFamily) -> Result<Tensor<T>> {
    check_range(image, 0.0, 1.0, "darken image")?;
    check_range(&maps.a, 0.0, 1.0, "darken A")?;
    if maps.b.min() <= T::zero() || maps.b.max() > T::one() {
        return Err(Error::OutOfRange {
            op: "darken B",
            detail: "B must lie in (0, 1]".into(),
        });
    }
    if image.shape() != maps.b.shape() {
        return Err(Error::ShapeMismatch {
            op: "darken",
            lhs: image.shape().to_vec(),
            rhs: maps.b.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let i = g.constant(image.clone())?;
    let a = g.constant(maps.a.clone())?;
    let b = g.constant(maps.b.clone())?;
    let out = darken_graph(&mut g, i, MapVars { a, b }, family)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingEstimatorSpec {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub image_channels: usize,
    pub b_min: f64,
    pub family: CurveFamily,
    /// One `A` block per quadratic iteration instead of a single shared map.
    pub per_iteration_maps: bool,
}

impl Default for MappingEstimatorSpec {
    fn default() -> Self {
        MappingEstimatorSpec {
            widths: vec![16, 16, 16, 16],
            kernel: 3,
            image_channels: 3,
            b_min: B_MIN,
            family: CurveFamily::default(),
            per_iteration_maps: false,
        }
    }
}

impl MappingEstimatorSpec {
    fn a_channels(&self) -> usize {
        if self.per_iteration_maps {
            self.image_channels * self.family.iterations()
        } else {
            self.image_channels
        }
    }
}

/// Convolutional network predicting `(A, B)` from an image and exposure map.
#[derive(Debug, Clone)]
pub struct MappingEstimator<T: Element> {
    pub spec: MappingEstimatorSpec,
    pub params: ParamSet<T>,
    body: Vec<Conv2d>,
    head_a: Conv2d,
    head_b: Conv2d,
    initialized: bool,
}

impl<T: Element> MappingEstimator<T> {
    fn build(spec: MappingEstimatorSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "mapping estimator needs at least one layer and an odd kernel".into(),
            ));
        }
        if !(0.0..1.0).contains(&spec.b_min) || spec.b_min <= 0.0 {
            return Err(Error::InvalidArgument(format!("b_min must be in (0, 1), got {}", spec.b_min)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = spec.image_channels + 1;
        let mut body = Vec::new();
        for (i, &w) in spec.widths.iter().enumerate() {
            body.push(Conv2d::new(&mut params, &mut rng, &format!("conv{i}"), cin, w, spec.kernel, true, 1.0));
            cin = w;
        }
        let head_a = Conv2d::new(&mut params, &mut rng, "head_a", cin, spec.a_channels(), spec.kernel, true, 0.1);
        let head_b = Conv2d::new(&mut params, &mut rng, "head_b", cin, spec.image_channels, spec.kernel, true, 0.1);
        Ok(MappingEstimator {
            spec,
            params,
            body,
            head_a,
            head_b,
            initialized: false,
        })
    }

    /// Freshly initialized estimator.
    pub fn new(spec: MappingEstimatorSpec, seed: u64) -> Result<Self> {
        let mut m = Self::build(spec, seed)?;
        m.initialized = true;
        Ok(m)
    }

    /// Architecture only; weights must be loaded before use.
    pub fn uninitialized(spec: MappingEstimatorSpec) -> Result<Self> {
        Self::build(spec, 0)
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_set(CHECKPOINT_PREFIX, &mut self.params)?;
        self.initialized = true;
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_set(CHECKPOINT_PREFIX, &self.params);
    }

    /// Predict maps. `image: [N, C, H, W]`, `exposure: [N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var, exposure: Var) -> Result<MapVars> {
        if !self.initialized {
            return Err(Error::InvalidArgument("mapping estimator is not initialized".into()));
        }
        let (si, se) = (g.shape(image).to_vec(), g.shape(exposure).to_vec());
        if si.len() != 4 || se.len() != 4 || se[1] != 1 || si[0] != se[0] || si[2..] != se[2..] {
            return Err(Error::ShapeMismatch {
                op: "estimate_maps",
                lhs: si,
                rhs: se,
            });
        }
        if si[1] != self.spec.image_channels {
            return Err(Error::ShapeMismatch {
                op: "estimate_maps channels",
                lhs: si,
                rhs: vec![self.spec.image_channels],
            });
        }
        let mut h = g.concat(&[image, exposure], 1)?;
        for conv in &self.body {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let ra = self.head_a.forward(g, p, h)?;
        let a = g.sigmoid(ra)?;
        let rb = self.head_b.forward(g, p, h)?;
        let sb = g.sigmoid(rb)?;
        let bmin = T::from_f64_lossy(self.spec.b_min);
        let b = g.scale(sb, T::one() - bmin)?;
        let b = g.add_scalar(b, bmin)?;
        Ok(MapVars { a, b })
    }

    /// Maps for a batch, no gradients.
    pub fn estimate_maps(&self, image: &Tensor<T>, exposure: &Tensor<T>) -> Result<AdjustmentMaps<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let i = g.constant(image.clone())?;
        let e = g.constant(exposure.clone())?;
        let m = self.forward(&mut g, &p, i, e)?;
        Ok(AdjustmentMaps {
            a: g.value(m.a).clone(),
            b: g.value(m.b).clone(),
        })
    }

    /// Estimate maps and darken in one graph.
    pub fn darken_graph(&self, g: &mut Graph<T>, p: &Bound, image: Var, exposure: Var) -> Result<(Var, MapVars)> {
        let maps = self.forward(g, p, image, exposure)?;
        let out = darken_graph(g, image, maps, self.spec.family)?;
        Ok((out, maps))
    }

    /// `D(I, E)` for a batch, no gradients.
    pub fn darken_image(&self, image: &Tensor<T>, exposure: &Tensor<T>) -> Result<Tensor<T>> {
        check_range(image, 0.0, 1.0, "darken_image")?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let i = g.constant(image.clone())?;
        let e = g.constant(exposure.clone())?;
        let (out, _) = self.darken_graph(&mut g, &p, i, e)?;
        Ok(g.value(out).clone())
    }
}

/// The darkening module used by stage 2: either the learned estimator or a
/// heuristic stand-in.
#[derive(Debug, Clone)]
pub enum Darkener<T: Element> {
    Learned(MappingEstimator<T>),
    Heuristic(Heuristic),
}

impl<T: Element> Darkener<T> {
    /// Darken a batch with exposure maps `[N, 1, H, W]`, no gradients.
    pub fn apply(&self, image: &Tensor<T>, exposure: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Darkener::Learned(m) => m.darken_image(image, exposure),
            Darkener::Heuristic(h) => {
                let mut g = Graph::new();
                let i = g.constant(image.clone())?;
                let out = h.apply(&mut g, i)?;
                Ok(g.value(out).clone())
            }
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Darkener::Learned(m) => m.params.fingerprint(),
            Darkener::Heuristic(_) => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn quadratic_fixed_point_at_one() {
        let x = t(&[3], &[1.0, 1.0, 1.0]);
        let a = t(&[3], &[0.0, 0.3, 1.0]);
        let y = curve_f(&x, &a, CurveFamily::default()).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_identity_at_zero_alpha() {
        let x = t(&[4], &[0.0, 0.1, 0.5, 0.93]);
        let y = curve_f(&x, &Tensor::zeros(&[4]), CurveFamily::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn quadratic_full_alpha_is_power_256() {
        let y = curve_f(&t(&[1], &[0.9]), &t(&[1], &[1.0]), CurveFamily::default()).unwrap();
        let expected = 0.9f64.powi(256);
        assert!((y.item() - expected).abs() / expected < 1e-12);
        assert!((expected - 1.93e-12).abs() < 0.01e-12);
    }

    #[test]
    fn gamma_identity_at_one() {
        let x = t(&[3], &[0.0, 0.25, 0.8]);
        let y = curve_f(&x, &Tensor::ones(&[3]), CurveFamily::Gamma).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn reciprocal_identity_at_zero() {
        let x = t(&[3], &[0.0, 0.25, 0.8]);
        let y = curve_f(&x, &Tensor::zeros(&[3]), CurveFamily::Reciprocal).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn curve_rejects_out_of_range() {
        assert!(curve_f(&t(&[1], &[1.2]), &t(&[1], &[0.5]), CurveFamily::default()).is_err());
        assert!(curve_f(&t(&[1], &[0.2]), &t(&[1], &[-0.1]), CurveFamily::Gamma).is_err());
    }

    #[test]
    fn darken_identity_maps() {
        let img = t(&[1, 3, 1, 2], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let maps = AdjustmentMaps {
            a: Tensor::zeros(img.shape()),
            b: Tensor::ones(img.shape()),
        };
        assert_eq!(darken(&img, &maps, CurveFamily::default()).unwrap(), img);
    }

    #[test]
    fn darken_black_stays_black() {
        let img = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let maps = AdjustmentMaps {
            a: Tensor::full(img.shape(), 0.7),
            b: Tensor::full(img.shape(), 0.3),
        };
        assert_eq!(darken(&img, &maps, CurveFamily::default()).unwrap().max(), 0.0);
    }

    #[test]
    fn darken_half_with_full_alpha_flushes_in_f32() {
        let img = Tensor::<f32>::full(&[1], 0.5);
        let maps = AdjustmentMaps {
            a: Tensor::ones(&[1]),
            b: Tensor::ones(&[1]),
        };
        assert_eq!(darken(&img, &maps, CurveFamily::default()).unwrap().item(), 0.0);
        let img64 = Tensor::<f64>::full(&[1], 0.5);
        let maps64 = AdjustmentMaps {
            a: Tensor::ones(&[1]),
            b: Tensor::ones(&[1]),
        };
        let v = darken(&img64, &maps64, CurveFamily::default()).unwrap().item();
        assert!((v - 0.5f64.powi(256)).abs() < 1e-90);
    }

    #[test]
    fn estimator_ranges_and_determinism() {
        let spec = MappingEstimatorSpec::default();
        let net = MappingEstimator::<f32>::new(spec.clone(), 7).unwrap();
        let img = Tensor::<f32>::from_f64(vec![1, 3, 4, 4], &(0..48).map(|i| (i as f64 * 0.37) % 1.0).collect::<Vec<_>>()).unwrap();
        let e = Tensor::<f32>::full(&[1, 1, 4, 4], 0.3);
        let m1 = net.estimate_maps(&img, &e).unwrap();
        let m2 = net.estimate_maps(&img, &e).unwrap();
        assert_eq!(m1.a, m2.a);
        assert_eq!(m1.b, m2.b);
        assert!(m1.a.min() >= 0.0 && m1.a.max() <= 1.0);
        assert!(m1.b.min() >= 0.05 && m1.b.max() <= 1.0);
        let out = net.darken_image(&img, &e).unwrap();
        assert!(out.min() >= 0.0 && out.max() <= 1.0);
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!(*o <= *i + 1e-6);
        }
    }

    #[test]
    fn uninitialized_estimator_errors() {
        let net = MappingEstimator::<f32>::uninitialized(MappingEstimatorSpec::default()).unwrap();
        let img = Tensor::<f32>::full(&[1, 3, 4, 4], 0.5);
        let e = Tensor::<f32>::full(&[1, 1, 4, 4], 0.3);
        assert!(net.estimate_maps(&img, &e).is_err());
    }

    #[test]
    fn per_iteration_maps_have_one_block_per_iteration() {
        let spec = MappingEstimatorSpec {
            per_iteration_maps: true,
            ..Default::default()
        };
        let net = MappingEstimator::<f64>::new(spec, 1).unwrap();
        let img = Tensor::<f64>::full(&[2, 3, 4, 4], 0.6);
        let e = Tensor::<f64>::full(&[2, 1, 4, 4], 0.2);
        let maps = net.estimate_maps(&img, &e).unwrap();
        assert_eq!(maps.a.shape(), &[2, 24, 4, 4]);
        let out = net.darken_image(&img, &e).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.max() <= 0.6 + 1e-12);
    }

    #[test]
    fn heuristics_darken() {
        let img = Tensor::<f64>::full(&[1, 3, 2, 2], 0.6);
        let e = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Darkener::Heuristic(Heuristic::Brightness { factor: 0.2 }).apply(&img, &e).unwrap();
        assert!((b.max() - 0.12).abs() < 1e-12);
        let gm = Darkener::Heuristic(Heuristic::GammaCorrection { gamma: 2.0 }).apply(&img, &e).unwrap();
        assert!((gm.max() - 0.36).abs() < 1e-12);
    }
}
