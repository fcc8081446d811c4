//! Named parameter storage and the handful of layers the networks use.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, Conv2dOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Append a tensor and return its index.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Replace every tensor with the same-named tensor from `other`, checking shapes.
    pub fn load_from(&mut self, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let new = lookup(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if new.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: t.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
            *t = new;
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in &self.entries {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            feed(&buf);
        }
        h
    }

    /// Bind every tensor as a graph leaf. Trainable sets receive gradients;
    /// frozen ones are constants and can never receive any.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Gradients for a bound set, in parameter order.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

/// Graph handles of a bound [`ParamSet`], indexed like the set.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

/// Whether batch norm layers use batch statistics (collecting them for the
/// running averages) or their running statistics.
pub struct ForwardCtx<'a, T: Element> {
    pub train: bool,
    pub buffers: &'a ParamSet<T>,
    pub stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn train(buffers: &'a ParamSet<T>) -> Self {
        ForwardCtx {
            train: true,
            buffers,
            stats: Vec::new(),
        }
    }

    pub fn eval(buffers: &'a ParamSet<T>) -> Self {
        ForwardCtx {
            train: false,
            buffers,
            stats: Vec::new(),
        }
    }
}

/// Fold collected batch statistics into running buffers.
pub fn update_running_stats<T: Element>(buffers: &mut ParamSet<T>, stats: &[(usize, BatchStats<T>)], momentum: f64) {
    let mom = T::from_f64_lossy(momentum);
    let keep = T::one() - mom;
    for (mean_idx, s) in stats {
        for (r, &m) in buffers.at_mut(*mean_idx).data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in buffers.at_mut(*mean_idx + 1).data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + mom * v;
        }
    }
}

fn kaiming<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let weight = params.insert(format!("{name}.weight"), kaiming(rng, &[cout, cin, k, k], cin * k * k, gain));
        let bias = bias.then(|| params.insert(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            padding: k / 2,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p[self.weight],
            self.bias.map(|b| p[b]),
            Conv2dOpts {
                stride: 1,
                padding: self.padding,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        let weight = params.insert(format!("{name}.weight"), kaiming(rng, &[din, dout], din, gain));
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { weight, bias }
    }

    /// `x: [n, din] -> [n, dout]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add(y, p[self.bias])
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    /// Index of the running mean in the buffer set; the running variance
    /// immediately follows it.
    pub running_mean: usize,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<T: Element>(params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, ch: usize) -> Self {
        let gamma = params.insert(format!("{name}.gamma"), Tensor::ones(&[ch]));
        let beta = params.insert(format!("{name}.beta"), Tensor::zeros(&[ch]));
        let running_mean = buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]));
        buffers.insert(format!("{name}.running_var"), Tensor::ones(&[ch]));
        BatchNorm {
            gamma,
            beta,
            running_mean,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        if ctx.train {
            let (y, stats) = g.batch_norm(x, p[self.gamma], p[self.beta], None, eps)?;
            ctx.stats.push((self.running_mean, stats.expect("training batch norm returns stats")));
            Ok(y)
        } else {
            let rm = ctx.buffers.at(self.running_mean).data();
            let rv = ctx.buffers.at(self.running_mean + 1).data();
            let (y, _) = g.batch_norm(x, p[self.gamma], p[self.beta], Some((rm, rv)), eps)?;
            Ok(y)
        }
    }
}

/// Two-layer perceptron with one ReLU hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Element, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            hidden: Linear::new(params, rng, &format!("{name}.fc1"), din, hidden, 1.0),
            out: Linear::new(params, rng, &format!("{name}.fc2"), hidden, dout, 0.5),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::ones(&[2]));
        let before = p.fingerprint();
        assert_eq!(before, p.clone().fingerprint());
        p.at_mut(0).data_mut()[1] = 1.0 + f32::EPSILON;
        assert_ne!(before, p.fingerprint());
    }

    #[test]
    fn frozen_binding_gets_no_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        let lin = Linear::new(&mut p, &mut rng, "fc", 3, 2, 1.0);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false).unwrap();
        let x = g.param(Tensor::ones(&[1, 3])).unwrap();
        let y = lin.forward(&mut g, &bound, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(p.grads(&g, &bound).iter().all(|g| g.is_none()));
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut params = ParamSet::<f64>::new();
        let mut buffers = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut params, &mut buffers, "bn", 1);
        let stats = vec![(
            bn.running_mean,
            BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        )];
        update_running_stats(&mut buffers, &stats, 0.1);
        assert!((buffers.at(0).item() - 0.2).abs() < 1e-12);
        assert!((buffers.at(1).item() - 1.2).abs() < 1e-12);
    }
}
