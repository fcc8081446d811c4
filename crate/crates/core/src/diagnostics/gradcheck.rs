//! Central finite-difference gradient checking.
//!
//! The reference derivative is always computed from `f64` forward
//! evaluations only, so it never touches the backward rules it is checking.
//! Perturbations whose forward pass lands on a different side of any
//! piecewise kink than the base point are excluded.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{DType, Element, Tensor};

/// A scalar function of several tensors, evaluable at any precision.
pub trait Objective {
    fn name(&self) -> String;

    /// Evaluate the scalar objective. `inputs` are gradient-carrying leaves.
    fn eval<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOpts {
    /// Central-difference step in input units.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub floor: f64,
    /// Coordinates checked per input tensor; all when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl GradcheckOpts {
    /// Settings for checking an `f32` analytic gradient.
    pub fn f32() -> Self {
        GradcheckOpts {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-2,
            max_coords: 48,
            seed: 0,
        }
    }

    /// Settings for checking an `f64` analytic gradient.
    pub fn f64() -> Self {
        GradcheckOpts {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-2,
            max_coords: 48,
            seed: 0,
        }
    }

    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::F32 => Self::f32(),
            DType::F64 => Self::f64(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub dtype: &'static str,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<T: Element, O: Objective>(obj: &O, inputs: &[Tensor<f64>]) -> Result<(f64, u64)> {
    let mut g = Graph::<T>::new().with_kink_tracking();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.cast()))
        .collect::<Result<Vec<_>>>()?;
    let out = obj.eval(&mut g, &vars)?;
    Ok((g.value(out).item().as_f64(), g.kink_signature()))
}

/// Analytic gradients of `obj` at `inputs`, computed in precision `T`.
pub fn analytic_gradients<T: Element, O: Objective>(obj: &O, inputs: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, u64)> {
    let mut g = Graph::<T>::new().with_kink_tracking();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.cast()))
        .collect::<Result<Vec<_>>>()?;
    let out = obj.eval(&mut g, &vars)?;
    let sig = g.kink_signature();
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|gr| gr.cast()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((grads, sig))
}

/// Compare the precision-`T` analytic gradient with central differences.
pub fn check<T: Element, O: Objective>(obj: &O, inputs: &[Tensor<f64>], opts: GradcheckOpts) -> Result<GradcheckReport> {
    let (analytic, sig_t) = analytic_gradients::<T, O>(obj, inputs)?;
    let (_, sig_ref) = evaluate::<f64, O>(obj, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checked = 0;
    let mut skipped = 0;
    let mut max_err: f64 = 0.0;
    // A base point sitting on a different branch at precision T than in f64
    // is itself within rounding distance of a kink.
    let base_on_kink = sig_t != sig_ref;
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            if base_on_kink {
                skipped += 1;
                continue;
            }
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[idx] += opts.step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[idx] -= opts.step;
            let (fp, sp) = evaluate::<f64, O>(obj, &plus)?;
            let (fm, sm) = evaluate::<f64, O>(obj, &minus)?;
            if sp != sig_ref || sm != sig_ref {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[ti].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            max_err = max_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        name: obj.name(),
        dtype: match T::DTYPE {
            DType::F32 => "f32",
            DType::F64 => "f64",
        },
        checked,
        skipped_kinks: skipped,
        max_rel_error: max_err,
        tolerance: opts.tolerance,
        passed: checked > 0 && max_err < opts.tolerance,
    })
}

/// Objective built from a plain function pointer pair, one per precision.
pub struct FnObjective {
    pub name: &'static str,
    pub f32: fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
    pub f64: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

impl Objective for FnObjective {
    fn name(&self) -> String {
        self.name.to_string()
    }

    fn eval<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        // Dispatch on the concrete element type.
        let any: &mut dyn std::any::Any = g;
        if let Some(g32) = any.downcast_mut::<Graph<f32>>() {
            return (self.f32)(g32, inputs);
        }
        let any: &mut dyn std::any::Any = g;
        let g64 = any.downcast_mut::<Graph<f64>>().expect("graph element is f32 or f64");
        (self.f64)(g64, inputs)
    }
}

/// Build a [`FnObjective`] from a generic function.
#[macro_export]
macro_rules! objective {
    ($name:expr, $f:ident) => {
        $crate::diagnostics::gradcheck::FnObjective {
            name: $name,
            f32: $f::<f32>,
            f64: $f::<f64>,
        }
    };
}
