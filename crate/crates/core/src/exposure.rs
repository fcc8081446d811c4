//! Exposure maps conditioning the darkener.
//!
//! Stage 1 uses constant maps with a level drawn from `U(0, 0.5)`. Stage 2
//! uses compound maps `U(0, 0.2) + z1 + z2` where `z1` is per-pixel
//! Gaussian noise and `z2` one Gaussian draw per square tile.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const STAGE1_MAX: f64 = 0.5;
pub const STAGE2_BASE_MAX: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_pixel: f64,
    pub sigma_patch: f64,
    pub patch_size: usize,
    pub floor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_pixel: 0.01,
            sigma_patch: 0.03,
            patch_size: 8,
            floor: 0.01,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pixel >= 0.0 && self.sigma_patch >= 0.0 && self.floor >= 0.0 && self.floor <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid exposure noise spec {self:?}")));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidArgument("exposure.patch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposureKind {
    Constant,
    Compound,
}

/// Row-major `[H, W]` exposure values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub kind: ExposureKind,
}

impl ExposureMap {
    pub fn constant(h: usize, w: usize, level: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::OutOfRange {
                op: "exposure level",
                detail: format!("{level} not in [0, 1]"),
            });
        }
        Ok(ExposureMap {
            h,
            w,
            values: vec![level; h * w],
            kind: ExposureKind::Constant,
        })
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, 1, self.h, self.w], &self.values).expect("exposure map extents are consistent")
    }
}

/// Stack maps into `[N, 1, H, W]`.
pub fn stack_maps<T: Element>(maps: &[ExposureMap]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no exposure maps to stack".into()))?;
    let mut data = Vec::with_capacity(maps.len() * first.values.len());
    for m in maps {
        if (m.h, m.w) != (first.h, first.w) {
            return Err(Error::ShapeMismatch {
                op: "stack_maps",
                lhs: vec![first.h, first.w],
                rhs: vec![m.h, m.w],
            });
        }
        data.extend(m.values.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(vec![maps.len(), 1, first.h, first.w], data)
}

pub fn sample_stage1<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> ExposureMap {
    let level = rng.gen::<f64>() * STAGE1_MAX;
    ExposureMap::constant(h, w, level).expect("level within [0, 0.5]")
}

/// Unclamped components of a compound map.
#[derive(Debug, Clone)]
pub struct CompoundParts {
    pub base: f64,
    pub pixel: Vec<f64>,
    pub patch: Vec<f64>,
}

pub fn sample_stage2_parts<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, noise: &NoiseSpec) -> CompoundParts {
    let base = rng.gen::<f64>() * STAGE2_BASE_MAX;
    let pixel_dist = Normal::new(0.0, noise.sigma_pixel).expect("sigma validated non-negative");
    let patch_dist = Normal::new(0.0, noise.sigma_patch).expect("sigma validated non-negative");
    let pixel: Vec<f64> = (0..h * w).map(|_| pixel_dist.sample(rng)).collect();
    let ps = noise.patch_size.max(1);
    let (ty, tx) = (h.div_ceil(ps), w.div_ceil(ps));
    let tiles: Vec<f64> = (0..ty * tx).map(|_| patch_dist.sample(rng)).collect();
    let mut patch = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            patch[y * w + x] = tiles[(y / ps) * tx + x / ps];
        }
    }
    CompoundParts { base, pixel, patch }
}

pub fn sample_stage2<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, noise: &NoiseSpec) -> ExposureMap {
    let parts = sample_stage2_parts(rng, h, w, noise);
    let lo = noise.floor.min(1.0);
    let values = parts
        .pixel
        .iter()
        .zip(&parts.patch)
        .map(|(z1, z2)| (parts.base + z1 + z2).clamp(lo, 1.0))
        .collect();
    ExposureMap {
        h,
        w,
        values,
        kind: ExposureKind::Compound,
    }
}
