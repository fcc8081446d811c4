//! Procedural day/night shape classification dataset.
//!
//! Day scenes are a bright textured background with one shape whose class
//! is its geometry. Night scenes apply a stochastic transform: gamma,
//! per-channel color shift with attenuation, additive light blobs, Gaussian
//! sensor noise, clamp. The noise and blobs put night renderings outside
//! what the pixel-wise darkening curves can express.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use super::manifest::DatasetManifest;
use super::ppm::save_image;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "cross", "diamond", "stripes", "pair", "frame",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NightSpec {
    pub gamma: (f64, f64),
    /// Overall attenuation applied with the color shift.
    pub gain: (f64, f64),
    /// Red-blue balance shift; positive is warmer.
    pub temperature: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub max_blobs: usize,
    pub blob_amplitude: (f64, f64),
    /// Blob radius as a fraction of the image size.
    pub blob_radius: (f64, f64),
    /// Mean intensity the gamma/shift/blob stages are capped at, leaving
    /// headroom for noise.
    pub mean_cap: f64,
}

impl Default for NightSpec {
    fn default() -> Self {
        NightSpec {
            gamma: (2.0, 4.0),
            gain: (0.2, 0.4),
            temperature: (-0.25, 0.35),
            noise_sigma: (0.02, 0.05),
            max_blobs: 2,
            blob_amplitude: (0.15, 0.45),
            blob_radius: (0.06, 0.15),
            mean_cap: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSceneSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub night: NightSpec,
}

impl Default for ShapeSceneSpec {
    fn default() -> Self {
        ShapeSceneSpec {
            num_classes: 10,
            image_size: 32,
            train_per_class: 200,
            val_per_class: 40,
            test_per_class: 50,
            night: NightSpec::default(),
        }
    }
}

impl ShapeSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::InvalidArgument(format!("num_classes must be in 2..=10, got {}", self.num_classes)));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image_size must be >= 8".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("every split needs at least one image per class".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= 0.95 * (v + 0.9) / 1.7,
        3 => (0.3..=1.0).contains(&r2),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => {
            let (a, b) = ((u - v).abs(), (u + v).abs());
            (a <= 0.4 && b <= 1.5) || (b <= 0.4 && a <= 1.5)
        }
        6 => u.abs() + v.abs() <= 1.0,
        7 => u.abs() <= 0.9 && v.abs() <= 0.9 && ((v + 0.9) / 0.36).floor() as i64 % 2 == 0,
        8 => (u + 0.5).powi(2) + v * v <= 0.2 || (u - 0.5).powi(2) + v * v <= 0.2,
        _ => {
            let m = u.abs().max(v.abs());
            (0.55..=0.9).contains(&m)
        }
    }
}

/// Render a bright day scene `[3, S, S]`.
pub fn render_day(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = size as f64;
    let level = rng.gen_range(0.72..0.92);
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.06..0.06)).collect();
    let (fx, fy, phase) = (rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.0..6.3));
    let amp = rng.gen_range(0.01..0.04);
    // Mid-luminance saturated shape color, channel average in [0.42, 0.55].
    let mut color: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
    let avg = color.iter().sum::<f64>() / 3.0;
    let target = rng.gen_range(0.42..0.55);
    color.iter_mut().for_each(|c| *c = (*c * target / avg).min(1.0));
    let radius = s * rng.gen_range(0.28..0.4);
    let (cx, cy) = (s / 2.0 + rng.gen_range(-0.1..0.1) * s, s / 2.0 + rng.gen_range(-0.1..0.1) * s);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let on = inside(class, (px - cx) / radius, (py - cy) / radius);
            let tex = amp * (fx * px + fy * py + phase).sin();
            for c in 0..3 {
                let v = if on { color[c] + 0.5 * tex } else { level + tint[c] + tex };
                data[c * plane + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("extents match")
}

/// Stochastic night rendering of a day image `[3, S, S]`.
pub fn night_transform(day: &Tensor<f64>, spec: &NightSpec, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (h, w) = (day.shape()[1], day.shape()[2]);
    let plane = h * w;
    let gamma = uniform(rng, spec.gamma);
    let mut gain = uniform(rng, spec.gain);
    let temp = uniform(rng, spec.temperature);
    let shift = [1.0 + temp, 1.0 - 0.3 * temp.abs(), 1.0 - temp];
    let mut out: Vec<f64> = day.data().iter().map(|v| v.powf(gamma)).collect();
    let mean_after = |img: &[f64], g: f64| img.chunks(plane).zip(shift).map(|(p, k)| p.iter().sum::<f64>() * g * k).sum::<f64>() / img.len() as f64;
    let shifted_mean = mean_after(&out, gain);
    if shifted_mean > spec.mean_cap {
        gain *= spec.mean_cap / shifted_mean;
    }
    for (c, p) in out.chunks_mut(plane).enumerate() {
        p.iter_mut().for_each(|v| *v *= gain * shift[c]);
    }
    let blobs = rng.gen_range(0..=spec.max_blobs);
    let light = [1.0, 0.85, 0.55];
    let s = h.min(w) as f64;
    for _ in 0..blobs {
        let (bx, by) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let amp = uniform(rng, spec.blob_amplitude);
        let r = uniform(rng, spec.blob_radius) * s;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                let k = amp * (-d2 / (2.0 * r * r)).exp();
                for (c, l) in light.iter().enumerate() {
                    out[c * plane + y * w + x] += k * l;
                }
            }
        }
    }
    let m = out.iter().sum::<f64>() / out.len() as f64;
    if m > spec.mean_cap {
        out.iter_mut().for_each(|v| *v *= spec.mean_cap / m);
    }
    let sigma = uniform(rng, spec.noise_sigma);
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    out.iter_mut().for_each(|v| *v = (*v + noise.sample(rng)).clamp(0.0, 1.0));
    Tensor::new(vec![3, h, w], out).expect("extents match")
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub mean_intensity: f64,
}

fn split_code(split: &str) -> u64 {
    match split {
        "train" => 1,
        "val" => 2,
        _ => 3,
    }
}

/// Write `train`, `val`, `test_day` and `test_night` splits under `out_root`
/// with a `<split>.manifest` each. `test_night` renders the `test_day`
/// scenes at night with an independent random stream.
pub fn generate(spec: &ShapeSceneSpec, seed_value: u64, out_root: &Path) -> Result<(Vec<DatasetManifest>, Vec<SplitSummary>)> {
    spec.validate()?;
    let classes: Vec<String> = SHAPE_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect();
    let plan = [
        ("train", spec.train_per_class),
        ("val", spec.val_per_class),
        ("test_day", spec.test_per_class),
        ("test_night", spec.test_per_class),
    ];
    let mut manifests = Vec::new();
    let mut summaries = Vec::new();
    for (split, per_class) in plan {
        let night = split == "test_night";
        let scene_split = if night { "test_day" } else { split };
        let jobs: Vec<(usize, usize)> = (0..per_class).flat_map(|i| (0..spec.num_classes).map(move |c| (c, i))).collect();
        let results = jobs
            .par_iter()
            .map(|&(class, i)| {
                let mut rng = seed::rng(&[seed_value, split_code(scene_split), class as u64, i as u64]);
                let mut img = render_day(class, spec.image_size, &mut rng);
                if night {
                    let mut nrng = seed::rng(&[seed_value, 4, class as u64, i as u64]);
                    img = night_transform(&img, &spec.night, &mut nrng);
                }
                let rel = format!("{split}/{}/{i:05}.ppm", classes[class]);
                save_image(&img, &out_root.join(&rel))?;
                Ok((rel, class, img.mean()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_intensity = results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64;
        let m = DatasetManifest {
            root: out_root.to_path_buf(),
            classes: classes.clone(),
            split: Some(split.to_string()),
            entries: results.into_iter().map(|(p, c, _)| (p, c)).collect(),
        };
        m.save(&out_root.join(format!("{split}.manifest")))?;
        summaries.push(SplitSummary {
            split: split.to_string(),
            count: m.len(),
            mean_intensity,
        });
        manifests.push(m);
    }
    Ok((manifests, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_bright_night_dark() {
        for class in 0..10 {
            for i in 0..20 {
                let mut rng = seed::rng(&[9, class, i]);
                let day = render_day(class as usize, 32, &mut rng);
                assert!(day.mean() >= 0.35, "day mean {}", day.mean());
                let night = night_transform(&day, &NightSpec::default(), &mut rng);
                assert!(night.mean() <= 0.15, "night mean {}", night.mean());
                assert!(night.min() >= 0.0 && night.max() <= 1.0);
            }
        }
    }

    #[test]
    fn every_class_draws_its_shape() {
        for class in 0..10 {
            let mut rng = seed::rng(&[1, class]);
            let day = render_day(class as usize, 32, &mut rng);
            let d = day.data();
            let lo = (0..1024).filter(|&i| (d[i] + d[1024 + i] + d[2048 + i]) / 3.0 < 0.6).count();
            assert!(lo > 40, "class {class} covers {lo} pixels");
        }
    }

    #[test]
    fn night_renderings_are_stochastic() {
        let mut rng = seed::rng(&[2]);
        let day = render_day(3, 32, &mut rng);
        let a = night_transform(&day, &NightSpec::default(), &mut seed::rng(&[10]));
        let b = night_transform(&day, &NightSpec::default(), &mut seed::rng(&[11]));
        assert_ne!(a, b);
    }
}
