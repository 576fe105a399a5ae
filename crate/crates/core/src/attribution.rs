//! Integrated Gradients on the classifier logit, with multi-reference averaging
//! and SmoothGrad-style noise averaging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{input_gradient_volume, ClassifierParams};
use crate::error::{Error, Result};
use crate::phantom::derive_seed;
use crate::volume::{apply_mask, gaussian_blur, Volume};

/// Baseline ("reference") policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Zero,
    Constant { value: f32 },
    /// Gaussian blur of the input; sigma in voxels, in-plane only.
    Blurred { sigma: f32 },
}

impl Reference {
    pub fn build(&self, x: &Volume) -> Volume {
        let mut b = match *self {
            Reference::Zero => Volume::filled(x.dims(), 0.0),
            Reference::Constant { value } => Volume::filled(x.dims(), value),
            Reference::Blurred { sigma } => gaussian_blur(x, [sigma, sigma, 0.0]),
        };
        b.set_spacing(x.spacing());
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub ig_steps: usize,
    /// Candidate references; the first `n_references` are used.
    pub references: Vec<Reference>,
    pub n_references: usize,
    /// 0 disables noise averaging.
    pub smoothgrad_n: usize,
    /// Noise std as a fraction of the input's value range.
    pub smoothgrad_sigma: f32,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            ig_steps: 32,
            references: vec![
                Reference::Zero,
                Reference::Constant { value: 0.25 },
                Reference::Constant { value: 0.5 },
                Reference::Constant { value: 0.75 },
                Reference::Blurred { sigma: 4.0 },
            ],
            n_references: 5,
            smoothgrad_n: 0,
            smoothgrad_sigma: 0.1,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be >= 1".into()));
        }
        if self.n_references == 0 || self.n_references > self.references.len() {
            return Err(Error::Config(format!(
                "n_references must be in 1..={}, got {}",
                self.references.len(),
                self.n_references
            )));
        }
        if !(self.smoothgrad_sigma >= 0.0) || !self.smoothgrad_sigma.is_finite() {
            return Err(Error::Config("smoothgrad_sigma must be >= 0".into()));
        }
        for r in &self.references {
            match *r {
                Reference::Constant { value } if !value.is_finite() => {
                    return Err(Error::Config("constant reference must be finite".into()))
                }
                Reference::Blurred { sigma } if !(sigma >= 0.0) || !sigma.is_finite() => {
                    return Err(Error::Config("blur sigma must be >= 0".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn active_references(&self) -> &[Reference] {
        &self.references[..self.n_references.min(self.references.len())]
    }

    /// Builds the active baselines for `x`. With `exclude`, masked voxels are
    /// zeroed in every baseline as they are in the input.
    pub fn baselines(&self, x: &Volume, exclude: Option<&Volume>) -> Result<Vec<Volume>> {
        self.active_references()
            .iter()
            .map(|r| {
                let b = r.build(x);
                match exclude {
                    Some(m) => apply_mask(&b, m),
                    None => Ok(b),
                }
            })
            .collect()
    }
}

/// Midpoint-rule Integrated Gradients of the classifier logit from `baseline` to `x`.
pub fn integrated_gradients(
    params: &ClassifierParams,
    x: &Volume,
    baseline: &Volume,
    steps: usize,
) -> Result<Volume> {
    if steps == 0 {
        return Err(Error::Precondition("steps must be >= 1".into()));
    }
    x.ensure_same_dims(baseline, "integrated_gradients baseline")?;
    params.architecture().check_input(x.dims())?;
    let xd = x.data();
    let bd = baseline.data();
    let grads: Vec<Vec<f32>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f32 + 0.5) / steps as f32;
            let data: Vec<f32> = xd.iter().zip(bd).map(|(&a, &b)| b + alpha * (a - b)).collect();
            let point = Volume::from_parts_unchecked(data, x.dims(), x.spacing());
            input_gradient_volume(params, &point).map(|(g, _)| g.into_data())
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0f64; xd.len()];
    for g in &grads {
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v as f64;
        }
    }
    let out = acc
        .iter()
        .zip(xd.iter().zip(bd))
        .map(|(&s, (&a, &b))| ((a as f64 - b as f64) * s / steps as f64) as f32)
        .collect();
    Ok(Volume::from_parts_unchecked(out, x.dims(), x.spacing()))
}

/// Mean of per-baseline IG heatmaps.
pub fn multi_reference_ig(
    params: &ClassifierParams,
    x: &Volume,
    baselines: &[Volume],
    steps: usize,
) -> Result<Volume> {
    if baselines.is_empty() {
        return Err(Error::Precondition("at least one baseline required".into()));
    }
    let maps: Vec<Volume> = baselines
        .par_iter()
        .map(|b| integrated_gradients(params, x, b, steps))
        .collect::<Result<_>>()?;
    Ok(mean_of(&maps))
}

fn mean_of(maps: &[Volume]) -> Volume {
    let n = maps.len();
    if n == 1 {
        return maps[0].clone();
    }
    let mut acc = vec![0.0f64; maps[0].len()];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let data = acc.iter().map(|&s| (s / n as f64) as f32).collect();
    Volume::from_parts_unchecked(data, maps[0].dims(), maps[0].spacing())
}

/// Mean of multi-reference IG over `smoothgrad_n` noisy copies of `x`.
/// Baselines are built from the clean input; with `exclude`, masked voxels
/// stay zero in every noisy copy.
pub fn smoothgrad_ig(
    params: &ClassifierParams,
    x: &Volume,
    cfg: &AttributionConfig,
    exclude: Option<&Volume>,
) -> Result<Volume> {
    cfg.validate()?;
    if cfg.smoothgrad_n == 0 {
        return Err(Error::Precondition("smoothgrad_n must be >= 1".into()));
    }
    let baselines = cfg.baselines(x, exclude)?;
    let (lo, hi) = x.min_max();
    let std = cfg.smoothgrad_sigma * (hi - lo);
    let maps: Vec<Volume> = (0..cfg.smoothgrad_n)
        .into_par_iter()
        .map(|s| {
            let noisy = if std > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, s as u64));
                let n = Normal::new(0.0f32, std).expect("finite std");
                let data = x.data().iter().map(|&v| v + n.sample(&mut rng)).collect();
                let v = Volume::from_parts_unchecked(data, x.dims(), x.spacing());
                match exclude {
                    Some(m) => apply_mask(&v, m)?,
                    None => v,
                }
            } else {
                x.clone()
            };
            multi_reference_ig(params, &noisy, &baselines, cfg.ig_steps)
        })
        .collect::<Result<_>>()?;
    Ok(mean_of(&maps))
}

/// Heatmap for `x` under `cfg`: SmoothGrad when enabled, plain multi-reference IG otherwise.
pub fn attribute(
    params: &ClassifierParams,
    x: &Volume,
    cfg: &AttributionConfig,
    exclude: Option<&Volume>,
) -> Result<Volume> {
    cfg.validate()?;
    if cfg.smoothgrad_n > 0 {
        smoothgrad_ig(params, x, cfg, exclude)
    } else {
        let baselines = cfg.baselines(x, exclude)?;
        multi_reference_ig(params, x, &baselines, cfg.ig_steps)
    }
}
