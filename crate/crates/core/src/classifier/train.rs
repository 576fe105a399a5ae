use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{self, Weights};
use super::{sigmoid, Architecture, ClassifierParams};
use crate::error::{Error, Result};
use crate::phantom::{derive_seed, PhantomStudy};
use crate::volume::{center_crop, extract_minivolume, hu_window_default, Volume};

const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD with the configured momentum.
    Momentum,
    /// Adam with the configured momentum as beta1, beta2 = 0.999.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    pub momentum: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub cutout_prob: f32,
    /// In-plane side length range of the cutout box, in voxels.
    pub cutout_size_range: (usize, usize),
    /// Depth range of the cutout box, in slices.
    pub cutout_depth_range: (usize, usize),
    /// Global L2 norm cap on each batch gradient.
    pub grad_clip: f32,
    /// Train on a centered in-plane square of this side instead of the full slice.
    pub center_crop: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            optimizer: Optimizer::Adam,
            learning_rate: 0.005,
            momentum: 0.9,
            iterations: 600,
            batch_size: 16,
            cutout_prob: 0.5,
            cutout_size_range: (6, 24),
            cutout_depth_range: (1, 7),
            grad_clip: 5.0,
            center_crop: Some(88),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.learning_rate > 0.0) || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate, iterations and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cutout_prob) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("cutout_prob in [0,1] and momentum in [0,1) required".into()));
        }
        let (a, b) = self.cutout_size_range;
        let (c, d) = self.cutout_depth_range;
        if a == 0 || b < a || c == 0 || d < c {
            return Err(Error::Config("cutout ranges must satisfy 1 <= min <= max".into()));
        }
        if let Some(c) = self.center_crop {
            if c < 4 || c % 4 != 0 {
                return Err(Error::Config(format!("center_crop must be a positive multiple of 4, got {c}")));
            }
        }
        Ok(())
    }
}

/// Windowed studies plus the (study, center slice, label) samples drawn from them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    studies: Vec<Arc<Volume>>,
    positives: Vec<(usize, usize)>,
    negatives: Vec<(usize, usize)>,
}

impl TrainingSet {
    /// `volumes` must already be windowed to `[0, 1]`; `labels[i][z]` is the slice label.
    pub fn new(volumes: Vec<Volume>, labels: Vec<Vec<u8>>) -> Result<Self> {
        if volumes.len() != labels.len() {
            return Err(Error::Shape("one label vector per study required".into()));
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (s, (v, l)) in volumes.iter().zip(&labels).enumerate() {
            if l.len() != v.dims().depth {
                return Err(Error::Shape(format!(
                    "study {s}: {} labels for depth {}",
                    l.len(),
                    v.dims().depth
                )));
            }
            for (z, &lab) in l.iter().enumerate() {
                if lab != 0 {
                    positives.push((s, z));
                } else {
                    negatives.push((s, z));
                }
            }
        }
        Ok(Self {
            studies: volumes.into_iter().map(Arc::new).collect(),
            positives,
            negatives,
        })
    }

    pub fn from_studies(studies: &[PhantomStudy]) -> Result<Self> {
        let vols = studies
            .iter()
            .map(|s| hu_window_default(&s.volume))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vols, studies.iter().map(|s| s.slice_labels.clone()).collect())
    }

    pub fn positives(&self) -> usize {
        self.positives.len()
    }

    pub fn negatives(&self) -> usize {
        self.negatives.len()
    }

    pub fn study(&self, i: usize) -> &Volume {
        &self.studies[i]
    }

    /// All `(study, slice, label)` triples in study order.
    pub fn samples(&self) -> Vec<(usize, usize, u8)> {
        let mut all: Vec<_> = self
            .positives
            .iter()
            .map(|&(s, z)| (s, z, 1))
            .chain(self.negatives.iter().map(|&(s, z)| (s, z, 0)))
            .collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub curve: Vec<TrainStep>,
}

fn cutout(x: &mut [f32], dims: crate::volume::Dims, cfg: &TrainConfig, rng: &mut ChaCha8Rng) {
    let (smin, smax) = cfg.cutout_size_range;
    let (dmin, dmax) = cfg.cutout_depth_range;
    let bw = rng.random_range(smin..=smax).min(dims.width);
    let bh = rng.random_range(smin..=smax).min(dims.height);
    let bd = rng.random_range(dmin..=dmax).min(dims.depth);
    let x0 = rng.random_range(0..=dims.width - bw);
    let y0 = rng.random_range(0..=dims.height - bh);
    let z0 = rng.random_range(0..=dims.depth - bd);
    for z in z0..z0 + bd {
        for y in y0..y0 + bh {
            let start = dims.index(x0, y, z);
            x[start..start + bw].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn add_into(acc: &mut Weights<f32>, g: &Weights<f32>) {
    for (dst, src) in [
        (&mut acc.conv1_w, &g.conv1_w),
        (&mut acc.conv1_b, &g.conv1_b),
        (&mut acc.conv2_w, &g.conv2_w),
        (&mut acc.conv2_b, &g.conv2_b),
        (&mut acc.lin_w, &g.lin_w),
    ] {
        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
    acc.lin_b += g.lin_b;
}

/// Minimizes binary cross-entropy on class-balanced batches with Adam or
/// heavy-ball SGD.
///
/// Per-sample cutout and sampling draws come from seeds derived from
/// `(seed, iteration, slot)`, and per-sample gradients are reduced in slot
/// order, so the result is bit-identical for a given seed regardless of
/// thread count.
pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.positives.is_empty() || set.negatives.is_empty() {
        return Err(Error::Training(format!(
            "training data must contain both classes ({} positive, {} negative slices)",
            set.positives.len(),
            set.negatives.len()
        )));
    }
    for s in &set.studies {
        let (w, h) = match cfg.center_crop {
            Some(c) => (c.min(s.dims().width), c.min(s.dims().height)),
            None => (s.dims().width, s.dims().height),
        };
        cfg.arch.check_input(crate::volume::Dims::new(w, h, cfg.arch.depth))?;
    }
    let mut params = ClassifierParams::init_random(cfg.arch.clone(), derive_seed(cfg.seed, 0xC1A5))?;
    let mut velocity = params.weights.flatten();
    velocity.iter_mut().for_each(|v| *v = 0.0);
    let mut second = velocity.clone();
    let n_pos = cfg.batch_size.div_ceil(2);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let wts = &params.weights;
        let arch = &cfg.arch;
        let per_sample: Vec<(f64, Weights<f32>)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(cfg.seed, it as u64 + 1),
                    slot as u64,
                ));
                let (pool, label) = if slot < n_pos {
                    (&set.positives, 1.0)
                } else {
                    (&set.negatives, 0.0)
                };
                let (s, z) = pool[rng.random_range(0..pool.len())];
                let mini = extract_minivolume(&set.studies[s], z).expect("slice in range");
                let mini = match cfg.center_crop {
                    Some(c) => center_crop(mini.volume(), c, c),
                    None => mini.into_volume(),
                };
                let dims = mini.dims();
                let mut x = mini.into_data();
                if rng.random::<f32>() < cfg.cutout_prob {
                    cutout(&mut x, dims, cfg, &mut rng);
                }
                let cache = net::forward(wts, arch, &x, dims.width, dims.height);
                let z = cache.logit as f64;
                let loss = bce_with_logits(z, label);
                let dlogit = (sigmoid(z) - label) as f32;
                let (_, g) = net::backward(wts, &cache, &x, dlogit, false, true);
                (loss, g.expect("param gradient"))
            })
            .collect();

        let mut grad = Weights::zeros(&cfg.arch);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            add_into(&mut grad, g);
        }
        let scale = 1.0 / cfg.batch_size as f32;
        let mut flat = grad.flatten();
        flat.iter_mut().for_each(|g| *g *= scale);
        let norm = flat.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
            let c = (cfg.grad_clip as f64 / norm) as f32;
            flat.iter_mut().for_each(|g| *g *= c);
        }
        let mut theta = params.weights.flatten();
        match cfg.optimizer {
            Optimizer::Momentum => {
                for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&flat) {
                    *v = cfg.momentum * *v + g;
                    *t -= cfg.learning_rate * *v;
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (cfg.momentum, ADAM_BETA2);
                let c1 = 1.0 - b1.powi(it as i32 + 1);
                let c2 = 1.0 - b2.powi(it as i32 + 1);
                for (((t, m), v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut()).zip(&flat) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *t -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Training(format!("parameters diverged at iteration {it}")));
        }
        params.weights = Weights::unflatten(&cfg.arch, &theta).expect("same layout");
        curve.push(TrainStep {
            iteration: it,
            loss: loss / cfg.batch_size as f64,
            grad_norm: norm,
        });
    }
    Ok(TrainOutcome { params, curve })
}
