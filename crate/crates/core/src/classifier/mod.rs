//! Slice-level 2.5D classifier with exact reverse-mode input gradients.
//!
//! Architecture: conv 3x3x3 (C1) -> ReLU -> max pool 2x2x1 -> conv 3x3x3 (C2)
//! -> ReLU -> max pool 2x2x1 -> in-plane global max per channel and depth
//! -> linear -> logit. The network is fully convolutional in-plane; only the
//! stack depth is fixed.

mod gradcheck;
pub(crate) mod net;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, MiniVolume, Volume, MINI_DEPTH};

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use train::{train, Optimizer, TrainConfig, TrainOutcome, TrainStep, TrainingSet};

use net::Weights;

pub const ARCH_NAME: &str = "conv3-pool-conv3-pool-gmax-linear";

/// Architecture descriptor, embedded in serialized parameters and checked at load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub depth: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Architecture {
    pub fn new(c1: usize, c2: usize) -> Self {
        Self {
            name: ARCH_NAME.to_string(),
            depth: MINI_DEPTH,
            c1,
            c2,
        }
    }

    /// Depth positions left after the two depth-valid convolutions.
    pub fn feature_depth(&self) -> usize {
        self.depth - 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.name != ARCH_NAME {
            return Err(Error::Config(format!("unknown architecture '{}'", self.name)));
        }
        if self.depth != MINI_DEPTH || self.c1 == 0 || self.c2 == 0 {
            return Err(Error::Config(format!(
                "architecture needs depth {MINI_DEPTH} and nonzero channels, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Input in-plane sizes must be multiples of 4 (two 2x2 poolings).
    pub fn check_input(&self, dims: Dims) -> Result<()> {
        if dims.depth != self.depth {
            return Err(Error::Shape(format!(
                "classifier expects depth {}, got {dims}",
                self.depth
            )));
        }
        if dims.width < 4 || dims.height < 4 || dims.width % 4 != 0 || dims.height % 4 != 0 {
            return Err(Error::Shape(format!(
                "in-plane size must be a positive multiple of 4, got {dims}"
            )));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::new(8, 16)
    }
}

/// Trained or initialized network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    arch: Architecture,
    pub(crate) weights: Weights<f32>,
}

impl PartialEq for Weights<f32> {
    fn eq(&self, other: &Self) -> bool {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

impl ClassifierParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let weights = Weights::zeros(&arch);
        Ok(Self { arch, weights })
    }

    /// He-normal initialization of conv and linear weights; biases zero.
    pub fn init_random(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f32], fan_in: usize| {
            let n = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            v.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        let c1 = p.arch.c1;
        let c2 = p.arch.c2;
        fill(&mut p.weights.conv1_w, 27);
        fill(&mut p.weights.conv2_w, 27 * c1);
        fill(&mut p.weights.lin_w, c2 * p.arch.feature_depth());
        Ok(p)
    }

    /// Rebuilds parameters from a flat vector in serialization order.
    pub fn from_flat(arch: Architecture, flat: &[f32]) -> Result<Self> {
        arch.validate()?;
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::DataIntegrity(format!("non-finite parameter at index {i}")));
        }
        let weights = Weights::unflatten(&arch, flat).ok_or_else(|| {
            Error::Shape(format!(
                "parameter count {} does not match architecture {:?}",
                flat.len(),
                arch
            ))
        })?;
        Ok(Self { arch, weights })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Serialization order: conv1 weights, conv1 bias, conv2 weights, conv2 bias,
    /// linear weights, linear bias.
    pub fn flatten(&self) -> Vec<f32> {
        self.weights.flatten()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn conv1_weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights.conv1_w
    }
    pub fn conv1_bias_mut(&mut self) -> &mut [f32] {
        &mut self.weights.conv1_b
    }
    pub fn conv2_weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights.conv2_w
    }
    pub fn conv2_bias_mut(&mut self) -> &mut [f32] {
        &mut self.weights.conv2_b
    }
    pub fn linear_weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights.lin_w
    }
    pub fn set_linear_bias(&mut self, b: f32) {
        self.weights.lin_b = b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub prob: f32,
    pub logit: f32,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(params: &ClassifierParams, mini: &MiniVolume) -> Result<Prediction> {
    forward_volume(params, mini.volume())
}

/// Forward pass on any 7-deep grid (used along attribution paths).
pub fn forward_volume(params: &ClassifierParams, x: &Volume) -> Result<Prediction> {
    let dims = x.dims();
    params.arch.check_input(dims)?;
    let cache = net::forward(&params.weights, &params.arch, x.data(), dims.width, dims.height);
    Ok(Prediction {
        prob: sigmoid(cache.logit as f64) as f32,
        logit: cache.logit,
    })
}

pub fn input_gradient(params: &ClassifierParams, mini: &MiniVolume) -> Result<Volume> {
    input_gradient_volume(params, mini.volume()).map(|(g, _)| g)
}

/// Gradient of the logit with respect to every input voxel, plus the logit itself.
pub fn input_gradient_volume(params: &ClassifierParams, x: &Volume) -> Result<(Volume, f32)> {
    let dims = x.dims();
    params.arch.check_input(dims)?;
    let cache = net::forward(&params.weights, &params.arch, x.data(), dims.width, dims.height);
    let (grad, _) = net::backward(&params.weights, &cache, x.data(), 1.0, true, false);
    let grad = grad.expect("input gradient requested");
    Ok((Volume::from_parts_unchecked(grad, dims, x.spacing()), cache.logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::extract_minivolume;

    fn random_input(dims: Dims, seed: u64) -> Volume {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new((0..dims.len()).map(|_| rng.random::<f32>()).collect(), dims).unwrap()
    }

    fn mini(dims: Dims, seed: u64) -> MiniVolume {
        MiniVolume::new(random_input(dims, seed), 3).unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        let p = ClassifierParams::zeros(Architecture::default()).unwrap();
        let m = mini(Dims::new(16, 16, 7), 1);
        let out = forward(&p, &m).unwrap();
        assert_eq!(out.prob, 0.5);
        assert_eq!(out.logit, 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ClassifierParams::init_random(Architecture::default(), 5).unwrap();
        let m = mini(Dims::new(32, 24, 7), 2);
        assert_eq!(forward(&p, &m).unwrap(), forward(&p, &m).unwrap());
        let g1 = input_gradient(&p, &m).unwrap();
        let g2 = input_gradient(&p, &m).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn shape_errors() {
        let p = ClassifierParams::zeros(Architecture::default()).unwrap();
        let bad = Volume::zeros(Dims::new(18, 16, 7));
        assert!(matches!(forward_volume(&p, &bad), Err(Error::Shape(_))));
        let study = Volume::zeros(Dims::new(16, 16, 9));
        assert!(matches!(forward_volume(&p, &study), Err(Error::Shape(_))));
        let m = extract_minivolume(&study, 4).unwrap();
        assert!(forward(&p, &m).is_ok());
    }

    #[test]
    fn dead_network_has_zero_gradient() {
        let mut p = ClassifierParams::init_random(Architecture::default(), 3).unwrap();
        p.conv1_weights_mut().iter_mut().for_each(|w| *w = 0.0);
        p.conv2_weights_mut().iter_mut().for_each(|w| *w = 0.0);
        p.conv1_bias_mut().iter_mut().for_each(|b| *b = 0.3);
        let g = input_gradient(&p, &mini(Dims::new(16, 16, 7), 4)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_in_final_weights() {
        let arch = Architecture::default();
        let base = ClassifierParams::init_random(arch.clone(), 9).unwrap();
        let m = mini(Dims::new(16, 16, 7), 6);
        let n = base.weights.lin_w.len();
        let u: Vec<f32> = (0..n).map(|i| ((i % 5) as f32 - 2.0) * 0.25).collect();
        let v: Vec<f32> = (0..n).map(|i| ((i % 3) as f32 - 1.0) * 0.5).collect();
        let with = |lw: &[f32]| {
            let mut p = base.clone();
            p.linear_weights_mut().copy_from_slice(lw);
            input_gradient(&p, &m).unwrap()
        };
        let (a, b) = (2.0f32, -0.75f32);
        let mix: Vec<f32> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let (gu, gv, gm) = (with(&u), with(&v), with(&mix));
        for i in 0..gm.len() {
            let expect = a * gu.data()[i] + b * gv.data()[i];
            assert!((gm.data()[i] - expect).abs() <= 1e-5 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn flat_roundtrip() {
        let p = ClassifierParams::init_random(Architecture::new(4, 6), 1).unwrap();
        let q = ClassifierParams::from_flat(p.architecture().clone(), &p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(ClassifierParams::from_flat(Architecture::new(4, 6), &[0.0; 3]).is_err());
    }
}
