use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net;
use super::ClassifierParams;
use crate::error::{Error, Result};
use crate::volume::MiniVolume;

const MIN_VOXELS: usize = 256;
/// Denominator floor for relative errors between near-zero derivatives.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Voxels whose +/- eps probes changed the activation pattern (kink crossings).
    pub skipped_kinks: usize,
}

/// Compares the analytic input gradient against central differences in 64-bit
/// precision on at least 256 voxels (all voxels with a nonzero gradient are
/// preferred, the rest drawn at random).
pub fn finite_diff_check(params: &ClassifierParams, mini: &MiniVolume, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Precondition(format!("eps must be > 0, got {eps}")));
    }
    let arch = params.architecture();
    let dims = mini.dims();
    arch.check_input(dims)?;
    let w64 = params.weights.cast::<f64>();
    let x: Vec<f64> = mini.volume().data().iter().map(|&v| v as f64).collect();
    let cache = net::forward(&w64, arch, &x, dims.width, dims.height);
    let pattern = net::activation_pattern(&cache);
    let (grad, _) = net::backward(&w64, &cache, &x, 1.0, true, false);
    let grad = grad.expect("input gradient");

    let mut chosen: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    chosen.truncate(MIN_VOXELS / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(dims.len() as u64 ^ 0x5eed);
    let want = MIN_VOXELS.min(grad.len());
    for i in sample(&mut rng, grad.len(), grad.len()).into_iter() {
        if chosen.len() >= want {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }

    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for &i in &chosen {
        probe[i] = x[i] + eps;
        let plus = net::forward(&w64, arch, &probe, dims.width, dims.height);
        probe[i] = x[i] - eps;
        let minus = net::forward(&w64, arch, &probe, dims.width, dims.height);
        probe[i] = x[i];
        if net::activation_pattern(&plus) != pattern || net::activation_pattern(&minus) != pattern {
            skipped += 1;
            continue;
        }
        let fd = (plus.logit - minus.logit) / (2.0 * eps);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped_kinks: skipped,
    })
}
