//! Integrated Gradients on a randomly initialized classifier: completeness
//! against the number of path steps, multiple references and SmoothGrad.
//!
//! ```bash
//! cargo run --release --example integrated_gradients
//! ```

use explainseg::attribution::{attribute, integrated_gradients, AttributionConfig, Reference};
use explainseg::classifier::{forward_volume, Architecture, ClassifierParams};
use explainseg::phantom::{generate_phantom, PhantomConfig};
use explainseg::volume::{center_crop, extract_minivolume, hu_window_default, Dims};

fn main() -> explainseg::Result<()> {
    let study = generate_phantom(&PhantomConfig {
        dims: Dims::new(64, 64, 16),
        lesion_count_range: (1, 1),
        seed: 3,
        ..Default::default()
    })?;
    let z = study.lesions[0].center[2].round() as usize;
    let x = center_crop(extract_minivolume(&hu_window_default(&study.volume)?, z)?.volume(), 32, 32);
    let params = ClassifierParams::init_random(Architecture::default(), 5)?;

    let f = |v| forward_volume(&params, v).map(|p| p.logit as f64);
    let baseline = Reference::Zero.build(&x);
    let delta = f(&x)? - f(&baseline)?;
    println!("F(x) - F(baseline) = {delta:.6}");
    for steps in [4, 16, 64, 256] {
        let attr = integrated_gradients(&params, &x, &baseline, steps)?;
        let err = (attr.sum() - delta).abs() / delta.abs();
        println!("  {steps:>3} steps: sum {:.6}  relative completeness error {err:.2e}", attr.sum());
    }

    let cfg = AttributionConfig {
        ig_steps: 32,
        n_references: 5,
        ..Default::default()
    };
    let multi = attribute(&params, &x, &cfg, None)?;
    let smooth = attribute(
        &params,
        &x,
        &AttributionConfig {
            n_references: 1,
            smoothgrad_n: 8,
            ..cfg.clone()
        },
        None,
    )?;
    for (name, a) in [("5 references", &multi), ("smoothgrad n=8", &smooth)] {
        let (lo, hi) = a.min_max();
        println!("{name:>15}: range [{lo:.4}, {hi:.4}], nonzero {}", a.count_nonzero());
    }
    Ok(())
}
