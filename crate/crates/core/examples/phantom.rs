//! Generate a small synthetic dataset and inspect one positive study.
//!
//! ```bash
//! cargo run --release --example phantom
//! ```

use explainseg::phantom::{generate_dataset, PhantomConfig};
use explainseg::volume::{hu_window_default, Dims};

fn main() -> explainseg::Result<()> {
    let cfg = PhantomConfig {
        dims: Dims::new(96, 96, 32),
        seed: 7,
        ..Default::default()
    };
    let studies = generate_dataset(&cfg, 6, 0.5)?;
    for s in &studies {
        let positive_slices = s.slice_labels.iter().filter(|&&l| l == 1).count();
        println!(
            "{}  seed {:>20}  lesions {}  positive slices {:>2}/{}  gt voxels {}",
            s.id,
            s.seed,
            s.lesions.len(),
            positive_slices,
            s.slice_labels.len(),
            s.gt_mask.count_nonzero()
        );
    }

    let s = studies.iter().find(|s| s.is_positive()).expect("positivity 0.5 yields positives");
    let (lo, hi) = s.volume.min_max();
    println!("\n{}: HU range [{lo:.0}, {hi:.0}]", s.id);
    for l in &s.lesions {
        println!(
            "  lesion at ({:.1}, {:.1}, {:.1}) radii ({:.1}, {:.1}, {:.1}) -> {} voxels",
            l.center[0], l.center[1], l.center[2], l.radii[0], l.radii[1], l.radii[2], l.voxel_count
        );
    }

    // ASCII view of the center slice of the first lesion after windowing.
    let w = hu_window_default(&s.volume)?;
    let z = s.lesions[0].center[2].round() as usize;
    let d = w.dims();
    println!("\nslice {z} (windowed, '#' lesion, '@' bright, '+' mid):");
    for y in (0..d.height).step_by(3) {
        let line: String = (0..d.width)
            .step_by(2)
            .map(|x| {
                if s.gt_mask.get(x, y, z) > 0.0 {
                    '#'
                } else {
                    match w.get(x, y, z) {
                        v if v > 0.8 => '@',
                        v if v > 0.2 => '+',
                        _ => '.',
                    }
                }
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
