//! Two-level thresholding of a synthetic attribution map, compared with plain
//! thresholding followed by connected components.
//!
//! ```bash
//! cargo run --release --example hysteresis
//! ```

use explainseg::clustering::{connected_components, hysteresis_cluster, Connectivity, Neighborhood};
use explainseg::volume::{Dims, Volume};

fn blob(dims: Dims, c: [f32; 3], r: f32, peak: f32, out: &mut [f32]) {
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let d2 = (x as f32 - c[0]).powi(2) + (y as f32 - c[1]).powi(2) + (z as f32 - c[2]).powi(2);
                out[dims.index(x, y, z)] += peak * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
}

fn main() -> explainseg::Result<()> {
    let dims = Dims::new(48, 48, 7);
    let mut data = vec![0.0f32; dims.len()];
    // A strong blob, a weak blob near it and a weak isolated blob.
    blob(dims, [14.0, 14.0, 3.0], 2.5, 1.0, &mut data);
    blob(dims, [22.0, 14.0, 3.0], 2.0, 0.35, &mut data);
    blob(dims, [38.0, 38.0, 3.0], 2.5, 0.35, &mut data);
    let heat = Volume::new(data, dims)?;

    let t_high = 0.6;
    for window in [Neighborhood::new(3, 3, 1), Neighborhood::new(15, 15, 5)] {
        let seg = hysteresis_cluster(&heat, t_high, window)?;
        let parts = connected_components(&seg, Connectivity::Full26)?;
        println!(
            "window {}x{}x{}: {} voxels in {} component(s)",
            window.x,
            window.y,
            window.z,
            seg.count_nonzero(),
            parts.len()
        );
    }

    for t in [t_high, t_high / 2.0] {
        let mask = heat.map(|v| f32::from(v >= t))?;
        let parts = connected_components(&mask, Connectivity::Full26)?;
        let sizes: Vec<usize> = parts.clusters.iter().map(|c| c.voxel_count).collect();
        println!("plain threshold {t:.2}: components {sizes:?}");
    }
    Ok(())
}
