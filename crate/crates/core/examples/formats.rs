//! On-disk artifacts: volume headers with checksummed payloads, run-length
//! encoded cluster sets, model descriptors and config hashing.
//!
//! ```bash
//! cargo run --release --example formats
//! ```

use explainseg::classifier::{Architecture, ClassifierParams};
use explainseg::clustering::{connected_components, Connectivity};
use explainseg::config::RunConfig;
use explainseg::io::{load_clusters, load_params, load_volume, save_clusters, save_params, save_volume, ValueSemantics};
use explainseg::phantom::{generate_phantom, PhantomConfig};
use explainseg::volume::Dims;

fn main() -> explainseg::Result<()> {
    let dir = std::env::temp_dir().join(format!("explainseg-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");

    let cfg = RunConfig::from_toml_str("[pipeline]\nt_high = 0.05\n[phantom]\nseed = 4\n")?;
    let hash = cfg.hash();
    println!("config hash {}", cfg.short_hash());

    let study = generate_phantom(&PhantomConfig {
        dims: Dims::new(64, 64, 12),
        lesion_count_range: (2, 2),
        ..cfg.phantom.clone()
    })?;
    let prov = Some(serde_json::json!({ "config_hash": hash }));
    let header = save_volume(&study.volume, ValueSemantics::Hu, &dir.join("study.json"), prov.clone())?;
    let (back, _) = load_volume(&dir.join("study.json"))?;
    assert_eq!(back, study.volume);
    println!("volume {} {:?}, payload {} sha256 {}", header.dims, header.dtype, header.payload, &header.checksum[..12]);

    let clusters = connected_components(&study.gt_mask, Connectivity::Full26)?;
    save_clusters(&clusters, &dir.join("gt.clusters.json"), Some(&hash))?;
    let (cs, stored) = load_clusters(&dir.join("gt.clusters.json"))?;
    assert_eq!(cs, clusters);
    assert_eq!(stored.as_deref(), Some(hash.as_str()));
    println!("{} clusters, {} voxels, round trip ok", cs.len(), cs.total_voxels());

    let params = ClassifierParams::init_random(Architecture::default(), 1)?;
    let desc = save_params(&params, &dir.join("model.json"), prov)?;
    let (p2, _) = load_params(&dir.join("model.json"))?;
    assert_eq!(p2, params);
    println!("model {:?}: {} parameters", desc.architecture, desc.param_count);

    // Flip one payload byte; loading must fail.
    let raw = dir.join(&header.payload);
    let mut bytes = std::fs::read(&raw).expect("payload");
    bytes[100] ^= 1;
    std::fs::write(&raw, bytes).expect("write");
    match load_volume(&dir.join("study.json")) {
        Err(e) => println!("tampered payload rejected: {e}"),
        Ok(_) => unreachable!("checksum must catch the flip"),
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
