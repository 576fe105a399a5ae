//! Explain, segment, mask, repeat: the per-slice loop on a trained classifier,
//! then study-level aggregation and filtering.
//!
//! ```bash
//! cargo run --release --example train_classifier
//! cargo run --release --example iterative_explain target/example-model.json
//! ```
//!
//! Without a model argument a classifier is trained first.

use explainseg::attribution::AttributionConfig;
use explainseg::classifier::{train, ClassifierParams, TrainConfig, TrainingSet};
use explainseg::evaluation::{match_clusters, MatchMode};
use explainseg::io::load_params;
use explainseg::phantom::{generate_dataset, PhantomConfig};
use explainseg::pipeline::{generate_pseudolabels, explain_minivolume, LabeledStudy, PipelineConfig};
use explainseg::volume::extract_minivolume;

fn classifier() -> explainseg::Result<ClassifierParams> {
    if let Some(path) = std::env::args().nth(1) {
        return Ok(load_params(path.as_ref())?.0);
    }
    println!("no model given, training one (about a minute and a half)");
    let studies = generate_dataset(&PhantomConfig { seed: 11, ..Default::default() }, 160, 0.5)?;
    Ok(train(&TrainingSet::from_studies(&studies)?, &TrainConfig::default())?.params)
}

fn main() -> explainseg::Result<()> {
    let params = classifier()?;
    let phantom = generate_dataset(
        &PhantomConfig {
            seed: 99,
            lesion_count_range: (3, 3),
            ..Default::default()
        },
        2,
        1.0,
    )?
    .remove(1);
    let study = LabeledStudy::from_phantom(&phantom)?;
    let attrib = AttributionConfig::default();
    let cfg = PipelineConfig {
        t_high: Some(0.05),
        ..Default::default()
    };

    let z = phantom.lesions[0].center[2].round() as usize;
    let mini = extract_minivolume(&study.volume, z)?;
    let (union, trace) = explain_minivolume(&params, &attrib, &mini, &cfg)?;
    println!("slice {z}: stop {:?} after {} iteration(s)", trace.stop_reason, trace.len());
    for (k, (p, m)) in trace.probs.iter().zip(&trace.masked_counts).enumerate() {
        println!("  iteration {}: p = {p:.3}, segmented {m} voxels", k + 1);
    }
    if let Some(p) = trace.exit_prob {
        println!("  probability after masking everything: {p:.3}");
    }
    println!("  union {} voxels", union.count_nonzero());

    let labels = generate_pseudolabels(&study.id, &study.volume, &params, &attrib, &cfg)?;
    let r = &labels.report;
    println!(
        "\nstudy {}: histogram {:?}, {} raw clusters -> {} kept",
        study.id,
        r.iteration_histogram,
        r.raw_cluster_count,
        labels.clusters.len()
    );
    for k in [1, cfg.iter_limit] {
        let (_, kept) = labels.clusters_at_iteration(k, &cfg)?;
        let m = match_clusters(&kept, &study.truth.regions, study.truth.dims, MatchMode::Intersect)?;
        println!("  capped at {k:>2}: tp {} fp {} fn {}", m.tp, m.fp, m.fn_);
    }
    Ok(())
}
