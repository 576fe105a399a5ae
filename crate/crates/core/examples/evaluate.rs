//! Finding-level evaluation: cluster matching, sensitivity / PPV / F1 and AUC.
//!
//! ```bash
//! cargo run --release --example evaluate
//! ```

use explainseg::clustering::{Cluster, ClusterSet};
use explainseg::evaluation::{
    auc_roc, f1_from_rates, match_clusters, metrics_table, prf, GroundTruthRegion, MatchMode, MetricsReport,
    StudyCounts,
};
use explainseg::volume::Dims;

fn counts(tp: usize, fp: usize, fn_: usize) -> StudyCounts {
    StudyCounts {
        study_id: "s0".into(),
        tp,
        fp,
        fn_,
        n_gt: tp + fn_,
        n_pred: tp + fp,
    }
}

fn main() -> explainseg::Result<()> {
    let dims = Dims::new(20, 20, 4);
    let cube = |min: [usize; 3], max: [usize; 3]| -> Vec<usize> {
        let mut v = Vec::new();
        for z in min[2]..=max[2] {
            for y in min[1]..=max[1] {
                for x in min[0]..=max[0] {
                    v.push(dims.index(x, y, z));
                }
            }
        }
        v
    };
    let gt = vec![
        GroundTruthRegion::from_box(0, dims, [2, 2, 0], [5, 5, 2])?,
        GroundTruthRegion::from_box(1, dims, [12, 12, 0], [15, 15, 2])?,
    ];
    // One cluster clips the first lesion, one hits nothing.
    let pred = ClusterSet {
        source_dims: dims,
        clusters: vec![
            Cluster::from_indices(0, cube([4, 4, 1], [8, 8, 3]), dims)?,
            Cluster::from_indices(1, cube([0, 15, 0], [2, 18, 1]), dims)?,
        ],
    };

    for mode in [MatchMode::Intersect, MatchMode::StrictIou { threshold: 0.3 }] {
        let m = match_clusters(&pred, &gt, dims, mode)?;
        let r = prf(m.tp, m.fp, m.fn_);
        println!("{mode:?}: tp {} fp {} fn {} -> F1 {:.1}", m.tp, m.fp, m.fn_, r.f1);
    }

    println!("\nF1 from rates: sensitivity 63.5, PPV 64.2 -> {:.2}", f1_from_rates(63.5, 64.2));

    let rows = [
        ("k=1", counts(7, 3, 5)),
        ("k=10", counts(9, 4, 3)),
    ];
    let reports: Vec<(String, MetricsReport)> = rows
        .into_iter()
        .map(|(n, c)| (n.to_string(), MetricsReport::from_counts(vec![c], MatchMode::Intersect)))
        .collect();
    let refs: Vec<(String, &MetricsReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("\n{}", metrics_table(&refs));

    let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1];
    let labels = [1, 1, 0, 1, 0, 0];
    println!("\nAUC with a tied pair: {:.4}", auc_roc(&scores, &labels)?);
    Ok(())
}
