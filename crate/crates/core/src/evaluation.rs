//! Finding-level detection scoring and slice-level AUC.
//!
//! A ground-truth region is detected when any predicted cluster intersects it;
//! a predicted cluster is a false positive when it intersects no region.
//! Matching is many-to-many and counts are pooled across studies before rates
//! are computed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clustering::{connected_components, ClusterSet, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRegion {
    pub id: usize,
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
}

impl GroundTruthRegion {
    pub fn new(id: usize, mut voxels: Vec<usize>) -> Result<Self> {
        voxels.sort_unstable();
        voxels.dedup();
        if voxels.is_empty() {
            return Err(Error::Precondition(format!("ground-truth region {id} is empty")));
        }
        Ok(Self { id, voxels })
    }

    /// Rasterizes an inclusive box.
    pub fn from_box(id: usize, dims: Dims, min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] > max[a])
            || max[0] >= dims.width
            || max[1] >= dims.height
            || max[2] >= dims.depth
        {
            return Err(Error::Index(format!("box {min:?}..{max:?} outside {dims}")));
        }
        let mut v = Vec::new();
        for z in min[2]..=max[2] {
            for y in min[1]..=max[1] {
                for x in min[0]..=max[0] {
                    v.push(dims.index(x, y, z));
                }
            }
        }
        Self::new(id, v)
    }
}

/// One region per 26-connected component of a ground-truth mask.
pub fn regions_from_mask(mask: &Volume) -> Result<Vec<GroundTruthRegion>> {
    Ok(connected_components(mask, Connectivity::Full26)?
        .clusters
        .into_iter()
        .map(|c| GroundTruthRegion {
            id: c.id,
            voxels: c.voxels,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchMode {
    /// Any shared voxel matches.
    #[default]
    Intersect,
    /// A pair matches only when IoU exceeds the threshold.
    StrictIou { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(gt region id, cluster id)` pairs that matched.
    pub matches: Vec<(usize, usize)>,
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn match_clusters(
    pred: &ClusterSet,
    gt: &[GroundTruthRegion],
    gt_dims: Dims,
    mode: MatchMode,
) -> Result<MatchResult> {
    if pred.source_dims != gt_dims {
        return Err(Error::Shape(format!(
            "prediction dims {} differ from ground truth dims {gt_dims}",
            pred.source_dims
        )));
    }
    let mut gt_hit = vec![false; gt.len()];
    let mut pred_hit = vec![false; pred.clusters.len()];
    let mut matches = Vec::new();
    for (gi, region) in gt.iter().enumerate() {
        for (ci, cluster) in pred.clusters.iter().enumerate() {
            // cheap reject on bounding ranges of the sorted index lists
            if region.voxels.last() < cluster.voxels.first()
                || cluster.voxels.last() < region.voxels.first()
            {
                continue;
            }
            let inter = intersection(&region.voxels, &cluster.voxels);
            let hit = match mode {
                MatchMode::Intersect => inter > 0,
                MatchMode::StrictIou { threshold } => {
                    let union = region.voxels.len() + cluster.voxels.len() - inter;
                    inter > 0 && inter as f64 / union as f64 > threshold
                }
            };
            if hit {
                gt_hit[gi] = true;
                pred_hit[ci] = true;
                matches.push((region.id, cluster.id));
            }
        }
    }
    let tp = gt_hit.iter().filter(|&&h| h).count();
    Ok(MatchResult {
        tp,
        fp: pred_hit.iter().filter(|&&h| !h).count(),
        fn_: gt.len() - tp,
        matches,
    })
}

/// Sensitivity, PPV and F1 in percent. Undefined rates are `None`; F1 is then 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: f64,
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let rate = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    let sensitivity = rate(tp, tp + fn_);
    let ppv = rate(tp, tp + fp);
    let f1 = match (sensitivity, ppv) {
        (Some(s), Some(p)) => f1_from_rates(s, p),
        _ => 0.0,
    };
    Prf {
        sensitivity,
        ppv,
        f1,
    }
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1_from_rates(sensitivity: f64, ppv: f64) -> f64 {
    if sensitivity + ppv == 0.0 {
        0.0
    } else {
        2.0 * sensitivity * ppv / (sensitivity + ppv)
    }
}

/// Mann-Whitney AUC: `P(score_pos > score_neg) + 0.5 * P(tie)`, via mid-ranks.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DataIntegrity("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] != 0 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub id: String,
    pub dims: Dims,
    pub regions: Vec<GroundTruthRegion>,
}

impl StudyTruth {
    pub fn from_mask(id: impl Into<String>, mask: &Volume) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            dims: mask.dims(),
            regions: regions_from_mask(mask)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCounts {
    pub study_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: f64,
    pub match_mode: MatchMode,
    pub per_study: Vec<StudyCounts>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_roc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl MetricsReport {
    pub fn from_counts(per_study: Vec<StudyCounts>, match_mode: MatchMode) -> Self {
        let (tp, fp, fn_) = per_study
            .iter()
            .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
        let m = prf(tp, fp, fn_);
        Self {
            tp,
            fp,
            fn_,
            sensitivity: m.sensitivity,
            ppv: m.ppv,
            f1: m.f1,
            match_mode,
            per_study,
            auc_roc: None,
            config_hash: None,
        }
    }

    /// `config,sensitivity,ppv,f1` row with one decimal; undefined rates print as `-`.
    pub fn csv_row(&self, config: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        format!("{config},{},{},{:.1}", f(self.sensitivity), f(self.ppv), self.f1)
    }
}

pub const METRICS_CSV_HEADER: &str = "config,sensitivity,ppv,f1";

/// Renders rows as a CSV table with header.
pub fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        let _ = writeln!(out, "{}", r.csv_row(name));
    }
    out
}

/// Scores every study and pools counts (micro-average).
pub fn evaluate_dataset(
    predictions: &[(String, ClusterSet)],
    truths: &[StudyTruth],
    mode: MatchMode,
) -> Result<MetricsReport> {
    let pred: BTreeMap<&str, &ClusterSet> =
        predictions.iter().map(|(id, cs)| (id.as_str(), cs)).collect();
    let gt: BTreeMap<&str, &StudyTruth> = truths.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut offenders: Vec<String> = pred
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .collect();
    offenders.extend(
        gt.keys()
            .filter(|k| !pred.contains_key(*k))
            .map(|k| format!("{k} (ground truth only)")),
    );
    if !offenders.is_empty() || pred.len() != predictions.len() || gt.len() != truths.len() {
        if offenders.is_empty() {
            offenders.push("duplicate study ids".into());
        }
        return Err(Error::IdMismatch(offenders.join(", ")));
    }
    let mut per_study = Vec::with_capacity(gt.len());
    for (id, truth) in &gt {
        let cs = pred[id];
        let m = match_clusters(cs, &truth.regions, truth.dims, mode)?;
        per_study.push(StudyCounts {
            study_id: id.to_string(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            n_gt: truth.regions.len(),
            n_pred: cs.len(),
        });
    }
    Ok(MetricsReport::from_counts(per_study, mode))
}
