//! Iterative explain-and-mask segmentation per mini-volume, sliding-window
//! aggregation to study level, cluster filtering and threshold sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionConfig};
use crate::classifier::{forward_volume, ClassifierParams};
use crate::clustering::{connected_components, hysteresis_cluster, ClusterSet, Connectivity, Neighborhood};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, MatchMode, MetricsReport, StudyTruth};
use crate::phantom::PhantomStudy;
use crate::report::IterationCounts;
use crate::volume::{apply_mask, extract_minivolume, hu_window_default, Dims, MiniVolume, Volume, MINI_DEPTH, MINI_HALF};

/// Maximum 2D distance of a cluster centroid from the slice center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum DistanceFilter {
    /// Fraction of half the slice width.
    Fraction(f64),
    Pixels(f64),
    Off,
}

impl DistanceFilter {
    pub fn max_distance(&self, dims: Dims) -> Option<f64> {
        match *self {
            DistanceFilter::Fraction(f) => Some(f * dims.width as f64 / 2.0),
            DistanceFilter::Pixels(p) => Some(p),
            DistanceFilter::Off => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clf_thresh: f32,
    /// The loop stops once an iteration masks this many voxels or fewer.
    pub min_cluster_voxels_stop: usize,
    pub iter_limit: usize,
    pub t_high: Option<f32>,
    pub neighborhood: Neighborhood,
    pub agg_sigma: f32,
    /// Clusters with fewer voxels are dropped; 0 disables.
    pub filter_min_size: usize,
    pub distance_filter: DistanceFilter,
    pub final_heatmap_thresh: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clf_thresh: 0.5,
            min_cluster_voxels_stop: 50,
            iter_limit: 10,
            t_high: None,
            neighborhood: Neighborhood::default(),
            agg_sigma: 0.8,
            filter_min_size: 100,
            distance_filter: DistanceFilter::Fraction(0.625),
            final_heatmap_thresh: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iter_limit == 0 {
            return bad("iter_limit must be >= 1".into());
        }
        if !(self.clf_thresh > 0.0 && self.clf_thresh < 1.0) {
            return bad(format!("clf_thresh must be in (0, 1), got {}", self.clf_thresh));
        }
        if let Some(t) = self.t_high {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!("t_high must be > 0, got {t}"));
            }
        }
        if !(self.agg_sigma > 0.0) || !self.agg_sigma.is_finite() {
            return bad(format!("agg_sigma must be > 0, got {}", self.agg_sigma));
        }
        if !(self.final_heatmap_thresh >= 0.0) || !self.final_heatmap_thresh.is_finite() {
            return bad(format!(
                "final_heatmap_thresh must be >= 0, got {}",
                self.final_heatmap_thresh
            ));
        }
        match self.distance_filter {
            DistanceFilter::Fraction(v) | DistanceFilter::Pixels(v) if !(v > 0.0) => {
                bad(format!("distance filter must be > 0, got {v}"))
            }
            _ => Ok(()),
        }
    }

    fn t_high(&self) -> Result<f32> {
        self.t_high
            .ok_or_else(|| Error::Config("t_high is unset; pass a value or run a sweep".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ProbBelow,
    VolumeBelow,
    Limit,
}

/// Record of one explain-and-mask loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Classifier probability at the start of each iteration.
    pub probs: Vec<f32>,
    /// Voxels segmented in each iteration.
    pub masked_counts: Vec<usize>,
    /// Sorted linear indices of each iteration's segmentation.
    #[serde(skip)]
    pub segs: Vec<Vec<u32>>,
    /// Probability that ended the loop, when the probability check fired.
    pub exit_prob: Option<f32>,
    pub stop_reason: StopReason,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Union of the first `k` iteration segmentations.
    pub fn union_upto(&self, k: usize, dims: Dims) -> Volume {
        let mut data = vec![0.0f32; dims.len()];
        for seg in self.segs.iter().take(k) {
            for &i in seg {
                data[i as usize] = 1.0;
            }
        }
        Volume::from_parts_unchecked(data, dims, [1.0; 3])
    }

    pub fn seg(&self, k: usize, dims: Dims) -> Volume {
        let mut data = vec![0.0f32; dims.len()];
        for &i in &self.segs[k] {
            data[i as usize] = 1.0;
        }
        Volume::from_parts_unchecked(data, dims, [1.0; 3])
    }
}

/// Explain, segment and mask until the classifier is no longer positive, the
/// last segmentation was small, or the iteration limit is reached. Returns the
/// union of all segmentations.
pub fn explain_minivolume(
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    mini: &MiniVolume,
    cfg: &PipelineConfig,
) -> Result<(Volume, IterationTrace)> {
    let t_high = cfg.t_high()?;
    let dims = mini.dims();
    let mut curr = mini.volume().clone();
    let mut union = Volume::zeros(dims);
    let mut masked = usize::MAX;
    let mut trace = IterationTrace {
        probs: Vec::new(),
        masked_counts: Vec::new(),
        segs: Vec::new(),
        exit_prob: None,
        stop_reason: StopReason::Limit,
    };
    loop {
        if trace.len() >= cfg.iter_limit {
            trace.stop_reason = StopReason::Limit;
            break;
        }
        if masked <= cfg.min_cluster_voxels_stop {
            trace.stop_reason = StopReason::VolumeBelow;
            break;
        }
        let prob = forward_volume(params, &curr)?.prob;
        if prob <= cfg.clf_thresh {
            trace.exit_prob = Some(prob);
            trace.stop_reason = StopReason::ProbBelow;
            break;
        }
        let exclude = (!trace.is_empty()).then_some(&union);
        let heat = attribute(params, &curr, attrib, exclude)?;
        let seg = hysteresis_cluster(&heat, t_high, cfg.neighborhood)?;
        let idx: Vec<u32> = seg
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i as u32)
            .collect();
        masked = idx.len();
        curr = apply_mask(&curr, &seg)?;
        union = union.union(&seg)?;
        trace.probs.push(prob);
        trace.masked_counts.push(masked);
        trace.segs.push(idx);
    }
    Ok((union, trace))
}

/// Weight of a slice at offset `d` from the window center.
pub fn slice_weight(d: isize, sigma: f32) -> f64 {
    let s = sigma as f64;
    (-((d * d) as f64) / (2.0 * s * s)).exp()
}

/// Gaussian-weighted, weight-normalized accumulation of per-slice mini-volume
/// segmentations into a soft study map in [0, 1]. Window slices falling
/// outside the study are skipped.
pub fn aggregate_study(per_slice: &[(usize, Volume)], study_dims: Dims, sigma: f32) -> Result<Volume> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("agg_sigma must be > 0, got {sigma}")));
    }
    let plane = study_dims.slice_len();
    let mut acc = vec![0.0f64; study_dims.len()];
    let mut mass = vec![0.0f64; study_dims.depth];
    for (center, seg) in per_slice {
        let sd = seg.dims();
        if *center >= study_dims.depth {
            return Err(Error::Index(format!(
                "center slice {center} outside study depth {}",
                study_dims.depth
            )));
        }
        if sd.depth != MINI_DEPTH || sd.width != study_dims.width || sd.height != study_dims.height {
            return Err(Error::Shape(format!(
                "segmentation {sd} does not fit study {study_dims} windows"
            )));
        }
        for d in -(MINI_HALF as isize)..=MINI_HALF as isize {
            let z = *center as isize + d;
            if z < 0 || z >= study_dims.depth as isize {
                continue;
            }
            let w = slice_weight(d, sigma);
            mass[z as usize] += w;
            let src = seg.slice((d + MINI_HALF as isize) as usize);
            let dst = &mut acc[z as usize * plane..(z as usize + 1) * plane];
            for (a, &s) in dst.iter_mut().zip(src) {
                if s != 0.0 {
                    *a += w * s as f64;
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let m = mass[i / plane];
            if m > 0.0 {
                ((a / m) as f32).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume::from_parts_unchecked(data, study_dims, [1.0; 3]))
}

/// Binary mask of voxels with `soft >= threshold`; only voxels with nonzero
/// support are ever included, so threshold 0 is the plain union.
pub fn finalize_mask(soft: &Volume, threshold: f32) -> Result<Volume> {
    if let Some(v) = soft.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Precondition(format!("soft map value {v} outside [0, 1]")));
    }
    let mut out = Volume::mask_from_fn(soft.dims(), |i| {
        let v = soft.data()[i];
        v > 0.0 && v >= threshold
    });
    out.set_spacing(soft.spacing());
    Ok(out)
}

/// Drops clusters below the size floor or whose in-plane centroid lies too far
/// from the slice center. Surviving clusters keep their ids.
pub fn filter_clusters(cs: &ClusterSet, cfg: &PipelineConfig) -> ClusterSet {
    let dims = cs.source_dims;
    let (cx, cy) = (dims.width as f64 / 2.0, dims.height as f64 / 2.0);
    let max_d = cfg.distance_filter.max_distance(dims);
    ClusterSet {
        source_dims: dims,
        clusters: cs
            .clusters
            .iter()
            .filter(|c| c.voxel_count >= cfg.filter_min_size)
            .filter(|c| {
                max_d.is_none_or(|m| (c.centroid[0] - cx).hypot(c.centroid[1] - cy) <= m)
            })
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTrace {
    pub center: usize,
    #[serde(flatten)]
    pub trace: IterationTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: usize,
    pub voxel_count: usize,
    pub centroid: [f64; 3],
    pub bbox: [[usize; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub per_slice: Vec<SliceTrace>,
    /// Number of slices whose loop ran for `k` iterations, indexed by `k`.
    pub iteration_histogram: Vec<usize>,
    pub masked_total: usize,
    pub raw_cluster_count: usize,
    pub clusters: Vec<ClusterSummary>,
    /// Detection counts per iteration cap, filled in when ground truth is known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iteration_counts: Vec<IterationCounts>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub study_id: String,
    pub soft: Volume,
    /// Mask of the clusters that survive filtering.
    pub mask: Volume,
    pub raw_clusters: ClusterSet,
    pub clusters: ClusterSet,
    pub traces: Vec<SliceTrace>,
    pub report: StudyReport,
}

impl PseudoLabels {
    /// Study clusters as if the loop had been capped at `k` iterations,
    /// returned unfiltered and filtered.
    pub fn clusters_at_iteration(&self, k: usize, cfg: &PipelineConfig) -> Result<(ClusterSet, ClusterSet)> {
        study_clusters(&self.traces, self.soft.dims(), cfg, Some(k))
    }
}

fn study_clusters(
    traces: &[SliceTrace],
    dims: Dims,
    cfg: &PipelineConfig,
    limit: Option<usize>,
) -> Result<(ClusterSet, ClusterSet)> {
    let (_, raw, filtered) = aggregate_traces(traces, dims, cfg, limit)?;
    Ok((raw, filtered))
}

fn aggregate_traces(
    traces: &[SliceTrace],
    dims: Dims,
    cfg: &PipelineConfig,
    limit: Option<usize>,
) -> Result<(Volume, ClusterSet, ClusterSet)> {
    let mini = Dims::new(dims.width, dims.height, MINI_DEPTH);
    let k = limit.unwrap_or(usize::MAX);
    let segs: Vec<(usize, Volume)> = traces
        .iter()
        .map(|t| (t.center, t.trace.union_upto(k, mini)))
        .collect();
    let soft = aggregate_study(&segs, dims, cfg.agg_sigma)?;
    let mask = finalize_mask(&soft, cfg.final_heatmap_thresh)?;
    let raw = connected_components(&mask, Connectivity::Full26)?;
    let filtered = filter_clusters(&raw, cfg);
    Ok((soft, raw, filtered))
}

/// Runs the loop on every slice window of a windowed study and assembles the
/// study mask, clusters and report.
pub fn generate_pseudolabels(
    study_id: &str,
    volume: &Volume,
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    cfg: &PipelineConfig,
) -> Result<PseudoLabels> {
    cfg.validate()?;
    attrib.validate()?;
    cfg.t_high()?;
    let start = Instant::now();
    let dims = volume.dims();
    let traces: Vec<SliceTrace> = (0..dims.depth)
        .into_par_iter()
        .map(|z| {
            let mini = extract_minivolume(volume, z)?;
            let (_, trace) = explain_minivolume(params, attrib, &mini, cfg)?;
            Ok(SliceTrace { center: z, trace })
        })
        .collect::<Result<_>>()?;
    let (soft, raw, clusters) = aggregate_traces(&traces, dims, cfg, None)?;
    let mut mask = clusters.to_mask();
    mask.set_spacing(volume.spacing());

    let mut histogram = vec![0usize; cfg.iter_limit + 1];
    for t in &traces {
        histogram[t.trace.len()] += 1;
    }
    let report = StudyReport {
        study_id: study_id.to_string(),
        config_hash: None,
        per_slice: traces.clone(),
        iteration_histogram: histogram,
        masked_total: traces.iter().map(|t| t.trace.masked_counts.iter().sum::<usize>()).sum(),
        raw_cluster_count: raw.len(),
        clusters: clusters
            .clusters
            .iter()
            .map(|c| ClusterSummary {
                id: c.id,
                voxel_count: c.voxel_count,
                centroid: c.centroid,
                bbox: c.bbox,
            })
            .collect(),
        iteration_counts: Vec::new(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(PseudoLabels {
        study_id: study_id.to_string(),
        soft,
        mask,
        raw_clusters: raw,
        clusters,
        traces,
        report,
    })
}

/// Windowed study with ground truth, for sweeps.
#[derive(Debug, Clone)]
pub struct LabeledStudy {
    pub id: String,
    pub volume: Volume,
    pub truth: StudyTruth,
}

impl LabeledStudy {
    pub fn from_phantom(study: &PhantomStudy) -> Result<Self> {
        Ok(Self {
            id: study.id.clone(),
            volume: hu_window_default(&study.volume)?,
            truth: StudyTruth::from_mask(study.id.clone(), &study.gt_mask)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f32,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: f64,
}

impl SweepPoint {
    fn new(value: f32, m: &MetricsReport) -> Self {
        Self {
            value,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            sensitivity: m.sensitivity,
            ppv: m.ppv,
            f1: m.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: f32,
    pub curve: Vec<SweepPoint>,
}

/// Full pipeline plus evaluation over a set of labeled studies.
pub fn run_and_evaluate(
    studies: &[LabeledStudy],
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    cfg: &PipelineConfig,
    mode: MatchMode,
) -> Result<(Vec<PseudoLabels>, MetricsReport)> {
    let labels: Vec<PseudoLabels> = studies
        .iter()
        .map(|s| generate_pseudolabels(&s.id, &s.volume, params, attrib, cfg))
        .collect::<Result<_>>()?;
    let preds: Vec<(String, ClusterSet)> = labels
        .iter()
        .map(|l| (l.study_id.clone(), l.clusters.clone()))
        .collect();
    let truths: Vec<StudyTruth> = studies.iter().map(|s| s.truth.clone()).collect();
    let report = evaluate_dataset(&preds, &truths, mode)?;
    Ok((labels, report))
}

fn sweep(
    grid: &[f32],
    studies: &[LabeledStudy],
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    cfg: &PipelineConfig,
    set: impl Fn(&mut PipelineConfig, f32),
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Precondition("sweep grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f32::total_cmp);
    sorted.dedup();
    let mut curve = Vec::with_capacity(sorted.len());
    for &v in &sorted {
        let mut c = cfg.clone();
        set(&mut c, v);
        let (_, m) = run_and_evaluate(studies, params, attrib, &c, MatchMode::Intersect)?;
        curve.push(SweepPoint::new(v, &m));
    }
    // ascending grid and strict comparison: ties keep the smaller value
    let mut best = &curve[0];
    for p in &curve[1..] {
        if p.f1 > best.f1 {
            best = p;
        }
    }
    Ok(SweepResult {
        best: best.value,
        curve,
    })
}

/// Grid search of the hysteresis high threshold by pooled F1.
pub fn sweep_high_threshold(
    studies: &[LabeledStudy],
    grid: &[f32],
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    cfg: &PipelineConfig,
) -> Result<SweepResult> {
    sweep(grid, studies, params, attrib, cfg, |c, v| c.t_high = Some(v))
}

/// Grid search of the classifier operating threshold by pooled F1.
pub fn sweep_clf_threshold(
    studies: &[LabeledStudy],
    grid: &[f32],
    params: &ClassifierParams,
    attrib: &AttributionConfig,
    cfg: &PipelineConfig,
) -> Result<SweepResult> {
    cfg.t_high()?;
    sweep(grid, studies, params, attrib, cfg, |c, v| c.clf_thresh = v)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f32, hi: f32, n: usize) -> Result<Vec<f32>> {
    if n == 0 || !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::Precondition(format!("invalid grid {lo}:{hi}:{n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32).collect())
}
