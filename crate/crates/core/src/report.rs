//! Per-iteration detection curves and their CSV / SVG renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{match_clusters, prf, MatchMode, StudyTruth};
use crate::pipeline::{PipelineConfig, PseudoLabels};

/// Detection counts for one study with the loop capped at `k` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub k: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Counts for every cap `k = 1..=cfg.iter_limit`.
pub fn iteration_counts(
    labels: &PseudoLabels,
    truth: &StudyTruth,
    cfg: &PipelineConfig,
    mode: MatchMode,
) -> Result<Vec<IterationCounts>> {
    (1..=cfg.iter_limit)
        .map(|k| {
            let (_, filtered) = labels.clusters_at_iteration(k, cfg)?;
            let m = match_clusters(&filtered, &truth.regions, truth.dims, mode)?;
            Ok(IterationCounts {
                k,
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: f64,
}

/// Pools per-study counts by `k` (micro-average) into a curve sorted by `k`.
pub fn pool_curve(per_study: &[Vec<IterationCounts>]) -> Vec<CurvePoint> {
    let mut pooled: std::collections::BTreeMap<usize, (usize, usize, usize)> = Default::default();
    for study in per_study {
        for c in study {
            let e = pooled.entry(c.k).or_default();
            e.0 += c.tp;
            e.1 += c.fp;
            e.2 += c.fn_;
        }
    }
    pooled
        .into_iter()
        .map(|(k, (tp, fp, fn_))| {
            let m = prf(tp, fp, fn_);
            CurvePoint {
                k,
                tp,
                fp,
                fn_,
                sensitivity: m.sensitivity,
                ppv: m.ppv,
                f1: m.f1,
            }
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

pub const CURVE_CSV_HEADER: &str = "k,tp,fp,fn,sensitivity,ppv,f1";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_CSV_HEADER}\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.1}",
            p.k,
            p.tp,
            p.fp,
            p.fn_,
            pct(p.sensitivity),
            pct(p.ppv),
            p.f1
        );
    }
    out
}

/// Histogram CSV `iterations,slices`.
pub fn histogram_csv(histogram: &[usize]) -> String {
    let mut out = String::from("iterations,slices\n");
    for (k, n) in histogram.iter().enumerate() {
        let _ = writeln!(out, "{k},{n}");
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG line chart. Every series must be nonempty; the x axis spans
/// the observed x values and the y axis is fixed to `[0, 100]`.
pub fn line_plot_svg(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<String> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(Error::Precondition("plot needs nonempty series".into()));
    }
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let (w, h, m) = (640.0, 400.0, 50.0);
    let px = |x: f64| m + (x - x_min) / span * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 100.0) / 100.0 * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{y0}" stroke="black"/>"#,
        y0 = h - m,
        x1 = w - m
    );
    for t in 0..=4 {
        let y = t as f64 * 25.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{y}</text>"#,
            m - 6.0,
            py(y) + 4.0
        );
    }
    let ticks: Vec<f64> = {
        let mut v: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    for x in &ticks {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, px(*x), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, escape(x_label));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 90.0,
            m + 16.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// F1, sensitivity and PPV against `k`; undefined rates are omitted.
pub fn curve_svg(title: &str, curve: &[CurvePoint]) -> Result<String> {
    let pick = |f: &dyn Fn(&CurvePoint) -> Option<f64>| -> Vec<(f64, f64)> {
        curve.iter().filter_map(|p| f(p).map(|v| (p.k as f64, v))).collect()
    };
    let series: Vec<(&str, Vec<(f64, f64)>)> = [
        ("F1", pick(&|p| Some(p.f1))),
        ("sensitivity", pick(&|p| p.sensitivity)),
        ("PPV", pick(&|p| p.ppv)),
    ]
    .into_iter()
    .filter(|(_, v)| !v.is_empty())
    .collect();
    line_plot_svg(title, "iteration limit", &series)
}
