use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::ResultRow;
use super::{io_err, Result};
use crate::scaling::{
    conditions, fit_loglinear, invert_threshold, render_svg, select, Extrapolation, FigureSpec,
    LinearFit, ScalingPoint, OOD_CONDITIONS, CLEAN_CONDITIONS,
};

/// OOD conditions are fitted on mean OOD top-1, the rest on top-5.
pub fn is_ood_condition(condition: &str) -> bool {
    condition.contains("ood")
}

/// Scaling points in row order using the metric each condition is fitted on.
pub fn points_from_results(rows: &[ResultRow]) -> Vec<ScalingPoint> {
    rows.iter()
        .map(|r| {
            let acc = if is_ood_condition(&r.condition) {
                r.accuracy_top1
            } else {
                r.accuracy_top5
            };
            ScalingPoint::new(&r.condition, r.hours, acc, &r.run_id)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportOptions {
    pub top5_threshold: f64,
    pub ood_threshold: f64,
    pub level: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FigureEntry {
    pub condition: String,
    pub path: PathBuf,
    pub threshold: f64,
    pub fit: LinearFit,
    pub extrapolation: Extrapolation,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ReportSummary {
    pub figures: Vec<FigureEntry>,
    /// `(condition, reason)`.
    pub skipped: Vec<(String, String)>,
}

fn label(condition: &str) -> String {
    CLEAN_CONDITIONS
        .iter()
        .chain(OOD_CONDITIONS.iter())
        .find(|r| r.0 == condition)
        .map_or_else(|| condition.to_string(), |r| r.1.to_string())
}

/// Writes one SVG per condition plus `summary.json` into `out_dir`.
/// Conditions that cannot be fitted are skipped with a logged notice.
pub fn emit_report(
    points: &[ScalingPoint],
    opts: &ReportOptions,
    out_dir: &Path,
) -> Result<ReportSummary> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summary = ReportSummary::default();
    for cond in conditions(points) {
        let pts = select(points, &cond);
        let ood = is_ood_condition(&cond);
        let threshold = if ood {
            opts.ood_threshold
        } else {
            opts.top5_threshold
        };
        let fitted = fit_loglinear(pts.iter().copied())
            .and_then(|fit| invert_threshold(&fit, threshold, opts.level).map(|e| (fit, e)));
        let (fit, extrapolation) = match fitted {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping condition {cond}: {e}");
                summary.skipped.push((cond.clone(), e.to_string()));
                continue;
            }
        };
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.hours, p.accuracy)).collect();
        let title = label(&cond);
        let svg = render_svg(&FigureSpec {
            title: &title,
            points: &xy,
            fit: &fit,
            threshold,
            extrapolation: &extrapolation,
            y_label: if ood {
                "mean OOD top-1 accuracy (%)"
            } else {
                "top-5 accuracy (%)"
            },
        });
        let path = out_dir.join(format!("{cond}.svg"));
        fs::write(&path, svg).map_err(io_err(&path))?;
        summary.figures.push(FigureEntry {
            condition: cond,
            path,
            threshold,
            fit,
            extrapolation,
        });
    }
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Accuracy trend of one condition across data sizes.
#[derive(Clone, Debug, Serialize)]
pub struct TrendSummary {
    pub condition: String,
    /// `(hours, mean accuracy, runs)` in ascending hours.
    pub group_means: Vec<(f64, f64, usize)>,
    pub spearman: Option<f64>,
    pub fit: LinearFit,
}

/// Group means by hours, their rank correlation with hours, and the
/// log-linear fit over all individual points.
pub fn trend_summary(points: &[ScalingPoint], condition: &str) -> Result<TrendSummary> {
    let pts = select(points, condition);
    let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for p in &pts {
        let g = groups.entry(p.hours.to_bits()).or_insert((p.hours, 0.0, 0));
        g.1 += p.accuracy;
        g.2 += 1;
    }
    let mut group_means: Vec<(f64, f64, usize)> = groups
        .into_values()
        .map(|(h, s, n)| (h, s / n as f64, n))
        .collect();
    group_means.sort_by(|a, b| a.0.total_cmp(&b.0));
    let hs: Vec<f64> = group_means.iter().map(|g| g.0).collect();
    let ms: Vec<f64> = group_means.iter().map(|g| g.1).collect();
    Ok(TrendSummary {
        condition: condition.to_string(),
        spearman: spearman(&hs, &ms),
        fit: fit_loglinear(pts)?,
        group_means,
    })
}
