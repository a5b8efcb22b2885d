//! Both extrapolation tables recomputed from the bundled data points.

use std::fmt::Write as _;

use serde::Serialize;

use super::{
    bundled_points, fit_loglinear, invert_threshold, parse_years, select, Extrapolation,
    LinearFit, Result, ScalingError, ScalingPoint, HOURS_PER_YEAR, TOP5_HUMAN_THRESHOLD,
};

/// `(condition, label, reference estimate, reference interval)` for the clean
/// top-5 rows.
pub const CLEAN_CONDITIONS: [(&str, &str, &str, (&str, &str)); 6] = [
    (
        "tc_fewshot_1pct",
        "Temporal classification, few-shot 1%",
        "0.9M",
        ("0.2M", "6.7M"),
    ),
    (
        "tc_fewshot_2pct",
        "Temporal classification, few-shot 2%",
        "6.4k",
        ("0.9k", "90.9k"),
    ),
    (
        "tc_linear_probe",
        "Temporal classification, linear probe",
        "3.9",
        ("1.5", "13.6"),
    ),
    (
        "dino_fewshot_1pct",
        "DINO, few-shot 1%",
        "1.4G",
        ("30.0M", "0.3T"),
    ),
    (
        "dino_fewshot_2pct",
        "DINO, few-shot 2%",
        "2.3M",
        ("0.1M", "0.2G"),
    ),
    (
        "dino_linear_probe",
        "DINO, linear probe",
        "1.0k",
        ("46.5", "0.3M"),
    ),
];

/// Mean-OOD rows, same layout.
pub const OOD_CONDITIONS: [(&str, &str, &str, (&str, &str)); 4] = [
    (
        "tc_ood_practice",
        "Temporal classification, practice only",
        "32.9M",
        ("1.4M", "2.5G"),
    ),
    (
        "tc_ood_practice_2pct",
        "Temporal classification, practice + 2%",
        "37.8M",
        ("1.0M", "6.9G"),
    ),
    ("dino_ood_practice", "DINO, practice only", ">1T", ("", "")),
    (
        "dino_ood_practice_2pct",
        "DINO, practice + 2%",
        ">1T",
        ("", ""),
    ),
];

/// Reference temporal-classification OOD estimates (years) used to recover
/// the unstated human OOD threshold.
pub const OOD_REFERENCE_YEARS: [(&str, f64); 2] = [
    ("tc_ood_practice", 32.9e6),
    ("tc_ood_practice_2pct", 37.8e6),
];

/// Largest disagreement tolerated between the per-row implied thresholds.
pub const THRESHOLD_CONSISTENCY: f64 = 1.0;

#[derive(Clone, Debug, Serialize)]
pub struct ConditionEstimate {
    pub condition: String,
    pub label: String,
    pub fit: LinearFit,
    pub extrapolation: Extrapolation,
    pub reference_estimate: String,
    pub reference_ci: (String, String),
    pub reference_log10_years: Option<f64>,
}

impl ConditionEstimate {
    /// `log10(years)` difference to the reference estimate, when both are finite.
    pub fn log10_error(&self) -> Option<f64> {
        Some(self.extrapolation.log10_years_est()? - self.reference_log10_years?)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ThresholdDerivation {
    /// `(condition, reference years, implied threshold)`.
    pub rows: Vec<(String, f64, f64)>,
    pub threshold: f64,
    pub spread: f64,
}

/// Evaluates each row's fitted line at the reference data requirement and
/// averages the implied accuracies.
pub fn derive_ood_threshold(
    points: &[ScalingPoint],
    reference: &[(&str, f64)],
) -> Result<ThresholdDerivation> {
    let mut rows = Vec::new();
    for &(cond, years) in reference {
        let pts = select(points, cond);
        if pts.is_empty() {
            return Err(ScalingError::MissingCondition(cond.to_string()));
        }
        let fit = fit_loglinear(pts)?;
        let theta = fit.predict((years * HOURS_PER_YEAR).log10());
        rows.push((cond.to_string(), years, theta));
    }
    if rows.is_empty() {
        return Err(ScalingError::MissingCondition("<none>".into()));
    }
    let max = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if spread > THRESHOLD_CONSISTENCY {
        return Err(ScalingError::InconsistentThresholds {
            spread,
            tolerance: THRESHOLD_CONSISTENCY,
        });
    }
    let threshold = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    Ok(ThresholdDerivation {
        rows,
        threshold,
        spread,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtrapolationTables {
    pub clean: Vec<ConditionEstimate>,
    pub ood: Vec<ConditionEstimate>,
    pub ood_threshold: ThresholdDerivation,
    pub top5_threshold: f64,
}

fn estimate(
    points: &[ScalingPoint],
    row: &(&str, &str, &str, (&str, &str)),
    threshold: f64,
) -> Result<ConditionEstimate> {
    let (cond, label, reference, (lo, hi)) = *row;
    let pts = select(points, cond);
    if pts.is_empty() {
        return Err(ScalingError::MissingCondition(cond.to_string()));
    }
    let fit = fit_loglinear(pts)?;
    let extrapolation = invert_threshold(&fit, threshold, 0.95)?;
    Ok(ConditionEstimate {
        condition: cond.to_string(),
        label: label.to_string(),
        fit,
        extrapolation,
        reference_estimate: reference.to_string(),
        reference_ci: (lo.to_string(), hi.to_string()),
        reference_log10_years: parse_years(reference).map(f64::log10),
    })
}

/// Recomputes both tables from the verified fixture.
pub fn repro_paper() -> Result<ExtrapolationTables> {
    let points = bundled_points()?;
    let clean = CLEAN_CONDITIONS
        .iter()
        .map(|row| estimate(&points, row, TOP5_HUMAN_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let ood_threshold = derive_ood_threshold(&points, &OOD_REFERENCE_YEARS)?;
    let ood = OOD_CONDITIONS
        .iter()
        .map(|row| estimate(&points, row, ood_threshold.threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtrapolationTables {
        clean,
        ood,
        ood_threshold,
        top5_threshold: TOP5_HUMAN_THRESHOLD,
    })
}

impl ExtrapolationTables {
    /// Plain-text rendering of both tables.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut table = |title: &str, theta: f64, rows: &[ConditionEstimate]| {
            let _ = writeln!(s, "{title} (threshold {theta:.2}%)");
            let _ = writeln!(
                s,
                "  {:<42} {:>8} {:>22} {:>9} {:>8} {:>22}",
                "condition", "years", "95% CI", "x1.5", "reference", "reference CI"
            );
            for r in rows {
                let e = &r.extrapolation;
                let sleep = match (e.sleep_adjusted_years, e.capped) {
                    (Some(y), false) => super::format_years(y),
                    _ => ">1T".into(),
                };
                let ci = if e.capped {
                    "-".to_string()
                } else {
                    e.display_ci()
                };
                let reference_ci = if r.reference_ci.0.is_empty() {
                    "-".to_string()
                } else {
                    format!("({}, {})", r.reference_ci.0, r.reference_ci.1)
                };
                let _ = writeln!(
                    s,
                    "  {:<42} {:>8} {:>22} {:>9} {:>8} {:>22}",
                    r.label,
                    e.display_estimate(),
                    ci,
                    sleep,
                    r.reference_estimate,
                    reference_ci
                );
            }
        };
        table(
            "Clean accuracy: years to human-level top-5 accuracy",
            self.top5_threshold,
            &self.clean,
        );
        table(
            "Robustness: years to human-level mean OOD accuracy",
            self.ood_threshold.threshold,
            &self.ood,
        );
        let _ = writeln!(
            s,
            "OOD threshold implied by the temporal-classification rows: {}",
            self.ood_threshold
                .rows
                .iter()
                .map(|(c, _, t)| format!("{c} {t:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        s
    }
}
