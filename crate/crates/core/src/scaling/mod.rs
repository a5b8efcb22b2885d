//! Log-linear scaling fits and threshold extrapolation.
//!
//! Accuracy is regressed on `x = log10(hours)` by ordinary least squares with
//! every run entering as its own point. The data requirement for a target
//! accuracy is the crossing of the fitted line with the threshold; its
//! interval comes from the crossings of the pointwise 95% mean-response band.

mod figure;
mod fixture;
mod reference;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use figure::{render_svg, FigureSpec};
pub use fixture::{
    bundled_points, parse_points, verify_fixture, write_points, FIXTURE_CSV, FIXTURE_SHA256,
};
pub use reference::{
    derive_ood_threshold, repro_paper, ConditionEstimate, ExtrapolationTables, ThresholdDerivation,
    OOD_CONDITIONS, CLEAN_CONDITIONS, OOD_REFERENCE_YEARS, THRESHOLD_CONSISTENCY,
};

pub const HOURS_PER_YEAR: f64 = 8760.0;
pub const SLEEP_FACTOR: f64 = 1.5;
pub const CAP_YEARS: f64 = 1e12;
/// Largest data requirement the band-crossing search will consider.
pub const SEARCH_CAP_HOURS: f64 = 1e50;
/// Human-level top-5 accuracy target.
pub const TOP5_HUMAN_THRESHOLD: f64 = 90.0;
/// Mean OOD accuracy of a supervised ResNet50 on the same benchmark.
pub const RESNET50_MEAN_OOD: f64 = 55.9;
pub const TEN_YEARS_HOURS: f64 = 10.0 * HOURS_PER_YEAR;
pub const CI_METHOD: &str =
    "crossings of the pointwise Student-t mean-response band (df = n - 2), by bisection";

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points share one hours value; the slope is undefined")]
    DegenerateHours,
    #[error("invalid point {run_id}: hours {hours}, accuracy {accuracy}")]
    InvalidPoint {
        run_id: String,
        hours: f64,
        accuracy: f64,
    },
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("fixture checksum mismatch: expected {expected}, got {actual}")]
    Checksum { expected: String, actual: String },
    #[error("condition `{0}` not found")]
    MissingCondition(String),
    #[error("implied thresholds disagree by {spread:.3} points (> {tolerance})")]
    InconsistentThresholds { spread: f64, tolerance: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScalingError>;

/// One run: hours of self-supervised data and its evaluation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub condition: String,
    pub hours: f64,
    pub accuracy: f64,
    pub run_id: String,
}

impl ScalingPoint {
    pub fn new(condition: &str, hours: f64, accuracy: f64, run_id: &str) -> Self {
        ScalingPoint {
            condition: condition.to_string(),
            hours,
            accuracy,
            run_id: run_id.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hours > 0.0 && self.hours.is_finite() && (0.0..=100.0).contains(&self.accuracy)) {
            return Err(ScalingError::InvalidPoint {
                run_id: self.run_id.clone(),
                hours: self.hours,
                accuracy: self.accuracy,
            });
        }
        Ok(())
    }
}

/// Points of one condition, in input order.
pub fn select<'a>(points: &'a [ScalingPoint], condition: &str) -> Vec<&'a ScalingPoint> {
    points.iter().filter(|p| p.condition == condition).collect()
}

/// Distinct condition names in first-appearance order.
pub fn conditions(points: &[ScalingPoint]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in points {
        if !out.contains(&p.condition) {
            out.push(p.condition.clone());
        }
    }
    out
}

/// OLS of accuracy on `log10(hours)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Accuracy at one hour.
    pub intercept: f64,
    /// Accuracy gain per decade of hours.
    pub slope: f64,
    pub n: usize,
    pub x_mean: f64,
    pub sxx: f64,
    /// Residual standard error, `sqrt(RSS / (n - 2))`.
    pub residual_se: f64,
    pub rss: f64,
}

pub fn fit_loglinear<'a, I>(points: I) -> Result<LinearFit>
where
    I: IntoIterator<Item = &'a ScalingPoint>,
{
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in points {
        p.validate()?;
        xs.push(p.hours.log10());
        ys.push(p.accuracy);
    }
    fit_xy(&xs, &ys)
}

/// OLS on raw `(x, y)` pairs, `x` already in log10 units.
pub fn fit_xy(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    let n = xs.len();
    if n < 3 {
        return Err(ScalingError::TooFewPoints(n));
    }
    let nf = n as f64;
    let x_mean = xs.iter().sum::<f64>() / nf;
    let y_mean = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    if sxx <= 1e-12 * nf {
        return Err(ScalingError::DegenerateHours);
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(LinearFit {
        intercept,
        slope,
        n,
        x_mean,
        sxx,
        residual_se: (rss / (nf - 2.0)).sqrt(),
        rss,
    })
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// Two-sided Student-t quantile for `level` with `n - 2` degrees of freedom.
    pub fn t_quantile(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(ScalingError::BadLevel(level));
        }
        if self.n <= 2 {
            return Err(ScalingError::TooFewPoints(self.n));
        }
        let t = StudentsT::new(0.0, 1.0, (self.n - 2) as f64).expect("df > 0");
        Ok(t.inverse_cdf(0.5 + level / 2.0))
    }

    /// Half-width of the mean-response band at `x`.
    pub fn half_width(&self, x: f64, level: f64) -> Result<f64> {
        let t = self.t_quantile(level)?;
        Ok(self.band_with_t(x, t))
    }

    fn band_with_t(&self, x: f64, t: f64) -> f64 {
        t * self.residual_se * (1.0 / self.n as f64 + (x - self.x_mean).powi(2) / self.sxx).sqrt()
    }
}

/// Pointwise `(lower, upper)` band of the mean response at `x`.
pub fn confidence_band(fit: &LinearFit, x: f64, level: f64) -> Result<(f64, f64)> {
    let hw = fit.half_width(x, level)?;
    let y = fit.predict(x);
    Ok((y - hw, y + hw))
}

/// Threshold-crossing estimate of the data requirement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub threshold: f64,
    pub level: f64,
    /// False when the fitted slope is not positive; the estimate fields are then empty.
    pub crossing: bool,
    pub log10_hours_est: Option<f64>,
    /// `(lower, upper)` in log10 hours; `upper` is `None` when the lower band
    /// never reaches the threshold below [`SEARCH_CAP_HOURS`], `lower` is `None`
    /// when the upper band stays above the threshold for any smaller amount.
    pub log10_hours_ci: (Option<f64>, Option<f64>),
    pub hours_est: Option<f64>,
    pub years_est: Option<f64>,
    pub years_ci: (Option<f64>, Option<f64>),
    pub sleep_adjusted_years: Option<f64>,
    pub sleep_adjusted_ci: (Option<f64>, Option<f64>),
    /// Estimate beyond [`CAP_YEARS`] (or no crossing at all).
    pub capped: bool,
    pub ci_method: String,
}

impl Extrapolation {
    pub fn log10_years_est(&self) -> Option<f64> {
        self.log10_hours_est.map(|x| x - HOURS_PER_YEAR.log10())
    }

    /// Abbreviated rendering of the point estimate, e.g. `0.9M` or `>1T`.
    pub fn display_estimate(&self) -> String {
        match self.years_est {
            Some(y) if !self.capped => format_years(y),
            _ => ">1T".to_string(),
        }
    }

    pub fn display_ci(&self) -> String {
        let f = |v: Option<f64>, none: &str| v.map_or(none.to_string(), format_years);
        format!(
            "({}, {})",
            f(self.years_ci.0, "0"),
            f(self.years_ci.1, ">cap")
        )
    }
}

fn hours_to_years(log10_hours: f64) -> f64 {
    10f64.powf(log10_hours) / HOURS_PER_YEAR
}

/// Inverts the fit at `threshold`.
pub fn invert_threshold(fit: &LinearFit, threshold: f64, level: f64) -> Result<Extrapolation> {
    let t = fit.t_quantile(level)?;
    let mut out = Extrapolation {
        threshold,
        level,
        crossing: false,
        log10_hours_est: None,
        log10_hours_ci: (None, None),
        hours_est: None,
        years_est: None,
        years_ci: (None, None),
        sleep_adjusted_years: None,
        sleep_adjusted_ci: (None, None),
        capped: true,
        ci_method: CI_METHOD.to_string(),
    };
    if fit.slope <= 0.0 {
        return Ok(out);
    }
    let x_est = (threshold - fit.intercept) / fit.slope;
    let upper = |x: f64| fit.predict(x) + fit.band_with_t(x, t) - threshold;
    let lower = |x: f64| fit.predict(x) - fit.band_with_t(x, t) - threshold;
    let x_cap = SEARCH_CAP_HOURS.log10();

    // Upper band hits the threshold at or before the estimate.
    let lo = if upper(x_est) <= 0.0 {
        Some(x_est)
    } else {
        let mut b = x_est;
        let mut found = None;
        for _ in 0..200 {
            let a = b - 0.5;
            if upper(a) <= 0.0 {
                found = Some(bisect(&upper, a, b));
                break;
            }
            b = a;
        }
        found
    };
    // Lower band hits it at or after the estimate.
    let hi = if lower(x_est) >= 0.0 {
        Some(x_est)
    } else {
        let mut a = x_est;
        let mut found = None;
        while a < x_cap {
            let b = (a + 0.5).min(x_cap);
            if lower(b) >= 0.0 {
                found = Some(bisect(&lower, a, b));
                break;
            }
            a = b;
        }
        found
    };

    let years = hours_to_years(x_est);
    out.crossing = true;
    out.log10_hours_est = Some(x_est);
    out.log10_hours_ci = (lo, hi);
    out.hours_est = Some(10f64.powf(x_est));
    out.years_est = Some(years);
    out.years_ci = (lo.map(hours_to_years), hi.map(hours_to_years));
    out.sleep_adjusted_years = Some(SLEEP_FACTOR * years);
    out.sleep_adjusted_ci = (
        out.years_ci.0.map(|y| SLEEP_FACTOR * y),
        out.years_ci.1.map(|y| SLEEP_FACTOR * y),
    );
    out.capped = !(years <= CAP_YEARS);
    Ok(out)
}

/// Root of `f` on `[a, b]` where `f(a)` and `f(b)` bracket zero.
fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa_neg = f(a) < 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (f(m) < 0.0) == fa_neg {
            a = m;
        } else {
            b = m;
        }
        if (b - a).abs() < 1e-13 {
            break;
        }
    }
    0.5 * (a + b)
}

/// Renders years with the unit that keeps the mantissa below 100:
/// `3.9`, `90.9k`, `0.9M`, `1.4G`, `0.3T`; anything above the cap is `>1T`.
pub fn format_years(years: f64) -> String {
    if !(years <= CAP_YEARS) {
        return ">1T".to_string();
    }
    for (unit, suffix) in [(1.0, ""), (1e3, "k"), (1e6, "M"), (1e9, "G"), (1e12, "T")] {
        let v = years / unit;
        if (v * 10.0).round() / 10.0 < 100.0 {
            return format!("{v:.1}{suffix}");
        }
    }
    ">1T".to_string()
}

/// Parses abbreviated year notation (`0.9M`, `>1T`).
pub fn parse_years(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.starts_with('>') {
        return None;
    }
    let (num, mult) = match s.chars().last()? {
        'k' => (&s[..s.len() - 1], 1e3),
        'M' => (&s[..s.len() - 1], 1e6),
        'G' => (&s[..s.len() - 1], 1e9),
        'T' => (&s[..s.len() - 1], 1e12),
        _ => (s, 1.0),
    };
    num.parse::<f64>().ok().map(|v| v * mult)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[(f64, f64)]) -> Vec<ScalingPoint> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(h, a))| ScalingPoint::new("c", h, a, &format!("r{i}")))
            .collect()
    }

    #[test]
    fn exact_line_has_zero_residual() {
        let pts = line(&[(1.0, 10.0), (10.0, 20.0), (100.0, 30.0), (1000.0, 40.0)]);
        let f = fit_loglinear(&pts).unwrap();
        assert!((f.slope - 10.0).abs() < 1e-12);
        assert!((f.intercept - 10.0).abs() < 1e-12);
        assert!(f.residual_se < 1e-12);
        let (lo, hi) = confidence_band(&f, 5.0, 0.95).unwrap();
        assert!((hi - lo).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            fit_loglinear(&line(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)])),
            Err(ScalingError::DegenerateHours)
        ));
        assert!(matches!(
            fit_loglinear(&line(&[(1.0, 1.0), (2.0, 2.0)])),
            Err(ScalingError::TooFewPoints(2))
        ));
    }

    #[test]
    fn year_formatting() {
        assert_eq!(format_years(8.7e5), "0.9M");
        assert_eq!(format_years(6.4e3), "6.4k");
        assert_eq!(format_years(3.9), "3.9");
        assert_eq!(format_years(9.09e4), "90.9k");
        assert_eq!(format_years(3.0e5), "0.3M");
        assert_eq!(format_years(46.5), "46.5");
        assert_eq!(format_years(1.0e3), "1.0k");
        assert_eq!(format_years(3e13), ">1T");
        assert_eq!(parse_years("0.9M"), Some(0.9e6));
        assert_eq!(parse_years(">1T"), None);
    }

    #[test]
    fn non_positive_slope_is_no_crossing() {
        let pts = line(&[(1.0, 40.0), (10.0, 38.0), (100.0, 35.0), (1000.0, 33.0)]);
        let f = fit_loglinear(&pts).unwrap();
        let e = invert_threshold(&f, 90.0, 0.95).unwrap();
        assert!(!e.crossing && e.capped && e.years_est.is_none());
        assert_eq!(e.display_estimate(), ">1T");
    }
}
