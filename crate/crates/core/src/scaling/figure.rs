//! SVG scatter plot with fit line, confidence band, threshold and the
//! ten-year marker.

use std::fmt::Write as _;

use super::{confidence_band, Extrapolation, LinearFit, HOURS_PER_YEAR, TEN_YEARS_HOURS};

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 24.0;
const MT: f64 = 40.0;
const MB: f64 = 52.0;
const BAND_SAMPLES: usize = 64;

pub struct FigureSpec<'a> {
    pub title: &'a str,
    /// `(hours, accuracy)`.
    pub points: &'a [(f64, f64)],
    pub fit: &'a LinearFit,
    pub threshold: f64,
    pub extrapolation: &'a Extrapolation,
    pub y_label: &'a str,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Renders one condition as a standalone SVG document.
pub fn render_svg(spec: &FigureSpec) -> String {
    let xs: Vec<f64> = spec.points.iter().map(|p| p.0.log10()).collect();
    let x_data_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_data_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_marker = TEN_YEARS_HOURS.log10();
    let x_cross = spec
        .extrapolation
        .log10_hours_est
        .filter(|_| spec.extrapolation.crossing && !spec.extrapolation.capped);
    let x0 = (x_data_min - 0.5).floor();
    let x1 = x_cross.unwrap_or(x_data_max).max(x_marker).max(x_data_max) + 0.5;
    let x1 = x1.ceil().min(x0 + 20.0);
    let y0 = 0.0;
    let y1 = 100.0;
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y.clamp(y0, y1) - y0) / (y1 - y0) * (H - MT - MB);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        esc(spec.title)
    );

    // band as one closed polygon: upper edge left→right, lower edge back
    let mut upper = Vec::with_capacity(BAND_SAMPLES + 1);
    let mut lower = Vec::with_capacity(BAND_SAMPLES + 1);
    for i in 0..=BAND_SAMPLES {
        let x = x0 + (x1 - x0) * i as f64 / BAND_SAMPLES as f64;
        let (lo, hi) = confidence_band(spec.fit, x, spec.extrapolation.level)
            .unwrap_or((spec.fit.predict(x), spec.fit.predict(x)));
        upper.push((px(x), py(hi)));
        lower.push((px(x), py(lo)));
    }
    let poly: Vec<String> = upper
        .iter()
        .chain(lower.iter().rev())
        .map(|(a, b)| format!("{a:.2},{b:.2}"))
        .collect();
    let _ = writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#d62728" fill-opacity="0.18" stroke="none"/>"##,
        poly.join(" ")
    );
    let _ = writeln!(
        s,
        r##"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
        px(x0),
        py(spec.fit.predict(x0)),
        px(x1),
        py(spec.fit.predict(x1))
    );
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="6,4"/>"##,
        px(x0),
        py(spec.threshold),
        px(x1),
        py(spec.threshold)
    );
    for (x, &(_, y)) in xs.iter().zip(spec.points) {
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="3.5" fill="#d62728"/>"##,
            px(*x),
            py(y)
        );
    }
    // ten-year marker: a vertical arrow pointing at the axis
    let mx = px(x_marker);
    let _ = writeln!(
        s,
        r#"<g class="ten-year-marker"><line x1="{mx:.2}" y1="{:.2}" x2="{mx:.2}" y2="{:.2}" stroke="black" stroke-width="2"/><polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="black"/><text x="{mx:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">10 years</text></g>"#,
        py(30.0),
        py(6.0),
        mx - 5.0,
        py(6.0),
        mx + 5.0,
        py(6.0),
        mx,
        py(0.0),
        py(32.0)
    );
    if let Some(xc) = x_cross {
        let years = 10f64.powf(xc) / HOURS_PER_YEAR;
        let _ = writeln!(
            s,
            r##"<g class="crossing"><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#1f77b4" stroke-dasharray="2,3"/><text x="{:.2}" y="{:.2}" font-size="11" font-family="sans-serif">{} years</text></g>"##,
            px(xc),
            py(spec.threshold),
            px(xc),
            py(0.0),
            px(xc) + 4.0,
            py(spec.threshold) - 6.0,
            esc(&super::format_years(years))
        );
    }
    // axes and decade ticks
    let _ = writeln!(
        s,
        r#"<path class="axes" d="M{ML},{MT} L{ML},{} L{},{}" fill="none" stroke="black"/>"#,
        H - MB,
        W - MR,
        H - MB
    );
    let mut d = x0.ceil() as i64;
    while (d as f64) <= x1 {
        let x = px(d as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" font-size="10" text-anchor="middle" font-family="sans-serif">1e{d}</text>"#,
            H - MB + 16.0
        );
        d += 1;
    }
    for y in (0..=100).step_by(20) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end" font-family="sans-serif">{y}</text>"#,
            ML - 6.0,
            py(y as f64) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">hours of video (log scale)</text>"#,
        (ML + W - MR) / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(spec.y_label)
    );
    s.push_str("</svg>\n");
    s
}
