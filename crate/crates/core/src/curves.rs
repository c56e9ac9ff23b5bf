//! `losses.csv` parsing and static SVG loss curves.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::trainer::StepRecord;

/// Parses a `losses.csv` written by the trainer. A file without data rows
/// is a format error.
pub fn parse_losses_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Format(format!("losses csv: {e}")))?.clone();
    let want: Vec<&str> = StepRecord::CSV_HEADER.split(',').collect();
    if header.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!("losses csv header {:?}, expected {}", header, StepRecord::CSV_HEADER)));
    }
    let rows = rdr
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Format(format!("losses csv row {}: {e}", i + 1))))
        .collect::<Result<Vec<StepRecord>>>()?;
    if rows.is_empty() {
        return Err(Error::Format("losses csv has no rows".into()));
    }
    Ok(rows)
}

/// One named series of `(step, value)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// Restoration, comparison (global + local) and total loss over steps.
pub fn loss_series(rows: &[StepRecord]) -> Vec<Series> {
    let pts = |f: &dyn Fn(&StepRecord) -> f64| rows.iter().map(|r| (r.step as f64, f(r))).collect();
    vec![
        Series { name: "restoration", color: "#1f77b4", points: pts(&|r| r.l_restore) },
        Series { name: "comparison", color: "#ff7f0e", points: pts(&|r| r.l_compare_global + r.l_compare_local) },
        Series { name: "total", color: "#2ca02c", points: pts(&|r| r.total) },
    ]
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 44.0;

/// Renders each series in its own panel, side by side.
pub fn render_svg(series: &[Series]) -> String {
    let width = series.len() as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, s) in series.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let (xmin, xmax) = bounds(s.points.iter().map(|p| p.0));
        let (ymin, ymax) = bounds(s.points.iter().map(|p| p.1));
        let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
        let sy = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;
        let _ = writeln!(out, r#"<g class="series" data-name="{}">"#, s.name);
        let _ = writeln!(out, r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="grey"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 12.0, s.name);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, y0 + 4.0, tick(ymax));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, y0 + PANEL_H, tick(ymin));
        let _ = writeln!(out, r#"<text x="{x0}" y="{}">{}</text>"#, y0 + PANEL_H + 14.0, tick(xmin));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 + PANEL_W, y0 + PANEL_H + 14.0, tick(xmax));
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, s.color, pts.join(" "));
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_ROWS: &str = "step,scale,l_restore,l_compare_global,l_compare_local,total\n0,3,0.5,-0.1,-0.2,0.2\n1,1,0.4,-0.2,-0.3,-0.1\n";

    #[test]
    fn two_rows_give_two_points_per_series() {
        let rows = parse_losses_csv(TWO_ROWS).unwrap();
        let series = loss_series(&rows);
        assert_eq!(series.len(), 3);
        assert!(series.iter().all(|s| s.points.len() == 2));
        assert!((series[1].points[0].1 + 0.3).abs() < 1e-12);
        let svg = render_svg(&series);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn empty_or_malformed_csv_is_a_format_error() {
        for text in ["", "step,scale,l_restore,l_compare_global,l_compare_local,total\n", "a,b\n1,2\n", "step,scale,l_restore,l_compare_global,l_compare_local,total\n0,1,x,0,0,0\n"] {
            assert!(matches!(parse_losses_csv(text), Err(Error::Format(_))), "{text:?}");
        }
    }
}
