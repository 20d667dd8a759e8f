//! CSV telemetry and the SVG forgetting-curve plot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lethe_core::engine::{ForgettingCurve, StepRecord};
use lethe_core::probe::CorrelationReport;
use lethe_core::training::TrainHistory;

use crate::error::{HarnessError, Result};

pub const CURVE_HEADER: [&str; 5] = ["step", "accuracy", "mean_main_loss", "attack", "seed"];
pub const STEP_HEADER: [&str; 5] = ["step", "aux_loss", "applied", "cosine_history", "predicted_class"];
pub const PROBE_HEADER: [&str; 5] = ["mode", "n", "mean_inner", "mean_cosine", "stderr"];
pub const HISTORY_HEADER: [&str; 5] = ["epoch", "main_loss", "aux_loss", "train_accuracy", "lr"];

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e.to_string()))?;
    w.write_record(header).map_err(|e| HarnessError::csv(path, e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| HarnessError::csv(path, e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_curve_csv(path: &Path, curve: &ForgettingCurve) -> Result<()> {
    write_rows(
        path,
        &CURVE_HEADER,
        curve.points.iter().map(|p| {
            vec![
                p.step.to_string(),
                p.accuracy.to_string(),
                p.mean_main_loss.to_string(),
                curve.attack.clone(),
                curve.seed.to_string(),
            ]
        }),
    )
}

pub fn write_steps_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    write_rows(
        path,
        &STEP_HEADER,
        records.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.aux_loss.to_string(),
                r.outcome.label().to_string(),
                r.cosine_history.map(|c| c.to_string()).unwrap_or_default(),
                r.predicted_class.to_string(),
            ]
        }),
    )
}

pub fn write_probe_csv(path: &Path, reports: &[CorrelationReport]) -> Result<()> {
    write_rows(
        path,
        &PROBE_HEADER,
        reports.iter().map(|r| {
            vec![
                r.mode.name().to_string(),
                r.n.to_string(),
                r.mean_inner.to_string(),
                r.mean_cosine.to_string(),
                r.stderr.to_string(),
            ]
        }),
    )
}

pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    write_rows(
        path,
        &HISTORY_HEADER,
        history.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                e.main_loss.to_string(),
                e.aux_loss.to_string(),
                e.train_accuracy.to_string(),
                e.lr.to_string(),
            ]
        }),
    )
}

/// One parsed forgetting curve: its attack name and `(step, accuracy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub attack: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_curve_csv(path: &Path) -> Result<CurveSeries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::csv(path, e.to_string()))?;
    let header = r.headers().map_err(|e| HarnessError::csv(path, e.to_string()))?.clone();
    for (i, want) in CURVE_HEADER.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => {
                return Err(HarnessError::csv(path, format!("column {i} is `{got}`, expected `{want}`")))
            }
            None => return Err(HarnessError::csv(path, format!("missing column `{want}`"))),
        }
    }
    if header.len() != CURVE_HEADER.len() {
        return Err(HarnessError::csv(
            path,
            format!("unexpected column `{}`", &header[CURVE_HEADER.len()]),
        ));
    }
    let mut attack = String::new();
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::csv(path, e.to_string()))?;
        let num = |col: usize| -> Result<f64> {
            rec[col].parse::<f64>().map_err(|_| {
                HarnessError::csv(path, format!("row {}: column `{}` is not a number", line + 1, CURVE_HEADER[col]))
            })
        };
        points.push((num(0)?, num(1)?));
        attack = rec[3].to_string();
    }
    if points.is_empty() {
        return Err(HarnessError::csv(path, "no data rows"));
    }
    Ok(CurveSeries { attack, points })
}

/// Canvas geometry; data maps linearly onto the inner plot rectangle.
pub struct Axes {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub x_max: f64,
}

impl Axes {
    pub fn new(x_max: f64) -> Self {
        Axes {
            width: 640.0,
            height: 400.0,
            left: 60.0,
            right: 150.0,
            top: 20.0,
            bottom: 50.0,
            x_max: if x_max > 0.0 { x_max } else { 1.0 },
        }
    }

    /// Pixel coordinates of `(step, accuracy)`; accuracy spans `[0, 1]`.
    pub fn map(&self, step: f64, accuracy: f64) -> (f64, f64) {
        let w = self.width - self.left - self.right;
        let h = self.height - self.top - self.bottom;
        (self.left + step / self.x_max * w, self.top + (1.0 - accuracy) * h)
    }
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn render_svg(series: &[CurveSeries]) -> String {
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0, f64::max);
    let ax = Axes::new(x_max);
    let (x0, y0) = ax.map(0.0, 0.0);
    let (x1, y1) = ax.map(ax.x_max, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        ax.width, ax.height, ax.width, ax.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let (_, y) = ax.map(0.0, acc);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{acc:.1}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
        let step = ax.x_max * acc;
        let (x, _) = ax.map(step, 0.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{step:.0}</text>"#,
            y0 + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">step</text>"#,
        (x0 + x1) / 2.0,
        ax.height - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, c) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(st, acc)| {
                let (x, y) = ax.map(st, acc);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = ax.top + 16.0 * (i as f64 + 1.0);
        let lx = ax.width - ax.right + 12.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{ly:.2}" font-size="11">{}</text></g>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            lx + 22.0,
            escape(&c.attack)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads curve CSVs and writes one polyline per curve to `out`.
pub fn emit_plot(csvs: &[&Path], out: &Path) -> Result<()> {
    if csvs.is_empty() {
        return Err(HarnessError::Config("plot needs at least one curve CSV".into()));
    }
    let series = csvs.iter().map(|p| read_curve_csv(p)).collect::<Result<Vec<_>>>()?;
    fs::write(out, render_svg(&series)).map_err(|e| HarnessError::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(name: &str, pts: &[(f64, f64)]) -> CurveSeries {
        CurveSeries {
            attack: name.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn axis_transform_corners() {
        let ax = Axes::new(50.0);
        assert_eq!(ax.map(0.0, 1.0), (60.0, 20.0));
        assert_eq!(ax.map(50.0, 0.0), (490.0, 350.0));
    }

    #[test]
    fn two_point_curve_maps_through_axes() {
        let svg = render_svg(&[series("lethean", &[(0.0, 0.9), (50.0, 0.5)])]);
        assert_eq!(svg.matches("<polyline").count(), 1);
        let ax = Axes::new(50.0);
        let (ax0, ay0) = ax.map(0.0, 0.9);
        let (ax1, ay1) = ax.map(50.0, 0.5);
        assert!(svg.contains(&format!(r#"points="{ax0:.2},{ay0:.2} {ax1:.2},{ay1:.2}""#)));
    }

    #[test]
    fn four_curves_four_legend_entries() {
        let names = ["lethean", "random_pixel", "corruption", "fgsm"];
        let all: Vec<_> = names.iter().map(|n| series(n, &[(0.0, 1.0), (10.0, 0.5)])).collect();
        let svg = render_svg(&all);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 4);
        for n in names {
            assert!(svg.contains(n));
        }
        assert_eq!(svg, render_svg(&all));
    }
}
