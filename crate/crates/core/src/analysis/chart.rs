//! Minimal deterministic SVG output. Coordinates are printed with fixed
//! precision so identical input yields byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Distribution, GridPanel, TimeSeries};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const PANEL_WIDTH: f64 = 320.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Line,
    Histogram,
    Grid,
}

#[derive(Debug, Clone, Copy)]
pub enum ChartData<'a> {
    Series(&'a TimeSeries),
    Distribution(&'a Distribution),
    Grid(&'a [GridPanel]),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChartLabels {
    pub title: String,
    pub metric: String,
    pub unit: String,
}

impl ChartLabels {
    pub fn new(title: impl Into<String>, metric: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            metric: metric.into(),
            unit: unit.into(),
        }
    }

    fn value_axis(&self) -> String {
        if self.unit.is_empty() {
            self.metric.clone()
        } else {
            format!("{} ({})", self.metric, self.unit)
        }
    }
}

/// Renders `data` as a standalone SVG document.
pub fn render_chart(data: ChartData<'_>, kind: ChartKind, labels: &ChartLabels) -> Result<String, AnalysisError> {
    match (data, kind) {
        (ChartData::Series(s), ChartKind::Line) => line_chart(s, labels),
        (ChartData::Distribution(d), ChartKind::Histogram) => histogram(d, labels),
        (ChartData::Grid(g), ChartKind::Grid) => grid(g, labels),
        (_, kind) => Err(AnalysisError::InvalidArgument(format!(
            "chart kind {kind:?} does not match the data"
        ))),
    }
}

/// [`render_chart`] written to `path`.
pub fn write_chart(
    data: ChartData<'_>,
    kind: ChartKind,
    labels: &ChartLabels,
    path: &Path,
) -> Result<(), AnalysisError> {
    let svg = render_chart(data, kind, labels)?;
    std::fs::write(path, svg).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn line_chart(s: &TimeSeries, labels: &ChartLabels) -> Result<String, AnalysisError> {
    if s.is_empty() {
        return Err(AnalysisError::EmptyData("time series"));
    }
    let t0 = s.bucket_starts[0];
    let points: Vec<(f64, f64)> = s
        .bucket_starts
        .iter()
        .zip(&s.values)
        .map(|(t, v)| ((t - t0) as f64 / 1e9, *v))
        .collect();
    let mut out = header(WIDTH, HEIGHT, &labels.title);
    let frame = Frame::new(MARGIN_LEFT, MARGIN_TOP, WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let (x_lo, x_hi) = range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = range(points.iter().map(|p| p.1).chain([0.0]));
    frame.axes(&mut out, (x_lo, x_hi), (y_lo, y_hi), "time (s)", &labels.value_axis());
    frame.polyline(&mut out, &points, (x_lo, x_hi), (y_lo, y_hi));
    out.push_str("</svg>\n");
    Ok(out)
}

fn histogram(d: &Distribution, labels: &ChartLabels) -> Result<String, AnalysisError> {
    if d.is_empty() {
        return Err(AnalysisError::EmptyData("distribution"));
    }
    let mut out = header(WIDTH, HEIGHT, &labels.title);
    let frame = Frame::new(MARGIN_LEFT, MARGIN_TOP, WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let x = (d.bin_edges[0], d.bin_edges[d.bin_edges.len() - 1]);
    let y = (0.0, d.counts.iter().copied().max().unwrap_or(1).max(1) as f64);
    frame.axes(&mut out, x, y, &labels.value_axis(), "jobs");
    out.push_str("<g class=\"histogram\" fill=\"#4a78b0\" stroke=\"#1f3d63\" stroke-width=\"0.5\">\n");
    for (i, c) in d.counts.iter().enumerate() {
        let x0 = frame.x(d.bin_edges[i], x);
        let x1 = frame.x(d.bin_edges[i + 1], x);
        let top = frame.y(*c as f64, y);
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\"/>",
            fmt(x0),
            fmt(top),
            fmt(x1 - x0),
            fmt(frame.bottom() - top)
        );
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

fn grid(panels: &[GridPanel], labels: &ChartLabels) -> Result<String, AnalysisError> {
    if panels.is_empty() {
        return Err(AnalysisError::EmptyData("job grid"));
    }
    let cols = (panels.len() as f64).sqrt().ceil() as usize;
    let rows = panels.len().div_ceil(cols);
    let width = cols as f64 * PANEL_WIDTH;
    let height = rows as f64 * PANEL_HEIGHT + MARGIN_TOP;
    let mut out = header(width, height, &labels.title);
    for (i, p) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_WIDTH;
        let oy = MARGIN_TOP + (i / cols) as f64 * PANEL_HEIGHT;
        let frame = Frame::new(ox + 70.0, oy + 24.0, PANEL_WIDTH - 85.0, PANEL_HEIGHT - 68.0);
        let mut name = format!("job {}", p.job.job_id);
        if let Some(t) = p.job.array_task_id {
            let _ = write!(name, "[{t}]");
        }
        let _ = writeln!(
            out,
            "<g class=\"panel\">\n<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            fmt(frame.left + frame.width / 2.0),
            fmt(oy + 16.0),
            escape(&name)
        );
        let t0 = p.samples.first().map_or(0, |s| s.0);
        let points: Vec<(f64, f64)> = p.samples.iter().map(|(t, v)| ((t - t0) as f64 / 1e9, *v)).collect();
        let x = range(points.iter().map(|p| p.0));
        let y = range(points.iter().map(|p| p.1).chain([0.0]));
        frame.axes(&mut out, x, y, "time (s)", &labels.value_axis());
        frame.polyline(&mut out, &points, x, y);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn header(width: f64, height: f64, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">",
        w = fmt(width),
        h = fmt(height)
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        fmt(width / 2.0),
        escape(title)
    );
    out
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Self { left, top, width, height }
    }

    fn bottom(&self) -> f64 {
        self.top + self.height
    }

    fn x(&self, v: f64, (lo, hi): (f64, f64)) -> f64 {
        self.left + (v - lo) / (hi - lo) * self.width
    }

    fn y(&self, v: f64, (lo, hi): (f64, f64)) -> f64 {
        self.bottom() - (v - lo) / (hi - lo) * self.height
    }

    fn axes(&self, out: &mut String, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\"/>\n</g>",
            l = fmt(self.left),
            r = fmt(self.left + self.width),
            t = fmt(self.top),
            b = fmt(self.bottom())
        );
        out.push_str("<g class=\"ticks\" font-size=\"10\">\n");
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let xv = x.0 + (x.1 - x.0) * f;
            let px = self.x(xv, x);
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                fmt(px),
                fmt(self.bottom() + 14.0),
                tick(xv)
            );
            let yv = y.0 + (y.1 - y.0) * f;
            let py = self.y(yv, y);
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                fmt(self.left - 4.0),
                fmt(py + 3.0),
                tick(yv)
            );
        }
        out.push_str("</g>\n");
        let _ = writeln!(
            out,
            "<text class=\"x-label\" x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            fmt(self.left + self.width / 2.0),
            fmt(self.bottom() + 32.0),
            escape(x_label)
        );
        let cy = self.top + self.height / 2.0;
        let cx = self.left - 58.0;
        let _ = writeln!(
            out,
            "<text class=\"y-label\" x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 {x} {y})\">{}</text>",
            escape(y_label),
            x = fmt(cx),
            y = fmt(cy)
        );
    }

    fn polyline(&self, out: &mut String, points: &[(f64, f64)], x: (f64, f64), y: (f64, f64)) {
        let coords: Vec<String> = points
            .iter()
            .map(|(px, py)| format!("{},{}", fmt(self.x(*px, x)), fmt(self.y(*py, y))))
            .collect();
        let _ = writeln!(
            out,
            "<polyline class=\"series\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
    }
}

/// Data range widened to a non-empty interval.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_owned()
    } else {
        s
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}
