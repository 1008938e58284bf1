//! Minimal SVG charts: axes, polylines, point markers and text labels.
//!
//! Output depends only on the input CSV, so files can be compared byte for
//! byte.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("CSV has no data rows")]
    Empty,
    #[error("CSV is missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    AccVsCompression,
    AccVsBits,
    BoundGap,
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlotKind::AccVsCompression => "acc-vs-compression",
            PlotKind::AccVsBits => "acc-vs-bits",
            PlotKind::BoundGap => "bound-gap",
        })
    }
}

impl FromStr for PlotKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "acc-vs-compression" => Ok(PlotKind::AccVsCompression),
            "acc-vs-bits" => Ok(PlotKind::AccVsBits),
            "bound-gap" => Ok(PlotKind::BoundGap),
            other => Err(format!("unknown plot kind `{other}`")),
        }
    }
}

struct Table<'a> {
    header: Vec<&'a str>,
    rows: Vec<(usize, Vec<&'a str>)>,
}

impl<'a> Table<'a> {
    fn parse(text: &'a str) -> Result<Self, PlotError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(PlotError::Empty)?;
        let header: Vec<&str> = header.split(',').map(str::trim).collect();
        let rows: Vec<(usize, Vec<&str>)> = lines
            .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
            .collect();
        if rows.is_empty() {
            return Err(PlotError::Empty);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, PlotError> {
        self.header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| PlotError::MissingColumn(name.into()))
    }
}

fn number(line: usize, v: &str) -> Result<Option<f64>, PlotError> {
    if v == "-" {
        return Ok(None);
    }
    v.parse::<f64>().map(Some).map_err(|_| PlotError::Row {
        line,
        reason: format!("`{v}` is not a number"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Tick positions on x, labelled with their shortest decimal form.
    pub x_ticks: Vec<f64>,
}

/// Reads `csv` for `kind` and renders the chart.
pub fn plot(csv: &str, kind: PlotKind) -> Result<String, PlotError> {
    Ok(render(&chart(csv, kind)?))
}

pub fn chart(csv: &str, kind: PlotKind) -> Result<Chart, PlotError> {
    let table = Table::parse(csv)?;
    match kind {
        PlotKind::AccVsCompression => grouped(
            &table,
            "compression_ratio",
            &["reg"],
            "Accuracy vs. compression ratio",
            "compression ratio (x)",
        ),
        PlotKind::AccVsBits => grouped(
            &table,
            "weight_bits",
            &["nm", "reg"],
            "Accuracy vs. weight bit-width",
            "weight bits",
        ),
        PlotKind::BoundGap => bound_gap(&table),
    }
}

fn grouped(table: &Table<'_>, x_col: &str, keys: &[&str], title: &str, x_label: &str) -> Result<Chart, PlotError> {
    let xi = table.column(x_col)?;
    let yi = table.column("test_accuracy")?;
    let ki: Vec<usize> = keys.iter().map(|k| table.column(k)).collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let get = |i: usize| {
            row.get(i).copied().ok_or_else(|| PlotError::Row {
                line: *line,
                reason: "too few fields".into(),
            })
        };
        let (Some(x), Some(y)) = (number(*line, get(xi)?)?, number(*line, get(yi)?)?) else {
            continue;
        };
        let label = ki.iter().map(|&i| get(i)).collect::<Result<Vec<_>, _>>()?.join(" ");
        groups.entry(label).or_default().push((x, y));
    }
    if groups.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut ticks: Vec<f64> = Vec::new();
    let series = groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            for &(x, _) in &points {
                let t = (x * 10.0).round() / 10.0;
                if !ticks.contains(&t) {
                    ticks.push(t);
                }
            }
            Series {
                label,
                points,
                markers: true,
            }
        })
        .collect();
    ticks.sort_by(f64::total_cmp);
    Ok(Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "test accuracy (%)".into(),
        series,
        x_ticks: ticks,
    })
}

/// Cap on drawn points per curve.
pub const MAX_CURVE_POINTS: usize = 1000;

fn bound_gap(table: &Table<'_>) -> Result<Chart, PlotError> {
    let (ti, li, ui) = (table.column("theta")?, table.column("lower")?, table.column("upper")?);
    let mut rows = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let field = |i: usize| -> Result<f64, PlotError> {
            let v = row.get(i).ok_or_else(|| PlotError::Row {
                line: *line,
                reason: "too few fields".into(),
            })?;
            number(*line, v)?.ok_or_else(|| PlotError::Row {
                line: *line,
                reason: "missing value".into(),
            })
        };
        rows.push((field(ti)?, field(li)?, field(ui)?));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = rows.len().div_ceil(MAX_CURVE_POINTS).max(1);
    let picked: Vec<_> = rows.iter().step_by(step).copied().collect();
    let (lo, hi) = (picked[0].0, picked[picked.len() - 1].0);
    Ok(Chart {
        title: "Sparsification error bounds".into(),
        x_label: "theta (rad)".into(),
        y_label: "error / |w|^2".into(),
        series: vec![
            Series {
                label: "lower sin^2".into(),
                points: picked.iter().map(|r| (r.0, r.1)).collect(),
                markers: picked.len() == 1,
            },
            Series {
                label: "upper 2(1-cos)".into(),
                points: picked.iter().map(|r| (r.0, r.2)).collect(),
                markers: picked.len() == 1,
            },
        ],
        x_ticks: if lo == hi {
            vec![lo]
        } else {
            vec![lo, (lo + hi) / 2.0, hi]
        },
    })
}

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(chart: &Chart) -> String {
    let all = || chart.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(all().map(|p| p.0).chain(chart.x_ticks.iter().copied()));
    let (y0, y1) = range(all().map(|p| p.1));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        LEFT + pw / 2.0,
        escape(&chart.title)
    );
    // Axes.
    let (bx, by) = (LEFT, TOP + ph);
    let _ = writeln!(
        out,
        "<line x1=\"{bx:.2}\" y1=\"{by:.2}\" x2=\"{:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>",
        LEFT + pw
    );
    let _ = writeln!(
        out,
        "<line x1=\"{bx:.2}\" y1=\"{TOP:.2}\" x2=\"{bx:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>"
    );
    for &t in &chart.x_ticks {
        let x = sx(t);
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{by:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            by + 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            by + 18.0,
            tick_label(t)
        );
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{bx:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>",
            bx - 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            bx - 8.0,
            y + 4.0,
            tick_label(v)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"15\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {:.2})\">{}</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    // Data.
    for (k, s) in chart.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                pts.join(" ")
            );
        }
        if s.markers || s.points.len() == 1 {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    sx(x),
                    sy(y)
                );
            }
        }
        let ly = TOP + 14.0 * k as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 15.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            lx + 20.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick_label(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let s = format!("{r}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}
