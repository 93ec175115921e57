//! Static SVG plots of relative error against one of four work measures.
//!
//! Every plotted point is also written to `plot_data.csv`, so the figures
//! can be redrawn elsewhere from identical values.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{TrajectoryRecord, TrajectoryRow};
use crate::portable::fmt_f64;

pub const PLOT_DATA_FILE: &str = "plot_data.csv";
pub const PLOT_DATA_HEADER: &str =
    "series,run_id,variant,seed,c_c,c_g,k,iters,grads,comms,cost,rel_error,marker";

/// Upper bound on line vertices per series.
const MAX_LINE_POINTS: usize = 2000;
/// Zero errors are drawn at this floor on a log axis.
const LOG_FLOOR: f64 = 1e-32;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 250.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Iters,
    Grads,
    Comms,
    Cost,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Iters => "iters",
            Axis::Grads => "grads",
            Axis::Comms => "comms",
            Axis::Cost => "cost",
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Axis::Iters => "iterations",
            Axis::Grads => "gradient evaluations",
            Axis::Comms => "communications",
            Axis::Cost => "cost",
        }
    }

    fn value(&self, row: &TrajectoryRow) -> f64 {
        match self {
            Axis::Iters => row.k as f64,
            Axis::Grads => row.cum_grad as f64,
            Axis::Comms => row.cum_comm as f64,
            Axis::Cost => row.cum_cost,
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "iters" => Ok(Axis::Iters),
            "grads" => Ok(Axis::Grads),
            "comms" => Ok(Axis::Comms),
            "cost" => Ok(Axis::Cost),
            other => Err(format!("unknown axis `{other}` (expected iters, grads, comms, cost)")),
        }
    }
}

/// Parses a comma-separated axis list such as `iters,grads,comms,cost`.
pub fn parse_axes(spec: &str) -> Result<Vec<Axis>> {
    let axes: Vec<Axis> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse().map_err(Error::InvalidParameter))
        .collect::<Result<_>>()?;
    if axes.is_empty() {
        return Err(Error::invalid("no axes requested"));
    }
    Ok(axes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    pub axes: Vec<Axis>,
    pub marker_every: usize,
    pub log_y: bool,
}

struct Series<'a> {
    label: String,
    record: &'a TrajectoryRecord,
    /// Indices into `record.rows`, with the marker flag.
    points: Vec<(usize, bool)>,
}

fn series_label(rec: &TrajectoryRecord, many_seeds: bool, many_costs: bool) -> String {
    let mut label = rec.meta.variant.clone();
    if many_seeds {
        if let Some(seed) = rec.meta.seed {
            let _ = write!(label, " seed={seed}");
        }
    }
    if many_costs {
        let _ = write!(label, " c_c={} c_g={}", rec.meta.c_c, rec.meta.c_g);
    }
    label
}

fn select_points(rows: &[TrajectoryRow], marker_every: usize) -> Vec<(usize, bool)> {
    let stride = rows.len().div_ceil(MAX_LINE_POINTS).max(1);
    let last = rows.len().saturating_sub(1);
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let marker = r.k % marker_every == 0;
            (marker || r.k % stride == 0 || i == last).then_some((i, marker))
        })
        .collect()
}

fn build_series(records: &[TrajectoryRecord], marker_every: usize) -> Vec<Series<'_>> {
    let seeds: BTreeSet<_> = records.iter().map(|r| r.meta.seed).collect();
    let costs: BTreeSet<_> = records
        .iter()
        .map(|r| (r.meta.c_c.to_bits(), r.meta.c_g.to_bits()))
        .collect();
    records
        .iter()
        .map(|rec| Series {
            label: series_label(rec, seeds.len() > 1, costs.len() > 1),
            record: rec,
            points: select_points(&rec.rows, marker_every),
        })
        .collect()
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_plot_data(series: &[Series<'_>], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(PLOT_DATA_HEADER);
    out.push('\n');
    for s in series {
        let m = &s.record.meta;
        for &(i, marker) in &s.points {
            let r = &s.record.rows[i];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_quote(&s.label),
                csv_quote(&m.run_id),
                csv_quote(&m.variant),
                m.seed.map(|v| v.to_string()).unwrap_or_default(),
                fmt_f64(m.c_c),
                fmt_f64(m.c_g),
                r.k,
                r.k,
                r.cum_grad,
                r.cum_comm,
                fmt_f64(r.cum_cost),
                fmt_f64(r.rel_error),
                u8::from(marker)
            );
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powi(raw.log10().floor() as i32);
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag)
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e5 {
        let exp = v.abs().log10().floor() as i32;
        let mant = v / 10f64.powi(exp);
        if (mant - mant.round()).abs() < 1e-9 {
            format!("{}e{exp}", mant.round())
        } else {
            format!("{mant:.1}e{exp}")
        }
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(series: &[Series<'_>], axis: Axis, log_y: bool) -> String {
    let y_of = |v: f64| if log_y { v.max(LOG_FLOOR).log10() } else { v };
    let (mut x_max, mut y_lo, mut y_hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(i, _) in &s.points {
            let r = &s.record.rows[i];
            let y = y_of(r.rel_error);
            if !y.is_finite() {
                continue;
            }
            x_max = x_max.max(axis.value(r));
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if log_y {
        y_lo = y_lo.floor();
        y_hi = y_hi.ceil();
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    if x_max <= 0.0 {
        x_max = 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - (y - y_lo) / (y_hi - y_lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );

    let step = nice_step(x_max);
    let mut t = 0.0;
    while t <= x_max * (1.0 + 1e-12) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            tick_label(t)
        );
        t += step;
    }
    let y_ticks: Vec<f64> = if log_y {
        let span = (y_hi - y_lo) as usize;
        let every = span.div_ceil(10).max(1);
        (0..=span).step_by(every).map(|d| y_lo + d as f64).collect()
    } else {
        let step = nice_step(y_hi - y_lo);
        let first = (y_lo / step).ceil() as i64;
        let last = (y_hi / step).floor() as i64;
        (first..=last).map(|i| i as f64 * step).collect()
    };
    for v in y_ticks {
        let y = sy(v);
        let label = if log_y { format!("1e{v}") } else { tick_label(v) };
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        axis.label()
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">relative error{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        if log_y { " (log)" } else { "" }
    );

    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let mut line = String::new();
        let mut markers = String::new();
        for &(i, marker) in &s.points {
            let r = &s.record.rows[i];
            let y = y_of(r.rel_error);
            if !y.is_finite() {
                continue;
            }
            let (px, py) = (sx(axis.value(r)), sy(y));
            let _ = write!(line, "{px:.2},{py:.2} ");
            if marker {
                let _ = write!(
                    markers,
                    r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"/>"#
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            line.trim_end()
        );
        if !markers.is_empty() {
            let _ = writeln!(svg, "{markers}");
        }
        let ly = TOP + 14.0 + 18.0 * idx as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes one SVG per axis plus the plot-data CSV into `out`.
pub fn plot_records(
    records: &[TrajectoryRecord],
    opts: &PlotOptions,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to plot"));
    }
    if opts.marker_every == 0 {
        return Err(Error::invalid("marker interval must be at least 1"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let series = build_series(records, opts.marker_every);
    let mut written = Vec::new();
    let data = out.join(PLOT_DATA_FILE);
    write_plot_data(&series, &data)?;
    written.push(data);
    let axes: BTreeSet<Axis> = opts.axes.iter().copied().collect();
    for axis in axes {
        let path = out.join(format!("rel_error_vs_{}.svg", axis.name()));
        std::fs::write(&path, render_svg(&series, axis, opts.log_y)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
