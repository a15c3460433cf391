//! Reading optimization traces back from CSV and drawing line charts.

use std::fmt::Write as _;
use std::path::Path;

use super::{CliError, OPTIMIZE_HEADER};
use crate::engine::{Acquisition, Aggregate, OptimizationTrace, TraceRow};

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{}: line {line}: bad {field} {value:?}", path.display())))
}

/// Traces of one optimize CSV, in file order.
pub fn read_traces(path: &Path) -> Result<Vec<OptimizationTrace>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().ne(OPTIMIZE_HEADER.iter().copied()) {
        return Err(CliError::Usage(format!(
            "{}: not an optimize table (header {:?})",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut traces: Vec<OptimizationTrace> = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let line = r.position().map_or(0, |p| p.line());
        let acquisition = match &r[1] {
            "pi" => Acquisition::Pi,
            "greedy" => Acquisition::Greedy,
            other => return Err(CliError::Usage(format!("{}: line {line}: unknown acq {other:?}", path.display()))),
        };
        let run: usize = parse(path, line, "run", &r[3])?;
        let row = TraceRow {
            trial: parse(path, line, "trial", &r[4])?,
            selected_index: parse(path, line, "selected_index", &r[5])?,
            observed_f: parse(path, line, "observed_f", &r[6])?,
            best_f: parse(path, line, "best_f", &r[7])?,
            regret: parse(path, line, "regret", &r[8])?,
        };
        let same = traces.last().is_some_and(|t| {
            t.surrogate == r[0] && t.acquisition == acquisition && t.task_id == r[2] && t.run == run
        });
        if !same {
            traces.push(OptimizationTrace {
                surrogate: r[0].to_string(),
                acquisition,
                task_id: r[2].to_string(),
                run,
                seed: 0,
                max_f: row.best_f + row.regret,
                init_fallback: false,
                rows: Vec::new(),
            });
        }
        traces.last_mut().expect("trace exists").rows.push(row);
    }
    Ok(traces)
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6d597a", "#00798c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round tick step covering `span` in about five intervals.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    format!("{v:.decimals$}")
}

/// One line chart of `metric` against trial, a series per surrogate.
pub fn line_chart(agg: &Aggregate, metric: &str, label: &str, value: impl Fn(&crate::engine::AggregateRow) -> f64) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for row in &agg.rows {
        if series.last().is_none_or(|(name, _)| *name != row.surrogate) {
            series.push((&row.surrogate, Vec::new()));
        }
        series.last_mut().expect("series exists").1.push((row.trial as f64, value(row)));
    }
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (xs, ys) = (tick_step(x1 - x0), tick_step(y1 - y0));
    y1 = (y1 / ys).ceil() * ys;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(label));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{} by trial</text>"#,
        (left + w - right) / 2.0,
        escape(label)
    );
    // grid and tick labels
    let mut t = (x0 / xs).ceil() * xs;
    while t <= x1 + 1e-9 {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##, top, h - bottom);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, h - bottom + 16.0, fmt_tick(t, xs));
        t += xs;
    }
    let mut t = (y0 / ys).ceil() * ys;
    while t <= y1 + 1e-9 {
        let y = py(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##, w - right);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, fmt_tick(t, ys));
        t += ys;
    }
    let _ = writeln!(
        s,
        r##"<path d="M{left} {top} V{:.2} H{:.2}" fill="none" stroke="#333"/>"##,
        h - bottom,
        w - right
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">trial</text>"#, (left + w - right) / 2.0, h - 14.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + h - bottom) / 2.0,
        escape(metric)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let ly = top + 10.0 + 20.0 * k as f64;
        let lx = w - right + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
