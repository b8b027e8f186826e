//! Minimal SVG chart writers. Output is plain text with fixed number
//! formatting so identical inputs give identical files.

use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate};

use crate::SquareMatrix;

const STATE_COLORS: [&str; 12] = [
    "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#d62728", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];

pub fn state_color(state: usize) -> &'static str {
    STATE_COLORS[(state.max(1) - 1) % STATE_COLORS.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Doc {
    out: String,
}

impl Doc {
    fn new(width: f64, height: f64) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        Self { out }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn title(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="middle" font-size="13" font-weight="bold">{}</text>"#,
            escape(s)
        );
    }

    fn raw(&mut self, s: &str) {
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Linear map from `[lo, hi]` to `[a, b]`; degenerate ranges map to the
/// midpoint.
fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        0.5 * (a + b)
    }
}

fn lerp_rgb(c0: (f64, f64, f64), c1: (f64, f64, f64), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let ch = |a: f64, b: f64| ((a + (b - a) * t) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(c0.0, c1.0), ch(c0.1, c1.1), ch(c0.2, c1.2))
}

/// Blue below `mid`, white at `mid`, red above.
fn diverging(v: f64, lo: f64, hi: f64) -> String {
    let mid = 0.5 * (lo + hi);
    let white = (1.0, 1.0, 1.0);
    if v >= mid {
        lerp_rgb(white, (0.70, 0.09, 0.17), scale(v, mid, hi, 0.0, 1.0))
    } else {
        lerp_rgb((0.13, 0.40, 0.67), white, scale(v, lo, mid, 0.0, 1.0))
    }
}

/// Dark for small values, light for large ones.
fn sequential(v: f64, lo: f64, hi: f64) -> String {
    lerp_rgb((0.10, 0.05, 0.35), (0.99, 0.91, 0.60), scale(v, lo, hi, 0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorScale {
    /// Fixed range, blue-white-red.
    Diverging { lo: f64, hi: f64 },
    /// Data range, dark to light.
    Sequential,
}

#[allow(clippy::too_many_arguments)]
fn draw_heatmap(
    doc: &mut Doc,
    m: &SquareMatrix,
    labels: Option<&[String]>,
    x0: f64,
    y0: f64,
    size: f64,
    colors: ColorScale,
    annotate: bool,
) {
    let n = m.dim().max(1);
    let cell = size / n as f64;
    let (lo, hi) = m
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for i in 0..m.dim() {
        for j in 0..m.dim() {
            let v = m.get(i, j);
            let fill = match colors {
                ColorScale::Diverging { lo, hi } => diverging(v, lo, hi),
                ColorScale::Sequential => sequential(v, lo, hi),
            };
            let _ = writeln!(
                doc.out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
                x0 + j as f64 * cell,
                y0 + i as f64 * cell,
                cell,
                cell
            );
            if annotate {
                doc.text(
                    x0 + (j as f64 + 0.5) * cell,
                    y0 + (i as f64 + 0.5) * cell + 4.0,
                    "middle",
                    &format!("{v:.2}"),
                );
            }
        }
    }
    if let Some(labels) = labels {
        for (i, l) in labels.iter().enumerate() {
            let c = (i as f64 + 0.5) * cell;
            doc.text(x0 - 4.0, y0 + c + 4.0, "end", l);
            doc.text(x0 + c, y0 + size + 14.0, "middle", l);
        }
    }
}

/// One heatmap with optional axis labels.
pub fn heatmap(m: &SquareMatrix, labels: Option<&[String]>, title: &str, colors: ColorScale) -> String {
    let size = 420.0;
    let mut doc = Doc::new(size + 120.0, size + 90.0);
    doc.title((size + 120.0) / 2.0, 20.0, title);
    let annotate = m.dim() <= 12;
    draw_heatmap(&mut doc, m, labels, 80.0, 40.0, size, colors, annotate);
    doc.finish()
}

/// A row of heatmaps sharing a color scale, e.g. one per market state.
pub fn heatmap_row(panels: &[(String, SquareMatrix)], labels: Option<&[String]>, title: &str, colors: ColorScale) -> String {
    let size = 220.0;
    let gap = 70.0;
    let width = 60.0 + panels.len() as f64 * (size + gap);
    let mut doc = Doc::new(width, size + 100.0);
    doc.title(width / 2.0, 20.0, title);
    for (p, (name, m)) in panels.iter().enumerate() {
        let x0 = 60.0 + p as f64 * (size + gap);
        doc.text(x0 + size / 2.0, 45.0, "middle", name);
        draw_heatmap(&mut doc, m, labels, x0, 55.0, size, colors, m.dim() <= 4);
    }
    doc.finish()
}

fn day_number(d: NaiveDate) -> f64 {
    d.num_days_from_ce() as f64
}

fn date_axis(doc: &mut Doc, lo: NaiveDate, hi: NaiveDate, x0: f64, x1: f64, y: f64) {
    let _ = writeln!(
        doc.out,
        r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="black"/>"#
    );
    for year in lo.year()..=hi.year() + 1 {
        let Some(jan1) = NaiveDate::from_ymd_opt(year, 1, 1) else {
            continue;
        };
        if jan1 < lo || jan1 > hi {
            continue;
        }
        let x = scale(day_number(jan1), day_number(lo), day_number(hi), x0, x1);
        let _ = writeln!(
            doc.out,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            y + 4.0
        );
        doc.text(x, y + 16.0, "middle", &year.to_string());
    }
}

#[allow(clippy::too_many_arguments)]
fn crash_lines(doc: &mut Doc, crashes: &[NaiveDate], lo: NaiveDate, hi: NaiveDate, x0: f64, x1: f64, y0: f64, y1: f64) {
    for &c in crashes {
        if c < lo || c > hi {
            continue;
        }
        let x = scale(day_number(c), day_number(lo), day_number(hi), x0, x1);
        let _ = writeln!(
            doc.out,
            r#"<line class="crash" x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="black" stroke-dasharray="4,3"/>"#
        );
    }
}

/// One row of dots per state over time; dashed verticals at crash dates
/// inside the plotted range.
pub fn state_dot_rows(dates: &[NaiveDate], states: &[usize], k: usize, crashes: &[NaiveDate], title: &str) -> String {
    let (width, height) = (900.0, 60.0 + 28.0 * k as f64 + 40.0);
    let (x0, x1) = (60.0, width - 20.0);
    let top = 40.0;
    let row = |s: usize| top + 28.0 * (k - s) as f64 + 14.0;
    let mut doc = Doc::new(width, height);
    doc.title(width / 2.0, 20.0, title);
    let (Some(&lo), Some(&hi)) = (dates.first(), dates.last()) else {
        return doc.finish();
    };
    for s in 1..=k {
        doc.text(x0 - 8.0, row(s) + 4.0, "end", &format!("state {s}"));
    }
    for (d, &s) in dates.iter().zip(states) {
        let x = scale(day_number(*d), day_number(lo), day_number(hi), x0, x1);
        let _ = writeln!(
            doc.out,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            row(s),
            state_color(s)
        );
    }
    let bottom = top + 28.0 * k as f64;
    crash_lines(&mut doc, crashes, lo, hi, x0, x1, top, bottom);
    date_axis(&mut doc, lo, hi, x0, x1, bottom + 6.0);
    doc.finish()
}

/// Stacked line panels sharing a date axis.
pub fn line_panels(dates: &[NaiveDate], series: &[(String, Vec<f64>)], crashes: &[NaiveDate], title: &str) -> String {
    let panel_h = 130.0;
    let (width, height) = (900.0, 50.0 + series.len() as f64 * (panel_h + 20.0) + 30.0);
    let (x0, x1) = (70.0, width - 20.0);
    let mut doc = Doc::new(width, height);
    doc.title(width / 2.0, 20.0, title);
    let (Some(&lo), Some(&hi)) = (dates.first(), dates.last()) else {
        return doc.finish();
    };
    let mut bottom = 40.0;
    for (p, (name, values)) in series.iter().enumerate() {
        let top = 40.0 + p as f64 * (panel_h + 20.0);
        bottom = top + panel_h;
        let (vlo, vhi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = writeln!(
            doc.out,
            r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{panel_h:.2}" fill="none" stroke="gray"/>"#,
            x1 - x0
        );
        doc.text(x0 - 6.0, top + 12.0, "end", &format!("{vhi:.3}"));
        doc.text(x0 - 6.0, bottom, "end", &format!("{vlo:.3}"));
        doc.text(x0 + 6.0, top + 14.0, "start", name);
        let mut path = String::new();
        for (i, (d, v)) in dates.iter().zip(values).enumerate() {
            let x = scale(day_number(*d), day_number(lo), day_number(hi), x0, x1);
            let y = scale(*v, vlo, vhi, bottom, top);
            let _ = write!(path, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
        }
        let _ = writeln!(
            doc.out,
            r#"<path d="{path}" fill="none" stroke="{}" stroke-width="1"/>"#,
            state_color(p + 1)
        );
        crash_lines(&mut doc, crashes, lo, hi, x0, x1, top, bottom);
    }
    date_axis(&mut doc, lo, hi, x0, x1, bottom + 4.0);
    doc.finish()
}

/// Scatter colored by state.
pub fn scatter(points: &[(f64, f64)], states: &[usize], x_label: &str, y_label: &str, title: &str) -> String {
    let (width, height) = (480.0, 480.0);
    let (x0, x1, y0, y1) = (60.0, width - 20.0, height - 50.0, 40.0);
    let mut doc = Doc::new(width, height);
    doc.title(width / 2.0, 20.0, title);
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (xlo, xhi) = bounds(|p| p.0);
    let (ylo, yhi) = bounds(|p| p.1);
    doc.raw(&format!(
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="gray"/>"#,
        x1 - x0,
        y0 - y1
    ));
    for (p, &s) in points.iter().zip(states) {
        let _ = writeln!(
            doc.out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{}" fill-opacity="0.7"/>"#,
            scale(p.0, xlo, xhi, x0, x1),
            scale(p.1, ylo, yhi, y0, y1),
            state_color(s)
        );
    }
    if xlo.is_finite() {
        doc.text(x0, y0 + 16.0, "start", &format!("{xlo:.3}"));
        doc.text(x1, y0 + 16.0, "end", &format!("{xhi:.3}"));
        doc.text(x0 - 4.0, y0, "end", &format!("{ylo:.3}"));
        doc.text(x0 - 4.0, y1 + 10.0, "end", &format!("{yhi:.3}"));
    }
    doc.text((x0 + x1) / 2.0, y0 + 34.0, "middle", x_label);
    doc.text(14.0, (y0 + y1) / 2.0, "middle", y_label);
    doc.finish()
}
