//! CSV, JSON and SVG writers for experiment outputs.
//!
//! Output is deterministic: fixed float formatting and no timestamps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes through a sibling temp file and a rename so readers never see a partial file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// A labelled matrix: header `corner,col...`, then one line per row.
pub fn grid_csv(corner: &str, rows: &[String], cols: &[String], values: &[f64]) -> String {
    let mut out = String::new();
    out.push_str(&csv_field(corner));
    for c in cols {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for (r, label) in rows.iter().enumerate() {
        out.push_str(&csv_field(label));
        for c in 0..cols.len() {
            out.push(',');
            out.push_str(&fmt_value(values[r * cols.len() + c]));
        }
        out.push('\n');
    }
    out
}

pub fn write_grid_csv(path: &Path, corner: &str, rows: &[String], cols: &[String], values: &[f64]) -> Result<()> {
    write_text(path, &grid_csv(corner, rows, cols, values))
}

/// Plain table: a header row and string cells.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_text(path, &table_csv(header, rows))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue–white–red color for `v` on a scale symmetric around zero.
fn diverging(v: f64, limit: f64) -> String {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t < 0.0 {
        (fade(33.0), fade(102.0), fade(172.0))
    } else {
        (fade(178.0), fade(24.0), fade(43.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap with a diverging palette centred on zero and a min/max legend.
pub fn heatmap_svg(title: &str, rows: &[String], cols: &[String], values: &[f64]) -> String {
    let cell = 28.0;
    let (left, top) = (70.0, 50.0);
    let width = left + cell * cols.len() as f64 + 20.0;
    let height = top + cell * rows.len() as f64 + 60.0;
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let min = finite.clone().fold(f64::INFINITY, f64::min);
    let max = finite.fold(f64::NEG_INFINITY, f64::max);
    let limit = min.abs().max(max.abs());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(title));
    for (c, label) in cols.iter().enumerate() {
        let x = left + cell * (c as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 6.0, escape(label));
    }
    for (r, label) in rows.iter().enumerate() {
        let y = top + cell * r as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell * 0.65,
            escape(label)
        );
        for c in 0..cols.len() {
            let v = values[r * cols.len() + c];
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}"><title>{} / {}: {}</title></rect>"#,
                left + cell * c as f64,
                diverging(v, limit),
                escape(label),
                escape(&cols[c]),
                fmt_value(v)
            );
        }
    }
    let ly = top + cell * rows.len() as f64 + 25.0;
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{}" width="14" height="14" fill="{}"/><text x="{}" y="{ly}">min {}</text>"#,
        ly - 11.0,
        diverging(min, limit),
        left + 20.0,
        fmt_value(min)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="14" height="14" fill="{}"/><text x="{}" y="{ly}">max {}</text>"#,
        left + 150.0,
        ly - 11.0,
        diverging(max, limit),
        left + 170.0,
        fmt_value(max)
    );
    s.push_str("</svg>\n");
    s
}

/// Line plot with one polyline per series over shared x labels.
pub fn line_plot_svg(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)], reference: Option<(String, f64)>) -> String {
    let (left, top, w, h) = (60.0, 40.0, 480.0, 260.0);
    let mut all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if let Some((_, r)) = &reference {
        all.push(*r);
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let nx = x_labels.len().max(2) - 1;
    let px = |k: usize| left + w * k as f64 / nx as f64;
    let py = |v: f64| top + h * (hi - v) / span;
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        left + w + 140.0,
        top + h + 60.0
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#999"/>"##,
        py(0.0),
        left + w
    );
    for v in [lo, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            py(v) + 4.0,
        );
    }
    for (k, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-40 {} {})">{}</text>"#,
            px(k),
            top + h + 16.0,
            px(k),
            top + h + 16.0,
            escape(label)
        );
    }
    if let Some((name, r)) = &reference {
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#000" stroke-dasharray="4 3"/><text x="{2}" y="{0}">{3}</text>"##,
            py(*r),
            left + w,
            left + w + 6.0,
            escape(name)
        );
    }
    for (n, (name, values)) in series.iter().enumerate() {
        let color = colors[n % colors.len()];
        let points: Vec<String> = values.iter().enumerate().map(|(k, &v)| format!("{:.2},{:.2}", px(k), py(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            left + w + 6.0,
            top + 14.0 * (n as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(s: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="60" y="20" font-size="13">{}</text>"#, escape(title));
}

/// Vertical bars over categorical labels, with the axis starting at zero.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (left, top, h, bar) = (60.0, 40.0, 220.0, 30.0);
    let w = bar * labels.len() as f64;
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let scale = if hi > 0.0 { h / hi } else { 0.0 };
    let mut s = String::new();
    svg_open(&mut s, left + w + 20.0, top + h + 50.0, title);
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#999"/>"##,
        top + h,
        left + w
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, top + 4.0, fmt_value(hi));
    for (k, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = left + bar * k as f64;
        let bh = (v.max(0.0) * scale).min(h);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{bh}" fill="#4477aa"><title>{}: {}</title></rect>"##,
            x + 3.0,
            top + h - bh,
            bar - 6.0,
            escape(label),
            fmt_value(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x + bar / 2.0,
            top + h + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot with axes spanning the data range.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (left, top, w, h) = (70.0, 40.0, 420.0, 300.0);
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = range(&mut points.iter().map(|p| p.0));
    let (y0, y1) = range(&mut points.iter().map(|p| p.1));
    let px = |x: f64| left + w * (x - x0) / (x1 - x0);
    let py = |y: f64| top + h * (y1 - y) / (y1 - y0);
    let mut s = String::new();
    svg_open(&mut s, left + w + 20.0, top + h + 50.0, title);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#999"/>"##
    );
    for (v, x, anchor) in [(x0, left, "start"), (x1, left + w, "end")] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{v:.2}</text>"#, top + h + 14.0);
    }
    for (v, y) in [(y0, top + h), (y1, top + 10.0)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.2}</text>"#, left - 6.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        top + h + 32.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        top + h / 2.0,
        escape(y_label)
    );
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#4477aa" fill-opacity="0.5"/>"##,
            px(x),
            py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_csv_layout() {
        let csv = grid_csv(
            "layer",
            &["0".into(), "1".into()],
            &["a".into(), "b,c".into()],
            &[1.0, -0.5, 0.25, 2.0],
        );
        assert_eq!(csv, "layer,a,\"b,c\"\n0,1.000000,-0.500000\n1,0.250000,2.000000\n");
    }

    #[test]
    fn palette_is_centred() {
        assert_eq!(diverging(0.0, 1.0), "#ffffff");
        assert_eq!(diverging(-1.0, 1.0), "#2166ac");
        assert_eq!(diverging(1.0, 1.0), "#b2182b");
        assert_eq!(diverging(3.0, 0.0), "#ffffff");
    }

    #[test]
    fn svgs_are_well_formed() {
        let svg = heatmap_svg("t<", &["r".into()], &["c".into()], &[0.5]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("t&lt;"));
        assert!(svg.contains("max 0.500000"));
        let plot = line_plot_svg("p", &["0".into(), "1".into()], &[("s".into(), vec![1.0, 2.0])], Some(("base".into(), 1.5)));
        assert!(plot.contains("polyline"));
        assert!(plot.contains("base"));
        let bars = bar_chart_svg("b", &["BOS".into(), "C1".into()], &[0.25, 0.75]);
        assert_eq!(bars.matches("<rect").count(), 2);
        let dots = scatter_svg("s", "x", "y", &[(0.0, 1.0), (1.0, f64::NAN), (0.5, 2.0)]);
        assert_eq!(dots.matches("<circle").count(), 2);
        assert!(scatter_svg("s", "x", "y", &[]).ends_with("</svg>\n"));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_text(&p, "a").unwrap();
        write_text(&p, "b").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "b");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
