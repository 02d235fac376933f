//! Static SVG line charts of a metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::Failure;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// Column names and rows of a numeric CSV whose first column is `step`.
#[derive(Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_table(text: &str) -> Result<Table, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    if columns.first().map(String::as_str) != Some("step") || columns.len() < 2 {
        return Err(format!("header must start with `step` and name at least one metric, got `{header}`"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(format!("row {} has {} fields, expected {}", n + 2, fields.len(), columns.len()));
        }
        let row = fields
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| format!("row {}: `{f}` is not a number", n + 2)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    Ok(Table { columns, rows })
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Line chart of `(x, y)` points; non-finite values break the line.
pub fn svg_chart(title: &str, points: &[(f64, f64)]) -> String {
    let finite: Vec<&(f64, f64)> = points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, hi + 0.5),
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, WIDTH / 2.0);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, label(y1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, bottom, label(y0));
    let _ = writeln!(s, r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, label(x0));
    let _ = writeln!(s, r#"<text x="{right}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, label(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, WIDTH / 2.0, bottom + 32.0);

    let mut segment: Vec<String> = Vec::new();
    let flush = |segment: &mut Vec<String>, s: &mut String| {
        match segment.len() {
            0 => {}
            1 => {
                let (x, y) = segment[0].split_once(',').expect("formatted point");
                let _ = writeln!(s, r##"<circle cx="{x}" cy="{y}" r="2.5" fill="#1f77b4"/>"##);
            }
            _ => {
                let _ = writeln!(
                    s,
                    r##"<polyline points="{}" stroke="#1f77b4" stroke-width="1.5" fill="none"/>"##,
                    segment.join(" ")
                );
            }
        }
        segment.clear();
    };
    for &(x, y) in points {
        if x.is_finite() && y.is_finite() {
            segment.push(format!("{:.2},{:.2}", sx(x), sy(y)));
        } else {
            flush(&mut segment, &mut s);
        }
    }
    flush(&mut segment, &mut s);
    s.push_str("</svg>\n");
    s
}

/// Writes `<column>.svg` into `out` for every column after `step`.
pub fn plot_metrics(metrics: &Path, out: &Path) -> Result<(), Failure> {
    if !metrics.exists() {
        return Err(Failure::Usage(format!("metrics file {} not found", metrics.display())));
    }
    let text = fs::read_to_string(metrics).map_err(|e| Failure::Data(format!("{}: {e}", metrics.display())))?;
    let table = parse_table(&text).map_err(|e| Failure::Data(format!("{}: {e}", metrics.display())))?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", out.display())))?;
    for (k, name) in table.columns.iter().enumerate().skip(1) {
        let points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r[0], r[k])).collect();
        let file = out.join(format!("{name}.svg"));
        fs::write(&file, svg_chart(name, &points)).map_err(|e| Failure::Runtime(format!("writing {}: {e}", file.display())))?;
    }
    Ok(())
}
