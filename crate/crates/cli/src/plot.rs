//! Teacher/student AP curves as standalone SVG files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use drawdet::selfsup::CurveRecord;
use drawdet::{Error, Klass, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One curve log with its legend label.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub records: Vec<CurveRecord>,
}

fn ap(r: &CurveRecord, klass: Klass, teacher: bool) -> f64 {
    match (klass, teacher) {
        (Klass::Face, true) => r.teacher_face_ap,
        (Klass::Face, false) => r.student_face_ap,
        (Klass::Body, true) => r.teacher_body_ap,
        (Klass::Body, false) => r.student_body_ap,
    }
}

/// AP in [0, 1] against iteration; teacher solid, student dashed, one color
/// per series.
pub fn curve_svg(series: &[Series], klass: Klass) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.records.is_empty()) {
        return Err(Error::Data("cannot plot an empty curve log".into()));
    }
    let its = series.iter().flat_map(|s| s.records.iter().map(|r| r.iteration as f64));
    let (lo, hi) = its.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |it: f64| MARGIN + (it - lo) / span * (WIDTH - 2.0 * MARGIN);
    let y = |v: f64| HEIGHT - MARGIN - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{klass} AP@0.5</text>"#, WIDTH / 2.0);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y(v) + 3.0);
    }
    for it in [lo, hi] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{it}</text>"#, x(it), y0 + 14.0);
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for teacher in [true, false] {
            let pts: Vec<String> =
                ser.records.iter().map(|r| format!("{:.2},{:.2}", x(r.iteration as f64), y(ap(r, klass, teacher)))).collect();
            let dash = if teacher { "" } else { r#" stroke-dasharray="5,3""# };
            let who = if teacher { "teacher" } else { "student" };
            let _ = writeln!(
                s,
                r#"<polyline class="{who}" data-label="{}" points="{}" stroke="{color}" fill="none"{dash}/>"#,
                ser.label,
                pts.join(" ")
            );
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="10" fill="{color}">{} (teacher solid, student dashed)</text>"#, x0 + 8.0, ser.label);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `face.svg` and `body.svg` into `out_dir`, overlaying all series.
pub fn plot_curves(series: &[Series], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
    Klass::ALL
        .iter()
        .map(|&klass| {
            let path = out_dir.join(format!("{klass}.svg"));
            fs::write(&path, curve_svg(series, klass)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}
