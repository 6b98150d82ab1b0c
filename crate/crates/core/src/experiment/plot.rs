//! Minimal SVG line plots with min/max whiskers and mean markers.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<PlotPoint>,
    /// Drawn dashed; used for documented reference values.
    pub reference: bool,
}

const COLORS: [&str; 6] = ["#1f2937", "#c0392b", "#2471a3", "#1e8449", "#8e44ad", "#d35400"];
const W: f64 = 640.0;
const H: f64 = 420.0;
// Margins: left, right (legend), top, bottom.
const L: f64 = 64.0;
const R: f64 = 170.0;
const T: f64 = 40.0;
const B: f64 = 52.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-9 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.08 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Renders `series` as a standalone SVG document. `tag` is stored in the
/// document metadata (the manifest hash for sweep plots).
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], tag: &str) -> String {
    let all: Vec<&PlotPoint> = series.iter().flat_map(|s| &s.points).collect();
    let (x0, x1) = nice_range(
        all.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = nice_range(
        all.iter().map(|p| p.min).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<metadata>manifest_hash={}</metadata>", escape(tag));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (L + W - R) / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - L - R,
        H - T - B
    );
    for i in 0..=5 {
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let (gx, gy, tx) = (W - R, py(y), L - 6.0);
        let _ = writeln!(
            s,
            r##"<line x1="{L}" x2="{gx}" y1="{gy:.1}" y2="{gy:.1}" stroke="#ddd" stroke-dasharray="3,3"/><text x="{tx}" y="{:.1}" text-anchor="end">{y:.2}</text>"##,
            gy + 4.0
        );
    }
    let mut xs: Vec<f64> = all.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), H - B + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );

    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let dash = if ser.reference { r#" stroke-dasharray="6,4""# } else { "" };
        let mut pts = ser.points.clone();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}"{dash}/>"#, path.join(" "));
        for p in &pts {
            let (x, lo, hi) = (px(p.x), py(p.min), py(p.max));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" x2="{x:.1}" y1="{lo:.1}" y2="{hi:.1}" stroke="{c}"/><line x1="{:.1}" x2="{:.1}" y1="{lo:.1}" y2="{lo:.1}" stroke="{c}"/><line x1="{:.1}" x2="{:.1}" y1="{hi:.1}" y2="{hi:.1}" stroke="{c}"/>"#,
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0
            );
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="7" height="7" fill="white" stroke="{c}"/>"#,
                x - 3.5,
                py(p.mean) - 3.5
            );
        }
        let ly = T + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{c}"{dash}/><text x="{2}" y="{3}">{4}</text>"#,
            W - R + 10.0,
            W - R + 30.0,
            W - R + 36.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_whiskers_and_tag() {
        let ser = Series {
            label: "a<b".into(),
            points: vec![
                PlotPoint { x: 1.0, min: 1.0, mean: 2.0, max: 3.0 },
                PlotPoint { x: 2.0, min: 2.0, mean: 2.5, max: 3.0 },
            ],
            reference: false,
        };
        let svg = line_plot_svg("t", "x", "y", &[ser], "abc123");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("manifest_hash=abc123"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(line_plot_svg("empty", "x", "y", &[], "h").ends_with("</svg>\n"));
    }
}
