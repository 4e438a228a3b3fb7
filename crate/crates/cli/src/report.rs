use std::fmt::Write;

use layerprobe::metrics::MetricsReport;

const W: f64 = 480.0;
const H: f64 = 300.0;
const MARGIN: f64 = 48.0;

/// Mean P@1 by layer as a bare SVG line chart. `None` without points.
pub fn layer_curve_svg(report: &MetricsReport) -> Option<String> {
    let points: Vec<(usize, f64)> = report.layers.iter().filter_map(|&l| report.metrics.p_at(l, 1).map(|p| (l, p))).collect();
    let (first, last) = (points.first()?.0, points.last()?.0);
    let span = (last - first).max(1) as f64;
    let top = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let x = |l: usize| MARGIN + (l - first) as f64 / span * (W - 2.0 * MARGIN);
    let y = |p: f64| H - MARGIN - p / top * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let line: Vec<String> = points.iter().map(|&(l, p)| format!("{:.2},{:.2}", x(l), y(p))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));
    for &(l, p) in &points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, x(l), y(p));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{l}</text>"#, x(l), H - MARGIN + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{top:.3}</text>"#, MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, MARGIN - 4.0, H - MARGIN + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{} mean P@1 by layer</text>"#, W / 2.0, report.probe_set);
    s.push_str("</svg>\n");
    Some(s)
}
