use std::collections::BTreeMap;
use std::fmt::Write;

use super::bench::SweepRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 120.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// F1 against mean tokens per query, one line per width, points ordered by
/// depth. Returns a standalone SVG document.
pub fn render_f1_tokens_svg(rows: &[SweepRow]) -> String {
    let mut series: BTreeMap<u32, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        series.entry(r.width).or_default().push(r);
    }
    for pts in series.values_mut() {
        pts.sort_by_key(|r| r.depth);
    }
    let (x0, x1) = axis_range(rows.iter().map(|r| r.tokens));
    let (y0, y1) = axis_range(rows.iter().map(|r| r.f1));
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (x, y) = (sx(xv), sy(yv));
        let base = MARGIN_T + ph;
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{base}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, base + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#, base + 20.0);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{MARGIN_L}" y2="{y:.1}" stroke="black"/>"#, MARGIN_L - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, MARGIN_L - 8.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">tokens per query</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">F1</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0
    );
    for (i, (w, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", sx(r.tokens), sy(r.f1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for r in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"><title>W={} D={}</title></circle>"#,
                sx(r.tokens),
                sy(r.f1),
                r.width,
                r.depth
            );
        }
        let ly = MARGIN_T + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">W={w}</text>"#, lx + 26.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}
