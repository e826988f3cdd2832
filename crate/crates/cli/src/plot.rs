//! Minimal SVG scatter and line plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn header(out: &mut String, title: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        PAD / 2.0 + 5.0,
        escape(title)
    );
    for (v, x, y, anchor) in [
        (f.x0, PAD, H - PAD + 15.0, "start"),
        (f.x1, W - PAD, H - PAD + 15.0, "end"),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.3}</text>"#
        );
    }
    for (v, y) in [(f.y0, H - PAD), (f.y1, PAD + 10.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            PAD - 3.0
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of point groups, one colour per group.
pub fn scatter(title: &str, groups: &[(&str, &[(f64, f64)])]) -> String {
    let f = Frame::fit(groups.iter().flat_map(|(_, g)| g.iter().copied()));
    let mut out = String::new();
    header(&mut out, title, &f);
    for (i, (name, pts)) in groups.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<g fill="{c}" fill-opacity="0.4">"#);
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, f.px(x), f.py(y));
        }
        let _ = writeln!(out, "</g>");
        legend(&mut out, i, name, c);
    }
    out.push_str("</svg>\n");
    out
}

/// Polylines, one per series.
pub fn lines(title: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, s)| s.iter().copied()));
    let mut out = String::new();
    header(&mut out, title, &f);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        legend(&mut out, i, name, c);
    }
    out.push_str("</svg>\n");
    out
}

fn legend(out: &mut String, i: usize, name: &str, color: &str) {
    let y = PAD + 14.0 + 14.0 * i as f64;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#,
        W - PAD - 5.0,
        escape(name)
    );
}
