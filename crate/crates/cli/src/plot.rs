//! Minimal SVG charts: lines, scatter points and bars on linear axes.

use std::fmt::Write;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>, idx: usize) -> Self {
        Self { name: name.into(), points, color: PALETTE[idx % PALETTE.len()].to_string() }
    }
}

#[derive(Clone, Copy)]
enum Mark {
    Line,
    Dot,
    Bar,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(layers: &[(&Series, Mark)], zero_y: bool) -> Frame {
        let pts = layers.iter().flat_map(|(s, _)| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if zero_y {
            y0 = y0.min(0.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.04 * (y1 - y0);
        Frame { x0, x1, y0: if zero_y && y0 == 0.0 { 0.0 } else { y0 - pad }, y1: y1 + pad }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn render(title: &str, x_label: &str, y_label: &str, layers: &[(&Series, Mark)], fixed: Option<[f64; 4]>) -> String {
    let f = match fixed {
        Some([x0, x1, y0, y1]) => Frame { x0, x1, y0, y1 },
        None => Frame::fit(layers, layers.iter().any(|(_, m)| matches!(m, Mark::Bar))),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
    let (bx, by) = (f.px(f.x0), f.py(f.y0));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for k in 0..=5 {
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 5.0;
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 5.0;
        let (x, y) = (f.px(fx), f.py(fy));
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{by:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, by + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, by + 16.0, tick_label(fx));
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{bx:.1}" y2="{y:.1}" stroke="black"/>"#, bx - 4.0);
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, bx - 6.0, y + 4.0, tick_label(fy));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
    for (i, &(sr, mark)) in layers.iter().enumerate() {
        let pts: Vec<(f64, f64)> = sr.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        match mark {
            Mark::Line => {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    sr.color,
                    path.join(" ")
                );
            }
            Mark::Dot => {
                for &(x, y) in &pts {
                    let _ =
                        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, f.px(x), f.py(y), sr.color);
                }
            }
            Mark::Bar => {
                let n = layers.iter().map(|(s, _)| s.points.len()).sum::<usize>().max(1) as f64;
                let bw = ((W - LEFT - RIGHT) / n * 0.8).max(1.0);
                for &(x, y) in &pts {
                    let (top, base) = (f.py(y.max(f.y0)), f.py(f.y0.max(0.0)));
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#,
                        f.px(x) - bw / 2.0,
                        top.min(base),
                        (base - top).abs(),
                        sr.color
                    );
                }
            }
        }
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let lx = W - RIGHT + 10.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{}"/>"#, ly - 9.0, sr.color);
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}">{}</text>"#, lx + 14.0, escape(&sr.name));
    }
    s.push_str("</svg>\n");
    s
}

fn uniform(series: &[Series], mark: Mark) -> Vec<(&Series, Mark)> {
    series.iter().map(|s| (s, mark)).collect()
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    render(title, x_label, y_label, &uniform(series, Mark::Line), None)
}

pub fn scatter_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    render(title, x_label, y_label, &uniform(series, Mark::Dot), None)
}

pub fn bar_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    render(title, x_label, y_label, &uniform(series, Mark::Bar), None)
}

/// Scatter groups with a connecting line drawn through `front`.
pub fn frontier_chart(title: &str, x_label: &str, y_label: &str, groups: &[Series], front: &Series) -> String {
    let mut layers = uniform(groups, Mark::Dot);
    layers.push((front, Mark::Line));
    render(title, x_label, y_label, &layers, None)
}

/// ROC curve on the unit square with the chance diagonal.
pub fn roc_chart(title: &str, fpr: &[f64], tpr: &[f64]) -> String {
    let curve = Series::new("ROC", fpr.iter().copied().zip(tpr.iter().copied()).collect(), 0);
    let chance = Series { name: "chance".into(), points: vec![(0.0, 0.0), (1.0, 1.0)], color: "#999999".into() };
    render(
        title,
        "false positive rate",
        "true positive rate",
        &[(&curve, Mark::Line), (&chance, Mark::Line)],
        Some([0.0, 1.0, 0.0, 1.0]),
    )
}
