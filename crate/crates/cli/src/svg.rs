//! Minimal hand-written SVG line plots and heatmaps.
//!
//! Output is a pure function of the data, so plots are byte-stable across
//! runs. Every plotted series also carries its raw data in `data-x`/`data-y`
//! attributes for structural comparison in tests.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(x: f64) -> String {
    format!("{x:.2}")
}

fn tick(x: f64, log: bool) -> String {
    if log {
        format!("1e{}", x.round() as i64)
    } else {
        format!("{x:.3}")
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

impl LinePlot {
    pub fn render(&self) -> String {
        let tx = |v: f64| if self.log_x { v.log10() } else { v };
        let ty = |v: f64| if self.log_y { v.log10() } else { v };
        let usable = |&(x, y): &(f64, f64)| {
            let (a, b) = (tx(x), ty(y));
            a.is_finite() && b.is_finite()
        };
        let pts = || self.series.iter().flat_map(|s| s.points.iter().copied().filter(usable));
        let (x0, x1) = range(pts().map(|p| tx(p.0)));
        let (y0, y1) = range(pts().map(|p| ty(p.1)));
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |v: f64| LEFT + (tx(v) - x0) / (x1 - x0) * pw;
        let sy = |v: f64| TOP + ph - (ty(v) - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        header(&mut out, &self.title);
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let px = LEFT + f * pw;
            let py = TOP + ph - f * ph;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                num(px),
                num(TOP + ph + 16.0),
                tick(xv, self.log_x)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                num(LEFT - 6.0),
                num(py + 4.0),
                tick(yv, self.log_y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(H - 12.0),
            esc(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            num(TOP + ph / 2.0),
            num(TOP + ph / 2.0),
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let kept: Vec<(f64, f64)> = s.points.iter().copied().filter(usable).collect();
            let path: Vec<String> = kept.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
            let data_x: Vec<String> = kept.iter().map(|p| format!("{:e}", p.0)).collect();
            let data_y: Vec<String> = kept.iter().map(|p| format!("{:e}", p.1)).collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" data-name="{}" data-x="{}" data-y="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                esc(&s.name),
                data_x.join(" "),
                data_y.join(" "),
                path.join(" ")
            );
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = W - RIGHT + 10.0;
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/>"#,
                num(lx),
                num(ly),
                num(lx + 20.0),
                num(ly)
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, num(lx + 26.0), num(ly + 4.0), esc(&s.name));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Row-major grid `values[i][j]` over `xs[j]` (columns) and `ys[i]` (rows);
/// `None` cells are drawn grey.
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Diverging blue-white-red map of `v ∈ [−1, 1]`.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v < 0.0 {
        let t = -v;
        (255.0 * (1.0 - t), 255.0 * (1.0 - 0.6 * t), 255.0)
    } else {
        (255.0, 255.0 * (1.0 - 0.6 * v), 255.0 * (1.0 - v))
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

impl Heatmap {
    pub fn render(&self) -> String {
        let scale = self.values.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let cw = pw / self.xs.len().max(1) as f64;
        let ch = ph / self.ys.len().max(1) as f64;
        let mut out = String::new();
        header(&mut out, &self.title);
        for (i, row) in self.values.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let fill = match cell {
                    // signed square root keeps small values visible
                    Some(v) => diverging(v.signum() * (v.abs() / scale).sqrt()),
                    None => "#999999".to_string(),
                };
                let data = cell.map_or_else(|| "nan".to_string(), |v| format!("{v:e}"));
                let _ = writeln!(
                    out,
                    r#"<rect class="cell" data-i="{i}" data-j="{j}" data-v="{data}" x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"#,
                    num(LEFT + j as f64 * cw),
                    num(TOP + ph - (i + 1) as f64 * ch),
                    num(cw + 0.05),
                    num(ch + 0.05)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let corner = |v: &[f64], last: bool| -> f64 {
            if last {
                v.last().copied().unwrap_or(1.0)
            } else {
                v.first().copied().unwrap_or(0.0)
            }
        };
        let _ = writeln!(
            out,
            r#"<text x="{LEFT}" y="{}" text-anchor="start">{:.3}</text>"#,
            num(TOP + ph + 16.0),
            corner(&self.xs, false)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            num(LEFT + pw),
            num(TOP + ph + 16.0),
            corner(&self.xs, true)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            num(LEFT - 6.0),
            num(TOP + ph),
            corner(&self.ys, false)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            num(LEFT - 6.0),
            num(TOP + 10.0),
            corner(&self.ys, true)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(H - 12.0),
            esc(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            num(TOP + ph / 2.0),
            num(TOP + ph / 2.0),
            esc(&self.y_label)
        );
        let lx = W - RIGHT + 20.0;
        for (k, v) in [1.0f64, 0.5, 0.0, -0.5, -1.0].into_iter().enumerate() {
            let y = TOP + 20.0 + 24.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="18" height="18" fill="{}"/>"#,
                num(lx),
                num(y),
                diverging(v.signum() * v.abs().sqrt())
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}">{:.3e}</text>"#, num(lx + 24.0), num(y + 13.0), v * scale);
        }
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{}" width="18" height="18" fill="#999999"/>"##,
            num(lx),
            num(TOP + 140.0)
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">undefined</text>"#, num(lx + 24.0), num(TOP + 153.0));
        out.push_str("</svg>\n");
        out
    }
}
