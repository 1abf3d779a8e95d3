use std::fmt::Write as _;

use super::{ExperimentKind, ExperimentSummary};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Median line with a 10-90% band over the grid. Concentration plots add a
/// dashed line of slope `-reference_gap` through the first median; the
/// information-gain plot adds a horizontal line at `log 2`.
pub fn render_svg(summary: &ExperimentSummary, reference_gap: Option<f64>) -> String {
    let rows: Vec<_> = summary.rows.iter().filter(|r| r.n > 0).collect();
    let kind = summary.kind;
    let (mut ylo, mut yhi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.q10), hi.max(r.q90)));
    if kind == ExperimentKind::Infogain {
        ylo = ylo.min(0.0);
        yhi = yhi.max(std::f64::consts::LN_2);
    }
    let (xlo, xhi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.grid_point), hi.max(r.grid_point)));
    let reference = match (kind, reference_gap, rows.first()) {
        (ExperimentKind::Concentration, Some(g), Some(first)) => {
            let y_end = first.median - g * (xhi - first.grid_point);
            ylo = ylo.min(y_end);
            Some((first.grid_point, first.median, xhi, y_end))
        }
        _ => None,
    };
    let (x0, x1) = padded(xlo, xhi);
    let (y0, y1) = padded(ylo, yhi);
    let f = Frame { x0, x1, y0, y1 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle">{}: {} by {}</text>"#,
        W / 2.0,
        kind.name(),
        summary.metric,
        kind.grid_label()
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1}" fill="none" stroke="black"/>"#,
        LEFT,
        TOP,
        LEFT,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(xv),
            H - BOTTOM + 18.0,
            tick(xv)
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, kind.grid_label());

    if !rows.is_empty() {
        let mut band = String::new();
        for r in &rows {
            let _ = write!(band, "{}{:.2},{:.2} ", if band.is_empty() { "M" } else { "L" }, f.px(r.grid_point), f.py(r.q90));
        }
        for r in rows.iter().rev() {
            let _ = write!(band, "L{:.2},{:.2} ", f.px(r.grid_point), f.py(r.q10));
        }
        let _ = writeln!(s, r##"<path class="band" d="{}Z" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, band);
        let mut line = String::new();
        for r in &rows {
            let _ = write!(line, "{}{:.2},{:.2} ", if line.is_empty() { "M" } else { "L" }, f.px(r.grid_point), f.py(r.median));
        }
        let _ = writeln!(s, r##"<path class="median" d="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##, line.trim_end());
        for r in &rows {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#08519c"/>"##, f.px(r.grid_point), f.py(r.median));
        }
    }
    if let Some((xa, ya, xb, yb)) = reference {
        let _ = writeln!(
            s,
            r#"<line class="reference" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6,4"/>"#,
            f.px(xa),
            f.py(ya),
            f.px(xb),
            f.py(yb)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">slope -{}</text>"#,
            W - RIGHT - 4.0,
            TOP + 14.0,
            tick(reference_gap.unwrap_or(0.0))
        );
    }
    if kind == ExperimentKind::Infogain {
        let y = f.py(std::f64::consts::LN_2);
        let _ = writeln!(
            s,
            r##"<line class="reference" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#a50f15" stroke-dasharray="6,4" data-value="0.6931"/>"##,
            LEFT,
            W - RIGHT
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">log 2</text>"#, W - RIGHT - 4.0, y - 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn tick(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.abs() >= 1e4 || x.abs() < 1e-2 {
        format!("{x:.2e}")
    } else {
        format!("{x:.3}")
    }
}
