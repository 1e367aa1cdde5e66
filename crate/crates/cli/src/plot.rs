//! Static SVG figures. Output depends only on the inputs: fixed sizes,
//! fixed palette, coordinates rounded to two decimals, no timestamps.

use std::fmt::Write as _;

use crate::summary::{Family, PriorStat, SweepSummary};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const PANEL_W: f64 = 520.0;
const PANEL_H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Linear map from data to pixels inside one panel.
struct Frame {
    x0: f64,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let w = PANEL_W - LEFT - RIGHT;
        let span = (self.x_hi - self.x_lo).max(1e-12);
        self.x0 + LEFT + (x - self.x_lo) / span * w
    }

    fn py(&self, y: f64) -> f64 {
        let h = PANEL_H - TOP - BOTTOM;
        let span = (self.y_hi - self.y_lo).max(1e-12);
        TOP + (1.0 - (y - self.y_lo) / span) * h
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r) = (self.x0 + LEFT, self.x0 + PANEL_W - RIGHT);
        let (t, b) = (TOP, PANEL_H - BOTTOM);
        let _ = writeln!(
            out,
            r##"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            r - l,
            b - t
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            (l + r) / 2.0,
            esc(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            (l + r) / 2.0,
            PANEL_H - 12.0,
            esc(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            self.x0 + 16.0,
            (t + b) / 2.0,
            self.x0 + 16.0,
            (t + b) / 2.0,
            esc(y_label)
        );
        for i in 0..=4 {
            let y = self.y_lo + (self.y_hi - self.y_lo) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{:.3}</text>"#,
                l - 4.0,
                self.py(y) + 3.0,
                y
            );
        }
    }

    fn x_ticks(&self, out: &mut String) {
        for i in 0..=4 {
            let x = self.x_lo + (self.x_hi - self.x_lo) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                self.px(x),
                PANEL_H - BOTTOM + 14.0,
                x.round()
            );
        }
    }
}

fn open(out: &mut String, width: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

/// One panel per `(title, summary)`: mean line and stderr band per variant,
/// plus a dashed horizontal line at the baseline's final mean.
pub fn curves_svg(panels: &[(String, &SweepSummary)]) -> String {
    let mut out = String::new();
    open(&mut out, PANEL_W * panels.len().max(1) as f64);
    for (pi, (title, summary)) in panels.iter().enumerate() {
        let x_hi = summary
            .variants
            .iter()
            .flat_map(|v| v.curve.iter().map(|p| p.step))
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let frame = Frame {
            x0: PANEL_W * pi as f64,
            x_lo: 0.0,
            x_hi,
            y_lo: 0.0,
            y_hi: 1.0,
        };
        frame.axes(&mut out, title, "training step", summary.metric.token());
        frame.x_ticks(&mut out);
        for (vi, v) in summary.variants.iter().enumerate() {
            if v.curve.is_empty() {
                continue;
            }
            let c = color(vi);
            let upper = v.curve.iter().map(|p| (p.step as f64, p.stat.mean + p.stat.stderr));
            let lower = v
                .curve
                .iter()
                .rev()
                .map(|p| (p.step as f64, p.stat.mean - p.stat.stderr));
            let band: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y.clamp(0.0, 1.0))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
                band.join(" ")
            );
            let line: Vec<String> = v
                .curve
                .iter()
                .map(|p| {
                    format!(
                        "{:.2},{:.2}",
                        frame.px(p.step as f64),
                        frame.py(p.stat.mean.clamp(0.0, 1.0))
                    )
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                line.join(" ")
            );
            let ly = TOP + 14.0 + 16.0 * vi as f64;
            let lx = frame.x0 + PANEL_W - RIGHT - 110.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{c}" stroke-width="2"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#,
                lx + 22.0,
                esc(&v.label)
            );
        }
        if let Some((label, value)) = summary.baseline() {
            let y = frame.py(value.clamp(0.0, 1.0));
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#000" stroke-dasharray="6 4"/>"##,
                frame.px(0.0),
                frame.px(x_hi)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10">{} final {:.3}</text>"#,
                frame.px(0.0) + 4.0,
                y - 4.0,
                esc(label),
                value
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Bars of the final mean per head with ±sd whiskers and a dashed segment at
/// the initial value; `None` when no run learns `family`.
pub fn priors_svg(stats: &[PriorStat], family: Family) -> Option<String> {
    let rows: Vec<&PriorStat> = stats.iter().filter(|p| p.family == family).collect();
    if rows.is_empty() {
        return None;
    }
    let mut variants: Vec<&str> = Vec::new();
    let mut heads: Vec<(usize, usize)> = Vec::new();
    for p in &rows {
        if !variants.contains(&p.variant.as_str()) {
            variants.push(&p.variant);
        }
        if !heads.contains(&(p.layer, p.head)) {
            heads.push((p.layer, p.head));
        }
    }
    let y_hi = rows
        .iter()
        .map(|p| (p.stat.mean + p.stat.sd).max(p.init))
        .fold(0.0f64, f64::max)
        * 1.1;
    let width = (LEFT + RIGHT + heads.len() as f64 * (8.0 + 14.0 * variants.len() as f64)).max(PANEL_W);
    let frame = Frame {
        x0: 0.0,
        x_lo: 0.0,
        x_hi: heads.len() as f64,
        y_lo: 0.0,
        y_hi: if y_hi > 0.0 { y_hi } else { 1.0 },
    };
    let mut out = String::new();
    open(&mut out, width);
    let plot_w = width - LEFT - RIGHT;
    let group_w = plot_w / heads.len() as f64;
    let bar_w = (group_w - 8.0) / variants.len() as f64;
    frame.axes(
        &mut out,
        &format!("learned {}", family.token()),
        "layer / head",
        family.token(),
    );
    for p in &rows {
        let g = heads.iter().position(|&h| h == (p.layer, p.head)).unwrap_or(0);
        let vi = variants.iter().position(|&v| v == p.variant).unwrap_or(0);
        let x = LEFT + g as f64 * group_w + 4.0 + vi as f64 * bar_w;
        let (top, base) = (frame.py(p.stat.mean), frame.py(0.0));
        let c = color(vi);
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#,
            top.min(base),
            bar_w * 0.9,
            (base - top).abs()
        );
        let cx = x + bar_w * 0.45;
        let _ = writeln!(
            out,
            r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#000"/>"##,
            frame.py(p.stat.mean + p.stat.sd),
            frame.py((p.stat.mean - p.stat.sd).max(0.0))
        );
        let yi = frame.py(p.init);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{yi:.2}" x2="{:.2}" y2="{yi:.2}" stroke="#000" stroke-dasharray="3 2"/>"##,
            x + bar_w * 0.9
        );
    }
    for (g, (layer, head)) in heads.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">L{layer}H{head}</text>"#,
            LEFT + (g as f64 + 0.5) * group_w,
            PANEL_H - BOTTOM + 12.0
        );
    }
    for (vi, v) in variants.iter().enumerate() {
        let ly = TOP + 14.0 + 14.0 * vi as f64;
        let lx = width - RIGHT - 110.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#,
            ly - 9.0,
            color(vi)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#,
            lx + 14.0,
            esc(v)
        );
    }
    out.push_str("</svg>\n");
    Some(out)
}
