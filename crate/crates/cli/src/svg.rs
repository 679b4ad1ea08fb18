//! Hand-written SVG figures: line charts, heatmaps and grouped bars.
//!
//! Every figure carries a title, axis labels, a legend and the tool version.
//! Heatmaps map values linearly onto a fixed five-stop ramp running from
//! dark purple (minimum) through blue and green to yellow (maximum):
//! `#440154`, `#3b528b`, `#21918c`, `#5ec962`, `#fde725`.

use std::fmt::Write as _;

use oversmooth::Grid;

use crate::report::VERSION;

const RAMP: [(u8, u8, u8); 5] = [
    (0x44, 0x01, 0x54),
    (0x3b, 0x52, 0x8b),
    (0x21, 0x91, 0x8c),
    (0x5e, 0xc9, 0x62),
    (0xfd, 0xe7, 0x25),
];

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Ramp color for `t` in `[0, 1]`.
pub fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let lerp = |a: u8, b: u8| (f64::from(a) + f * (f64::from(b) - f64::from(a))).round() as u8;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn open(out: &mut String, title: &str, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn close(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r##"<text class="version" x="{}" y="{}" text-anchor="end" font-size="10" fill="#555">oversmooth {VERSION}</text>
</svg>"##,
        width - 6.0,
        height - 6.0
    );
}

fn axes(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black" fill="none">
<line x1="{x0}" y1="{yb}" x2="{xr}" y2="{yb}"/>
<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{yb}"/>
</g>
<text class="x-label" x="{xm}" y="{xl}" text-anchor="middle">{}</text>
<text class="y-label" x="{yl}" y="{ym}" text-anchor="middle" transform="rotate(-90 {yl} {ym})">{}</text>"#,
        escape(x_label),
        escape(y_label),
        yb = y0 + h,
        xr = x0 + w,
        xm = x0 + w / 2.0,
        xl = y0 + h + 40.0,
        yl = x0 - 50.0,
        ym = y0 + h / 2.0,
    );
}

fn tick(out: &mut String, x: f64, y: f64, anchor: &str, v: f64) {
    let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{}</text>"#, num(v));
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(String, String)]) {
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, (name, color)) in entries.iter().enumerate() {
        let yy = y + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            yy - 10.0,
            x + 18.0,
            yy,
            escape(name)
        );
    }
    let _ = writeln!(out, "</g>");
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Polylines over a shared pair of axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    open(&mut out, title, W, H);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    axes(&mut out, LEFT, TOP, pw, ph, x_label, y_label);
    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (ylo, yhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    tick(&mut out, LEFT, TOP + ph + 15.0, "start", xlo);
    tick(&mut out, LEFT + pw, TOP + ph + 15.0, "end", xhi);
    tick(&mut out, LEFT - 4.0, TOP + ph, "end", ylo);
    tick(&mut out, LEFT - 4.0, TOP + 10.0, "end", yhi);
    let mut entries = Vec::new();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let px = LEFT + (x - xlo) / (xhi - xlo) * pw;
                let py = TOP + ph - (y - ylo) / (yhi - ylo) * ph;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        entries.push((name.clone(), color.to_string()));
    }
    legend(&mut out, LEFT + pw + 20.0, TOP + 20.0, &entries);
    close(&mut out, W, H);
    out
}

/// One heatmap panel: rows run down the y axis, columns along x.
pub struct Panel<'a> {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub grid: &'a Grid,
}

/// Heatmap panels side by side, each with its own color scale legend.
pub fn heatmaps(title: &str, panels: &[Panel]) -> String {
    let pw = 360.0;
    let ph = 300.0;
    let slot = LEFT + pw + 110.0;
    let width = slot * panels.len().max(1) as f64;
    let height = TOP + 30.0 + ph + BOTTOM;
    let mut out = String::new();
    open(&mut out, title, width, height);
    for (k, p) in panels.iter().enumerate() {
        let x0 = k as f64 * slot + LEFT;
        let y0 = TOP + 30.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + pw / 2.0,
            y0 - 8.0,
            escape(&p.title)
        );
        let (rows, cols) = p.grid.shape();
        let (lo, hi) = bounds(p.grid.data().iter().copied());
        let (cw, chh) = (pw / cols.max(1) as f64, ph / rows.max(1) as f64);
        let _ = writeln!(out, r#"<g class="cells" shape-rendering="crispEdges">"#);
        for r in 0..rows {
            for c in 0..cols {
                let t = (p.grid.get(r, c) - lo) / (hi - lo);
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x0 + c as f64 * cw,
                    y0 + r as f64 * chh,
                    cw + 0.01,
                    chh + 0.01,
                    ramp(t)
                );
            }
        }
        let _ = writeln!(out, "</g>");
        axes(&mut out, x0, y0, pw, ph, &p.x_label, &p.y_label);
        tick(&mut out, x0, y0 + ph + 15.0, "start", 0.0);
        tick(&mut out, x0 + pw, y0 + ph + 15.0, "end", cols as f64);
        tick(&mut out, x0 - 4.0, y0 + 10.0, "end", 0.0);
        tick(&mut out, x0 - 4.0, y0 + ph, "end", rows as f64);
        // color scale legend
        let lx = x0 + pw + 20.0;
        let _ = writeln!(out, r#"<g class="legend">"#);
        let steps = 20;
        for s in 0..steps {
            let t = 1.0 - s as f64 / (steps - 1) as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{lx}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
                y0 + s as f64 * ph / steps as f64,
                ph / steps as f64 + 0.01,
                ramp(t)
            );
        }
        tick(&mut out, lx + 18.0, y0 + 10.0, "start", hi);
        tick(&mut out, lx + 18.0, y0 + ph, "start", lo);
        let _ = writeln!(out, "</g>");
    }
    close(&mut out, width, height);
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    open(&mut out, title, W, H);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    axes(&mut out, LEFT, TOP, pw, ph, "strategy", y_label);
    let (_, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()).chain([0.0]));
    let hi = if hi > 0.0 { hi } else { 1.0 };
    tick(&mut out, LEFT - 4.0, TOP + ph, "end", 0.0);
    tick(&mut out, LEFT - 4.0, TOP + 10.0, "end", hi);
    let group = pw / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (i, cat) in categories.iter().enumerate() {
        let gx = LEFT + i as f64 * group;
        for (j, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(i).copied().filter(|v| v.is_finite()).unwrap_or(0.0).max(0.0);
            let h = v / hi * ph;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + group * 0.1 + j as f64 * bar,
                TOP + ph - h,
                bar,
                h,
                PALETTE[j % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            gx + group / 2.0,
            TOP + ph + 15.0,
            escape(cat)
        );
    }
    let entries: Vec<(String, String)> = series
        .iter()
        .enumerate()
        .map(|(j, s)| (s.0.clone(), PALETTE[j % PALETTE.len()].to_string()))
        .collect();
    legend(&mut out, LEFT + pw + 20.0, TOP + 20.0, &entries);
    close(&mut out, W, H);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(0.5), "#21918c");
        assert_eq!(ramp(f64::NAN), "#440154");
    }

    #[test]
    fn text_is_escaped() {
        let s = line_chart("a<b & c", "x", "y", &[("s\"1".into(), vec![(0.0, 0.0), (1.0, 1.0)])]);
        assert!(s.contains("a&lt;b &amp; c"));
        assert!(s.contains("s&quot;1"));
        assert!(s.contains(&format!("oversmooth {VERSION}")));
    }

    #[test]
    fn constant_heatmap_does_not_divide_by_zero() {
        let g = Grid::zeros(2, 3);
        let s = heatmaps(
            "t",
            &[Panel {
                title: "p".into(),
                x_label: "x".into(),
                y_label: "y".into(),
                grid: &g,
            }],
        );
        assert!(!s.contains("NaN"));
    }
}
