//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 24.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>
<line x1="{PAD_L}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>
<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{:.1}" stroke="black"/>
"#,
        W / 2.0,
        escape(title),
        PAD_L + (W - PAD_L - PAD_R) / 2.0,
        H - 8.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        H - PAD_B,
        W - PAD_R,
        H - PAD_B,
        H - PAD_B,
    );
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        (lo - 0.5, lo + 0.5)
    } else {
        (lo, hi)
    }
}

fn y_ticks(out: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - PAD_B - (H - PAD_T - PAD_B) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD_L - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Polylines over shared axes.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let pts = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x0, x1) = span(x0, x1);
    let (y0, y1) = span(y0.min(0.0), y1);
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    y_ticks(&mut out, y0, y1);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{}</text>"#,
            sx(v),
            H - PAD_B + 16.0,
            tick(v)
        );
    }
    for (k, (name, p)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = PAD_T + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{colour}" text-anchor="end">{}</text>"#,
            W - PAD_R - 4.0,
            ly + 10.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars, one per label.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars
        .iter()
        .map(|b| b.1)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let (y0, y1) = span(0.0, top);
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    y_ticks(&mut out, y0, y1);
    let slot = (W - PAD_L - PAD_R) / bars.len().max(1) as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let h = if v.is_finite() {
            (v - y0) / (y1 - y0) * (H - PAD_T - PAD_B)
        } else {
            0.0
        };
        let x = PAD_L + slot * k as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - PAD_B - h,
            slot * 0.7,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - PAD_B + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let s = line_chart(
            "loss",
            "step",
            "total",
            &[("a<b".into(), vec![(1.0, 3.0), (2.0, 1.0)])],
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<polyline").count(), 1);
    }

    #[test]
    fn empty_and_flat_inputs_do_not_divide_by_zero() {
        assert!(!line_chart("t", "x", "y", &[]).contains("NaN"));
        assert!(!line_chart("t", "x", "y", &[("s".into(), vec![(1.0, 1.0)])]).contains("NaN"));
        assert!(!bar_chart("t", "y", &[("a".into(), 0.0)]).contains("NaN"));
    }

    #[test]
    fn bar_chart_has_one_rect_per_bar() {
        let s = bar_chart(
            "flops",
            "flops",
            &[("1".into(), 1.0), ("2".into(), 2.0), ("4".into(), 3.5)],
        );
        assert_eq!(s.matches("<rect").count(), 4);
    }
}
