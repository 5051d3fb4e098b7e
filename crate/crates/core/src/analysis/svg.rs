//! Minimal SVG output: line charts of score series and a correlation heatmap.

use super::{CorrelationMatrix, ScoreSeries};
use std::fmt::Write;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per series over the epoch axis; y is fixed to `[0, 1]`
/// unless some value falls outside.
pub fn line_chart(title: &str, series: &[ScoreSeries]) -> String {
    let (w, h, m) = (640.0, 360.0, 50.0);
    let epochs: Vec<usize> = series.iter().flat_map(|s| s.epochs.iter().copied()).collect();
    let (e0, e1) = (
        epochs.iter().copied().min().unwrap_or(0) as f64,
        epochs.iter().copied().max().unwrap_or(1) as f64,
    );
    let vals = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut y0, mut y1) = (0.0f64, 1.0f64);
    for v in vals {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    let sx = |e: f64| m + (e - e0) / (e1 - e0).max(1.0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0).max(1e-9) * (h - 2.0 * m);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(out, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(out, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, m - 4.0, sy(v) + 4.0);
    }
    let mut ticks: Vec<usize> = epochs.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for e in ticks {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{e}</text>"#, sx(e as f64), h - m + 14.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, w / 2.0, h - 10.0);
    for (i, s) in series.iter().enumerate() {
        let colour = if s.label == "test" { "#000000" } else { PALETTE[i % PALETTE.len()] };
        let pts: Vec<String> = s
            .epochs
            .iter()
            .zip(&s.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.1},{:.1}", sx(e as f64), sy(v)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - m + 4.0,
            m + 14.0 * i as f64,
            esc(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Pearson above the diagonal, Spearman below, excluded cells grey.
pub fn heatmap(title: &str, m: &CorrelationMatrix) -> String {
    let n = m.labels.len();
    let cell = 48.0;
    let left = 70.0;
    let top = 60.0;
    let size = left + cell * n as f64 + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="11">"#,
        top + cell * n as f64 + 30.0
    );
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, size / 2.0, esc(title));
    for (i, l) in m.labels.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + cell * (i as f64 + 0.6), esc(l));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + cell * (i as f64 + 0.5), top - 6.0, esc(l));
    }
    for i in 0..n {
        for j in 0..n {
            let v = if j >= i { m.pearson[i][j] } else { m.spearman[i][j] };
            let (fill, text) = match v {
                Some(x) => {
                    // red for positive, blue for negative
                    let a = x.abs().min(1.0);
                    let c = (255.0 * (1.0 - a)) as u8;
                    (if x >= 0.0 { format!("rgb(255,{c},{c})") } else { format!("rgb({c},{c},255)") }, format!("{x:.2}"))
                }
                None => ("#cccccc".to_string(), "n/a".to_string()),
            };
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let _ = writeln!(out, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>"#);
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{text}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0);
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">upper: Pearson, lower: Spearman</text>"#,
        size / 2.0,
        top + cell * n as f64 + 20.0
    );
    out.push_str("</svg>\n");
    out
}
