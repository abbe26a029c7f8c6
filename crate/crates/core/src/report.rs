//! Report artifacts: SVG line plots with error bands and top-k tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::csv_io;
use crate::error::{Error, Result};
use crate::eval::SimilarityCurve;
use crate::goldstd::GoldScores;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Evenly spaced tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Line plot of mean values with a shaded band of +-1 standard error, one
/// series per curve.
pub fn curves_svg(title: &str, x_label: &str, y_label: &str, curves: &[SimilarityCurve]) -> String {
    let pts: Vec<(f64, f64, f64)> = curves
        .iter()
        .flat_map(|c| c.points.iter())
        .filter(|p| p.mean.is_finite())
        .map(|p| (p.x as f64, p.mean, if p.se.is_finite() { p.se } else { 0.0 }))
        .collect();
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1 - p.2), b.max(p.1 + p.2)));
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for v in ticks(x0, x1, 5) {
        let x = sx(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            fmt_tick(v)
        );
    }
    for v in ticks(y0, y1, 5) {
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (ci, c) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let p: Vec<_> = c.points.iter().filter(|p| p.mean.is_finite()).collect();
        if p.is_empty() {
            continue;
        }
        let se = |q: &&crate::eval::CurvePoint| if q.se.is_finite() { q.se } else { 0.0 };
        let mut band = String::new();
        for q in &p {
            let _ = write!(band, "{:.2},{:.2} ", sx(q.x as f64), sy(q.mean + se(q)));
        }
        for q in p.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(q.x as f64), sy(q.mean - se(q)));
        }
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = p.iter().map(|q| format!("{:.2},{:.2}", sx(q.x as f64), sy(q.mean))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        if p.len() == 1 {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(p[0].x as f64),
                sy(p[0].mean)
            );
        }
        let ly = TOP + 10.0 + 18.0 * ci as f64;
        let lx = W - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&c.method)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKRow {
    pub test_id: u64,
    /// `helpful` (leaving it out raises the test loss the most) or `harmful`.
    pub kind: &'static str,
    pub rank: usize,
    pub train_id: u64,
    pub score: f64,
}

/// The `k` most helpful and most harmful training instances per test
/// instance at checkpoint `t`, by gold score. Ties keep subset order.
pub fn top_k(gold: &GoldScores, t: usize, k: usize) -> Vec<TopKRow> {
    let mut rows = Vec::new();
    for (j, &test_id) in gold.test_ids.iter().enumerate() {
        let v = gold.vector(t, j);
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
        for (rank, &i) in order.iter().take(k).enumerate() {
            rows.push(TopKRow {
                test_id,
                kind: "helpful",
                rank: rank + 1,
                train_id: gold.train_ids[i],
                score: v[i],
            });
        }
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        for (rank, &i) in order.iter().take(k).enumerate() {
            rows.push(TopKRow {
                test_id,
                kind: "harmful",
                rank: rank + 1,
                train_id: gold.train_ids[i],
                score: v[i],
            });
        }
    }
    rows
}

pub fn write_top_k(path: &Path, rows: &[TopKRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["test_id", "kind", "rank", "loo_id", "score"])
        .map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([
            r.test_id.to_string(),
            r.kind.to_string(),
            r.rank.to_string(),
            r.train_id.to_string(),
            r.score.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
