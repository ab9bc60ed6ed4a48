//! Scatter plots of 2-D point sets as standalone SVG.
//!
//! The canvas size, palette and number formatting are fixed, so the same
//! input always renders to the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};

use dsd_core::Mat;

pub const MAX_SETS: usize = 5;
const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; MAX_SETS] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// One labelled point cloud; only the first two columns are drawn.
pub struct PointSet<'a> {
    pub label: &'a str,
    pub points: &'a Mat,
}

pub fn scatter_svg(sets: &[PointSet]) -> Result<String> {
    if sets.len() > MAX_SETS {
        bail!("at most {MAX_SETS} point sets per plot, got {}", sets.len());
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for s in sets {
        if s.points.rows() > 0 && s.points.cols() < 2 {
            bail!("point set {:?} needs two columns", s.label);
        }
        for i in 0..s.points.rows() {
            let p = s.points.row(i);
            if !(p[0].is_finite() && p[1].is_finite()) {
                bail!("point set {:?} has a non-finite point at row {i}", s.label);
            }
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    if lo[0] > hi[0] {
        (lo, hi) = ([-1.0; 2], [1.0; 2]);
    }
    // Equal scale on both axes, centred, with 5% padding.
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12) * 1.1;
    let centre = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let inner = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - centre[0] + 0.5 * span) / span * inner;
    let py = |y: f64| SIZE - MARGIN - (y - centre[1] + 0.5 * span) / span * inner;

    let mut out = String::new();
    let w = &mut out;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(w, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#)?;
    writeln!(
        w,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
    )?;
    let (x0, x1, y0, y1) = (centre[0] - 0.5 * span, centre[0] + 0.5 * span, centre[1] - 0.5 * span, centre[1] + 0.5 * span);
    let axis = SIZE - MARGIN + 15.0;
    writeln!(w, r#"<text x="{MARGIN}" y="{axis}" font-size="10">{x0:.3}</text>"#)?;
    writeln!(w, r#"<text x="{}" y="{axis}" font-size="10" text-anchor="end">{x1:.3}</text>"#, SIZE - MARGIN)?;
    writeln!(w, r#"<text x="5" y="{}" font-size="10">{y0:.3}</text>"#, SIZE - MARGIN)?;
    writeln!(w, r#"<text x="5" y="{}" font-size="10">{y1:.3}</text>"#, MARGIN + 10.0)?;
    for (k, s) in sets.iter().enumerate() {
        writeln!(w, r#"<g fill="{}" fill-opacity="0.6">"#, PALETTE[k])?;
        for i in 0..s.points.rows() {
            let p = s.points.row(i);
            writeln!(w, r#"<circle cx="{:.1}" cy="{:.1}" r="1.5"/>"#, px(p[0]), py(p[1]))?;
        }
        writeln!(w, "</g>")?;
    }
    for (k, s) in sets.iter().enumerate() {
        let y = MARGIN + 15.0 + 18.0 * k as f64;
        let x = SIZE - MARGIN - 150.0;
        writeln!(w, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[k])?;
        writeln!(w, r#"<text x="{}" y="{y}" font-size="12">{}</text>"#, x + 15.0, escape(s.label))?;
    }
    writeln!(w, "</svg>")?;
    Ok(out)
}

pub fn emit_scatter_svg(sets: &[PointSet], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, scatter_svg(sets)?.as_bytes())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
