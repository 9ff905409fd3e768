//! Minimal SVG scatter plots of the first two coordinates.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const SIZE: f64 = 800.0;
const MARGIN: f64 = 0.05;
const SAMPLE_COLOR: &str = "#1f77b4";
const REFERENCE_COLOR: &str = "#ff7f0e";

/// Axis box `(x_min, x_max, y_min, y_max)` covering every point plus a 5% margin per side.
pub fn fit_bounds(sets: &[&[Vec<f64>]]) -> Result<(f64, f64, f64, f64)> {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in sets.iter().flat_map(|s| s.iter()) {
        let (x, y) = xy(p)?;
        b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
    }
    if !b.0.is_finite() {
        return Err(Error::domain("nothing to plot"));
    }
    let pad = |lo: f64, hi: f64| {
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - MARGIN * span, hi + MARGIN * span)
    };
    let (x0, x1) = pad(b.0, b.1);
    let (y0, y1) = pad(b.2, b.3);
    Ok((x0, x1, y0, y1))
}

fn xy(p: &[f64]) -> Result<(f64, f64)> {
    let (x, y) = match p.len() {
        0 => return Err(Error::domain("cannot plot zero-dimensional samples")),
        1 => (p[0], 0.0),
        _ => (p[0], p[1]),
    };
    if x.is_finite() && y.is_finite() {
        Ok((x, y))
    } else {
        Err(Error::non_finite("plot input"))
    }
}

/// Scatter `samples` (and an optional `overlay` in a second color) as SVG text.
pub fn scatter_svg(samples: &[Vec<f64>], overlay: Option<&[Vec<f64>]>) -> Result<String> {
    let mut sets: Vec<&[Vec<f64>]> = vec![samples];
    if let Some(o) = overlay {
        sets.push(o);
    }
    let (x0, x1, y0, y1) = fit_bounds(&sets)?;
    let sx = |x: f64| (x - x0) / (x1 - x0) * SIZE;
    let sy = |y: f64| SIZE - (y - y0) / (y1 - y0) * SIZE;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}">"#
    )
    .expect("string write");
    writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).expect("string write");
    let mut layer = |pts: &[Vec<f64>], color: &str, class: &str| -> Result<()> {
        writeln!(out, r#"<g class="{class}" fill="{color}" fill-opacity="0.5">"#).expect("string write");
        for p in pts {
            let (x, y) = xy(p)?;
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, sx(x), sy(y)).expect("string write");
        }
        out.push_str("</g>\n");
        Ok(())
    };
    if let Some(o) = overlay {
        layer(o, REFERENCE_COLOR, "reference")?;
    }
    layer(samples, SAMPLE_COLOR, "samples")?;
    out.push_str("</svg>\n");
    Ok(out)
}
