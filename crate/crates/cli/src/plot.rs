//! Dependency-free static SVG charts. Plotting is a convenience layer on top
//! of the CSV tables: callers isolate failures so a bad plot never blocks
//! data output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 880.0;
const TOP: f64 = 46.0;
const BOTTOM: f64 = 480.0;
/// Points per polyline beyond which the input is thinned.
const MAX_POINTS: usize = 4000;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Render as a staircase (value holds until the next point).
    pub steps: bool,
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if lo == hi {
            let pad = lo.abs().max(1.0) * 0.05;
            return Self {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        let pad = (hi - lo) * 0.04;
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn map(&self, v: f64, out_lo: f64, out_hi: f64) -> f64 {
        out_lo + (v - self.lo) / (self.hi - self.lo) * (out_hi - out_lo)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".into()
    } else if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(
    w: &mut impl Write,
    title: &str,
    x_label: &str,
    y_label: &str,
    xr: &Range,
    yr: &Range,
) -> std::io::Result<()> {
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">"
    )?;
    writeln!(w, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>")?;
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        escape(title)
    )?;
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let xp = xr.map(xv, LEFT, RIGHT);
        let yp = yr.map(yv, BOTTOM, TOP);
        writeln!(
            w,
            "<line x1=\"{xp:.1}\" y1=\"{TOP}\" x2=\"{xp:.1}\" y2=\"{BOTTOM}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        )?;
        writeln!(
            w,
            "<line x1=\"{LEFT}\" y1=\"{yp:.1}\" x2=\"{RIGHT}\" y2=\"{yp:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        )?;
        writeln!(
            w,
            "<text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            BOTTOM + 18.0,
            tick_label(xv)
        )?;
        writeln!(
            w,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 8.0,
            yp + 4.0,
            tick_label(yv)
        )?;
    }
    writeln!(
        w,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#333333\"/>",
        RIGHT - LEFT,
        BOTTOM - TOP
    )?;
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )?;
    writeln!(
        w,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>",
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    )?;
    Ok(())
}

/// Multi-series line chart. Series are drawn in order; labels go into a
/// legend in the upper right corner.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> std::io::Result<()> {
    let xr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    frame(&mut w, title, x_label, y_label, &xr, &yr)?;
    for s in series {
        let stride = (s.points.len() / MAX_POINTS).max(1);
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().step_by(stride).enumerate() {
            let xp = xr.map(x, LEFT, RIGHT);
            let yp = yr.map(y, BOTTOM, TOP);
            if i == 0 {
                d.push_str(&format!("M{xp:.2},{yp:.2}"));
            } else if s.steps {
                // Hold the previous level until this x, then jump.
                d.push_str(&format!("H{xp:.2}V{yp:.2}"));
            } else {
                d.push_str(&format!("L{xp:.2},{yp:.2}"));
            }
        }
        writeln!(
            w,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"/>",
            s.color
        )?;
    }
    for (i, s) in series.iter().enumerate() {
        let y = TOP + 16.0 + 18.0 * i as f64;
        writeln!(
            w,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"{}\" stroke-width=\"2.5\"/>",
            RIGHT - 150.0,
            RIGHT - 124.0,
            s.color
        )?;
        writeln!(
            w,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            RIGHT - 118.0,
            y + 4.0,
            escape(s.label)
        )?;
    }
    writeln!(w, "</svg>")?;
    w.flush()
}

/// Histogram with `bins` equal-width bins spanning the sample range.
pub fn histogram(
    path: &Path,
    title: &str,
    x_label: &str,
    values: &[f64],
    bins: usize,
) -> std::io::Result<()> {
    let bins = bins.max(1);
    let vr = Range::of(values.iter().copied());
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let f = (v - vr.lo) / (vr.hi - vr.lo);
        let b = ((f * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let yr = Range {
        lo: 0.0,
        hi: counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.05,
    };
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    frame(&mut w, title, x_label, "count", &vr, &yr)?;
    let bw = (RIGHT - LEFT) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x = LEFT + bw * i as f64;
        let y = yr.map(c as f64, BOTTOM, TOP);
        writeln!(
            w,
            "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"#1f77b4\" fill-opacity=\"0.75\"/>",
            x + 0.5,
            bw - 1.0,
            BOTTOM - y
        )?;
    }
    writeln!(w, "</svg>")?;
    w.flush()
}
