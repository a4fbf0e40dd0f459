//! Standalone SVG scatter plots of embeddings.

use std::fmt::Write as _;
use std::path::Path;

use ensembench_core::embed::EmbeddingPoint;

use crate::{Error, Result};

const CANVAS: f64 = 600.0;
const MARGIN: f64 = 20.0;
const PANEL: f64 = 160.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Five-stop ramp from dark purple through teal to yellow; interpolated
/// linearly in RGB.
pub const RAMP: [(u8, u8, u8); 5] = [
    (68, 1, 84),
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ColorMode {
    /// One palette color per class with a legend of `classes` entries.
    Categorical { classes: usize },
    /// Values clipped at the given upper quantile, then mapped onto
    /// [`RAMP`] with a value bar.
    Continuous { clip_quantile: f64 },
}

pub fn class_color(c: usize, k: usize) -> String {
    if k <= PALETTE.len() {
        return PALETTE[c % PALETTE.len()].to_string();
    }
    format!("hsl({:.1},65%,50%)", 360.0 * c as f64 / k as f64)
}

/// Ramp color at `t` in `[0, 1]`.
pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |x: u8, y: u8| (x as f64 + f * (y as f64 - x as f64)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Nearest-rank quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Renders the scatter; coordinates are mapped with a common scale on both
/// axes so the aspect ratio is preserved.
pub fn scatter_svg(points: &[EmbeddingPoint], mode: ColorMode) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Usage("cannot plot an empty embedding".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.p1);
        x1 = x1.max(p.p1);
        y0 = y0.min(p.p2);
        y1 = y1.max(p.p2);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    let cx = MARGIN + (CANVAS - 2.0 * MARGIN - (x1 - x0) * scale) / 2.0;
    let cy = MARGIN + (CANVAS - 2.0 * MARGIN - (y1 - y0) * scale) / 2.0;
    let map = |p: &EmbeddingPoint| (cx + (p.p1 - x0) * scale, CANVAS - (cy + (p.p2 - y0) * scale));

    let (lo, hi) = match mode {
        ColorMode::Continuous { clip_quantile } => {
            let v: Vec<f64> = points.iter().map(|p| p.color.as_f64()).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            (lo, quantile(&v, clip_quantile))
        }
        ColorMode::Categorical { .. } => (0.0, 0.0),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = CANVAS + PANEL,
        h = CANVAS
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for p in points {
        let (x, y) = map(p);
        let fill = match mode {
            ColorMode::Categorical { classes } => class_color(p.color.as_f64() as usize, classes),
            ColorMode::Continuous { .. } => {
                let t = if hi > lo {
                    (p.color.as_f64() - lo) / (hi - lo)
                } else {
                    0.0
                };
                ramp(t)
            }
        };
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
            x, y, fill
        );
    }
    let left = CANVAS + 10.0;
    match mode {
        ColorMode::Categorical { classes } => {
            for c in 0..classes {
                let y = MARGIN + 18.0 * c as f64;
                let _ = writeln!(
                    s,
                    r#"<g class="legend"><rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="12">class {}</text></g>"#,
                    left,
                    y,
                    class_color(c, classes),
                    left + 18.0,
                    y + 10.0,
                    c
                );
            }
        }
        ColorMode::Continuous { .. } => {
            let steps = 50;
            let top = MARGIN + 20.0;
            let height = CANVAS - 2.0 * MARGIN - 40.0;
            let _ = writeln!(s, r#"<g class="value-bar">"#);
            for i in 0..steps {
                let t = 1.0 - i as f64 / (steps - 1) as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.2}" width="20" height="{:.2}" fill="{}"/>"#,
                    left,
                    top + height * i as f64 / steps as f64,
                    height / steps as f64 + 0.5,
                    ramp(t)
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="12">{:.4}</text>"#,
                left + 26.0,
                top + 10.0,
                hi
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="12">{:.4}</text>"#,
                left + 26.0,
                top + height,
                lo
            );
            let _ = writeln!(s, "</g>");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_scatter(points: &[EmbeddingPoint], mode: ColorMode, path: &Path) -> Result<()> {
    let svg = scatter_svg(points, mode)?;
    std::fs::write(path, svg).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ensembench_core::embed::ColorKey;

    fn pt(i: usize, v: ColorKey) -> EmbeddingPoint {
        EmbeddingPoint {
            sample_id: i,
            p1: i as f64,
            p2: (i * i) as f64,
            color: v,
        }
    }

    #[test]
    fn single_point_plot() {
        let s = scatter_svg(&[pt(0, ColorKey::Class(0))], ColorMode::Categorical { classes: 1 }).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("class=\"point\"").count(), 1);
        assert!(scatter_svg(&[], ColorMode::Categorical { classes: 1 }).is_err());
    }

    #[test]
    fn legend_has_one_entry_per_class() {
        let pts: Vec<_> = (0..20).map(|i| pt(i, ColorKey::Class((i % 10) as u32))).collect();
        let s = scatter_svg(&pts, ColorMode::Categorical { classes: 10 }).unwrap();
        assert_eq!(s.matches("class=\"legend\"").count(), 10);
    }

    #[test]
    fn ramp_ends() {
        let pts: Vec<_> = (0..5).map(|i| pt(i, ColorKey::Value(i as f64))).collect();
        let s = scatter_svg(&pts, ColorMode::Continuous { clip_quantile: 1.0 }).unwrap();
        let fills: Vec<&str> = s
            .lines()
            .filter(|l| l.contains("class=\"point\""))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect();
        assert_eq!(fills[0], ramp(0.0));
        assert_eq!(fills[4], ramp(1.0));
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
    }

    #[test]
    fn quantile_clips_outliers() {
        let mut v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        v.push(1e9);
        assert_eq!(quantile(&v, 0.99), 100.0);
    }
}
