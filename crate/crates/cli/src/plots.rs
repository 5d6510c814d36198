//! Minimal PNG line plots for loss curves and success/precision sweeps.
//! No text rendering: series are distinguished by color, and the caption
//! mapping colors to names is written to a sidecar .txt next to the image.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points }
    }
}

/// Line plot of the series, plus `<stem>.txt` naming each color.
pub fn line_plot(path: &Path, series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        bail!("nothing to plot");
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                bail!("non-finite point in series {}", s.name);
            }
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN;
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN;
    let gray = Rgb([150, 150, 150]);
    for x in x0..=x1 {
        img.put_pixel(x, y0, gray);
        img.put_pixel(x, y1, gray);
    }
    for y in y1..=y0 {
        img.put_pixel(x0, y, gray);
        img.put_pixel(x1, y, gray);
    }

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - xmin) / (xmax - xmin);
        let fy = (y - ymin) / (ymax - ymin);
        let px = x0 as f64 + fx * (x1 - x0) as f64;
        let py = y0 as f64 - fy * (y0 - y1) as f64;
        (px.round() as i64, py.round() as i64)
    };

    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let px: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for w in px.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        if px.len() == 1 {
            draw_line(&mut img, px[0], px[0], color);
        }
    }

    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    let legend: String = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = PALETTE[i % PALETTE.len()];
            format!("rgb({},{},{}) {}\n", c[0], c[1], c[2], s.name)
        })
        .collect();
    std::fs::write(path.with_extension("txt"), legend)?;
    Ok(())
}

/// Bresenham segment, clipped to the image bounds.
fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png_and_legend() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("loss.png");
        let s = vec![
            Series::new("total", (0..20).map(|i| (i as f64, (20 - i) as f64)).collect()),
            Series::new("focal", (0..20).map(|i| (i as f64, 0.5 * i as f64)).collect()),
        ];
        line_plot(&path, &s).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        let legend = std::fs::read_to_string(path.with_extension("txt")).unwrap();
        assert!(legend.contains("total") && legend.contains("focal"));
        // Some pixel of the first series color must have landed on canvas.
        let c = Rgb(PALETTE[0]);
        assert!(img.pixels().any(|p| *p == c));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("p.png");
        assert!(line_plot(&path, &[]).is_err());
        let bad = vec![Series::new("x", vec![(0.0, f64::NAN)])];
        assert!(line_plot(&path, &bad).is_err());
    }
}
