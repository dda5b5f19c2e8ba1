//! Minimal PNG line charts rendered from CSV series.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;
const COLORS: [[u8; 3]; 3] = [[214, 39, 40], [31, 119, 180], [44, 160, 44]];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && x < WIDTH as i64 && y < HEIGHT as i64 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
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

/// Draws each series as a polyline with square markers on shared axes.
pub fn line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> paranet::Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let points = series.iter().flatten();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = ((WIDTH as i64 - 2 * MARGIN) as f64, (HEIGHT as i64 - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| -> (i64, i64) {
        let px = MARGIN as f64 + (x - xmin) / span(xmin, xmax) * w;
        let py = (HEIGHT as i64 - MARGIN) as f64 - (y - ymin) / span(ymin, ymax) * h;
        (px.round() as i64, py.round() as i64)
    };
    let axis = Rgb([0, 0, 0]);
    let bottom = HEIGHT as i64 - MARGIN;
    segment(&mut img, (MARGIN, bottom), (WIDTH as i64 - MARGIN, bottom), axis);
    segment(&mut img, (MARGIN, MARGIN), (MARGIN, bottom), axis);
    for (s, pts) in series.iter().enumerate() {
        let c = Rgb(COLORS[s % COLORS.len()]);
        let px: Vec<(i64, i64)> = pts.iter().map(|&p| to_px(p)).collect();
        for pair in px.windows(2) {
            segment(&mut img, pair[0], pair[1], c);
        }
        for &(x, y) in &px {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    img.save(path).map_err(|e| paranet::Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        line_plot(&path, &[vec![(0.0, 1.0), (1.0, 3.0)], vec![(0.5, 2.0)]]).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        line_plot(&path, &[]).unwrap();
    }
}
