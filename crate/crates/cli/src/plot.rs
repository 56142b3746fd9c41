//! PR and OA-vs-threshold rendering for `plot-curves`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::{CliResult, Failure};

const SIZE: u32 = 512;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 8] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

struct Curve {
    name: String,
    /// `(threshold, precision, recall, oa)` rows.
    rows: Vec<[f64; 4]>,
}

fn parse_spec(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

fn read_curve(name: String, path: &Path) -> CliResult<Curve> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "threshold,precision,recall,oa" {
        return Err(Failure::data(format!("{}: not a curve file (header {header:?})", path.display())));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let values: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match values {
            Ok(v) if v.len() == 4 => rows.push([v[0], v[1], v[2], v[3]]),
            _ => return Err(Failure::data(format!("{}:{}: malformed row {line:?}", path.display(), k + 2))),
        }
    }
    if rows.len() < 2 {
        return Err(Failure::data(format!("{}: fewer than two curve points", path.display())));
    }
    Ok(Curve { name, rows })
}

/// Maps unit coordinates to pixels, y pointing up.
fn to_px(x: f64, y: f64) -> (f32, f32) {
    let span = (SIZE - 2 * MARGIN) as f64;
    let x = MARGIN as f64 + x.clamp(0.0, 1.0) * span;
    let y = (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span;
    (x as f32, y as f32)
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let grid = Rgb([225, 225, 225]);
        draw_line_segment_mut(&mut img, to_px(t, 0.0), to_px(t, 1.0), grid);
        draw_line_segment_mut(&mut img, to_px(0.0, t), to_px(1.0, t), grid);
    }
    let span = SIZE - 2 * MARGIN;
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(span + 1, span + 1),
        Rgb([0, 0, 0]),
    );
    img
}

/// Draws a polyline, with a colour swatch per curve along the top edge as legend.
fn draw(img: &mut RgbImage, index: usize, points: &[(f64, f64)]) {
    let color = Rgb(PALETTE[index % PALETTE.len()]);
    for w in points.windows(2) {
        draw_line_segment_mut(img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), color);
    }
    let x = MARGIN as i32 + 18 * index as i32;
    draw_filled_rect_mut(img, Rect::at(x, (MARGIN / 2) as i32).of_size(12, 12), color);
}

fn save(img: &RgbImage, path: &Path) -> CliResult {
    img.save(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn plot_curves(specs: &[String], out: &Path) -> CliResult {
    let curves = specs
        .iter()
        .map(|s| {
            let (name, path) = parse_spec(s);
            read_curve(name, &path)
        })
        .collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;

    let mut pr = canvas();
    let mut oa = canvas();
    for (k, c) in curves.iter().enumerate() {
        // Thresholds where nothing is predicted positive carry precision 0;
        // they would draw a spurious drop to the origin.
        let pr_points: Vec<(f64, f64)> = c
            .rows
            .iter()
            .filter(|r| r[1] > 0.0 || r[2] > 0.0)
            .map(|r| (r[2], r[1]))
            .collect();
        draw(&mut pr, k, &pr_points);
        let oa_points: Vec<(f64, f64)> = c.rows.iter().map(|r| (r[0], r[3])).collect();
        draw(&mut oa, k, &oa_points);
        println!("curve {k}: {} ({} points), colour {:?}", c.name, c.rows.len(), PALETTE[k % PALETTE.len()]);
    }
    save(&pr, &out.join("pr.png"))?;
    save(&oa, &out.join("oa.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_default_to_the_parent_directory() {
        assert_eq!(parse_spec("fcn=runs/a/curve.csv"), ("fcn".into(), PathBuf::from("runs/a/curve.csv")));
        assert_eq!(parse_spec("runs/b/curve.csv").0, "b");
    }

    #[test]
    fn corners_map_inside_the_frame() {
        assert_eq!(to_px(0.0, 0.0), (MARGIN as f32, (SIZE - MARGIN) as f32));
        assert_eq!(to_px(1.0, 1.0), ((SIZE - MARGIN) as f32, MARGIN as f32));
    }
}
