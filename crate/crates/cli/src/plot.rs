//! Frame strips: one row per field (truth, observations, each reconstruction), one
//! column per frame.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use image::{Rgb, RgbImage};

use crate::artifacts::{write_atomic, write_json, PlotManifest, Reconstruction, PLOT_FORMAT};
use crate::commands::mode_name;

const GAP: u32 = 2;
const TARGET_PX: usize = 96;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const EMPTY: Rgb<u8> = Rgb([225, 225, 225]);

/// Evenly spaced frame indices, all frames when `count` is absent or too large.
pub fn pick_frames(total: usize, count: Option<usize>) -> Vec<usize> {
    match count {
        Some(c) if c >= 1 && c < total => {
            if c == 1 {
                return vec![0];
            }
            (0..c).map(|i| (i * (total - 1) + (c - 1) / 2) / (c - 1)).collect()
        }
        _ => (0..total).collect(),
    }
}

/// Blue, white, red over `[-limit, limit]`.
fn diverging(v: f64, limit: f64) -> Rgb<u8> {
    let x = (v / limit).clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a.abs())).round() as u8;
    if x >= 0.0 {
        Rgb([255, fade(x), fade(x)])
    } else {
        Rgb([fade(x), fade(x), 255])
    }
}

struct Canvas {
    img: RgbImage,
    rows: usize,
    cols: usize,
    h: usize,
    w: usize,
    scale: usize,
}

impl Canvas {
    fn new(grid: &[usize], rows: usize, cols: usize) -> Self {
        let (h, w) = (grid[0], grid[1]);
        let scale = (TARGET_PX / h.max(w)).max(1);
        let width = cols as u32 * ((w * scale) as u32 + GAP) + GAP;
        let height = rows as u32 * ((h * scale) as u32 + GAP) + GAP;
        Self {
            img: RgbImage::from_pixel(width, height, BACKGROUND),
            rows,
            cols,
            h,
            w,
            scale,
        }
    }

    fn cell(&mut self, row: usize, col: usize, i: usize, j: usize, c: Rgb<u8>) {
        debug_assert!(row < self.rows && col < self.cols);
        let x0 = GAP as usize + col * (self.w * self.scale + GAP as usize) + j * self.scale;
        let y0 = GAP as usize + row * (self.h * self.scale + GAP as usize) + i * self.scale;
        for dy in 0..self.scale {
            for dx in 0..self.scale {
                self.img.put_pixel((x0 + dx) as u32, (y0 + dy) as u32, c);
            }
        }
    }

    fn frame(&mut self, row: usize, col: usize, values: &[f64], limit: f64) {
        for i in 0..self.h {
            for j in 0..self.w {
                self.cell(row, col, i, j, diverging(values[i * self.w + j], limit));
            }
        }
    }

    fn points(&mut self, row: usize, col: usize, pts: &[(Vec<f64>, f64)], limit: f64) {
        for i in 0..self.h {
            for j in 0..self.w {
                self.cell(row, col, i, j, EMPTY);
            }
        }
        let snap = |x: f64, n: usize| ((x * (n - 1) as f64).round().max(0.0) as usize).min(n - 1);
        for (x, v) in pts {
            self.cell(row, col, snap(x[0], self.h), snap(x[1], self.w), diverging(*v, limit));
        }
    }
}

/// Renders the strip and its manifest. All inputs must share grid and times.
pub fn plot(inputs: &[PathBuf], recs: &[Reconstruction], frames: Option<usize>, out: &Path, digest: &str, force: bool) -> Result<PlotManifest> {
    ensure!(!recs.is_empty(), "plot needs at least one reconstruction file");
    let first = &recs[0];
    ensure!(first.grid.len() == 2, "only two-dimensional grids can be plotted");
    for (p, r) in inputs.iter().zip(recs).skip(1) {
        ensure!(
            r.grid == first.grid && r.times.len() == first.times.len(),
            "{} has grid {:?} with {} frames, expected {:?} with {}",
            p.display(),
            r.grid,
            r.times.len(),
            first.grid,
            first.times.len()
        );
    }
    let picked = pick_frames(first.times.len(), frames);
    let truth = recs.iter().find_map(|r| r.truth.clone());

    let mut limit = 0.0f64;
    for r in recs {
        for f in r.truth.iter().flatten().chain(&r.frames) {
            limit = f.iter().fold(limit, |m, v| m.max(v.abs()));
        }
    }
    let limit = if limit > 0.0 { limit } else { 1.0 };

    let mut rows = Vec::new();
    if truth.is_some() {
        rows.push("truth".to_string());
    }
    rows.push("observations".to_string());
    rows.extend(recs.iter().map(|r| mode_name(r.mode).to_string()));

    let mut canvas = Canvas::new(&first.grid, rows.len(), picked.len());
    let mut row = 0;
    if let Some(t) = &truth {
        for (col, &m) in picked.iter().enumerate() {
            canvas.frame(row, col, &t[m], limit);
        }
        row += 1;
    }
    for (col, &m) in picked.iter().enumerate() {
        let pts: Vec<(Vec<f64>, f64)> = match first.observations.timesteps.iter().position(|&t| (t - first.times[m]).abs() < 1e-9) {
            Some(k) => first.observations.records[k].iter().map(|o| (o.spatial.clone(), o.value)).collect(),
            None => Vec::new(),
        };
        canvas.points(row, col, &pts, limit);
    }
    row += 1;
    for r in recs {
        for (col, &m) in picked.iter().enumerate() {
            canvas.frame(row, col, &r.frames[m], limit);
        }
        row += 1;
    }

    let img = canvas.img;
    write_atomic(out, force, |p| Ok(img.save_with_format(p, image::ImageFormat::Png)?))?;
    let manifest = PlotManifest {
        format: PLOT_FORMAT.into(),
        config_digest: digest.to_string(),
        inputs: inputs.to_vec(),
        image: out.to_path_buf(),
        rows,
        frames: picked,
    };
    write_json(&out.with_extension("json"), force, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_picks_cover_both_ends() {
        assert_eq!(pick_frames(16, Some(6)), vec![0, 3, 6, 9, 12, 15]);
        assert_eq!(pick_frames(16, None).len(), 16);
        assert_eq!(pick_frames(1, Some(6)), vec![0]);
        assert_eq!(pick_frames(5, Some(1)), vec![0]);
    }

    #[test]
    fn colormap_is_white_at_zero() {
        assert_eq!(diverging(0.0, 1.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(2.0, 1.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-1.0, 1.0), Rgb([0, 0, 255]));
    }
}
