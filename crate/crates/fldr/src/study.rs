//! Compression-study driver: table, JSON record and a PNG plot.

use std::path::Path;

use fldr_core::data_eval::{compression_study, StudyPoint};
use fldr_core::Tensor;
use serde::Serialize;

use crate::error::{FldrError, Result};
use crate::io::{list_frames, read_image, write_image, BitDepth};

#[derive(Clone, Debug, Serialize)]
pub struct StudyRow {
    pub d: usize,
    pub k: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub r: f64,
    pub study_image: String,
    pub held_out_images: usize,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn table(&self) -> String {
        let mut s = format!("compression ratio r = {}\n{:>4} {:>6} {:>10}\n", self.r, "d", "k", "PSNR dB");
        for row in &self.rows {
            s.push_str(&format!("{:>4} {:>6} {:>10.3}\n", row.d, row.k, row.psnr));
        }
        s
    }

    /// Block size with the highest PSNR.
    pub fn best(&self) -> Option<&StudyRow> {
        self.rows.iter().max_by(|a, b| a.psnr.total_cmp(&b.psnr))
    }
}

/// Runs the study with a basis from `image` and PSNR averaged over the frames
/// of `held_out` (the study image itself when `None`).
pub fn run_study(image: &Path, d_list: &[usize], r: f64, held_out: Option<&Path>) -> Result<StudyReport> {
    let img = read_image(image)?;
    let held: Vec<Tensor<f32>> = match held_out {
        Some(dir) => {
            let paths = list_frames(dir)?;
            if paths.is_empty() {
                return Err(FldrError::data(format_args!("{}: no held-out images", dir.display())));
            }
            paths.iter().map(|p| read_image(p)).collect::<Result<_>>()?
        }
        None => Vec::new(),
    };
    let img64: Tensor<f64> = img.cast();
    let held64: Vec<Tensor<f64>> = held.iter().map(|t| t.cast()).collect();
    let points = compression_study(&img64, d_list, r, &held64)?;
    Ok(StudyReport {
        r,
        study_image: image.display().to_string(),
        held_out_images: held.len().max(1),
        rows: points.iter().map(|&StudyPoint { d, k, psnr }| StudyRow { d, k, psnr }).collect(),
    })
}

const PLOT_W: usize = 640;
const PLOT_H: usize = 400;
const MARGIN: usize = 40;

/// Renders `values` (equally spaced along x) as a line chart with markers and
/// light horizontal grid lines at whole-dB steps.
pub fn line_plot(values: &[f64]) -> Tensor<f32> {
    let mut img = Tensor::full(&[3, PLOT_H, PLOT_W], 1.0f32);
    let put = |x: isize, y: isize, rgb: [f32; 3], img: &mut Tensor<f32>| {
        if x >= 0 && y >= 0 && (x as usize) < PLOT_W && (y as usize) < PLOT_H {
            for (c, v) in rgb.iter().enumerate() {
                img.data_mut()[c * PLOT_H * PLOT_W + y as usize * PLOT_W + x as usize] = *v;
            }
        }
    };
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { ((lo - 0.5).floor(), (hi + 0.5).ceil()) } else { (0.0, 1.0) };
    let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
    let (y0, y1) = ((PLOT_H - MARGIN) as f64, MARGIN as f64);
    let px = |i: usize| if values.len() > 1 { x0 + (x1 - x0) * i as f64 / (values.len() - 1) as f64 } else { (x0 + x1) / 2.0 };
    let py = |v: f64| y0 + (y1 - y0) * (v - lo) / (hi - lo);
    let mut level = lo;
    while level <= hi {
        let y = py(level).round() as isize;
        for x in MARGIN..PLOT_W - MARGIN {
            put(x as isize, y, [0.85, 0.85, 0.85], &mut img);
        }
        level += 1.0;
    }
    for x in MARGIN..=PLOT_W - MARGIN {
        put(x as isize, y0 as isize, [0.0; 3], &mut img);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        put(x0 as isize, y as isize, [0.0; 3], &mut img);
    }
    let line = [0.1, 0.3, 0.8];
    for i in 1..values.len() {
        let (ax, ay, bx, by) = (px(i - 1), py(values[i - 1]), px(i), py(values[i]));
        let steps = ((bx - ax).abs().max((by - ay).abs()) as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (x, y) = ((ax + f * (bx - ax)).round() as isize, (ay + f * (by - ay)).round() as isize);
            put(x, y, line, &mut img);
            put(x, y + 1, line, &mut img);
        }
    }
    for (i, &v) in values.iter().enumerate() {
        let (cx, cy) = (px(i).round() as isize, py(v).round() as isize);
        for dy in -3..=3 {
            for dx in -3..=3 {
                put(cx + dx, cy + dy, [0.8, 0.1, 0.1], &mut img);
            }
        }
    }
    img
}

pub fn write_plot(path: &Path, report: &StudyReport) -> Result<()> {
    let values: Vec<f64> = report.rows.iter().map(|r| r.psnr).collect();
    write_image(path, &line_plot(&values), BitDepth::Eight)
}
