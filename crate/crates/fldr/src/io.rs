//! Frame files: 8/16-bit PNG and binary PPM/PGM, directory listing.

use std::path::{Path, PathBuf};

use fldr_core::Tensor;
use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::error::{FldrError, Result};

/// Sample depth of written frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

const FRAME_EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

/// Reads an image as a `[3, H, W]` tensor in `[0, 1]`. Grey images are
/// replicated to three channels and alpha is dropped; 16-bit files keep their
/// full precision.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| FldrError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| FldrError::io(path, e))?
        .decode()
        .map_err(|source| FldrError::Image { path: path.to_path_buf(), source })?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &DynamicImage) -> Tensor<f32> {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Tensor::from_fn_chw(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c])
}

/// Writes a `[3, H, W]` tensor, clamping to `[0, 1]`. The format follows the
/// extension (`.png` or `.ppm`); PPM supports both depths via its maxval.
pub fn write_image(path: &Path, img: &Tensor<f32>, depth: BitDepth) -> Result<()> {
    let (c, h, w) = img.check_chw("image")?;
    if c != 3 {
        return Err(FldrError::data(format_args!("{}: only 3-channel images can be written, got {c}", path.display())));
    }
    let format = ImageFormat::from_path(path).map_err(|source| FldrError::Image { path: path.to_path_buf(), source })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(FldrError::usage(format_args!("{}: unsupported output format", path.display())));
    }
    let px = |x: usize, y: usize, ci: usize| img[[ci, y, x]].clamp(0.0, 1.0);
    let dynamic = match depth {
        BitDepth::Eight => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Rgb(std::array::from_fn(|ci| (px(x as usize, y as usize, ci) * 255.0).round() as u8))
        })),
        BitDepth::Sixteen => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Rgb(std::array::from_fn(|ci| (px(x as usize, y as usize, ci) * 65535.0).round() as u16))
        })),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FldrError::io(dir, e))?;
    }
    dynamic.save_with_format(path, format).map_err(|source| FldrError::Image { path: path.to_path_buf(), source })
}

/// Frame files of a directory (PNG/PPM/PGM) in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| FldrError::io(dir, e))? {
        let path = entry.map_err(|e| FldrError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every frame of `dir`, requiring a uniform resolution and at least `min` frames.
pub fn read_frames(dir: &Path, min: usize) -> Result<Vec<Tensor<f32>>> {
    let paths = list_frames(dir)?;
    if paths.len() < min {
        return Err(FldrError::data(format_args!("{}: found {} frames, need at least {min}", dir.display(), paths.len())));
    }
    let frames = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    if let Some(i) = frames.iter().position(|f| f.shape() != frames[0].shape()) {
        return Err(FldrError::data(format_args!(
            "{}: mixed resolutions ({:?} vs {:?})",
            paths[i].display(),
            frames[i].shape(),
            frames[0].shape()
        )));
    }
    Ok(frames)
}

/// Output name of frame `index`: `frame_%06d.png`.
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}
