//! Evaluation-set construction, the block-size compression study and
//! parameter accounting.

use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::fldr::{init_basis_from_image, project, reconstruct};
use crate::metrics::psnr;
use crate::pipeline::{pad_reflect, Model, ParameterBreakdown};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default scene-cut threshold on the mean absolute difference of consecutive frames
/// (about 30 levels on an 8-bit scale).
pub const DEFAULT_SCENE_THRESHOLD: f64 = 0.12;

/// Mean absolute difference between two frames of equal shape.
pub fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format_args!("frames differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len().max(1) as f64)
}

/// Splits a frame sequence into scenes, cutting wherever the mean absolute
/// difference between consecutive frames exceeds `threshold`.
pub fn split_scenes<T: Real>(frames: &[Tensor<T>], threshold: f64) -> Result<Vec<Range<usize>>> {
    let diffs = frames.windows(2).map(|p| mean_abs_diff(&p[0], &p[1])).collect::<Result<Vec<_>>>()?;
    split_scenes_by_diff(&diffs, threshold)
}

/// [`split_scenes`] on precomputed consecutive-frame differences (`diffs[i]` between frames `i` and `i+1`).
pub fn split_scenes_by_diff(diffs: &[f64], threshold: f64) -> Result<Vec<Range<usize>>> {
    if diffs.is_empty() {
        return Err(Error::arg("scene splitting needs at least 2 frames"));
    }
    if !(threshold >= 0.0) {
        return Err(Error::arg("scene threshold must be non-negative"));
    }
    let mut scenes = Vec::new();
    let mut start = 0;
    for (i, &d) in diffs.iter().enumerate() {
        if d > threshold {
            scenes.push(start..i + 1);
            start = i + 1;
        }
    }
    scenes.push(start..diffs.len() + 1);
    Ok(scenes)
}

/// Evaluation protocol for a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// First 9 frames: endpoints 0 and 8, targets 1..=7.
    Short,
    /// First 17 frames: endpoints 0 and 16, targets at the even frames 2..=14.
    Long,
}

impl EvalMode {
    pub fn span(self) -> usize {
        match self {
            EvalMode::Short => 9,
            EvalMode::Long => 17,
        }
    }
}

/// One evaluation clip in absolute frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalClip {
    pub scene: usize,
    pub first: usize,
    pub last: usize,
    /// `(frame index, t)` with `t = j/8`, `j = 1..=7`.
    pub targets: Vec<(usize, f64)>,
}

/// Evaluation clips for every scene long enough for `mode`, plus the indices
/// of the scenes that were skipped.
pub fn build_eval_set(scenes: &[Range<usize>], mode: EvalMode) -> (Vec<EvalClip>, Vec<usize>) {
    let span = mode.span();
    let step = (span - 1) / 8;
    let mut clips = Vec::new();
    let mut skipped = Vec::new();
    for (si, sc) in scenes.iter().enumerate() {
        if sc.len() < span {
            log::warn!("scene {si} has {} frames, {span} needed; skipped", sc.len());
            skipped.push(si);
            continue;
        }
        let first = sc.start;
        let targets = (1..8).map(|j| (first + j * step, j as f64 / 8.0)).collect();
        clips.push(EvalClip { scene: si, first, last: first + span - 1, targets });
    }
    (clips, skipped)
}

/// One point of the compression study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyPoint {
    pub d: usize,
    pub k: usize,
    /// Mean reconstruction PSNR over the held-out set.
    pub psnr: f64,
}

/// Largest top-left crop of `img` whose sides are multiples of `d`.
fn crop_to_multiple<T: Real>(img: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let (_, h, w) = img.check_chw("study image")?;
    let (ch, cw) = (h / d * d, w / d * d);
    if ch == 0 || cw == 0 {
        return Err(Error::TooSmall { height: h, width: w, min: d });
    }
    Ok(img.crop(ch, cw))
}

/// Reconstruction PSNR of `img` through `basis`, padding by reflection to the
/// block grid and measuring on the native size.
fn roundtrip_psnr<T: Real>(img: &Tensor<T>, basis: &crate::fldr::ProjectionBasis<T>) -> Result<f64> {
    let (_, h, w) = img.check_chw("held-out image")?;
    let d = basis.d();
    let padded = pad_reflect(img, h.div_ceil(d) * d, w.div_ceil(d) * d)?;
    let rec = reconstruct(&project(&padded, basis)?, basis)?.crop(h, w);
    psnr(&rec.map(|v| v.max(T::zero()).min(T::one())), img)
}

/// For every block size `d`, keeps `k = round(r·d²)` principal directions of the
/// blocks of `image` and reports the mean reconstruction PSNR over `held_out`
/// (or over `image` itself when `held_out` is empty).
pub fn compression_study<T: Real>(image: &Tensor<T>, d_list: &[usize], r: f64, held_out: &[Tensor<T>]) -> Result<Vec<StudyPoint>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::arg(format_args!("ratio r must lie in (0, 1], got {r}")));
    }
    let evals: Vec<&Tensor<T>> = if held_out.is_empty() { alloc::vec![image] } else { held_out.iter().collect() };
    let mut out = Vec::with_capacity(d_list.len());
    for &d in d_list {
        if d == 0 {
            return Err(Error::arg("block size must be positive"));
        }
        let k = (r * (d * d) as f64).round() as usize;
        if k < 1 {
            return Err(Error::arg(format_args!("r·d² = {} is below 1 for d = {d}", r * (d * d) as f64)));
        }
        let basis = init_basis_from_image(&crop_to_multiple(image, d)?, d, k)?.cast::<T>();
        let mut total = 0.0;
        for img in &evals {
            total += roundtrip_psnr(img, &basis)?;
        }
        out.push(StudyPoint { d, k, psnr: total / evals.len() as f64 });
    }
    Ok(out)
}

/// Exact per-module parameter counts.
pub fn count_parameters<T: Real>(model: &Model<T>) -> ParameterBreakdown {
    model.parameter_breakdown()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_split_examples() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.2);
        let b = Tensor::<f64>::full(&[3, 4, 4], 0.7);
        assert_eq!(split_scenes(&[a.clone(), a.clone(), a.clone()], 0.1).unwrap(), alloc::vec![0..3]);
        let frames = [a.clone(), a.clone(), b.clone(), b.clone(), b];
        assert_eq!(split_scenes(&frames, 0.1).unwrap(), alloc::vec![0..2, 2..5]);
        assert!(split_scenes(&[a], 0.1).is_err());
    }

    #[test]
    fn eval_set_examples() {
        let (clips, skipped) = build_eval_set(&[0..9, 9..17, 17..40], EvalMode::Short);
        assert_eq!(skipped, alloc::vec![1]);
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].targets.iter().map(|t| t.0).collect::<Vec<_>>(), (1..8).collect::<Vec<_>>());
        assert_eq!((clips[1].first, clips[1].last), (17, 25));
        let (long, _) = build_eval_set(core::slice::from_ref(&(0..17)), EvalMode::Long);
        assert_eq!(long[0].targets.iter().map(|t| t.0).collect::<Vec<_>>(), alloc::vec![2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(long[0].last, 16);
        for (j, &(_, t)) in long[0].targets.iter().enumerate() {
            assert_eq!(t, (j + 1) as f64 / 8.0);
        }
    }

    #[test]
    fn lossless_ratio_hits_cap() {
        let img = crate::synthetic::dead_leaves::<f64>(4, 32, 32);
        let pts = compression_study(&img, &[2, 4, 8], 1.0, &[]).unwrap();
        for p in pts {
            assert_eq!(p.k, p.d * p.d);
            assert!(p.psnr > 90.0, "d={} psnr {}", p.d, p.psnr);
        }
        assert!(compression_study(&img, &[2], 0.1, &[]).is_err());
    }
}
