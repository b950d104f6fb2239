//! Scene-based evaluation of a checkpoint on a frame directory.

use std::path::Path;
use std::time::Instant;

use fldr_core::data_eval::{build_eval_set, mean_abs_diff, split_scenes_by_diff, EvalClip, EvalMode};
use fldr_core::metrics::{psnr, ssim};
use fldr_core::pipeline::{interpolate_pair, InterpolationRequest, Model, ParameterBreakdown, TimeSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FldrError, Result};
use crate::io::{list_frames, read_image};
use crate::sequence::thread_pool;

#[derive(Clone, Debug, Serialize)]
pub struct FrameScore {
    pub index: usize,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipReport {
    pub scene: usize,
    pub first: usize,
    pub last: usize,
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub seconds_per_frame: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParameterReport {
    pub fldr: usize,
    pub flow: usize,
    pub warp: usize,
    pub occlusion: usize,
    pub fusion: usize,
    pub total: usize,
}

impl From<ParameterBreakdown> for ParameterReport {
    fn from(p: ParameterBreakdown) -> Self {
        ParameterReport { fldr: p.fldr, flow: p.flow, warp: p.warp, occlusion: p.occlusion, fusion: p.fusion, total: p.total() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalConfigEcho {
    pub mode: String,
    pub threshold: f64,
    pub scales: usize,
    pub frames: usize,
    pub scenes: usize,
    pub skipped_scenes: Vec<usize>,
}

/// Per-clip and aggregate quality. Aggregates are means over all evaluated frames.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub clips: Vec<ClipReport>,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds_per_frame: f64,
    pub parameters: ParameterReport,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:>6} {:>7} {:>7} {:>9} {:>8} {:>9}\n", "scene", "first", "last", "PSNR dB", "SSIM", "s/frame"));
        for c in &self.clips {
            s.push_str(&format!(
                "{:>6} {:>7} {:>7} {:>9.3} {:>8.4} {:>9.3}\n",
                c.scene, c.first, c.last, c.mean_psnr, c.mean_ssim, c.seconds_per_frame
            ));
        }
        s.push_str(&format!("{:>22} {:>9.3} {:>8.4} {:>9.3}\n", "mean", self.psnr, self.ssim, self.seconds_per_frame));
        let p = &self.parameters;
        s.push_str(&format!(
            "parameters: fLDR {} | flow {} | warp {} | occlusion {} | fusion {} | total {}\n",
            p.fldr, p.flow, p.warp, p.occlusion, p.fusion, p.total
        ));
        s
    }
}

fn eval_clip(paths: &[std::path::PathBuf], clip: &EvalClip, model: &Model<f32>, scales: usize) -> Result<ClipReport> {
    let i0 = read_image(&paths[clip.first])?;
    let i1 = read_image(&paths[clip.last])?;
    let req = InterpolationRequest { i0, i1, time: TimeSpec::Factor(8), scales };
    let start = Instant::now();
    let outs = interpolate_pair(&req, model, false)?;
    let seconds = start.elapsed().as_secs_f64() / outs.len() as f64;
    let mut frames = Vec::with_capacity(clip.targets.len());
    for (&(index, t), out) in clip.targets.iter().zip(&outs) {
        debug_assert!((out.t - t).abs() < 1e-12);
        let gt = read_image(&paths[index])?;
        frames.push(FrameScore { index, t, psnr: psnr(&out.frame, &gt)?, ssim: ssim(&out.frame, &gt)? });
    }
    let n = frames.len() as f64;
    Ok(ClipReport {
        scene: clip.scene,
        first: clip.first,
        last: clip.last,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
        seconds_per_frame: seconds,
    })
}

/// Splits the frames of `dir` into scenes, builds the evaluation clips for
/// `mode` and scores the model on every target frame.
pub fn evaluate(dir: &Path, model: &Model<f32>, mode: EvalMode, threshold: f64, scales: usize, jobs: usize) -> Result<EvalReport> {
    let paths = list_frames(dir)?;
    if paths.len() < 2 {
        return Err(FldrError::data(format_args!("{}: need at least 2 frames, found {}", dir.display(), paths.len())));
    }
    // Consecutive differences are computed while streaming so only two frames are resident.
    let mut diffs = Vec::with_capacity(paths.len() - 1);
    let mut prev = read_image(&paths[0])?;
    for p in &paths[1..] {
        let cur = read_image(p)?;
        if cur.shape() != prev.shape() {
            return Err(FldrError::data(format_args!("{}: mixed resolutions ({:?} vs {:?})", p.display(), cur.shape(), prev.shape())));
        }
        diffs.push(mean_abs_diff(&prev, &cur)?);
        prev = cur;
    }
    let scenes = split_scenes_by_diff(&diffs, threshold)?;
    let (clips, skipped) = build_eval_set(&scenes, mode);
    if clips.is_empty() {
        return Err(FldrError::data(format_args!("{}: no scene has the {} frames needed", dir.display(), mode.span())));
    }
    let pool = thread_pool(jobs)?;
    let reports = pool.install(|| clips.par_iter().map(|c| eval_clip(&paths, c, model, scales)).collect::<Vec<_>>());
    let clips = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let all: Vec<&FrameScore> = clips.iter().flat_map(|c| &c.frames).collect();
    let n = all.len() as f64;
    Ok(EvalReport {
        psnr: all.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: all.iter().map(|f| f.ssim).sum::<f64>() / n,
        seconds_per_frame: clips.iter().map(|c| c.seconds_per_frame).sum::<f64>() / clips.len() as f64,
        clips,
        parameters: model.parameter_breakdown().into(),
        config: EvalConfigEcho {
            mode: match mode {
                EvalMode::Short => "S".into(),
                EvalMode::Long => "L".into(),
            },
            threshold,
            scales,
            frames: paths.len(),
            scenes: scenes.len(),
            skipped_scenes: skipped,
        },
    })
}
