//! Frame-directory interpolation with `frame_%06d` output naming.

use std::path::{Path, PathBuf};

use fldr_core::pipeline::{interpolate_pair, plan_sequence, Diagnostics, InterpolationRequest, Model, SequenceItem, TimeSpec};
use fldr_core::viz::{channel_to_gray, flow_to_color};
use fldr_core::Tensor;
use rayon::prelude::*;

use crate::error::{FldrError, Result};
use crate::io::{frame_name, list_frames, read_image, write_image, BitDepth};

#[derive(Clone, Debug)]
pub struct SequenceOptions {
    pub factor: usize,
    /// Coarsest pyramid level used at test time.
    pub scales: usize,
    pub depth: BitDepth,
    pub diagnostics: bool,
    /// Frame pairs processed concurrently.
    pub jobs: usize,
}

/// Builds a thread pool with `jobs` workers (at least one).
pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| FldrError::usage(format_args!("thread pool: {e}")))
}

/// Interpolates every consecutive pair of `input` by `factor` and writes the
/// originals and intermediates to `output`. Returns the written paths in order.
pub fn interpolate_sequence(input: &Path, output: &Path, model: &Model<f32>, opts: &SequenceOptions) -> Result<Vec<PathBuf>> {
    let paths = list_frames(input)?;
    let plan = plan_sequence(paths.len(), opts.factor).map_err(|e| FldrError::data(format_args!("{}: {e}", input.display())))?;
    TimeSpec::Factor(opts.factor).times()?;
    std::fs::create_dir_all(output).map_err(|e| FldrError::io(output, e))?;
    let first = read_image(&paths[0])?;
    let shape = first.shape().to_vec();
    let per_pair = opts.factor;
    let pool = thread_pool(opts.jobs)?;
    let results: Vec<Result<Vec<PathBuf>>> = pool.install(|| {
        (0..paths.len() - 1)
            .into_par_iter()
            .map(|pair| {
                let i0 = read_image(&paths[pair])?;
                let i1 = read_image(&paths[pair + 1])?;
                for (p, f) in [(&paths[pair], &i0), (&paths[pair + 1], &i1)] {
                    if f.shape() != shape.as_slice() {
                        return Err(FldrError::data(format_args!("{}: mixed resolutions ({:?} vs {:?})", p.display(), f.shape(), shape)));
                    }
                }
                let req = InterpolationRequest { i0: i0.clone(), i1, time: TimeSpec::Factor(opts.factor), scales: opts.scales };
                let frames = interpolate_pair(&req, model, opts.diagnostics)?;
                let base = pair * per_pair;
                let mut written = Vec::with_capacity(per_pair);
                let orig = output.join(frame_name(base));
                write_image(&orig, &i0, opts.depth)?;
                written.push(orig);
                for (j, f) in frames.iter().enumerate() {
                    let path = output.join(frame_name(base + 1 + j));
                    write_image(&path, &f.frame, opts.depth)?;
                    if let Some(d) = &f.diagnostics {
                        write_diagnostics(output, base + 1 + j, d)?;
                    }
                    written.push(path);
                }
                log::info!("pair {}/{} done", pair + 1, paths.len() - 1);
                Ok(written)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(plan.len());
    for r in results {
        out.extend(r?);
    }
    let last_index = plan.len() - 1;
    debug_assert!(matches!(plan[last_index], SequenceItem::Original { .. }));
    let last = output.join(frame_name(last_index));
    write_image(&last, &read_image(paths.last().expect("at least two frames"))?, opts.depth)?;
    out.push(last);
    Ok(out)
}

/// Tiles the channels of a map as grey panels in a `rows × cols` grid.
fn mosaic(map: &Tensor<f32>, cols: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = map.check_chw("map")?;
    let rows = c.div_ceil(cols);
    let panels = (0..c).map(|i| channel_to_gray(map, i)).collect::<fldr_core::Result<Vec<_>>>()?;
    Ok(Tensor::from_fn_chw(3, rows * h, cols * w, |ci, y, x| {
        let idx = (y / h) * cols + x / w;
        panels.get(idx).map_or(0.0, |p| p[[ci, y % h, x % w]])
    }))
}

/// Writes flow colour-wheel images, the weight map and the four warped
/// candidates of one output frame into `out/diagnostics/`.
pub fn write_diagnostics(out: &Path, index: usize, d: &Diagnostics<f32>) -> Result<()> {
    let dir = out.join("diagnostics");
    let stem = format!("frame_{index:06}");
    let magnitude = |f: &Tensor<f32>| f.channel(0).iter().zip(f.channel(1)).map(|(&u, &v)| (u as f64).hypot(v as f64)).fold(0.0, f64::max);
    let max = magnitude(&d.flow01).max(magnitude(&d.flow10));
    let items: [(&str, Tensor<f32>); 7] = [
        ("flow01", flow_to_color(&d.flow01, Some(max))?),
        ("flow10", flow_to_color(&d.flow10, Some(max))?),
        ("weights", mosaic(&d.weight_map, 3)?),
        ("i0_to_t", d.i0_to_t.clone()),
        ("i1_to_t", d.i1_to_t.clone()),
        ("t_from_0", d.t_from_0.clone()),
        ("t_from_1", d.t_from_1.clone()),
    ];
    for (name, img) in items {
        write_image(&dir.join(format!("{stem}_{name}.png")), &img, BitDepth::Eight)?;
    }
    Ok(())
}
