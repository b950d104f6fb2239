//! Procedural training and study images.
//!
//! Motion triplets come from a smooth random texture defined over the whole
//! plane and sampled at translated coordinates, so every frame and the true
//! flow are exact. Dead-leaves images stand in for natural photographs where
//! only image statistics matter.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// A training/evaluation sample: the middle frame `it` lies at time `t` between `i0` and `i1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet<T> {
    pub i0: Tensor<T>,
    pub it: Tensor<T>,
    pub i1: Tensor<T>,
    pub t: f64,
    /// Ground-truth displacement `F0→1` in pixels (x, y), when known.
    pub flow: Option<[f64; 2]>,
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    inv2s2: f64,
    reach: f64,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    color: [f64; 3],
}

/// Smooth colour texture on the plane.
#[derive(Clone, Debug)]
pub struct Texture {
    blobs: Vec<Blob>,
    waves: Vec<Wave>,
    /// Blob centres bucketed on a coarse grid for fast evaluation.
    grid: Vec<Vec<usize>>,
    cell: f64,
    origin: (f64, f64),
    cols: usize,
    rows: usize,
}

const TAU: f64 = core::f64::consts::TAU;

fn color<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> [f64; 3] {
    // Mostly shared luminance with some chroma, like natural scenes.
    let l = rng.gen_range(-amp..amp);
    core::array::from_fn(|_| l + rng.gen_range(-0.35 * amp..0.35 * amp))
}

impl Texture {
    /// Random texture covering `[x0, x1) × [y0, y1)` (blobs outside contribute nothing).
    pub fn random<R: Rng + ?Sized>(rng: &mut R, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let area = (x1 - x0) * (y1 - y0);
        let n = (area / 45.0).ceil() as usize;
        let blobs: Vec<Blob> = (0..n)
            .map(|_| {
                let s: f64 = rng.gen_range(1.2f64..6.0);
                Blob {
                    cx: rng.gen_range(x0..x1),
                    cy: rng.gen_range(y0..y1),
                    inv2s2: 1.0 / (2.0 * s * s),
                    reach: 3.5 * s,
                    color: color(rng, 1.1),
                }
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let f = rng.gen_range(1.0 / 40.0..1.0 / 10.0);
                let th = rng.gen_range(0.0..TAU);
                Wave { fx: f * th.cos(), fy: f * th.sin(), phase: rng.gen_range(0.0..TAU), color: color(rng, 0.35) }
            })
            .collect();
        let cell = 24.0;
        let cols = ((x1 - x0) / cell).ceil() as usize + 1;
        let rows = ((y1 - y0) / cell).ceil() as usize + 1;
        let mut grid = vec![Vec::new(); cols * rows];
        for (i, b) in blobs.iter().enumerate() {
            let (gx0, gx1) = (((b.cx - b.reach - x0) / cell).floor(), ((b.cx + b.reach - x0) / cell).floor());
            let (gy0, gy1) = (((b.cy - b.reach - y0) / cell).floor(), ((b.cy + b.reach - y0) / cell).floor());
            for gy in gy0.max(0.0) as usize..=(gy1.max(0.0) as usize).min(rows - 1) {
                for gx in gx0.max(0.0) as usize..=(gx1.max(0.0) as usize).min(cols - 1) {
                    grid[gy * cols + gx].push(i);
                }
            }
        }
        Self { blobs, waves, grid, cell, origin: (x0, y0), cols, rows }
    }

    /// RGB value in `(0, 1)` at a real position.
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut s = [0.0f64; 3];
        for w in &self.waves {
            let v = (TAU * (w.fx * x + w.fy * y) + w.phase).sin();
            for c in 0..3 {
                s[c] += w.color[c] * v;
            }
        }
        let gx = ((x - self.origin.0) / self.cell).floor();
        let gy = ((y - self.origin.1) / self.cell).floor();
        if gx >= 0.0 && gy >= 0.0 && (gx as usize) < self.cols && (gy as usize) < self.rows {
            for &i in &self.grid[gy as usize * self.cols + gx as usize] {
                let b = &self.blobs[i];
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                if d2 < b.reach * b.reach {
                    let v = (-d2 * b.inv2s2).exp();
                    for c in 0..3 {
                        s[c] += b.color[c] * v;
                    }
                }
            }
        }
        s.map(|v| 0.5 + 0.5 * v.tanh())
    }

    /// Renders pixel `(x, y)` as `eval(x - dx, y - dy)`: the texture moved by `(dx, dy)`.
    pub fn render<T: Real>(&self, h: usize, w: usize, dx: f64, dy: f64) -> Tensor<T> {
        let mut out = Tensor::zeros(&[3, h, w]);
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let v = self.eval(x as f64 - dx, y as f64 - dy);
                for c in 0..3 {
                    out.data_mut()[c * plane + y * w + x] = T::lit(v[c]);
                }
            }
        }
        out
    }
}

/// Translating-texture triplets. Displacements are uniform in the disc of
/// radius `max_disp`; `t` is uniform over `{1/8, …, 7/8}`.
pub fn make_synthetic_dataset<T: Real>(seed: u64, count: usize, size: usize, max_disp: f64) -> Vec<Triplet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let margin = max_disp + 12.0;
            let tex = Texture::random(&mut rng, -margin, -margin, size as f64 + margin, size as f64 + margin);
            let r = max_disp * rng.gen::<f64>().sqrt();
            let th = rng.gen_range(0.0..TAU);
            let (vx, vy) = if max_disp > 0.0 { (r * th.cos(), r * th.sin()) } else { (0.0, 0.0) };
            let t = rng.gen_range(1..8) as f64 / 8.0;
            Triplet {
                i0: tex.render(size, size, 0.0, 0.0),
                it: tex.render(size, size, t * vx, t * vy),
                i1: tex.render(size, size, vx, vy),
                t,
                flow: Some([vx, vy]),
            }
        })
        .collect()
}

/// Dead-leaves image: overlapping opaque discs with power-law radii, smooth
/// shading inside each disc and a light blur, giving natural-image-like
/// edge and spectrum statistics.
pub fn dead_leaves<T: Real>(seed: u64, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rmin, rmax) = (2.0f64, (h.max(w) as f64) / 3.0);
    let mut img = vec![[0.0f64; 3]; h * w];
    let mut covered = vec![false; h * w];
    let mut remaining = h * w;
    // Discs are drawn front to back; a pixel keeps the first disc that covers it.
    let mut guard = 0;
    while remaining > 0 && guard < 20_000 {
        guard += 1;
        // Inverse-CDF sample of p(r) ∝ r^-3 on [rmin, rmax].
        let u: f64 = rng.gen();
        let a = rmin.powi(-2);
        let b = rmax.powi(-2);
        let r = (a - u * (a - b)).powf(-0.5);
        let cx = rng.gen_range(-r..w as f64 + r);
        let cy = rng.gen_range(-r..h as f64 + r);
        let base = color(&mut rng, 0.45).map(|v| 0.5 + v);
        let gx = rng.gen_range(-0.3..0.3) / r;
        let gy = rng.gen_range(-0.3..0.3) / r;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (ddx, ddy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let p = y * w + x;
                if !covered[p] && ddx * ddx + ddy * ddy <= r * r {
                    covered[p] = true;
                    remaining -= 1;
                    let shade = gx * ddx + gy * ddy;
                    img[p] = base.map(|v| v + shade);
                }
            }
        }
    }
    let raw = Tensor::from_fn_chw(3, h, w, |c, y, x| img[y * w + x][c]);
    blur3(&raw).map(|v| v.clamp(0.0, 1.0)).cast()
}

/// `[1, 2, 1]/4` separable blur with clamped borders.
fn blur3(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw();
    let k = [0.25, 0.5, 0.25];
    let tmp = Tensor::from_fn_chw(c, h, w, |ci, y, xx| {
        (0..3).map(|i| k[i] * x[[ci, y, (xx + i).saturating_sub(1).min(w - 1)]]).sum::<f64>()
    });
    Tensor::from_fn_chw(c, h, w, |ci, y, xx| (0..3).map(|i| k[i] * tmp[[ci, (y + i).saturating_sub(1).min(h - 1), xx]]).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_displacement_gives_static_triplets() {
        let ds = make_synthetic_dataset::<f64>(3, 4, 16, 0.0);
        for s in &ds {
            assert_eq!(s.i0, s.i1);
            assert_eq!(s.i0, s.it);
            assert_eq!(s.flow, Some([0.0, 0.0]));
        }
    }

    #[test]
    fn middle_frame_is_half_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tex = Texture::random(&mut rng, -30.0, -30.0, 60.0, 60.0);
        let i0: Tensor<f64> = tex.render(24, 24, 0.0, 0.0);
        let it: Tensor<f64> = tex.render(24, 24, 3.0, 0.0);
        for y in 0..24 {
            for x in 3..24 {
                for c in 0..3 {
                    assert_eq!(it[[c, y, x]], i0[[c, y, x - 3]]);
                }
            }
        }
    }

    #[test]
    fn seeded_and_in_range() {
        let a = make_synthetic_dataset::<f32>(7, 3, 16, 5.0);
        assert_eq!(a, make_synthetic_dataset::<f32>(7, 3, 16, 5.0));
        for s in &a {
            assert!(s.i0.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let [vx, vy] = s.flow.unwrap();
            assert!((vx * vx + vy * vy).sqrt() <= 5.0);
            assert!((1..8).any(|j| s.t == j as f64 / 8.0));
        }
        let leaves: Tensor<f64> = dead_leaves(2, 32, 40);
        assert_eq!(leaves.shape(), &[3, 32, 40]);
        assert!(leaves.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(leaves, dead_leaves(2, 32, 40));
    }
}
