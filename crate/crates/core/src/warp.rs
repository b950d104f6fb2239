//! Resampling images under a flow field.
//!
//! Flow tensors are `[2, h, w]`: channel 0 is the horizontal displacement,
//! channel 1 the vertical one, both in pixels of the tensor's own grid.
//!
//! * [`backward_warp`] samples `source` at `p + flow(p)` with bilinear
//!   interpolation; sample positions are clamped to the frame.
//! * [`forward_splat_softmax`] scatters every source pixel to `p + flow(p)`
//!   with bilinear weights scaled by `exp(Z(p))` and normalises by the
//!   accumulated weight. Targets that receive no mass are holes (zero-filled).
//!   Splats that land outside the frame are dropped.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Accumulated splat weight below which a target pixel is a hole.
pub const HOLE_EPS: f64 = 1e-7;

/// Log-domain importance `Z` for softmax splatting plus the scale `alpha` that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap<T> {
    pub z: Tensor<T>,
    pub alpha: T,
}

#[derive(Clone, Debug)]
pub struct SplatResult<T> {
    pub image: Tensor<T>,
    /// `true` where no source pixel landed, row-major `h × w`.
    pub holes: Vec<bool>,
    /// Accumulated `exp(Z)` weight per target pixel, needed by the adjoint.
    pub(crate) weight: Vec<T>,
}

impl<T: Real> SplatResult<T> {
    pub fn hole_count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }
}

fn check_pair<T: Real>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = source.check_chw("warp source")?;
    let (fc, fh, fw) = flow.check_chw("warp flow")?;
    if fc != 2 || (fh, fw) != (h, w) {
        return Err(Error::shape(format_args!(
            "flow {:?} does not match source {:?}",
            flow.shape(),
            source.shape()
        )));
    }
    Ok((c, h, w))
}

/// Clamped sample position along one axis: `(i0, i1, frac, inside)`.
#[inline(always)]
fn axis<T: Real>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((len - 1) as f64);
    let inside = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    // `p` is non-negative, so truncation is the floor.
    let i0 = p.to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - T::lit(i0 as f64), inside)
}

pub fn backward_warp<T: Real>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_pair(source, flow)?;
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let src = source.data();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (x0, x1, ax, _) = axis(T::lit(x as f64) + fx[i], w);
            let (y0, y1, ay, _) = axis(T::lit(y as f64) + fy[i], h);
            let (w00, w01) = ((T::one() - ay) * (T::one() - ax), (T::one() - ay) * ax);
            let (w10, w11) = (ay * (T::one() - ax), ay * ax);
            let (p00, p01, p10, p11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            for ci in 0..c {
                let s = &src[ci * hw..(ci + 1) * hw];
                out[ci * hw + i] = w00 * s[p00] + w01 * s[p01] + w10 * s[p10] + w11 * s[p11];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Adjoint of [`backward_warp`]: returns `(d source, d flow)`.
pub(crate) fn backward_warp_grad<T: Real>(source: &Tensor<T>, flow: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = source.chw();
    let hw = h * w;
    let mut dsrc = vec![T::zero(); c * hw];
    let mut dflow = vec![T::zero(); 2 * hw];
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let (src, go) = (source.data(), gout.data());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (x0, x1, ax, inx) = axis(T::lit(x as f64) + fx[i], w);
            let (y0, y1, ay, iny) = axis(T::lit(y as f64) + fy[i], h);
            let (w00, w01) = ((T::one() - ay) * (T::one() - ax), (T::one() - ay) * ax);
            let (w10, w11) = (ay * (T::one() - ax), ay * ax);
            let (p00, p01, p10, p11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            let mut gx = T::zero();
            let mut gy = T::zero();
            for ci in 0..c {
                let g = go[ci * hw + i];
                if g == T::zero() {
                    continue;
                }
                let s = &src[ci * hw..(ci + 1) * hw];
                let (s00, s01, s10, s11) = (s[p00], s[p01], s[p10], s[p11]);
                let d = &mut dsrc[ci * hw..(ci + 1) * hw];
                d[p00] += g * w00;
                d[p01] += g * w01;
                d[p10] += g * w10;
                d[p11] += g * w11;
                gx += g * ((T::one() - ay) * (s01 - s00) + ay * (s11 - s10));
                gy += g * ((T::one() - ax) * (s10 - s00) + ax * (s11 - s01));
            }
            if inx {
                dflow[i] = gx;
            }
            if iny {
                dflow[hw + i] = gy;
            }
        }
    }
    (Tensor::from_vec(&[c, h, w], dsrc).unwrap(), Tensor::from_vec(&[2, h, w], dflow).unwrap())
}

/// Integer floor and fractional part of a finite coordinate.
#[inline]
fn floor_split<T: Real>(q: T) -> (isize, T) {
    let Some(mut i) = q.to_isize() else {
        return (isize::MIN / 2, T::zero());
    };
    if T::lit(i as f64) > q {
        i -= 1;
    }
    (i, q - T::lit(i as f64))
}

/// The (up to) four in-frame bilinear targets of a splat at `(qx, qy)`:
/// `(target index, weight, d weight/d qx, d weight/d qy)`.
#[inline(always)]
fn splat_taps<T: Real>(qx: T, qy: T, h: usize, w: usize, out: &mut [(usize, T, T, T); 4]) -> usize {
    if !qx.is_finite() || !qy.is_finite() {
        return 0;
    }
    let (ix, ax) = floor_split(qx);
    let (iy, ay) = floor_split(qy);
    let mut n = 0;
    for (dy, wy, dwy) in [(0isize, T::one() - ay, -T::one()), (1, ay, T::one())] {
        for (dx, wx, dwx) in [(0isize, T::one() - ax, -T::one()), (1, ax, T::one())] {
            let (tx, ty) = (ix + dx, iy + dy);
            if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                continue;
            }
            out[n] = (ty as usize * w + tx as usize, wx * wy, dwx * wy, wx * dwy);
            n += 1;
        }
    }
    n
}

fn exp_importance<T: Real>(z: Option<&Tensor<T>>, n: usize) -> Vec<T> {
    match z {
        None => vec![T::one(); n],
        Some(z) => {
            // Softmax is shift invariant; subtracting the max keeps exp() bounded.
            let zmax = z.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let zmax = if zmax.is_finite() { zmax } else { T::zero() };
            z.data().iter().map(|&v| (v - zmax).exp()).collect()
        }
    }
}

/// Softmax splatting of `source` along `flow` with importance `z` (`[1, h, w]` or `[h, w]`
/// worth of values; `None` means uniform importance).
pub fn forward_splat_softmax<T: Real>(
    source: &Tensor<T>,
    flow: &Tensor<T>,
    z: Option<&Tensor<T>>,
) -> Result<SplatResult<T>> {
    let (c, h, w) = check_pair(source, flow)?;
    if let Some(z) = z {
        if z.len() != h * w {
            return Err(Error::shape(format_args!("importance {:?} does not match {}x{}", z.shape(), h, w)));
        }
    }
    let hw = h * w;
    let e = exp_importance(z, hw);
    let mut acc = Tensor::zeros(&[c, h, w]);
    let mut weight = vec![T::zero(); hw];
    let mut taps = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let src = source.data();
    let dst = acc.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let n = splat_taps(T::lit(x as f64) + fx[p], T::lit(y as f64) + fy[p], h, w, &mut taps);
            for &(t, bw, _, _) in &taps[..n] {
                let m = bw * e[p];
                weight[t] += m;
                for ci in 0..c {
                    dst[ci * hw + t] += m * src[ci * hw + p];
                }
            }
        }
    }
    let eps = T::lit(HOLE_EPS);
    let holes: Vec<bool> = weight.iter().map(|&m| !(m > eps)).collect();
    for ci in 0..c {
        let plane = acc.channel_mut(ci);
        for (i, v) in plane.iter_mut().enumerate() {
            *v = if holes[i] { T::zero() } else { *v / weight[i] };
        }
    }
    Ok(SplatResult { image: acc, holes, weight })
}

/// Adjoint of [`forward_splat_softmax`]: `(d source, d flow, d z)`.
pub(crate) fn forward_splat_grad<T: Real>(
    source: &Tensor<T>,
    flow: &Tensor<T>,
    z: Option<&Tensor<T>>,
    fwd: &SplatResult<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (c, h, w) = source.chw();
    let e = exp_importance(z, h * w);
    // Gradients with respect to the accumulated numerator (per channel) and weight.
    let mut d_num = Tensor::zeros(&[c, h, w]);
    let mut d_den = vec![T::zero(); h * w];
    for t in 0..h * w {
        if fwd.holes[t] {
            continue;
        }
        let inv = T::one() / fwd.weight[t];
        let mut s = T::zero();
        for ci in 0..c {
            let g = gout.channel(ci)[t];
            d_num.channel_mut(ci)[t] = g * inv;
            s += g * fwd.image.channel(ci)[t];
        }
        d_den[t] = -s * inv;
    }
    let mut dsrc = Tensor::zeros(&[c, h, w]);
    let mut dflow = Tensor::zeros(&[2, h, w]);
    let mut dz = z.map(|_| Tensor::zeros(&[1, h, w]));
    let mut taps = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let hw = h * w;
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let (src, dnum) = (source.data(), d_num.data());
    let ds = dsrc.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let n = splat_taps(T::lit(x as f64) + fx[p], T::lit(y as f64) + fy[p], h, w, &mut taps);
            let mut de = T::zero();
            let mut gfx = T::zero();
            let mut gfy = T::zero();
            for &(t, bw, dbx, dby) in &taps[..n] {
                // d loss / d (bilinear weight · e) for this tap
                let mut dm = d_den[t];
                let be = bw * e[p];
                for ci in 0..c {
                    let dn = dnum[ci * hw + t];
                    dm += src[ci * hw + p] * dn;
                    ds[ci * hw + p] += be * dn;
                }
                de += bw * dm;
                gfx += dbx * e[p] * dm;
                gfy += dby * e[p] * dm;
            }
            dflow.channel_mut(0)[p] = gfx;
            dflow.channel_mut(1)[p] = gfy;
            if let Some(dz) = dz.as_mut() {
                dz.data_mut()[p] = de * e[p];
            }
        }
    }
    (dsrc, dflow, dz)
}

/// Importance from brightness constancy: `Z = -alpha · mean_c |I0 - backward_warp(I1, F01)|`.
/// Pixels whose flow explains the second frame poorly get low importance.
pub fn compute_importance<T: Real>(
    i0: &Tensor<T>,
    i1: &Tensor<T>,
    flow01: &Tensor<T>,
    alpha: T,
) -> Result<ImportanceMap<T>> {
    let (c, h, w) = i0.check_chw("importance")?;
    if i1.shape() != i0.shape() {
        return Err(Error::shape("importance: image shapes differ"));
    }
    let warped = backward_warp(i1, flow01)?;
    let inv_c = T::lit(1.0 / c as f64);
    let z = Tensor::from_fn_chw(1, h, w, |_, y, x| {
        let mut s = T::zero();
        for ci in 0..c {
            s += (i0[[ci, y, x]] - warped[[ci, y, x]]).abs();
        }
        -alpha * s * inv_c
    });
    Ok(ImportanceMap { z, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn_chw(c, h, w, |ci, y, x| (ci * 100 + y * w + x) as f64 * 0.01)
    }

    fn const_flow(h: usize, w: usize, fx: f64, fy: f64) -> Tensor<f64> {
        Tensor::from_fn_chw(2, h, w, |c, _, _| if c == 0 { fx } else { fy })
    }

    #[test]
    fn zero_flow_is_identity_for_both_warps() {
        let img = ramp(3, 5, 6);
        let f = Tensor::zeros(&[2, 5, 6]);
        assert_eq!(backward_warp(&img, &f).unwrap(), img);
        let s = forward_splat_softmax(&img, &f, None).unwrap();
        assert_eq!(s.image, img);
        assert_eq!(s.hole_count(), 0);
    }

    #[test]
    fn backward_warp_integer_shift_clamps_left_edge() {
        let img = ramp(1, 4, 8);
        let out = backward_warp(&img, &const_flow(4, 8, -3.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let src = usize::saturating_sub(x, 3);
                assert_eq!(out[[0, y, x]], img[[0, y, src]]);
            }
        }
    }

    #[test]
    fn splat_integer_shift_leaves_trailing_hole() {
        // Content moves right by 2; the two leftmost columns receive nothing.
        let img = ramp(2, 3, 7);
        let s = forward_splat_softmax(&img, &const_flow(3, 7, 2.0, 0.0), None).unwrap();
        for y in 0..3 {
            for x in 0..7 {
                let hole = s.holes[y * 7 + x];
                assert_eq!(hole, x < 2);
                if !hole {
                    assert!((s.image[[1, y, x]] - img[[1, y, x - 2]]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(s.hole_count(), 6);
    }

    #[test]
    fn splat_collision_uses_softmax_weights() {
        // Pixel (0,0) moves onto (0,1); pixel (0,1) stays. Importances 0 and ln 3.
        let img = Tensor::from_vec(&[1, 1, 2], vec![1.0, 5.0]).unwrap();
        let flow = Tensor::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let z = Tensor::from_vec(&[1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let s = forward_splat_softmax(&img, &flow, Some(&z)).unwrap();
        assert!(s.holes[0]);
        assert!((s.image[[0, 0, 1]] - (1.0 * 1.0 + 3.0 * 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn importance_examples() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.25);
        let b = Tensor::<f64>::full(&[3, 4, 4], 0.75);
        let zero = Tensor::zeros(&[2, 4, 4]);
        let z = compute_importance(&a, &b, &zero, 2.0).unwrap();
        assert!(z.z.data().iter().all(|&v| (v + 1.0).abs() < 1e-15));
        let z0 = compute_importance(&a, &b, &zero, 0.0).unwrap();
        assert!(z0.z.data().iter().all(|&v| v == 0.0));
        let same = compute_importance(&a, &a, &zero, 5.0).unwrap();
        assert!(same.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let img = ramp(3, 4, 4);
        assert!(backward_warp(&img, &Tensor::zeros(&[2, 4, 5])).is_err());
        assert!(forward_splat_softmax(&img, &Tensor::zeros(&[1, 4, 4]), None).is_err());
        assert!(forward_splat_softmax(&img, &Tensor::zeros(&[2, 4, 4]), Some(&Tensor::zeros(&[1, 3, 4]))).is_err());
    }
}
