//! Forward and adjoint kernels for the dense layers: convolution, resizing, pooling.
//!
//! Every function here is pure and serial so results are bit-stable across runs.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{Real, View, ViewMut};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution over a `[cin, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (ho, wo)
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output rows per im2col chunk, bounding the column buffer to ~256K elements.
    fn rows_per_chunk(&self) -> usize {
        let (ho, wo) = self.out_hw();
        let per_row = self.k() * wo;
        (256000 / per_row.max(1)).clamp(1, ho.max(1))
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `0..w`.
#[inline]
fn valid_span(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    // Smallest ox with ox·s + off >= 0.
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    // Largest ox with ox·s + off <= w − 1, plus one.
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

/// Writes the `K × (rows·wo)` receptive-field matrix of output rows `r0..r0+rows`
/// into `cols`, resizing it to fit.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, r0: usize, rows: usize, cols: &mut Vec<T>) {
    let (_, wo) = g.out_hw();
    let n = rows * wo;
    let zero = T::zero();
    cols.resize(g.cin * g.kh * g.kw * n, zero);
    let mut chunks = cols.chunks_exact_mut(n);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = chunks.next().expect("cols sized above");
                let (lo, hi) = valid_span(g, kx, wo);
                for (oy, out) in dst.chunks_exact_mut(wo).enumerate() {
                    let iy = ((r0 + oy) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(zero);
                    out[hi..].fill(zero);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (i, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, r0: usize, rows: usize, dx: &mut [T]) {
    let (_, wo) = g.out_hw();
    let n = rows * wo;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_span(g, kx, wo);
                let src = &cols[row * n..(row + 1) * n];
                row += 1;
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..rows {
                    let iy = ((r0 + oy) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + (hi - lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in s.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded copy of a stride-1 input. Each channel plane holds `hp + 1` rows
/// of `wp` columns so every tap can read `ho·wp` contiguous values.
struct Padded<T> {
    data: Vec<T>,
    wp: usize,
    plane: usize,
}

impl<T: Real> Padded<T> {
    fn new(x: &[T], g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let plane = (hp + 1) * wp;
        let mut data = vec![T::zero(); g.cin * plane];
        for c in 0..g.cin {
            for y in 0..g.h {
                let dst = c * plane + (y + g.pad) * wp + g.pad;
                data[dst..dst + g.w].copy_from_slice(&x[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w]);
            }
        }
        Padded { data, wp, plane }
    }
}

/// Stride-1 convolution as one strided product per kernel tap over the padded
/// input. Output columns `wo..wp` of `wide` are scratch.
fn conv2d_stride1<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, _) = g.out_hw();
    let xp = Padded::new(x, g);
    let n = ho * xp.wp;
    let taps = g.kh * g.kw;
    let mut wide = vec![T::zero(); g.cout * n];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            let a = View { data: weight, offset: t, row_stride: g.cin * taps, col_stride: taps };
            let b = View { data: &xp.data, offset: ky * xp.wp + kx, row_stride: xp.plane, col_stride: 1 };
            let c = ViewMut { data: &mut wide, offset: 0, row_stride: n, col_stride: 1 };
            let beta = if t == 0 { T::zero() } else { T::one() };
            T::gemm_view(g.cout, g.cin, n, a, b, beta, c);
        }
    }
    wide
}

pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let g = geom(x, weight, stride, pad);
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let k = g.k();
    if g.stride == 1 && use_padded(&g) {
        let wide = conv2d_stride1(x.data(), weight.data(), &g);
        let wp = g.w + 2 * g.pad;
        let mut out = Vec::with_capacity(g.cout * npix);
        for co in 0..g.cout {
            let b = bias.data()[co];
            for y in 0..ho {
                out.extend(wide[(co * ho + y) * wp..(co * ho + y) * wp + wo].iter().map(|&v| v + b));
            }
        }
        return Tensor::from_vec(&[g.cout, ho, wo], out).expect("conv output shape");
    }
    let mut out = vec![T::zero(); g.cout * npix];
    let chunk = g.rows_per_chunk();
    let mut cols = Vec::with_capacity(k * chunk * wo);
    let mut tmp = if chunk < ho { vec![T::zero(); g.cout * chunk * wo] } else { Vec::new() };
    let mut r0 = 0;
    while r0 < ho {
        let rows = chunk.min(ho - r0);
        let n = rows * wo;
        im2col(x.data(), &g, r0, rows, &mut cols);
        if rows == ho {
            T::gemm(g.cout, k, n, weight.data(), false, &cols[..k * n], false, T::zero(), &mut out);
        } else {
            T::gemm(g.cout, k, n, weight.data(), false, &cols[..k * n], false, T::zero(), &mut tmp[..g.cout * n]);
            for co in 0..g.cout {
                out[co * npix + r0 * wo..co * npix + r0 * wo + n].copy_from_slice(&tmp[co * n..(co + 1) * n]);
            }
        }
        r0 += rows;
    }
    for (co, plane) in out.chunks_mut(npix).enumerate() {
        let b = bias.data()[co];
        for v in plane {
            *v += b;
        }
    }
    Tensor::from_vec(&[g.cout, ho, wo], out).expect("conv output shape")
}

/// Gradients of [`conv2d`] with respect to input, weight and bias, given the output gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = geom(x, weight, stride, pad);
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let k = g.k();
    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    for (co, plane) in gy.data().chunks(npix).enumerate() {
        db[co] = plane.iter().copied().sum();
    }
    let mut dx = if want_dx { Some(vec![T::zero(); x.len()]) } else { None };
    let chunk = g.rows_per_chunk();
    let mut cols = Vec::with_capacity(k * chunk * wo);
    let mut gchunk = if chunk < ho { vec![T::zero(); g.cout * chunk * wo] } else { Vec::new() };
    let mut r0 = 0;
    while r0 < ho {
        let rows = chunk.min(ho - r0);
        let n = rows * wo;
        let gyc: &[T] = if rows == ho {
            gy.data()
        } else {
            for co in 0..g.cout {
                gchunk[co * n..(co + 1) * n]
                    .copy_from_slice(&gy.data()[co * npix + r0 * wo..co * npix + r0 * wo + n]);
            }
            &gchunk[..g.cout * n]
        };
        im2col(x.data(), &g, r0, rows, &mut cols);
        T::gemm(g.cout, n, k, gyc, false, &cols[..k * n], true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            T::gemm(k, g.cout, n, weight.data(), true, gyc, false, T::zero(), &mut cols[..k * n]);
            col2im(&cols[..k * n], &g, r0, rows, dx);
        }
        r0 += rows;
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
        Tensor::from_vec(weight.shape(), dw).unwrap(),
        Tensor::from_vec(&[g.cout], db).unwrap(),
    )
}

/// Whether the forward pass uses the padded per-tap path. Its products have
/// inner size `cin`, so thin inputs stay on the im2col path.
fn use_padded(g: &ConvGeom) -> bool {
    g.cin >= 8 && g.kw <= g.w + 2 * g.pad
}

fn geom<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> ConvGeom {
    let (cin, h, w) = x.chw();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [out, in, kh, kw]");
    assert_eq!(ws[1], cin, "conv input has {} channels, weight expects {}", cin, ws[1]);
    ConvGeom { cin, cout: ws[0], kh: ws[2], kw: ws[3], stride, pad, h, w }
}

/// Source coordinate and interpolation taps for half-pixel-centred bilinear resizing.
#[inline]
fn taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize of every channel to `oh × ow` (half-pixel centres, edge clamped).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let ty: Vec<_> = (0..oh).map(|y| taps(y, h, oh)).collect();
    let tx: Vec<_> = (0..ow).map(|x| taps(x, w, ow)).collect();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[y * ow + xx] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Real>(gy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, oh, ow) = gy.chw();
    let ty: Vec<_> = (0..oh).map(|y| taps(y, h, oh)).collect();
    let tx: Vec<_> = (0..ow).map(|x| taps(x, w, ow)).collect();
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let g = gy.channel(ci);
        let d = dx.channel_mut(ci);
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let v = g[y * ow + xx];
                d[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                d[y0 * w + x1] += v * (T::one() - ly) * lx;
                d[y1 * w + x0] += v * ly * (T::one() - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    Tensor::from_fn_chw(c, 2 * h, 2 * w, |ci, y, xx| x[[ci, y / 2, xx / 2]])
}

pub fn upsample_nearest2_backward<T: Real>(gy: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = gy.chw();
    let mut dx = Tensor::zeros(&[c, h2 / 2, w2 / 2]);
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[ci, y / 2, x / 2]] += gy[[ci, y, x]];
            }
        }
    }
    dx
}

/// Mean over non-overlapping `f × f` cells. For `f = 2` this coincides with
/// half-pixel-centred bilinear downscaling by two.
pub fn area_downscale<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert!(h % f == 0 && w % f == 0, "area_downscale: {h}x{w} not divisible by {f}");
    let inv = T::lit(1.0 / (f * f) as f64);
    Tensor::from_fn_chw(c, h / f, w / f, |ci, y, xx| {
        let mut s = T::zero();
        for dy in 0..f {
            for dx in 0..f {
                s += x[[ci, y * f + dy, xx * f + dx]];
            }
        }
        s * inv
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, h, wd) = x.chw();
        let s = w.shape();
        let (cout, kh, kw) = (s[0], s[2], s[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn_chw(cout, ho, wo, |co, oy, ox| {
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(cin, cout, k, stride, pad, h, w) in &[(3, 4, 3, 1, 1, 5, 7), (2, 3, 4, 2, 1, 8, 6), (1, 2, 3, 1, 0, 4, 4), (8, 5, 3, 1, 1, 6, 5), (9, 3, 3, 1, 0, 4, 7), (8, 2, 1, 1, 0, 3, 3)] {
            let x = Tensor::from_vec(&[cin, h, w], pseudo(cin * h * w, 1)).unwrap();
            let wt = Tensor::from_vec(&[cout, cin, k, k], pseudo(cout * cin * k * k, 2)).unwrap();
            let b = Tensor::from_vec(&[cout], pseudo(cout, 3)).unwrap();
            let fast = conv2d(&x, &wt, &b, stride, pad);
            let slow = naive_conv(&x, &wt, &b, stride, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so its gradients follow from the adjoint identity.
        for &(cin, cout, k, stride, pad, h, w) in &[(3, 2, 4, 2, 1, 6, 6), (9, 8, 3, 1, 1, 5, 7), (8, 9, 3, 1, 0, 6, 4), (2, 8, 1, 1, 0, 3, 5)] {
            let x = Tensor::from_vec(&[cin, h, w], pseudo(cin * h * w, 4)).unwrap();
            let wt = Tensor::from_vec(&[cout, cin, k, k], pseudo(cout * cin * k * k, 5)).unwrap();
            let zero_b = Tensor::zeros(&[cout]);
            let y = conv2d(&x, &wt, &zero_b, stride, pad);
            let gy = Tensor::from_vec(y.shape(), pseudo(y.len(), 6)).unwrap();
            let (dx, dw, db) = conv2d_backward(&x, &wt, stride, pad, &gy, true);
            let dx = dx.unwrap();
            assert_eq!(dx.shape(), x.shape());
            let inner: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            assert!((inner - via_x).abs() < 1e-10);
            assert!((inner - via_w).abs() < 1e-10);
            assert!((db.sum() - gy.sum()).abs() < 1e-12);
            // Each input coordinate separately: perturbing x[i] by 1 moves <conv(x), g> by dx[i].
            for i in [0, x.len() / 2, x.len() - 1] {
                let mut xe = Tensor::<f64>::zeros(x.shape());
                xe.data_mut()[i] = 1.0;
                let ye = conv2d(&xe, &wt, &zero_b, stride, pad);
                let d: f64 = ye.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                assert!((d - dx.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_adjoint_and_constants() {
        let x = Tensor::from_vec(&[2, 3, 4], pseudo(24, 7)).unwrap();
        let y = resize_bilinear(&x, 7, 9);
        let gy = Tensor::from_vec(y.shape(), pseudo(y.len(), 8)).unwrap();
        let dx = resize_bilinear_backward(&gy, 3, 4);
        let a: f64 = y.data().iter().zip(gy.data()).map(|(p, q)| p * q).sum();
        let b: f64 = dx.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-12);

        let c = Tensor::<f64>::full(&[1, 3, 3], 2.5);
        assert!(resize_bilinear(&c, 12, 12).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn area_downscale_by_two_equals_bilinear_half() {
        let x = Tensor::from_vec(&[1, 4, 6], pseudo(24, 9)).unwrap();
        let a = area_downscale(&x, 2);
        let b = resize_bilinear(&x, 2, 3);
        assert!(a.max_abs_diff(&b) < 1e-15);
    }
}
