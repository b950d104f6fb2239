//! Image quality metrics.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// MSE below which [`PSNR_CAP`] is reported.
pub const PSNR_CAP_MSE: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let dims = a.check_chw("metric input")?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format_args!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(dims)
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len().max(1) as f64)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_CAP_MSE {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over the
/// valid region, averaged over channels. Images smaller than the window use
/// the largest odd window that fits.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = check(a, b)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("ssim of an empty image"));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size);
    let mut total = 0.0;
    for ci in 0..c {
        let x: Vec<f64> = a.channel(ci).iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.channel(ci).iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            s += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn ssim_identity_and_range() {
        let a = Tensor::from_fn_chw(3, 20, 24, |c, y, x| ((c + x * y) as f64 * 0.13).sin() * 0.5 + 0.5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..0.5).contains(&s));
        let tiny = Tensor::from_fn_chw(1, 4, 6, |_, y, x| (y * 6 + x) as f64 / 24.0);
        assert!((ssim(&tiny, &tiny).unwrap() - 1.0).abs() < 1e-12);
    }
}
