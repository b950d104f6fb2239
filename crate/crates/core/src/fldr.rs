//! Block-based linear dimensionality reduction (fLDR).
//!
//! Every colour channel of an image is cut into non-overlapping `d × d` blocks.
//! Each block, vectorised row-major, is a point in `R^{d²}`. A basis `U`
//! (`d² × k`) and mean `x̄` map a block `x` to `Uᵀ(x − x̄) ∈ R^k`, so an
//! `H × W × C` image becomes a `C·k`-channel map at `1/d` resolution.
//! Channel `c·k + j` of the compressed map holds coefficient `j` of colour
//! channel `c`.
//!
//! The basis is initialised from the principal components of a single image and
//! then trained like any other parameter; after training it need not be orthonormal.

use alloc::vec;
use alloc::vec::Vec;

use crate::eigen::symmetric_eigen;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Divisor guard for the per-site and global normalisation.
pub const NORM_EPS: f64 = 1e-8;

/// Eigenvalues below `REL_RANK_TOL · λ_max` count as zero.
const REL_RANK_TOL: f64 = 1e-12;

/// Largest covariance eigenvalue (relative to squared intensity) treated as no variation at all.
const ZERO_SPREAD_TOL: f64 = 1e-24;

/// How an initial basis was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisInit {
    /// All `d²` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Number of retained directions whose eigenvalue is numerically zero.
    pub zero_eigenvalues_kept: usize,
    /// The covariance vanished and identity columns were used instead.
    pub identity_fallback: bool,
}

impl BasisInit {
    pub fn rank_deficient(&self) -> bool {
        self.zero_eigenvalues_kept > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBasis<T> {
    d: usize,
    k: usize,
    /// `[d², k]`, projection directions as columns.
    pub u: Tensor<T>,
    /// `[d²]`
    pub mean: Tensor<T>,
    pub trainable: bool,
    pub init: Option<BasisInit>,
}

impl<T: Real> ProjectionBasis<T> {
    pub fn new(d: usize, k: usize, u: Tensor<T>, mean: Tensor<T>) -> Result<Self> {
        check_dk(d, k)?;
        if u.shape() != [d * d, k] || mean.len() != d * d {
            return Err(Error::shape(format_args!(
                "basis for d={d}, k={k} needs U [{}, {k}] and mean [{}], got {:?} and {:?}",
                d * d,
                d * d,
                u.shape(),
                mean.shape()
            )));
        }
        let mean = mean.reshape(&[d * d])?;
        Ok(Self { d, k, u, mean, trainable: true, init: None })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Compression ratio `k / d²`.
    pub fn ratio(&self) -> f64 {
        self.k as f64 / (self.d * self.d) as f64
    }

    pub fn parameter_count(&self) -> usize {
        self.d * self.d * self.k + self.d * self.d
    }

    /// `max |UᵀU − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.d * self.d;
        let u = self.u.data();
        let mut worst: f64 = 0.0;
        for a in 0..self.k {
            for b in 0..self.k {
                let dot: f64 = (0..n).map(|r| u[r * self.k + a].as_f64() * u[r * self.k + b].as_f64()).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    pub fn cast<U: Real>(&self) -> ProjectionBasis<U> {
        ProjectionBasis {
            d: self.d,
            k: self.k,
            u: self.u.cast(),
            mean: self.mean.cast(),
            trainable: self.trainable,
            init: self.init.clone(),
        }
    }
}

/// The `C·k`-channel block-coefficient map of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedImage<T> {
    /// `[C·k, H/d, W/d]`
    pub data: Tensor<T>,
    pub d: usize,
    pub k: usize,
    pub source_height: usize,
    pub source_width: usize,
}

impl<T: Real> CompressedImage<T> {
    pub fn source_channels(&self) -> usize {
        self.data.chw().0 / self.k
    }
}

fn check_dk(d: usize, k: usize) -> Result<()> {
    if d == 0 || k == 0 || k > d * d {
        return Err(Error::arg(format_args!("need 1 <= k <= d², got d={d}, k={k}")));
    }
    Ok(())
}

fn check_divisible(h: usize, w: usize, d: usize) -> Result<()> {
    for dim in [h, w] {
        if dim % d != 0 || dim == 0 {
            return Err(Error::NotDivisible { dim, block: d });
        }
    }
    Ok(())
}

/// Gathers the `d × d` blocks of one `h × w` plane as columns of a `d² × N` matrix.
fn gather_blocks<T: Real>(plane: &[T], h: usize, w: usize, d: usize, out: &mut [T]) {
    let (bh, bw) = (h / d, w / d);
    let n = bh * bw;
    for py in 0..d {
        for px in 0..d {
            let row = &mut out[(py * d + px) * n..(py * d + px + 1) * n];
            for by in 0..bh {
                let src = &plane[(by * d + py) * w..];
                for bx in 0..bw {
                    row[by * bw + bx] = src[bx * d + px];
                }
            }
        }
    }
}

/// Inverse of [`gather_blocks`], accumulating into `plane`.
fn scatter_blocks<T: Real>(cols: &[T], h: usize, w: usize, d: usize, plane: &mut [T]) {
    let (bh, bw) = (h / d, w / d);
    let n = bh * bw;
    for py in 0..d {
        for px in 0..d {
            let row = &cols[(py * d + px) * n..(py * d + px + 1) * n];
            for by in 0..bh {
                let dst = &mut plane[(by * d + py) * w..];
                for bx in 0..bw {
                    dst[bx * d + px] += row[by * bw + bx];
                }
            }
        }
    }
}

/// Principal-component basis of the blocks of `image` (`[C, H, W]`, all channels
/// pooled). Directions are ordered by descending eigenvalue and each column's
/// largest-magnitude entry is made positive.
pub fn init_basis_from_image<T: Real>(image: &Tensor<T>, d: usize, k: usize) -> Result<ProjectionBasis<f64>> {
    check_dk(d, k)?;
    let (c, h, w) = image.check_chw("init_basis_from_image")?;
    check_divisible(h, w, d)?;
    let dim = d * d;
    let per = (h / d) * (w / d);
    let n = c * per;

    let mut x = vec![0.0f64; dim * n];
    let img64: Tensor<f64> = image.cast();
    let mut buf = vec![0.0f64; dim * per];
    for ci in 0..c {
        gather_blocks(img64.channel(ci), h, w, d, &mut buf);
        for r in 0..dim {
            x[r * n + ci * per..r * n + (ci + 1) * per].copy_from_slice(&buf[r * per..(r + 1) * per]);
        }
    }
    let mut mean = vec![0.0f64; dim];
    for r in 0..dim {
        mean[r] = x[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64;
        for v in &mut x[r * n..(r + 1) * n] {
            *v -= mean[r];
        }
    }
    let mut cov = vec![0.0f64; dim * dim];
    f64::gemm(dim, n, dim, &x, false, &x, true, 0.0, &mut cov);
    let denom = (n.max(2) - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }
    // Enforce exact symmetry against accumulation-order noise.
    for r in 0..dim {
        for cc in r + 1..dim {
            let s = 0.5 * (cov[r * dim + cc] + cov[cc * dim + r]);
            cov[r * dim + cc] = s;
            cov[cc * dim + r] = s;
        }
    }

    let eig = symmetric_eigen(&cov, dim);
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    // Round-off in the mean leaves a vanishing but positive spread on constant images.
    let scale2 = 1.0 + mean.iter().fold(0.0f64, |m, v| m.max(v * v));
    let identity_fallback = !(lmax > ZERO_SPREAD_TOL * scale2);
    let mut u = vec![0.0f64; dim * k];
    for j in 0..k {
        let col: Vec<f64> = if identity_fallback {
            (0..dim).map(|r| if r == j { 1.0 } else { 0.0 }).collect()
        } else {
            eig.vector(j)
        };
        let mut arg = 0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[arg].abs() {
                arg = r;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            u[r * k + j] = sign * col[r];
        }
    }
    let zero_eigenvalues_kept = if identity_fallback {
        k
    } else {
        eig.values[..k].iter().filter(|&&l| l <= REL_RANK_TOL * lmax).count()
    };
    let mut basis = ProjectionBasis::new(d, k, Tensor::from_vec(&[dim, k], u)?, Tensor::from_vec(&[dim], mean)?)?;
    basis.init = Some(BasisInit { eigenvalues: eig.values, zero_eigenvalues_kept, identity_fallback });
    Ok(basis)
}

/// Projects `[C, H, W]` onto `[C·k, H/d, W/d]`.
pub(crate) fn project_raw<T: Real>(img: &Tensor<T>, u: &Tensor<T>, mean: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let (c, h, w) = img.check_chw("project")?;
    check_divisible(h, w, d)?;
    let dim = d * d;
    if !u.len().is_multiple_of(dim) || u.shape()[0] != dim || mean.len() != dim {
        return Err(Error::shape(format_args!("basis {:?}/{:?} does not fit d={d}", u.shape(), mean.shape())));
    }
    let k = u.len() / dim;
    let (bh, bw) = (h / d, w / d);
    let n = bh * bw;
    let mut out = Tensor::zeros(&[c * k, bh, bw]);
    let mut blocks = vec![T::zero(); dim * n];
    for ci in 0..c {
        gather_blocks(img.channel(ci), h, w, d, &mut blocks);
        for r in 0..dim {
            let m = mean.data()[r];
            for v in &mut blocks[r * n..(r + 1) * n] {
                *v -= m;
            }
        }
        T::gemm(k, dim, n, u.data(), true, &blocks, false, T::zero(), &mut out.data_mut()[ci * k * n..(ci + 1) * k * n]);
    }
    Ok(out)
}

/// Adjoint of [`project_raw`]: `(d image, d U, d mean)`.
pub(crate) fn project_raw_grad<T: Real>(
    img: &Tensor<T>,
    u: &Tensor<T>,
    mean: &Tensor<T>,
    d: usize,
    g: &Tensor<T>,
    want_img: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = img.chw();
    let dim = d * d;
    let k = u.len() / dim;
    let n = (h / d) * (w / d);
    let mut du = Tensor::zeros(u.shape());
    let mut dmean = Tensor::zeros(mean.shape());
    let mut dimg = if want_img { Some(Tensor::zeros(img.shape())) } else { None };
    let mut blocks = vec![T::zero(); dim * n];
    let mut back = vec![T::zero(); dim * n];
    for ci in 0..c {
        let gc = &g.data()[ci * k * n..(ci + 1) * k * n];
        gather_blocks(img.channel(ci), h, w, d, &mut blocks);
        for r in 0..dim {
            let m = mean.data()[r];
            for v in &mut blocks[r * n..(r + 1) * n] {
                *v -= m;
            }
        }
        T::gemm(dim, n, k, &blocks, false, gc, true, T::one(), du.data_mut());
        // U · G: gradient of the centred blocks.
        T::gemm(dim, k, n, u.data(), false, gc, false, T::zero(), &mut back);
        for r in 0..dim {
            dmean.data_mut()[r] -= back[r * n..(r + 1) * n].iter().copied().sum();
        }
        if let Some(di) = dimg.as_mut() {
            scatter_blocks(&back, h, w, d, di.channel_mut(ci));
        }
    }
    (dimg, du, dmean)
}

pub fn project<T: Real>(image: &Tensor<T>, basis: &ProjectionBasis<T>) -> Result<CompressedImage<T>> {
    let (_, h, w) = image.check_chw("project")?;
    let data = project_raw(image, &basis.u, &basis.mean, basis.d)?;
    Ok(CompressedImage { data, d: basis.d, k: basis.k, source_height: h, source_width: w })
}

/// Maps every coefficient vector `y` back to `U·y + x̄`. Values are not clipped.
pub fn reconstruct<T: Real>(compressed: &CompressedImage<T>, basis: &ProjectionBasis<T>) -> Result<Tensor<T>> {
    if compressed.d != basis.d || compressed.k != basis.k {
        return Err(Error::shape(format_args!(
            "compressed (d={}, k={}) does not match basis (d={}, k={})",
            compressed.d, compressed.k, basis.d, basis.k
        )));
    }
    let (ck, bh, bw) = compressed.data.check_chw("reconstruct")?;
    let (d, k) = (basis.d, basis.k);
    if ck % k != 0 || bh * d != compressed.source_height || bw * d != compressed.source_width {
        return Err(Error::shape("compressed tensor inconsistent with its source size"));
    }
    let c = ck / k;
    let dim = d * d;
    let n = bh * bw;
    let (h, w) = (compressed.source_height, compressed.source_width);
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut cols = vec![T::zero(); dim * n];
    for ci in 0..c {
        let y = &compressed.data.data()[ci * k * n..(ci + 1) * k * n];
        T::gemm(dim, k, n, basis.u.data(), false, y, false, T::zero(), &mut cols);
        for r in 0..dim {
            let m = basis.mean.data()[r];
            for v in &mut cols[r * n..(r + 1) * n] {
                *v += m;
            }
        }
        scatter_blocks(&cols, h, w, d, out.channel_mut(ci));
    }
    Ok(out)
}

pub(crate) fn normalize_sites_raw<T: Real>(x: &Tensor<T>, k: usize, eps: T) -> Tensor<T> {
    let (ck, h, w) = x.chw();
    let plane = h * w;
    let kf = T::lit(k as f64);
    let mut out = x.clone();
    for grp in 0..ck / k {
        for p in 0..plane {
            let m = (0..k).map(|j| x.data()[(grp * k + j) * plane + p].abs()).sum::<T>() / kf;
            let inv = T::one() / m.max(eps);
            for j in 0..k {
                out.data_mut()[(grp * k + j) * plane + p] *= inv;
            }
        }
    }
    out
}

pub(crate) fn normalize_sites_grad<T: Real>(x: &Tensor<T>, k: usize, eps: T, g: &Tensor<T>) -> Tensor<T> {
    let (ck, h, w) = x.chw();
    let plane = h * w;
    let kf = T::lit(k as f64);
    let mut dx = Tensor::zeros(x.shape());
    for grp in 0..ck / k {
        for p in 0..plane {
            let at = |j: usize| (grp * k + j) * plane + p;
            let m = (0..k).map(|j| x.data()[at(j)].abs()).sum::<T>() / kf;
            if m > eps {
                let dot: T = (0..k).map(|j| g.data()[at(j)] * x.data()[at(j)]).sum();
                for j in 0..k {
                    let xj = x.data()[at(j)];
                    let sign = if xj > T::zero() { T::one() } else if xj < T::zero() { -T::one() } else { T::zero() };
                    dx.data_mut()[at(j)] = g.data()[at(j)] / m - sign * dot / (kf * m * m);
                }
            } else {
                for j in 0..k {
                    dx.data_mut()[at(j)] = g.data()[at(j)] / eps;
                }
            }
        }
    }
    dx
}

/// Network-input normalisation: every site's `k` coefficients (per colour
/// channel) are divided by their mean absolute value, then the whole map is
/// divided by its largest magnitude so it lies in `[-1, 1]`.
pub fn normalize_for_network<T: Real>(compressed: &CompressedImage<T>) -> CompressedImage<T> {
    let eps = T::lit(NORM_EPS);
    let sites = normalize_sites_raw(&compressed.data, compressed.k, eps);
    let g = sites.max_abs().max(eps);
    CompressedImage { data: sites.scale(T::one() / g), ..compressed.clone() }
}
