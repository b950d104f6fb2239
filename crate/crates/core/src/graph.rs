//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its value. Calling
//! [`Graph::backward`] walks the nodes in reverse creation order and returns the
//! gradient of a scalar node with respect to every node that requires one.
//! Parameters enter as [`Graph::param`] leaves; reusing the same leaf in several
//! places (weight sharing) accumulates its gradient automatically.

use alloc::vec;
use alloc::vec::Vec;

use crate::fldr;
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// `x · s` with `s` a one-element tensor.
    MulScalar(Var, Var),
    /// `[c, h, w] ⊙ [1, h, w]`
    MulChannel(Var, Var),
    /// `[c, h, w] / max([1, h, w], eps)`
    DivChannel(Var, Var, T),
    MulConst(Var, Tensor<T>),
    Abs(Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    /// Mean over the pixels (all channels) where `mask` is set.
    MaskedMean(Var, Vec<bool>),
    MeanChannels(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Conv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    UpNearest2(Var),
    Resize(Var),
    AreaDown(Var, usize),
    BackWarp(Var, Var),
    Splat { src: Var, flow: Var, z: Option<Var>, fwd: warp::SplatResult<T> },
    Project { img: Var, u: Var, mean: Var, d: usize },
    NormSites(Var, usize, T),
    NormGlobal(Var, T),
    Softmax(Var),
    DiffX(Var),
    DiffY(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects a one-element factor");
        let sv = self.scalar_value(s);
        let v = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn mul_channel(&mut self, a: Var, m: Var) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert_eq!(self.value(m).shape(), &[1, h, w], "mul_channel mask shape");
        let (av, mv) = (self.value(a), self.value(m).data());
        let v = Tensor::from_fn_chw(c, h, w, |ci, y, x| av[[ci, y, x]] * mv[y * w + x]);
        let ng = self.ng(a) || self.ng(m);
        self.push(v, Op::MulChannel(a, m), ng)
    }

    pub fn div_channel(&mut self, a: Var, d: Var, eps: T) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert_eq!(self.value(d).shape(), &[1, h, w], "div_channel divisor shape");
        let (av, dv) = (self.value(a), self.value(d).data());
        let v = Tensor::from_fn_chw(c, h, w, |ci, y, x| av[[ci, y, x]] / dv[y * w + x].max(eps));
        let ng = self.ng(a) || self.ng(d);
        self.push(v, Op::DivChannel(a, d, eps), ng)
    }

    pub fn mul_const(&mut self, a: Var, k: Tensor<T>) -> Var {
        let v = self.value(a).zip_map(&k, |x, y| x * y);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, k), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean over pixels with `mask[pixel] == true`; zero when the mask is empty.
    pub fn masked_mean(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert_eq!(mask.len(), h * w);
        let count = mask.iter().filter(|&&m| m).count() * c;
        let av = self.value(a);
        let mut s = T::zero();
        for ci in 0..c {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    s += av.channel(ci)[i];
                }
            }
        }
        let v = if count == 0 { T::zero() } else { s / T::lit(count as f64) };
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::MaskedMean(a, mask), ng)
    }

    pub fn mean_channels(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, h, w) = av.chw();
        let inv = T::lit(1.0 / c as f64);
        let v = Tensor::from_fn_chw(1, h, w, |_, y, x| (0..c).map(|ci| av[[ci, y, x]]).sum::<T>() * inv);
        let ng = self.ng(a);
        self.push(v, Op::MeanChannels(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&refs).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).channels(start, len);
        let ng = self.ng(a);
        self.push(v, Op::Slice(a, start), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv { x, w, b, stride, pad }, ng)
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let v = kernels::upsample_nearest2(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::UpNearest2(a), ng)
    }

    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let v = kernels::resize_bilinear(self.value(a), oh, ow);
        let ng = self.ng(a);
        self.push(v, Op::Resize(a), ng)
    }

    pub fn area_downscale(&mut self, a: Var, f: usize) -> Var {
        let v = kernels::area_downscale(self.value(a), f);
        let ng = self.ng(a);
        self.push(v, Op::AreaDown(a, f), ng)
    }

    pub fn backward_warp(&mut self, src: Var, flow: Var) -> Var {
        let v = warp::backward_warp(self.value(src), self.value(flow)).expect("backward_warp shapes");
        let ng = self.ng(src) || self.ng(flow);
        self.push(v, Op::BackWarp(src, flow), ng)
    }

    /// Softmax splatting; returns the warped tensor and its hole mask.
    pub fn splat(&mut self, src: Var, flow: Var, z: Option<Var>) -> (Var, Vec<bool>) {
        let fwd = warp::forward_splat_softmax(self.value(src), self.value(flow), z.map(|z| self.value(z)))
            .expect("splat shapes");
        let holes = fwd.holes.clone();
        let ng = self.ng(src) || self.ng(flow) || z.is_some_and(|z| self.ng(z));
        let v = fwd.image.clone();
        (self.push(v, Op::Splat { src, flow, z, fwd }, ng), holes)
    }

    /// Block projection `Uᵀ(x - mean)` of an image; see [`fldr::project`].
    pub fn project(&mut self, img: Var, u: Var, mean: Var, d: usize) -> Var {
        let v = fldr::project_raw(self.value(img), self.value(u), self.value(mean), d).expect("project shapes");
        let ng = self.ng(img) || self.ng(u) || self.ng(mean);
        self.push(v, Op::Project { img, u, mean, d }, ng)
    }

    /// Divides every `k`-channel group at every site by its mean absolute value.
    pub fn normalize_sites(&mut self, a: Var, k: usize, eps: T) -> Var {
        let v = fldr::normalize_sites_raw(self.value(a), k, eps);
        let ng = self.ng(a);
        self.push(v, Op::NormSites(a, k, eps), ng)
    }

    /// Divides the whole tensor by its largest absolute value.
    pub fn normalize_global(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let g = av.max_abs().max(eps);
        let v = av.scale(T::one() / g);
        let ng = self.ng(a);
        self.push(v, Op::NormGlobal(a, eps), ng)
    }

    /// Per-pixel softmax across channels.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let v = softmax_channels(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Forward difference along x; output width shrinks by one.
    pub fn diff_x(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, h, w) = av.chw();
        let v = Tensor::from_fn_chw(c, h, w.saturating_sub(1), |ci, y, x| av[[ci, y, x + 1]] - av[[ci, y, x]]);
        let ng = self.ng(a);
        self.push(v, Op::DiffX(a), ng)
    }

    /// Forward difference along y; output height shrinks by one.
    pub fn diff_y(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, h, w) = av.chw();
        let v = Tensor::from_fn_chw(c, h.saturating_sub(1), w, |ci, y, x| av[[ci, y + 1, x]] - av[[ci, y, x]]);
        let ng = self.ng(a);
        self.push(v, Op::DiffY(a), ng)
    }

    /// Gradient of the one-element node `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, d: Tensor<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                if self.ng(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.ng(*s) {
                    let d: T = g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).sum();
                    acc(*s, Tensor::full(self.value(*s).shape(), d));
                }
            }
            Op::MulChannel(a, m) => {
                let (c, h, w) = g.chw();
                let (av, mv) = (self.value(*a), self.value(*m).data());
                if self.ng(*a) {
                    acc(*a, Tensor::from_fn_chw(c, h, w, |ci, y, x| g[[ci, y, x]] * mv[y * w + x]));
                }
                if self.ng(*m) {
                    acc(*m, Tensor::from_fn_chw(1, h, w, |_, y, x| (0..c).map(|ci| g[[ci, y, x]] * av[[ci, y, x]]).sum()));
                }
            }
            Op::DivChannel(a, d, eps) => {
                let (c, h, w) = g.chw();
                let dv = self.value(*d).data();
                if self.ng(*a) {
                    acc(*a, Tensor::from_fn_chw(c, h, w, |ci, y, x| g[[ci, y, x]] / dv[y * w + x].max(*eps)));
                }
                if self.ng(*d) {
                    acc(
                        *d,
                        Tensor::from_fn_chw(1, h, w, |_, y, x| {
                            let den = dv[y * w + x];
                            if den > *eps {
                                -(0..c).map(|ci| g[[ci, y, x]] * out[[ci, y, x]]).sum::<T>() / den
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Op::MulConst(a, k) => acc(*a, g.zip_map(k, |x, y| x * y)),
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |x, v| if v > T::zero() { x } else if v < T::zero() { -x } else { T::zero() })),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, v| if v > T::zero() { x } else { T::zero() })),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, e| x * e)),
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0] / T::lit(n as f64)));
            }
            Op::MaskedMean(a, mask) => {
                let (c, h, w) = self.value(*a).chw();
                let count = mask.iter().filter(|&&m| m).count() * c;
                if count > 0 {
                    let s = g.data()[0] / T::lit(count as f64);
                    acc(*a, Tensor::from_fn_chw(c, h, w, |_, y, x| if mask[y * w + x] { s } else { T::zero() }));
                }
            }
            Op::MeanChannels(a) => {
                let (c, h, w) = self.value(*a).chw();
                let inv = T::lit(1.0 / c as f64);
                acc(*a, Tensor::from_fn_chw(c, h, w, |_, y, x| g[[0, y, x]] * inv));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).chw().0;
                    if self.ng(p) {
                        acc(p, g.channels(start, pc));
                    }
                    start += pc;
                }
            }
            Op::Slice(a, start) => {
                let (c, h, w) = self.value(*a).chw();
                let len = g.chw().0;
                let mut d = Tensor::zeros(&[c, h, w]);
                d.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, g, self.ng(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::UpNearest2(a) => acc(*a, kernels::upsample_nearest2_backward(g)),
            Op::Resize(a) => {
                let (_, h, w) = self.value(*a).chw();
                acc(*a, kernels::resize_bilinear_backward(g, h, w));
            }
            Op::AreaDown(a, f) => {
                let (c, h, w) = self.value(*a).chw();
                let inv = T::lit(1.0 / (f * f) as f64);
                acc(*a, Tensor::from_fn_chw(c, h, w, |ci, y, x| g[[ci, y / f, x / f]] * inv));
            }
            Op::BackWarp(src, flow) => {
                let (ds, df) = warp::backward_warp_grad(self.value(*src), self.value(*flow), g);
                acc(*src, ds);
                acc(*flow, df);
            }
            Op::Splat { src, flow, z, fwd } => {
                let (ds, df, dz) =
                    warp::forward_splat_grad(self.value(*src), self.value(*flow), z.map(|z| self.value(z)), fwd, g);
                acc(*src, ds);
                acc(*flow, df);
                if let (Some(z), Some(dz)) = (z, dz) {
                    let shape = self.value(*z).shape().to_vec();
                    acc(*z, dz.reshape(&shape).expect("importance shape"));
                }
            }
            Op::Project { img, u, mean, d } => {
                let (di, du, dm) = fldr::project_raw_grad(
                    self.value(*img),
                    self.value(*u),
                    self.value(*mean),
                    *d,
                    g,
                    self.ng(*img),
                );
                if let Some(di) = di {
                    acc(*img, di);
                }
                acc(*u, du);
                acc(*mean, dm);
            }
            Op::NormSites(a, k, eps) => acc(*a, fldr::normalize_sites_grad(self.value(*a), *k, *eps, g)),
            Op::NormGlobal(a, eps) => {
                let av = self.value(*a);
                let (mut arg, mut gmax) = (0, T::zero());
                for (i, &v) in av.data().iter().enumerate() {
                    if v.abs() > gmax {
                        gmax = v.abs();
                        arg = i;
                    }
                }
                let den = gmax.max(*eps);
                let mut d = g.scale(T::one() / den);
                if gmax > *eps {
                    let dot: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    let sign = av.data()[arg].signum();
                    d.data_mut()[arg] -= sign * dot / (gmax * gmax);
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let (c, h, w) = out.chw();
                acc(
                    *a,
                    Tensor::from_fn_chw(c, h, w, |ci, y, x| {
                        let dot: T = (0..c).map(|j| g[[j, y, x]] * out[[j, y, x]]).sum();
                        out[[ci, y, x]] * (g[[ci, y, x]] - dot)
                    }),
                );
            }
            Op::DiffX(a) => {
                let (c, h, w) = self.value(*a).chw();
                let mut d = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w.saturating_sub(1) {
                            let v = g[[ci, y, x]];
                            d[[ci, y, x + 1]] += v;
                            d[[ci, y, x]] -= v;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::DiffY(a) => {
                let (c, h, w) = self.value(*a).chw();
                let mut d = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..h.saturating_sub(1) {
                        for x in 0..w {
                            let v = g[[ci, y, x]];
                            d[[ci, y + 1, x]] += v;
                            d[[ci, y, x]] -= v;
                        }
                    }
                }
                acc(*a, d);
            }
        }
    }
}

/// Per-pixel softmax across the channel axis of a `[c, h, w]` tensor.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let plane = h * w;
    let mut buf = vec![T::zero(); c];
    for p in 0..plane {
        let m = (0..c).fold(T::neg_infinity(), |m, ci| m.max(x.data()[ci * plane + p]));
        let mut s = T::zero();
        for (ci, b) in buf.iter_mut().enumerate() {
            *b = (x.data()[ci * plane + p] - m).exp();
            s += *b;
        }
        for (ci, b) in buf.iter().enumerate() {
            out.data_mut()[ci * plane + p] = *b / s;
        }
    }
    out
}
