//! Multi-scale bidirectional flow estimation on compressed frames.
//!
//! The coarsest level has its own seven-layer stack. Every finer level reuses
//! one shared stack that refines the ×2-upsampled flow of the level below;
//! its first two layers are the coarsest stack's first two layers.
//!
//! Flow tensors are `[2, h, w]` (x then y displacement, in pixels of their own
//! resolution). The network emits both directions at once as `[4, h, w]`:
//! channels 0..2 hold `F0→1`, channels 2..4 hold `F1→0`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::layers::{BoundConv, Conv};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::warp;

/// Compressed channel count per image the architecture was designed for (`3·16`).
pub const DESIGN_K: usize = 16;

/// Hidden width of the flow stacks.
const WIDTH: usize = 96;
const HALF: usize = 48;

/// Which pair of time instants a flow field connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    ZeroToOne,
    OneToZero,
    ZeroToT,
    OneToT,
    TToZero,
    TToOne,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    /// `[2, h, w]`
    pub data: Tensor<T>,
    pub direction: FlowDirection,
}

impl<T: Real> FlowField<T> {
    pub fn new(data: Tensor<T>, direction: FlowDirection) -> Result<Self> {
        let (c, _, _) = data.check_chw("flow field")?;
        if c != 2 {
            return Err(Error::shape(format_args!("flow field needs 2 channels, got {c}")));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { data, direction })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Bidirectional flows for every level; `levels[s] = (F0→1, F1→0)` at `1/(d·2^s)`
/// of the full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPyramid<T> {
    pub levels: Vec<(FlowField<T>, FlowField<T>)>,
}

impl<T: Real> FlowPyramid<T> {
    /// Index of the coarsest level.
    pub fn coarsest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn finest(&self) -> &(FlowField<T>, FlowField<T>) {
        &self.levels[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetworkWeights<T> {
    /// `conv1 … conv7` of the coarsest level.
    pub coarse: Vec<Conv<T>>,
    /// `conv3 … conv8` of the finer levels (`conv1`/`conv2` are `coarse[0..2]`).
    pub shared: Vec<Conv<T>>,
    /// Compressed channels per image (`3k`).
    pub image_channels: usize,
}

/// Builds a freshly initialised flow network for `k` coefficients per colour
/// block. Only `k = 16` matches the published layer widths; other values are
/// accepted with `allow_other_k`, scaling the input-facing layers.
pub fn build_flow_network<T: Real, R: Rng + ?Sized>(k: usize, allow_other_k: bool, rng: &mut R) -> Result<FlowNetworkWeights<T>> {
    if k == 0 {
        return Err(Error::config("flow network needs k >= 1"));
    }
    if k != DESIGN_K && !allow_other_k {
        return Err(Error::config(format_args!(
            "flow network expects {} input channels (k = {DESIGN_K}), got {} (k = {k}); pass the override to accept",
            6 * DESIGN_K,
            6 * k
        )));
    }
    let ic = 3 * k;
    let pair = 2 * ic;
    // The last layer of each stack starts small so early training refines near-zero flow.
    let out_gain = 0.1;
    let coarse = vec_of([
        Conv::init(pair, pair, 3, 1, 1, 1.0, rng),
        Conv::init(pair, pair, 3, 1, 1, 1.0, rng),
        Conv::init(pair, WIDTH, 3, 1, 1, 1.0, rng),
        Conv::init(WIDTH, WIDTH, 3, 1, 1, 1.0, rng),
        Conv::init(WIDTH, WIDTH, 3, 1, 1, 1.0, rng),
        Conv::init(WIDTH, HALF, 3, 1, 1, 1.0, rng),
        Conv::init(HALF, 4, 3, 1, 1, out_gain, rng),
    ]);
    let shared = vec_of([
        Conv::init(pair, HALF, 3, 1, 1, 1.0, rng),
        Conv::init(2 * HALF + 4, WIDTH, 3, 1, 1, 1.0, rng),
        Conv::init(WIDTH, WIDTH, 3, 1, 1, 1.0, rng),
        Conv::init(WIDTH, HALF, 3, 1, 1, 1.0, rng),
        Conv::init(HALF, HALF, 3, 1, 1, 1.0, rng),
        Conv::init(HALF, 4, 3, 1, 1, out_gain, rng),
    ]);
    Ok(FlowNetworkWeights { coarse, shared, image_channels: ic })
}

fn vec_of<C, const N: usize>(items: [C; N]) -> Vec<C> {
    items.into_iter().collect()
}

impl<T: Real> FlowNetworkWeights<T> {
    pub fn coarse_parameter_count(&self) -> usize {
        self.coarse.iter().map(Conv::parameter_count).sum()
    }

    /// Parameters used only by the finer levels.
    pub fn shared_parameter_count(&self) -> usize {
        self.shared.iter().map(Conv::parameter_count).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.coarse_parameter_count() + self.shared_parameter_count()
    }

    /// Zeroes the layers that emit flow, so every level outputs the upsampled
    /// coarser flow (zero at the coarsest level).
    pub fn zero_output_layers(&mut self) {
        self.coarse[6].zero();
        self.shared[5].zero();
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> FlowNetBound {
        FlowNetBound {
            coarse: self.coarse.iter().map(|c| c.bind(g, trainable)).collect(),
            shared: self.shared.iter().map(|c| c.bind(g, trainable)).collect(),
            image_channels: self.image_channels,
        }
    }

    pub fn cast<U: Real>(&self) -> FlowNetworkWeights<U> {
        FlowNetworkWeights {
            coarse: self.coarse.iter().map(Conv::cast).collect(),
            shared: self.shared.iter().map(Conv::cast).collect(),
            image_channels: self.image_channels,
        }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.coarse.iter().enumerate() {
            out.push((alloc::format!("flow.coarse.conv{}.w", i + 1), &c.weight));
            out.push((alloc::format!("flow.coarse.conv{}.b", i + 1), &c.bias));
        }
        for (i, c) in self.shared.iter().enumerate() {
            out.push((alloc::format!("flow.shared.conv{}.w", i + 3), &c.weight));
            out.push((alloc::format!("flow.shared.conv{}.b", i + 3), &c.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in self.coarse.iter_mut().chain(self.shared.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

/// A flow network whose parameters live in a [`Graph`].
#[derive(Clone, Debug)]
pub struct FlowNetBound {
    pub coarse: Vec<BoundConv>,
    pub shared: Vec<BoundConv>,
    pub image_channels: usize,
}

impl FlowNetBound {
    /// All parameter nodes in the order of [`FlowNetworkWeights::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.coarse.iter().chain(self.shared.iter()).flat_map(|c| [c.w, c.b]).collect()
    }

    /// Runs the pyramid. `c0[s]`, `c1[s]` are the normalised compressed frames
    /// at level `s`; the last entry is the coarsest level. Returns the
    /// `[4, h, w]` bidirectional flow per level, finest first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, c0: &[Var], c1: &[Var]) -> Result<Vec<Var>> {
        let levels = c0.len();
        if levels == 0 || c1.len() != levels {
            return Err(Error::shape(format_args!("flow pyramid needs matching non-empty inputs, got {} and {}", c0.len(), c1.len())));
        }
        let ic = self.image_channels;
        for s in 0..levels {
            let (a, b) = (g.value(c0[s]).shape().to_vec(), g.value(c1[s]).shape().to_vec());
            if a != b || a.len() != 3 || a[0] != ic {
                return Err(Error::shape(format_args!("level {s}: compressed inputs {a:?} / {b:?}, expected {ic} channels")));
            }
            if s + 1 < levels {
                let next = g.value(c0[s + 1]).shape();
                if next[1] * 2 != a[1] || next[2] * 2 != a[2] {
                    return Err(Error::shape(format_args!("level {} is {:?}, not half of level {s} {:?}", s + 1, next, a)));
                }
            }
        }

        let mut flows: Vec<Option<Var>> = alloc::vec![None; levels];
        let top = levels - 1;
        let x = g.concat(&[c0[top], c1[top]]);
        let h1 = self.coarse[0].apply_relu(g, x);
        let h2 = self.coarse[1].apply_relu(g, h1);
        let mut h = g.add(h2, x);
        for conv in &self.coarse[2..6] {
            h = conv.apply_relu(g, h);
        }
        flows[top] = Some(self.coarse[6].apply(g, h));

        for s in (0..top).rev() {
            let (_, hs, ws) = g.value(c0[s]).chw();
            let up = upsample_flow_var(g, flows[s + 1].unwrap(), hs, ws);
            let x = g.concat(&[c0[s], c1[s]]);
            let h1 = self.coarse[0].apply_relu(g, x);
            let h2 = self.coarse[1].apply_relu(g, h1);
            let r0 = g.slice(h2, 0, ic);
            let r1 = g.slice(h2, ic, ic);
            let a0 = g.add(c0[s], r0);
            let a1 = g.add(c1[s], r1);
            let up01 = g.slice(up, 0, 2);
            let up10 = g.slice(up, 2, 2);
            let (w0, _) = g.splat(a0, up01, None);
            let (w1, _) = g.splat(a1, up10, None);
            let feat0 = g.concat(&[a0, w0]);
            let feat1 = g.concat(&[a1, w1]);
            let e0 = self.shared[0].apply(g, feat0);
            let e1 = self.shared[0].apply(g, feat1);
            let joined = g.concat(&[e0, e1, up]);
            let mut h = self.shared[1].apply_relu(g, joined);
            for conv in &self.shared[2..5] {
                h = conv.apply_relu(g, h);
            }
            let residual = self.shared[5].apply(g, h);
            flows[s] = Some(g.add(up, residual));
        }
        Ok(flows.into_iter().map(|f| f.unwrap()).collect())
    }
}

/// Bilinear resize of a flow node to `h × w` with vector magnitudes scaled by
/// the per-axis size ratio.
pub fn upsample_flow_var<T: Real>(g: &mut Graph<T>, flow: Var, h: usize, w: usize) -> Var {
    let (c, fh, fw) = g.value(flow).chw();
    let resized = g.resize_bilinear(flow, h, w);
    let (sx, sy) = (T::lit(w as f64 / fw as f64), T::lit(h as f64 / fh as f64));
    if sx == sy {
        return g.scale(resized, sx);
    }
    let k = Tensor::from_fn_chw(c, h, w, |ci, _, _| if ci % 2 == 0 { sx } else { sy });
    g.mul_const(resized, k)
}

/// Runs the flow network on plain tensors (no gradients).
pub fn estimate_flow_pyramid<T: Real>(
    compressed0: &[Tensor<T>],
    compressed1: &[Tensor<T>],
    weights: &FlowNetworkWeights<T>,
) -> Result<FlowPyramid<T>> {
    let mut g = Graph::new();
    let net = weights.bind(&mut g, false);
    let c0: Vec<Var> = compressed0.iter().map(|t| g.constant(t.clone())).collect();
    let c1: Vec<Var> = compressed1.iter().map(|t| g.constant(t.clone())).collect();
    let flows = net.forward(&mut g, &c0, &c1)?;
    let mut levels = Vec::with_capacity(flows.len());
    for f in flows {
        let v = g.value(f);
        levels.push((
            FlowField::new(v.channels(0, 2), FlowDirection::ZeroToOne)?,
            FlowField::new(v.channels(2, 2), FlowDirection::OneToZero)?,
        ));
    }
    Ok(FlowPyramid { levels })
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format_args!("time t = {t} is outside [0, 1]")));
    }
    Ok(())
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (c, _, _) = a.check_chw("flow")?;
    if c != 2 || a.shape() != b.shape() {
        return Err(Error::shape(format_args!("flow shapes {:?} and {:?} differ or are not 2-channel", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(F0→t, F1→t) = (t·F0→1, (1−t)·F1→0)`.
pub fn scale_flow_to_time<T: Real>(f01: &Tensor<T>, f10: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    check_time(t)?;
    check_same(f01, f10)?;
    Ok((f01.scale(T::lit(t)), f10.scale(T::lit(1.0 - t))))
}

/// Flows anchored at time `t`: `F_t→0 = warp(t·F1→0, (1−t)·F0→1)` and
/// `F_t→1 = warp((1−t)·F0→1, t·F1→0)`, where `warp` is backward warping.
pub fn approximate_backward_flow<T: Real>(f01: &Tensor<T>, f10: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    check_time(t)?;
    check_same(f01, f10)?;
    let a = f10.scale(T::lit(t));
    let b = f01.scale(T::lit(1.0 - t));
    Ok((warp::backward_warp(&a, &b)?, warp::backward_warp(&b, &a)?))
}

/// Graph form of [`approximate_backward_flow`].
pub fn approximate_backward_flow_var<T: Real>(g: &mut Graph<T>, f01: Var, f10: Var, t: f64) -> (Var, Var) {
    let a = g.scale(f10, T::lit(t));
    let b = g.scale(f01, T::lit(1.0 - t));
    (g.backward_warp(a, b), g.backward_warp(b, a))
}

/// Bilinear ×`factor` upsampling with the vectors multiplied by `factor`.
pub fn upsample_flow<T: Real>(flow: &FlowField<T>, factor: usize) -> Result<FlowField<T>> {
    if factor == 0 {
        return Err(Error::arg("flow upsampling factor must be positive"));
    }
    let (h, w) = (flow.height() * factor, flow.width() * factor);
    let data = kernels::resize_bilinear(&flow.data, h, w).scale(T::lit(factor as f64));
    Ok(FlowField { data, direction: flow.direction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_width_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: FlowNetworkWeights<f32> = build_flow_network(16, false, &mut rng).unwrap();
        assert_eq!(net.coarse_parameter_count(), 458_452);
        assert_eq!(net.shared_parameter_count(), 275_092);
        assert_eq!(net.shared[1].in_channels(), 100);
        assert!(build_flow_network::<f32, _>(8, false, &mut rng).is_err());
        assert!(build_flow_network::<f32, _>(8, true, &mut rng).is_ok());
    }

    #[test]
    fn zero_output_layers_give_zero_flow_on_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: FlowNetworkWeights<f64> = build_flow_network(2, true, &mut rng).unwrap();
        net.zero_output_layers();
        let mk = |h: usize, w: usize| Tensor::from_fn_chw(6, h, w, |c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.37).sin());
        let lv = [mk(8, 8), mk(4, 4), mk(2, 2)];
        let p = estimate_flow_pyramid(&lv, &lv, &net).unwrap();
        assert_eq!(p.levels.len(), 3);
        for (a, b) in &p.levels {
            assert_eq!(a.data.max_abs(), 0.0);
            assert_eq!(b.data.max_abs(), 0.0);
        }
        assert_eq!(p.finest().0.height(), 8);
    }

    #[test]
    fn pyramid_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: FlowNetworkWeights<f64> = build_flow_network(2, true, &mut rng).unwrap();
        let a = [Tensor::zeros(&[6, 8, 8]), Tensor::zeros(&[6, 3, 4])];
        assert!(estimate_flow_pyramid(&a, &a, &net).is_err());
        let b = [Tensor::zeros(&[5, 8, 8])];
        assert!(estimate_flow_pyramid(&b, &b, &net).is_err());
    }

    #[test]
    fn time_scaling_and_backward_flow() {
        let f01 = Tensor::from_fn_chw(2, 3, 3, |c, _, _| if c == 0 { 4.0 } else { -2.0 });
        let f10 = f01.scale(-1.0);
        let (a, b) = scale_flow_to_time(&f01, &f10, 0.5).unwrap();
        assert!(a.data().chunks(9).next().unwrap().iter().all(|&v| v == 2.0));
        assert_eq!(b, f10.scale(0.5));
        assert!(scale_flow_to_time(&f01, &f10, 1.5).is_err());
        let (t0, t1) = approximate_backward_flow(&f01, &f10, 0.25).unwrap();
        assert!(t0.max_abs_diff(&f01.scale(-0.25)) < 1e-12);
        assert!(t1.max_abs_diff(&f01.scale(0.75)) < 1e-12);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let f = FlowField::new(Tensor::from_fn_chw(2, 2, 3, |c, _, _| c as f64 + 0.5), FlowDirection::ZeroToOne).unwrap();
        let u = upsample_flow(&f, 8).unwrap();
        assert_eq!(u.data.shape(), &[2, 16, 24]);
        assert!(u.data.channel(0).iter().all(|&v| (v - 4.0).abs() < 1e-12));
        assert!(u.data.channel(1).iter().all(|&v| (v - 12.0).abs() < 1e-12));
        assert_eq!(upsample_flow(&f, 1).unwrap(), f);
        assert!(upsample_flow(&f, 0).is_err());
    }
}
