//! End-to-end interpolation: compress both frames at every pyramid level,
//! estimate bidirectional flow, derive the intermediate flows, warp four
//! candidates, predict the weight map and fuse.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fldr::{ProjectionBasis, NORM_EPS};
use crate::flownet::{self, build_flow_network, FlowNetBound, FlowNetworkWeights};
use crate::fusion::{self, build_occlusion_network, OcclusionBound, OcclusionNetworkWeights, OCC_ALIGN};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

/// Initial value of the splatting importance scale.
pub const ALPHA_INIT: f64 = 1.0;

/// Every trainable quantity of the interpolator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub basis: ProjectionBasis<T>,
    pub flow: FlowNetworkWeights<T>,
    pub occlusion: OcclusionNetworkWeights<T>,
    /// Splatting importance scale.
    pub alpha: T,
    /// Softmax temperature of the weight map (positive).
    pub temperature: T,
}

/// Optimiser parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Fldr,
    Main,
}

/// Exact trainable-parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub fldr: usize,
    pub flow: usize,
    pub warp: usize,
    pub occlusion: usize,
    /// Fusion beyond the occlusion network: only the temperature.
    pub fusion: usize,
}

impl ParameterBreakdown {
    pub fn total(&self) -> usize {
        self.fldr + self.flow + self.warp + self.occlusion + self.fusion
    }
}

/// How a [`Model`] enters a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Everything constant.
    Inference,
    /// Networks and `alpha` trainable, the basis if its `trainable` flag is set;
    /// temperature constant.
    Train,
    /// Only the log-temperature is trainable.
    Calibrate,
}

impl<T: Real> Model<T> {
    /// Fresh networks around an initial basis.
    pub fn new<R: Rng + ?Sized>(basis: ProjectionBasis<T>, allow_other_k: bool, rng: &mut R) -> Result<Self> {
        let flow = build_flow_network(basis.k(), allow_other_k, rng)?;
        let occlusion = build_occlusion_network(rng);
        Ok(Self { basis, flow, occlusion, alpha: T::lit(ALPHA_INIT), temperature: T::one() })
    }

    pub fn d(&self) -> usize {
        self.basis.d()
    }

    pub fn k(&self) -> usize {
        self.basis.k()
    }

    /// Side lengths at level 0 must be multiples of this for `levels - 1` extra levels.
    pub fn alignment(&self, coarsest: usize) -> usize {
        alignment(self.d(), coarsest)
    }

    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        ParameterBreakdown {
            fldr: self.basis.parameter_count(),
            flow: self.flow.parameter_count(),
            warp: 1,
            occlusion: self.occlusion.parameter_count(),
            fusion: 1,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            basis: self.basis.cast(),
            flow: self.flow.cast(),
            occlusion: self.occlusion.cast(),
            alpha: U::lit(self.alpha.as_f64()),
            temperature: U::lit(self.temperature.as_f64()),
        }
    }

    /// Every stored tensor by name, scalars as one-element tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push((String::from("fldr.U"), self.basis.u.clone()));
        out.push((String::from("fldr.mean"), self.basis.mean.clone()));
        for (n, t) in self.flow.named_tensors() {
            out.push((n, t.clone()));
        }
        for (n, t) in self.occlusion.named_tensors() {
            out.push((n, t.clone()));
        }
        out.push((String::from("warp.alpha"), Tensor::from_vec(&[1], alloc::vec![self.alpha]).unwrap()));
        out.push((String::from("occ.temperature"), Tensor::from_vec(&[1], alloc::vec![self.temperature]).unwrap()));
        out
    }

    /// Rebuilds a model from [`Model::named_tensors`] output. The architecture
    /// (d, k) is read from the tensor shapes.
    pub fn from_named_tensors(tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor<T>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::config(format_args!("checkpoint is missing tensor `{name}`")))
        };
        let u = get("fldr.U")?;
        if u.shape().len() != 2 {
            return Err(Error::shape("fldr.U must be two-dimensional"));
        }
        let (dd, k) = (u.shape()[0], u.shape()[1]);
        let d = (0..=dd).find(|d| d * d == dd).ok_or_else(|| Error::shape(format_args!("fldr.U has {dd} rows, not a square")))?;
        let basis = ProjectionBasis::new(d, k, u.clone(), get("fldr.mean")?.clone())?;

        let mut rng = NullRng;
        let mut model = Self::new(basis, true, &mut rng)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut slots: Vec<&mut Tensor<T>> = model.flow.tensors_mut();
        slots.extend(model.occlusion.tensors_mut());
        for (name, slot) in names[2..].iter().zip(slots) {
            let src = get(name)?;
            if src.shape() != slot.shape() {
                return Err(Error::shape(format_args!("tensor `{name}` has shape {:?}, expected {:?}", src.shape(), slot.shape())));
            }
            *slot = src.clone();
        }
        let scalar = |name: &str| -> Result<T> {
            let t = get(name)?;
            if t.len() != 1 {
                return Err(Error::shape(format_args!("`{name}` must hold one value")));
            }
            Ok(t.data()[0])
        };
        model.alpha = scalar("warp.alpha")?;
        model.temperature = scalar("occ.temperature")?;
        if !(model.temperature > T::zero()) {
            return Err(Error::config("stored temperature is not positive"));
        }
        Ok(model)
    }

    /// Mutable views of the parameters trained in the main phase, in the order
    /// of [`BoundModel::trainable`]. The basis is included only when trainable.
    pub fn trainable_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out: Vec<(ParamGroup, &mut [T])> = Vec::new();
        if self.basis.trainable {
            out.push((ParamGroup::Fldr, self.basis.u.data_mut()));
            out.push((ParamGroup::Fldr, self.basis.mean.data_mut()));
        }
        for t in self.flow.tensors_mut() {
            out.push((ParamGroup::Main, t.data_mut()));
        }
        for t in self.occlusion.tensors_mut() {
            out.push((ParamGroup::Main, t.data_mut()));
        }
        out.push((ParamGroup::Main, core::slice::from_mut(&mut self.alpha)));
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, mode: BindMode) -> BoundModel {
        let train = mode == BindMode::Train;
        let basis_train = train && self.basis.trainable;
        let leaf = |g: &mut Graph<T>, t: Tensor<T>, trainable: bool| if trainable { g.param(t) } else { g.constant(t) };
        let u = leaf(g, self.basis.u.clone(), basis_train);
        let mean = leaf(g, self.basis.mean.clone(), basis_train);
        let flow = self.flow.bind(g, train);
        let occ = self.occlusion.bind(g, train);
        let alpha = leaf(g, Tensor::scalar(self.alpha), train);
        let (log_temperature, inv_temperature) = if mode == BindMode::Calibrate {
            let theta = g.param(Tensor::scalar(self.temperature.ln()));
            let neg = g.scale(theta, -T::one());
            (Some(theta), g.exp(neg))
        } else {
            (None, g.constant(Tensor::scalar(T::one() / self.temperature)))
        };
        let mut trainable = Vec::new();
        if basis_train {
            trainable.extend([u, mean]);
        }
        if train {
            trainable.extend(flow.vars());
            trainable.extend(occ.vars());
            trainable.push(alpha);
        }
        BoundModel { u, mean, flow, occ, alpha, inv_temperature, log_temperature, trainable, d: self.d(), k: self.k() }
    }
}

/// Side alignment for `coarsest` extra pyramid levels with block size `d`.
pub fn alignment(d: usize, coarsest: usize) -> usize {
    lcm(d, OCC_ALIGN) << coarsest
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Deterministic stand-in used when weights are overwritten right after construction.
struct NullRng;

impl rand::RngCore for NullRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> core::result::Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}

/// A [`Model`] placed in a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub u: Var,
    pub mean: Var,
    pub flow: FlowNetBound,
    pub occ: OcclusionBound,
    pub alpha: Var,
    pub inv_temperature: Var,
    /// The trainable `ln T` node in calibration mode.
    pub log_temperature: Option<Var>,
    /// Trainable nodes, matching [`Model::trainable_mut`].
    pub trainable: Vec<Var>,
    pub d: usize,
    pub k: usize,
}

/// Graph nodes produced while synthesising one level.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub prediction: Var,
    /// `[4, H, W]` bidirectional flow at image resolution.
    pub flow_full: Var,
    /// Occlusion logits before temperature scaling.
    pub logits: Var,
    pub weight_map: Var,
    pub i0_to_t: Var,
    pub i1_to_t: Var,
    pub t_from_0: Var,
    pub t_from_1: Var,
}

impl BoundModel {
    /// Normalised compressed map of one image node.
    pub fn compress<T: Real>(&self, g: &mut Graph<T>, img: Var) -> Var {
        let eps = T::lit(NORM_EPS);
        let p = g.project(img, self.u, self.mean, self.d);
        let s = g.normalize_sites(p, self.k, eps);
        g.normalize_global(s, eps)
    }

    /// Flow at flow resolution for every level, finest first.
    pub fn flows<T: Real>(&self, g: &mut Graph<T>, pyr0: &[Var], pyr1: &[Var]) -> Result<Vec<Var>> {
        let c0: Vec<Var> = pyr0.iter().map(|&i| self.compress(g, i)).collect();
        let c1: Vec<Var> = pyr1.iter().map(|&i| self.compress(g, i)).collect();
        self.flow.forward(g, &c0, &c1)
    }

    /// Warps, weighs and fuses one level given its images and flow.
    pub fn synthesize<T: Real>(&self, g: &mut Graph<T>, i0: Var, i1: Var, flow: Var, t: f64) -> Result<LevelOutput> {
        let (_, h, w) = g.value(i0).chw();
        let flow_full = flownet::upsample_flow_var(g, flow, h, w);
        let f01 = g.slice(flow_full, 0, 2);
        let f10 = g.slice(flow_full, 2, 2);
        let f0t = g.scale(f01, T::lit(t));
        let f1t = g.scale(f10, T::lit(1.0 - t));
        let (ft0, ft1) = flownet::approximate_backward_flow_var(g, f01, f10, t);

        let z0 = self.importance(g, i0, i1, f01);
        let z1 = self.importance(g, i1, i0, f10);
        let (i0_to_t, _) = g.splat(i0, f0t, Some(z0));
        let (i1_to_t, _) = g.splat(i1, f1t, Some(z1));
        let t_from_0 = g.backward_warp(i0, ft0);
        let t_from_1 = g.backward_warp(i1, ft1);

        let x = g.concat(&[i0, i1, i0_to_t, i1_to_t, t_from_0, t_from_1, f0t, f1t, ft0, ft1]);
        let logits = self.occ.logits(g, x)?;
        let scaled = g.mul_scalar(logits, self.inv_temperature);
        let weight_map = g.softmax_channels(scaled);
        let prediction = fusion::fuse_var(g, &[t_from_0, i0_to_t, i0, t_from_1, i1_to_t, i1], weight_map, t);
        Ok(LevelOutput { prediction, flow_full, logits, weight_map, i0_to_t, i1_to_t, t_from_0, t_from_1 })
    }

    /// `Z = −α · mean_c |a − warp(b, f)|`.
    fn importance<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var, f: Var) -> Var {
        let wb = g.backward_warp(b, f);
        let diff = g.sub(a, wb);
        let err = g.abs(diff);
        let m = g.mean_channels(err);
        let z = g.mul_scalar(m, self.alpha);
        g.scale(z, -T::one())
    }
}

/// `levels` images, each a 2×2 area average of the previous one.
pub fn image_pyramid<T: Real>(img: &Tensor<T>, levels: usize) -> Vec<Tensor<T>> {
    let mut out = alloc::vec![img.clone()];
    for _ in 1..levels {
        let next = kernels::area_downscale(out.last().unwrap(), 2);
        out.push(next);
    }
    out
}

/// Reflection padding on the bottom and right edges up to `h × w`.
pub fn pad_reflect<T: Real>(img: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, ih, iw) = img.check_chw("pad")?;
    if h < ih || w < iw || (h > ih && h - ih >= ih) || (w > iw && w - iw >= iw) {
        return Err(Error::shape(format_args!("cannot reflect-pad {ih}x{iw} to {h}x{w}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    Ok(Tensor::from_fn_chw(c, h, w, |ci, y, x| img[[ci, reflect(y, ih), reflect(x, iw)]]))
}

/// When the intermediate frames are requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSpec {
    At(f64),
    /// `N` yields `t = 1/N … (N−1)/N`.
    Factor(usize),
}

impl TimeSpec {
    pub fn times(self) -> Result<Vec<f64>> {
        match self {
            TimeSpec::At(t) if t > 0.0 && t < 1.0 => Ok(alloc::vec![t]),
            TimeSpec::At(t) => Err(Error::arg(format_args!("interpolation time {t} is outside (0, 1)"))),
            TimeSpec::Factor(n) if n >= 2 => Ok((1..n).map(|j| j as f64 / n as f64).collect()),
            TimeSpec::Factor(n) => Err(Error::arg(format_args!("interpolation factor {n} must be at least 2"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InterpolationRequest<T> {
    /// `[3, H, W]` in `[0, 1]`.
    pub i0: Tensor<T>,
    pub i1: Tensor<T>,
    pub time: TimeSpec,
    /// Index of the coarsest pyramid level used at test time.
    pub scales: usize,
}

/// Intermediate tensors of one synthesised frame, cropped to the input size.
#[derive(Clone, Debug)]
pub struct Diagnostics<T> {
    pub flow01: Tensor<T>,
    pub flow10: Tensor<T>,
    pub weight_map: Tensor<T>,
    pub i0_to_t: Tensor<T>,
    pub i1_to_t: Tensor<T>,
    pub t_from_0: Tensor<T>,
    pub t_from_1: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Interpolated<T> {
    pub t: f64,
    /// `[3, H, W]`, clipped to `[0, 1]`.
    pub frame: Tensor<T>,
    pub diagnostics: Option<Diagnostics<T>>,
}

/// Synthesises the requested intermediate frames of one pair. The flow pyramid
/// is computed once and reused for every `t`.
pub fn interpolate_pair<T: Real>(req: &InterpolationRequest<T>, model: &Model<T>, diagnostics: bool) -> Result<Vec<Interpolated<T>>> {
    let times = req.time.times()?;
    if req.scales < 1 {
        return Err(Error::arg("at least one coarser scale is required"));
    }
    let (c, h, w) = req.i0.check_chw("frame 0")?;
    if req.i1.shape() != req.i0.shape() {
        return Err(Error::shape(format_args!("frames differ in shape: {:?} vs {:?}", req.i0.shape(), req.i1.shape())));
    }
    if c * model.k() != model.flow.image_channels {
        return Err(Error::config(format_args!(
            "{c}-channel frames need a flow network for {} channels, the checkpoint has {}",
            c * model.k(),
            model.flow.image_channels
        )));
    }
    let align = model.alignment(req.scales);
    if h.min(w) < align {
        return Err(Error::TooSmall { height: h, width: w, min: align });
    }
    let (ph, pw) = (h.div_ceil(align) * align, w.div_ceil(align) * align);
    let p0 = pad_reflect(&req.i0, ph, pw)?;
    let p1 = pad_reflect(&req.i1, ph, pw)?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, BindMode::Inference);
    let levels = req.scales + 1;
    let pyr0: Vec<Var> = image_pyramid(&p0, levels).into_iter().map(|t| g.constant(t)).collect();
    let pyr1: Vec<Var> = image_pyramid(&p1, levels).into_iter().map(|t| g.constant(t)).collect();
    let flows = bound.flows(&mut g, &pyr0, &pyr1)?;

    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let lv = bound.synthesize(&mut g, pyr0[0], pyr1[0], flows[0], t)?;
        let frame = g.value(lv.prediction).crop(h, w).clamp(T::zero(), T::one());
        if !frame.is_finite() {
            return Err(Error::NonFinite(alloc::format!("interpolated frame at t = {t}")));
        }
        let diag = diagnostics.then(|| {
            let crop = |v: Var| g.value(v).crop(h, w);
            let full = crop(lv.flow_full);
            Diagnostics {
                flow01: full.channels(0, 2),
                flow10: full.channels(2, 2),
                weight_map: crop(lv.weight_map),
                i0_to_t: crop(lv.i0_to_t),
                i1_to_t: crop(lv.i1_to_t),
                t_from_0: crop(lv.t_from_0),
                t_from_1: crop(lv.t_from_1),
            }
        });
        out.push(Interpolated { t, frame, diagnostics: diag });
    }
    Ok(out)
}

/// One output frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SequenceItem {
    /// Input frame copied through.
    Original { input: usize },
    /// Frame between inputs `pair` and `pair + 1` at time `t`.
    Intermediate { pair: usize, t: f64 },
}

/// Output order for `frames` inputs upsampled by `factor`.
pub fn plan_sequence(frames: usize, factor: usize) -> Result<Vec<SequenceItem>> {
    if frames < 2 {
        return Err(Error::arg(format_args!("need at least two frames, got {frames}")));
    }
    let times = TimeSpec::Factor(factor).times()?;
    let mut out = Vec::with_capacity((frames - 1) * factor + 1);
    for pair in 0..frames - 1 {
        out.push(SequenceItem::Original { input: pair });
        out.extend(times.iter().map(|&t| SequenceItem::Intermediate { pair, t }));
    }
    out.push(SequenceItem::Original { input: frames - 1 });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fldr::init_basis_from_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn texture(h: usize, w: usize, phase: f64) -> Tensor<f64> {
        Tensor::from_fn_chw(3, h, w, |c, y, x| {
            let (y, x) = (y as f64, x as f64);
            0.5 + 0.3 * (0.3 * x + 0.2 * y + phase + c as f64).sin() * (0.17 * y - 0.1 * x).cos()
        })
    }

    fn small_model(seed: u64) -> Model<f64> {
        let basis = init_basis_from_image(&texture(32, 32, 0.0), 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(basis, true, &mut rng).unwrap()
    }

    #[test]
    fn alignment_and_padding() {
        assert_eq!(alignment(8, 1), 16);
        assert_eq!(alignment(4, 2), 32);
        assert_eq!(alignment(6, 0), 24);
        let img = texture(5, 7, 0.0);
        let p = pad_reflect(&img, 8, 9).unwrap();
        assert_eq!(p[[1, 5, 2]], img[[1, 3, 2]]);
        assert_eq!(p[[2, 7, 8]], img[[2, 1, 4]]);
        assert_eq!(p.crop(5, 7), img);
    }

    #[test]
    fn static_scene_reproduces_input() {
        let mut m = small_model(2);
        m.flow.zero_output_layers();
        let j = texture(32, 48, 0.4);
        let req = InterpolationRequest { i0: j.clone(), i1: j.clone(), time: TimeSpec::Factor(4), scales: 1 };
        let out = interpolate_pair(&req, &m, true).unwrap();
        assert_eq!(out.len(), 3);
        for o in &out {
            assert!(o.frame.max_abs_diff(&j) < 1e-3);
            assert_eq!(o.diagnostics.as_ref().unwrap().weight_map.shape(), &[6, 32, 48]);
        }
    }

    #[test]
    fn factor_two_equals_direct_half() {
        let m = small_model(3);
        let (a, b) = (texture(32, 32, 0.0), texture(32, 32, 0.5));
        let r1 = InterpolationRequest { i0: a.clone(), i1: b.clone(), time: TimeSpec::At(0.5), scales: 1 };
        let r2 = InterpolationRequest { i0: a, i1: b, time: TimeSpec::Factor(2), scales: 1 };
        assert_eq!(interpolate_pair(&r1, &m, false).unwrap()[0].frame, interpolate_pair(&r2, &m, false).unwrap()[0].frame);
    }

    #[test]
    fn request_errors() {
        let m = small_model(4);
        let a = texture(16, 16, 0.0);
        let tiny = InterpolationRequest { i0: a.clone(), i1: a.clone(), time: TimeSpec::At(0.5), scales: 2 };
        assert!(matches!(interpolate_pair(&tiny, &m, false), Err(Error::TooSmall { .. })));
        let bad_t = InterpolationRequest { i0: a.clone(), i1: a.clone(), time: TimeSpec::At(1.0), scales: 1 };
        assert!(interpolate_pair(&bad_t, &m, false).is_err());
        let mismatch = InterpolationRequest { i0: a.clone(), i1: texture(16, 24, 0.0), time: TimeSpec::At(0.5), scales: 1 };
        assert!(interpolate_pair(&mismatch, &m, false).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let m = small_model(5);
        let back = Model::from_named_tensors(&m.named_tensors()).unwrap();
        assert_eq!(back.named_tensors(), m.named_tensors());
        let mut missing = m.named_tensors();
        missing.retain(|(n, _)| n != "occ.dec2.w");
        assert!(Model::from_named_tensors(&missing).is_err());
    }

    #[test]
    fn sequence_plans() {
        assert_eq!(plan_sequence(2, 8).unwrap().len(), 9);
        assert_eq!(plan_sequence(3, 2).unwrap().len(), 5);
        assert!(plan_sequence(1, 2).is_err());
        assert!(plan_sequence(3, 1).is_err());
    }
}
