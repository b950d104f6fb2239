//! Occlusion-aware fusion of the six candidate frames.
//!
//! An encoder–decoder predicts six logits per pixel from the inputs, the four
//! warped frames and the four intermediate flows. A temperature-scaled softmax
//! turns them into a [`WeightMap`], and [`fuse`] blends the candidates with the
//! time-dependent group weighting `(1−t)` for frame 0 and `t` for frame 1.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::layers::{BoundConv, Conv};
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of input channels of the occlusion network.
pub const OCC_INPUT_CHANNELS: usize = 26;

/// Number of fusion candidates (and weight-map channels).
pub const CANDIDATES: usize = 6;

/// Guard on the fusion denominator.
pub const FUSE_EPS: f64 = 1e-8;

/// The encoder downsamples three times, so sides must be multiples of this.
pub const OCC_ALIGN: usize = 8;

/// Per-pixel distribution over the candidates, `[6, H, W]`, channel order
/// `(M_t←0, M_0→t, M_0, M_t←1, M_1→t, M_1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    pub data: Tensor<T>,
}

impl<T: Real> WeightMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (c, _, _) = data.check_chw("weight map")?;
        if c != CANDIDATES {
            return Err(Error::shape(format_args!("weight map needs {CANDIDATES} channels, got {c}")));
        }
        Ok(Self { data })
    }

    /// Largest deviation of a per-pixel channel sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let (c, h, w) = self.data.chw();
        let plane = h * w;
        (0..plane)
            .map(|p| ((0..c).map(|ci| self.data.data()[ci * plane + p].as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Softmax temperature, always positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::arg(format_args!("temperature must be positive and finite, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionNetworkWeights<T> {
    /// 4×4 stride-2 convolutions: 26→16→32→64.
    pub enc: Vec<Conv<T>>,
    /// 3×3 convolutions: 64→64, (64+32)→32, (32+16)→16, 16→6.
    pub dec: Vec<Conv<T>>,
}

pub fn build_occlusion_network<T: Real, R: Rng + ?Sized>(rng: &mut R) -> OcclusionNetworkWeights<T> {
    let enc = alloc::vec![
        Conv::init(OCC_INPUT_CHANNELS, 16, 4, 2, 1, 1.0, rng),
        Conv::init(16, 32, 4, 2, 1, 1.0, rng),
        Conv::init(32, 64, 4, 2, 1, 1.0, rng),
    ];
    let dec = alloc::vec![
        Conv::init(64, 64, 3, 1, 1, 1.0, rng),
        Conv::init(64 + 32, 32, 3, 1, 1, 1.0, rng),
        Conv::init(32 + 16, 16, 3, 1, 1, 1.0, rng),
        Conv::init(16, CANDIDATES, 3, 1, 1, 0.1, rng),
    ];
    OcclusionNetworkWeights { enc, dec }
}

impl<T: Real> OcclusionNetworkWeights<T> {
    pub fn parameter_count(&self) -> usize {
        self.enc.iter().chain(self.dec.iter()).map(Conv::parameter_count).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> OcclusionBound {
        OcclusionBound {
            enc: self.enc.iter().map(|c| c.bind(g, trainable)).collect(),
            dec: self.dec.iter().map(|c| c.bind(g, trainable)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> OcclusionNetworkWeights<U> {
        OcclusionNetworkWeights { enc: self.enc.iter().map(Conv::cast).collect(), dec: self.dec.iter().map(Conv::cast).collect() }
    }

    pub fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((alloc::format!("occ.enc{i}.w"), &c.weight));
            out.push((alloc::format!("occ.enc{i}.b"), &c.bias));
        }
        for (i, c) in self.dec.iter().enumerate() {
            out.push((alloc::format!("occ.dec{i}.w"), &c.weight));
            out.push((alloc::format!("occ.dec{i}.b"), &c.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct OcclusionBound {
    pub enc: Vec<BoundConv>,
    pub dec: Vec<BoundConv>,
}

impl OcclusionBound {
    pub fn vars(&self) -> Vec<Var> {
        self.enc.iter().chain(self.dec.iter()).flat_map(|c| [c.w, c.b]).collect()
    }

    /// Raw `[6, H, W]` logits from the `[26, H, W]` input.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let (c, h, w) = g.value(input).chw();
        if c != OCC_INPUT_CHANNELS {
            return Err(Error::shape(format_args!("occlusion input needs {OCC_INPUT_CHANNELS} channels, got {c}")));
        }
        if h % OCC_ALIGN != 0 || w % OCC_ALIGN != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format_args!("occlusion input {h}x{w} is not a multiple of {OCC_ALIGN}")));
        }
        let e0 = self.enc[0].apply_relu(g, input);
        let e1 = self.enc[1].apply_relu(g, e0);
        let e2 = self.enc[2].apply_relu(g, e1);
        let d0 = self.dec[0].apply_relu(g, e2);
        let u0 = g.upsample_nearest2(d0);
        let j1 = g.concat(&[u0, e1]);
        let d1 = self.dec[1].apply_relu(g, j1);
        let u1 = g.upsample_nearest2(d1);
        let j2 = g.concat(&[u1, e0]);
        let d2 = self.dec[2].apply_relu(g, j2);
        let u2 = g.upsample_nearest2(d2);
        Ok(self.dec[3].apply(g, u2))
    }
}

/// Per-pixel softmax of `logits / T`.
pub fn softmax_with_temperature<T: Real>(logits: &Tensor<T>, temperature: Temperature) -> Result<WeightMap<T>> {
    let scaled = logits.scale(T::lit(1.0 / temperature.value()));
    WeightMap::new(graph::softmax_channels(&scaled))
}

/// Full-resolution tensors the occlusion network looks at.
#[derive(Clone, Debug)]
pub struct OcclusionInputs<'a, T> {
    pub i0: &'a Tensor<T>,
    pub i1: &'a Tensor<T>,
    /// Forward-warped `I_0→t`, `I_1→t`.
    pub i0_to_t: &'a Tensor<T>,
    pub i1_to_t: &'a Tensor<T>,
    /// Backward-warped `I_t←0`, `I_t←1`.
    pub t_from_0: &'a Tensor<T>,
    pub t_from_1: &'a Tensor<T>,
    pub f0t: &'a Tensor<T>,
    pub f1t: &'a Tensor<T>,
    pub ft0: &'a Tensor<T>,
    pub ft1: &'a Tensor<T>,
}

impl<T: Real> OcclusionInputs<'_, T> {
    /// Stacks everything into the `[26, H, W]` network input.
    pub fn stack(&self) -> Result<Tensor<T>> {
        let parts = [
            self.i0, self.i1, self.i0_to_t, self.i1_to_t, self.t_from_0, self.t_from_1, self.f0t, self.f1t, self.ft0, self.ft1,
        ];
        let (_, h, w) = self.i0.check_chw("occlusion input")?;
        for p in parts {
            let (_, ph, pw) = p.check_chw("occlusion input")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format_args!("occlusion inputs differ in size: {h}x{w} vs {ph}x{pw}")));
            }
        }
        let stacked = Tensor::concat_channels(&parts)?;
        if stacked.shape()[0] != OCC_INPUT_CHANNELS {
            return Err(Error::shape(format_args!("occlusion inputs stack to {} channels, need {OCC_INPUT_CHANNELS}", stacked.shape()[0])));
        }
        Ok(stacked)
    }
}

pub fn estimate_weight_map<T: Real>(
    inputs: &OcclusionInputs<'_, T>,
    weights: &OcclusionNetworkWeights<T>,
    temperature: Temperature,
) -> Result<WeightMap<T>> {
    let stacked = inputs.stack()?;
    let mut g = Graph::new();
    let net = weights.bind(&mut g, false);
    let x = g.constant(stacked);
    let logits = net.logits(&mut g, x)?;
    softmax_with_temperature(g.value(logits), temperature)
}

/// The six candidates in weight-map channel order.
#[derive(Clone, Debug)]
pub struct FusionCandidates<'a, T> {
    pub t_from_0: &'a Tensor<T>,
    pub i0_to_t: &'a Tensor<T>,
    pub i0: &'a Tensor<T>,
    pub t_from_1: &'a Tensor<T>,
    pub i1_to_t: &'a Tensor<T>,
    pub i1: &'a Tensor<T>,
}

impl<'a, T> FusionCandidates<'a, T> {
    pub fn ordered(&self) -> [&'a Tensor<T>; CANDIDATES] {
        [self.t_from_0, self.i0_to_t, self.i0, self.t_from_1, self.i1_to_t, self.i1]
    }
}

fn group_weight(j: usize, t: f64) -> f64 {
    if j < 3 {
        1.0 - t
    } else {
        t
    }
}

/// Blends the candidates with `M` at time `t`.
pub fn fuse<T: Real>(candidates: &FusionCandidates<'_, T>, m: &WeightMap<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format_args!("time t = {t} is outside [0, 1]")));
    }
    let cands = candidates.ordered();
    let (c, h, w) = cands[0].check_chw("fusion candidate")?;
    for x in cands {
        if x.shape() != cands[0].shape() {
            return Err(Error::shape("fusion candidates differ in shape"));
        }
    }
    if m.data.shape() != [CANDIDATES, h, w] {
        return Err(Error::shape(format_args!("weight map {:?} does not match {h}x{w}", m.data.shape())));
    }
    let plane = h * w;
    let md = m.data.data();
    let gw: [T; CANDIDATES] = core::array::from_fn(|j| T::lit(group_weight(j, t)));
    let eps = T::lit(FUSE_EPS);
    let mut out = Tensor::zeros(&[c, h, w]);
    for p in 0..plane {
        let mut den = T::zero();
        for j in 0..CANDIDATES {
            den += gw[j] * md[j * plane + p];
        }
        let den = den.max(eps);
        for ci in 0..c {
            let mut num = T::zero();
            for j in 0..CANDIDATES {
                num += gw[j] * md[j * plane + p] * cands[j].data()[ci * plane + p];
            }
            out.data_mut()[ci * plane + p] = num / den;
        }
    }
    Ok(out)
}

/// Graph form of [`fuse`]; `cands` in weight-map channel order.
pub fn fuse_var<T: Real>(g: &mut Graph<T>, cands: &[Var; CANDIDATES], m: Var, t: f64) -> Var {
    let mut num: Option<Var> = None;
    let mut den: Option<Var> = None;
    for (j, &cand) in cands.iter().enumerate() {
        let wj = T::lit(group_weight(j, t));
        let mj = g.slice(m, j, 1);
        let mj = g.scale(mj, wj);
        let term = g.mul_channel(cand, mj);
        num = Some(match num {
            None => term,
            Some(n) => g.add(n, term),
        });
        den = Some(match den {
            None => mj,
            Some(d) => g.add(d, mj),
        });
    }
    g.div_channel(num.unwrap(), den.unwrap(), T::lit(FUSE_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn occlusion_network_shape_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: OcclusionNetworkWeights<f64> = build_occlusion_network(&mut rng);
        assert_eq!(net.parameter_count(), 120_134);
        assert_eq!(net.enc[0].in_channels(), 26);
        assert_eq!(net.dec[3].out_channels(), 6);
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn_chw(26, 16, 24, |c, y, x| ((c + y * x) as f64 * 0.1).cos()));
        let l = b.logits(&mut g, x).unwrap();
        assert_eq!(g.value(l).shape(), &[6, 16, 24]);
        let bad = g.constant(Tensor::zeros(&[26, 12, 16]));
        assert!(b.logits(&mut g, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let eq = Tensor::<f64>::full(&[6, 2, 2], 0.7);
        let m = softmax_with_temperature(&eq, Temperature::default()).unwrap();
        assert!(m.data.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let l = Tensor::from_fn_chw(6, 1, 1, |c, _, _| if c == 0 { 1.0f64 } else { 0.0 });
        let m = softmax_with_temperature(&l, Temperature::default()).unwrap();
        let e = core::f64::consts::E;
        assert!((m.data.data()[0] - e / (e + 5.0)).abs() < 1e-15);
        let hot = l.scale(50.0);
        let m = softmax_with_temperature(&hot, Temperature::new(1e6).unwrap()).unwrap();
        assert!(m.data.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-4));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn fuse_identity_and_t0() {
        let j = Tensor::from_fn_chw(3, 2, 2, |c, y, x| (c + 2 * y + x) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_fn_chw(6, 2, 2, |_, _, _| rng.gen_range(-2.0..2.0));
        let m = softmax_with_temperature(&logits, Temperature::default()).unwrap();
        let same = FusionCandidates { t_from_0: &j, i0_to_t: &j, i0: &j, t_from_1: &j, i1_to_t: &j, i1: &j };
        assert!(fuse(&same, &m, 0.37).unwrap().max_abs_diff(&j) < 1e-14);
        assert!(fuse(&same, &m, 1.2).is_err());

        let consts: Vec<Tensor<f64>> = (0..6).map(|i| Tensor::full(&[3, 2, 2], i as f64 / 5.0)).collect();
        let c = FusionCandidates {
            t_from_0: &consts[0],
            i0_to_t: &consts[1],
            i0: &consts[2],
            t_from_1: &consts[3],
            i1_to_t: &consts[4],
            i1: &consts[5],
        };
        let out = fuse(&c, &m, 0.0).unwrap();
        let md = m.data.data();
        for p in 0..4 {
            let want = (0..3).map(|k| md[k * 4 + p] * k as f64 / 5.0).sum::<f64>() / (0..3).map(|k| md[k * 4 + p]).sum::<f64>();
            assert!((out.data()[p] - want).abs() < 1e-14);
        }
        let uni = WeightMap::new(Tensor::full(&[6, 2, 2], 1.0 / 6.0)).unwrap();
        let out = fuse(&c, &uni, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-14));
    }

    #[test]
    fn graph_fuse_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ims: Vec<Tensor<f64>> = (0..6).map(|_| Tensor::from_fn_chw(3, 3, 4, |_, _, _| rng.gen_range(0.0..1.0))).collect();
        let logits = Tensor::from_fn_chw(6, 3, 4, |_, _, _| rng.gen_range(-2.0..2.0));
        let m = softmax_with_temperature(&logits, Temperature::default()).unwrap();
        let c = FusionCandidates { t_from_0: &ims[0], i0_to_t: &ims[1], i0: &ims[2], t_from_1: &ims[3], i1_to_t: &ims[4], i1: &ims[5] };
        let plain = fuse(&c, &m, 0.3).unwrap();
        let mut g = Graph::new();
        let vars: [Var; 6] = core::array::from_fn(|i| g.constant(ims[i].clone()));
        let mv = g.constant(m.data.clone());
        let out = fuse_var(&mut g, &vars, mv, 0.3);
        assert!(g.value(out).max_abs_diff(&plain) < 1e-14);
    }
}
