//! Losses, optimisation, temperature calibration and gradient verification.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fldr::init_basis_from_image;
use crate::fusion::{self, CANDIDATES};
use crate::graph::{self, Graph, Var};
use crate::kernels;
use crate::metrics;
use crate::pipeline::{image_pyramid, BindMode, BoundModel, Model, ParamGroup};
use crate::real::Real;
use crate::synthetic::Triplet;
use crate::tensor::Tensor;

pub use crate::synthetic::make_synthetic_dataset;

/// Hyperparameters of both training phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Index of the coarsest pyramid level during training.
    pub scales: usize,
    /// Edge weighting factor of the smoothness loss.
    pub edge_weight: f64,
    pub lambda_smooth: f64,
    pub lambda_warp: f64,
    pub lr_main: f64,
    pub lr_fldr: f64,
    pub lr_temp: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub decay_factor: f64,
    /// First epoch at which the decayed rate applies.
    pub decay_start: usize,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub calibration_epochs: usize,
    pub d: usize,
    pub k: usize,
    /// Keep the projection basis at its initial value.
    pub freeze_fldr: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            edge_weight: 150.0,
            lambda_smooth: 0.125,
            lambda_warp: 0.5,
            lr_main: 1e-4,
            lr_fldr: 1e-5,
            lr_temp: 1e-3,
            epochs: 200,
            batch: 8,
            patch: 512,
            decay_factor: 0.25,
            decay_start: 70,
            decay_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            calibration_epochs: 10,
            d: 8,
            k: 16,
            freeze_fldr: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized variant: 64×64 patches, one coarser level, 60 epochs.
    pub fn desk() -> Self {
        Self { scales: 1, epochs: 60, patch: 64, ..Self::default() }
    }

    /// Learning-rate multiplier at `epoch` (0-based).
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start || self.decay_every == 0 {
            return 1.0;
        }
        let n = 1 + (epoch - self.decay_start) / self.decay_every;
        self.decay_factor.powi(n as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.d == 0 || self.k == 0 || self.k > self.d * self.d {
            return bad("need 1 <= k <= d*d");
        }
        if !self.patch.is_multiple_of(crate::pipeline::alignment(self.d, self.scales)) {
            return Err(Error::config(format_args!(
                "patch {} is not a multiple of {}",
                self.patch,
                crate::pipeline::alignment(self.d, self.scales)
            )));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_fldr", self.lr_fldr), ("lr_temp", self.lr_temp)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format_args!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moments must lie in [0, 1)");
        }
        Ok(())
    }
}

/// The three loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub recon: f64,
    pub smooth: f64,
    pub warp: f64,
}

impl LossComponents {
    pub fn total(&self, config: &TrainConfig) -> f64 {
        total_loss(self, config.lambda_smooth, config.lambda_warp)
    }

    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.recon += s * o.recon;
        self.smooth += s * o.smooth;
        self.warp += s * o.warp;
    }
}

/// `recon + λ_smooth·smooth + λ_warp·warp`.
pub fn total_loss(c: &LossComponents, lambda_smooth: f64, lambda_warp: f64) -> f64 {
    c.recon + lambda_smooth * c.smooth + lambda_warp * c.warp
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

fn sum_vars<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Sum over levels of the mean absolute error.
pub(crate) fn loss_recon_var<T: Real>(g: &mut Graph<T>, preds: &[Var], gts: &[Var]) -> Var {
    let terms: Vec<Var> = preds.iter().zip(gts).map(|(&p, &t)| mean_abs_diff(g, p, t)).collect();
    sum_vars(g, &terms)
}

/// Edge weights `exp(−e² Σ_c (∂I)²)` along x and y.
fn edge_weights<T: Real>(img: &Tensor<T>, e: f64) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = img.chw();
    let e2 = T::lit(e * e);
    let wx = Tensor::from_fn_chw(1, h, w.saturating_sub(1), |_, y, x| {
        let s: T = (0..c).map(|ci| (img[[ci, y, x + 1]] - img[[ci, y, x]]).powi(2)).sum();
        (-e2 * s).exp()
    });
    let wy = Tensor::from_fn_chw(1, h.saturating_sub(1), w, |_, y, x| {
        let s: T = (0..c).map(|ci| (img[[ci, y + 1, x]] - img[[ci, y, x]]).powi(2)).sum();
        (-e2 * s).exp()
    });
    (wx, wy)
}

/// Edge-aware first-order smoothness of one flow (`[2, h, w]`) guided by an image at the same resolution.
fn smooth_term<T: Real>(g: &mut Graph<T>, flow: Var, img: &Tensor<T>, e: f64) -> Var {
    let (wx, wy) = edge_weights(img, e);
    let dx = g.diff_x(flow);
    let dx = g.abs(dx);
    let wxv = g.constant(wx);
    let tx = g.mul_channel(dx, wxv);
    let tx = g.mean(tx);
    let dy = g.diff_y(flow);
    let dy = g.abs(dy);
    let wyv = g.constant(wy);
    let ty = g.mul_channel(dy, wyv);
    let ty = g.mean(ty);
    g.add(tx, ty)
}

/// Smoothness of both directions; images are downscaled to the flow resolution.
pub(crate) fn loss_smooth_var<T: Real>(g: &mut Graph<T>, f01: Var, f10: Var, i0: &Tensor<T>, i1: &Tensor<T>, e: f64) -> Result<Var> {
    let (_, fh, fw) = g.value(f01).chw();
    let (_, h, w) = i0.check_chw("smoothness image")?;
    if h % fh != 0 || w % fw != 0 || h / fh != w / fw || g.value(f10).shape() != g.value(f01).shape() || i1.shape() != i0.shape() {
        return Err(Error::shape(format_args!("smoothness: flow {fh}x{fw} does not divide image {h}x{w}")));
    }
    let f = h / fh;
    let (s0, s1) = (kernels::area_downscale(i0, f), kernels::area_downscale(i1, f));
    let a = smooth_term(g, f01, &s0, e);
    let b = smooth_term(g, f10, &s1, e);
    Ok(g.add(a, b))
}

/// Symmetric forward-warp photometric error, holes excluded.
pub(crate) fn loss_warp_var<T: Real>(g: &mut Graph<T>, i0: Var, i1: Var, f01: Var, f10: Var) -> Var {
    let (w0, holes0) = g.splat(i0, f01, None);
    let (w1, holes1) = g.splat(i1, f10, None);
    let d0 = g.sub(w0, i1);
    let d0 = g.abs(d0);
    let m0 = g.masked_mean(d0, holes0.iter().map(|&h| !h).collect());
    let d1 = g.sub(w1, i0);
    let d1 = g.abs(d1);
    let m1 = g.masked_mean(d1, holes1.iter().map(|&h| !h).collect());
    g.add(m0, m1)
}

/// Sum over levels of the mean L1 error between predictions and targets.
pub fn loss_recon<T: Real>(predictions: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape(format_args!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let mut g = Graph::new();
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in predictions.iter().zip(targets) {
        if a.shape() != b.shape() {
            return Err(Error::shape("prediction and target shapes differ"));
        }
        p.push(g.constant(a.clone()));
        t.push(g.constant(b.clone()));
    }
    let l = loss_recon_var(&mut g, &p, &t);
    Ok(g.scalar_value(l).as_f64())
}

/// Edge-aware smoothness of `F0→1`, `F1→0` (`[2, h, w]` at flow resolution).
pub fn loss_smooth<T: Real>(f01: &Tensor<T>, f10: &Tensor<T>, i0: &Tensor<T>, i1: &Tensor<T>, e: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(f01.clone()), g.constant(f10.clone()));
    let l = loss_smooth_var(&mut g, a, b, i0, i1, e)?;
    Ok(g.scalar_value(l).as_f64())
}

/// Warping loss with flows at image resolution.
pub fn loss_warp<T: Real>(i0: &Tensor<T>, i1: &Tensor<T>, f01: &Tensor<T>, f10: &Tensor<T>) -> Result<f64> {
    for (img, f) in [(i0, f01), (i1, f10)] {
        let (_, h, w) = img.check_chw("warp loss image")?;
        if f.shape() != [2, h, w] {
            return Err(Error::shape(format_args!("warp loss flow {:?} does not match image {h}x{w}", f.shape())));
        }
    }
    if i0.shape() != i1.shape() {
        return Err(Error::shape("warp loss images differ in shape"));
    }
    let mut g = Graph::new();
    let v: Vec<Var> = [i0, i1, f01, f10].iter().map(|t| g.constant((*t).clone())).collect();
    let l = loss_warp_var(&mut g, v[0], v[1], v[2], v[3]);
    Ok(g.scalar_value(l).as_f64())
}

/// Training loss graph of one sample.
pub(crate) struct SampleLoss {
    pub loss: Var,
    pub components: LossComponents,
}

pub(crate) fn sample_loss<T: Real>(g: &mut Graph<T>, bound: &BoundModel, s: &Triplet<T>, config: &TrainConfig) -> Result<SampleLoss> {
    let levels = config.scales + 1;
    let p0 = image_pyramid(&s.i0, levels);
    let p1 = image_pyramid(&s.i1, levels);
    let pt = image_pyramid(&s.it, levels);
    let v0: Vec<Var> = p0.iter().map(|t| g.constant(t.clone())).collect();
    let v1: Vec<Var> = p1.iter().map(|t| g.constant(t.clone())).collect();
    let vt: Vec<Var> = pt.into_iter().map(|t| g.constant(t)).collect();
    let flows = bound.flows(g, &v0, &v1)?;
    let mut preds = Vec::with_capacity(levels);
    let mut full0 = None;
    for lv in 0..levels {
        let out = bound.synthesize(g, v0[lv], v1[lv], flows[lv], s.t)?;
        if lv == 0 {
            full0 = Some(out.flow_full);
        }
        preds.push(out.prediction);
    }
    let recon = loss_recon_var(g, &preds, &vt);
    let f01 = g.slice(flows[0], 0, 2);
    let f10 = g.slice(flows[0], 2, 2);
    let smooth = loss_smooth_var(g, f01, f10, &s.i0, &s.i1, config.edge_weight)?;
    let full = full0.unwrap();
    let ff01 = g.slice(full, 0, 2);
    let ff10 = g.slice(full, 2, 2);
    let warp = loss_warp_var(g, v0[0], v1[0], ff01, ff10);
    let ts = g.scale(smooth, T::lit(config.lambda_smooth));
    let tw = g.scale(warp, T::lit(config.lambda_warp));
    let loss = sum_vars(g, &[recon, ts, tw]);
    let components = LossComponents {
        recon: g.scalar_value(recon).as_f64(),
        smooth: g.scalar_value(smooth).as_f64(),
        warp: g.scalar_value(warp).as_f64(),
    };
    Ok(SampleLoss { loss, components })
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every slice in `params` by its gradient; `lr` maps groups to rates.
    pub fn step(&mut self, params: &mut [(ParamGroup, &mut [T])], grads: &[Vec<T>], lr: impl Fn(ParamGroup) -> f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "parameter set changed between steps");
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let eps = T::lit(self.eps);
        for (i, (group, p)) in params.iter_mut().enumerate() {
            let rate = lr(*group);
            if rate == 0.0 {
                continue;
            }
            let step_size = T::lit(rate * c2.sqrt() / c1);
            let eps_hat = eps * T::lit(c2.sqrt());
            let (m, v, gr) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                let gj = gr[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
    }
}

/// Trainable state plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    /// Epochs completed when this state was recorded.
    pub epoch: usize,
    /// Validation PSNR (dB) of this state.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub components: LossComponents,
    pub val_psnr: f64,
    pub lr_main: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_psnr: f64,
    pub best_epoch: usize,
    pub best_psnr: f64,
    pub history: Vec<EpochStats>,
}

/// Mean per-sample PSNR of the interpolated middle frames of `set`, using
/// `scales` coarser levels.
pub fn validation_psnr<T: Real>(model: &Model<T>, set: &[Triplet<T>], scales: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        let pred = predict(model, s, scales)?;
        total += metrics::psnr(&pred, &s.it)?;
    }
    Ok(total / set.len().max(1) as f64)
}

/// Mean per-sample MSE of the interpolated middle frames of `set`.
pub fn validation_mse<T: Real>(model: &Model<T>, set: &[Triplet<T>], scales: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        total += metrics::mse(&predict(model, s, scales)?, &s.it)?;
    }
    Ok(total / set.len().max(1) as f64)
}

/// Interpolates a triplet's middle frame; the result is clipped to `[0, 1]`.
pub fn predict<T: Real>(model: &Model<T>, s: &Triplet<T>, scales: usize) -> Result<Tensor<T>> {
    let req = crate::pipeline::InterpolationRequest {
        i0: s.i0.clone(),
        i1: s.i1.clone(),
        time: crate::pipeline::TimeSpec::At(s.t),
        scales,
    };
    Ok(crate::pipeline::interpolate_pair(&req, model, false)?.remove(0).frame)
}

/// Builds the initial model: basis from `init_image`, networks from `config.seed`.
pub fn initial_model(config: &TrainConfig, init_image: &Tensor<f32>) -> Result<Model<f32>> {
    config.validate()?;
    let mut basis = init_basis_from_image(init_image, config.d, config.k)?.cast::<f32>();
    basis.trainable = !config.freeze_fldr;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Model::new(basis, config.k != crate::flownet::DESIGN_K, &mut rng)
}

/// Main training phase from a fresh initialisation.
pub fn train(
    config: &TrainConfig,
    train_set: &[Triplet<f32>],
    val_set: &[Triplet<f32>],
    init_image: &Tensor<f32>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(ModelCheckpoint, TrainReport)> {
    let model = initial_model(config, init_image)?;
    train_model(config, model, train_set, val_set, progress)
}

/// Main training phase from a given model. The best state by validation PSNR
/// (including the untrained state) is returned.
pub fn train_model(
    config: &TrainConfig,
    mut model: Model<f32>,
    train_set: &[Triplet<f32>],
    val_set: &[Triplet<f32>],
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    if val_set.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    model.basis.trainable = !config.freeze_fldr;
    let initial_psnr = validation_psnr(&model, val_set, config.scales)?;
    let mut best = ModelCheckpoint { model: model.clone(), config: config.clone(), epoch: 0, score: initial_psnr };
    let mut history = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_da7a);
    let mut adam = Adam::<f32>::new(config.beta1, config.beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let factor = config.lr_factor(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch) {
            let (grads, comps, loss) = batch_gradients(&model, batch.iter().map(|&i| &train_set[i]), config)?;
            sum.add_scaled(&comps, batch.len() as f64);
            loss_sum += loss * batch.len() as f64;
            let mut params = model.trainable_mut();
            adam.step(&mut params, &grads, |gr| match gr {
                ParamGroup::Fldr => config.lr_fldr * factor,
                ParamGroup::Main => config.lr_main * factor,
            });
        }
        let n = train_set.len().max(1) as f64;
        let mut comps = LossComponents::default();
        comps.add_scaled(&sum, 1.0 / n);
        let val_psnr = validation_psnr(&model, val_set, config.scales)?;
        let stats = EpochStats { epoch: epoch + 1, loss: loss_sum / n, components: comps, val_psnr, lr_main: config.lr_main * factor };
        log::info!(
            "epoch {:>3}: loss {:.5} (recon {:.5}, smooth {:.5}, warp {:.5}), val PSNR {:.3} dB",
            stats.epoch,
            stats.loss,
            comps.recon,
            comps.smooth,
            comps.warp,
            val_psnr
        );
        progress(&stats);
        if val_psnr > best.score {
            best = ModelCheckpoint { model: model.clone(), config: config.clone(), epoch: epoch + 1, score: val_psnr };
        }
        history.push(stats);
    }
    let report = TrainReport { initial_psnr, best_epoch: best.epoch, best_psnr: best.score, history };
    Ok((best, report))
}

/// Mean gradient over a batch: `(per-parameter gradients, mean components, mean loss)`.
pub(crate) fn batch_gradients<'a, T: Real>(
    model: &Model<T>,
    batch: impl Iterator<Item = &'a Triplet<T>>,
    config: &TrainConfig,
) -> Result<(Vec<Vec<T>>, LossComponents, f64)> {
    let mut acc: Option<Vec<Vec<T>>> = None;
    let mut comps = LossComponents::default();
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    for s in batch {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, BindMode::Train);
        let sl = sample_loss(&mut g, &bound, s, config)?;
        let lv = g.scalar_value(sl.loss).as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(alloc::format!("training loss {lv}")));
        }
        let grads = g.backward(sl.loss);
        let acc = acc.get_or_insert_with(|| bound.trainable.iter().map(|&v| vec![T::zero(); g.value(v).len()]).collect());
        for (slot, &v) in acc.iter_mut().zip(&bound.trainable) {
            if let Some(gr) = grads.get(v) {
                for (a, &b) in slot.iter_mut().zip(gr.data()) {
                    *a += b;
                }
            }
        }
        comps.add_scaled(&sl.components, 1.0);
        loss_sum += lv;
        n += 1;
    }
    let mut acc = acc.ok_or_else(|| Error::config("empty batch"))?;
    let inv = T::lit(1.0 / n as f64);
    for slot in &mut acc {
        for v in slot.iter_mut() {
            *v *= inv;
        }
    }
    let mut mean = LossComponents::default();
    mean.add_scaled(&comps, 1.0 / n as f64);
    Ok((acc, mean, loss_sum / n as f64))
}

/// Outcome of [`calibrate_temperature`].
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub initial_temperature: f64,
    pub temperature: f64,
    pub initial_val_mse: f64,
    pub val_mse: f64,
    /// `(temperature, validation MSE)` after each epoch.
    pub history: Vec<(f64, f64)>,
}

/// Everything the temperature can influence for one sample, precomputed.
struct CalibSample<T> {
    logits: Tensor<T>,
    cands: [Tensor<T>; CANDIDATES],
    target: Tensor<T>,
    t: f64,
}

fn calib_samples(model: &Model<f32>, set: &[Triplet<f32>], scales: usize) -> Result<Vec<CalibSample<f32>>> {
    let mut out = Vec::with_capacity(set.len());
    for s in set {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, BindMode::Inference);
        let v0: Vec<Var> = image_pyramid(&s.i0, scales + 1).into_iter().map(|t| g.constant(t)).collect();
        let v1: Vec<Var> = image_pyramid(&s.i1, scales + 1).into_iter().map(|t| g.constant(t)).collect();
        let flows = bound.flows(&mut g, &v0, &v1)?;
        let lv = bound.synthesize(&mut g, v0[0], v1[0], flows[0], s.t)?;
        let cands = [lv.t_from_0, lv.i0_to_t, v0[0], lv.t_from_1, lv.i1_to_t, v1[0]].map(|v| g.value(v).clone());
        out.push(CalibSample { logits: g.value(lv.logits).clone(), cands, target: s.it.clone(), t: s.t });
    }
    Ok(out)
}

fn calib_forward(g: &mut Graph<f32>, s: &CalibSample<f32>, inv_t: Var) -> Var {
    let l = g.constant(s.logits.clone());
    let scaled = g.mul_scalar(l, inv_t);
    let m = g.softmax_channels(scaled);
    let cands: [Var; CANDIDATES] = core::array::from_fn(|i| g.constant(s.cands[i].clone()));
    fusion::fuse_var(g, &cands, m, s.t)
}

fn calib_mse(set: &[CalibSample<f32>], temperature: f64) -> f64 {
    let mut total = 0.0;
    for s in set {
        let m = graph::softmax_channels(&s.logits.scale((1.0 / temperature) as f32));
        let mut g = Graph::new();
        let mv = g.constant(m);
        let cands: [Var; CANDIDATES] = core::array::from_fn(|i| g.constant(s.cands[i].clone()));
        let out = fusion::fuse_var(&mut g, &cands, mv, s.t);
        let pred = g.value(out).clamp(0.0, 1.0);
        total += metrics::mse(&pred, &s.target).unwrap_or(f64::INFINITY);
    }
    total / set.len().max(1) as f64
}

/// Second phase: fits only the softmax temperature (through `ln T`) by MSE.
/// The temperature with the lowest validation MSE seen, including the starting
/// value, is kept, so validation MSE never increases.
pub fn calibrate_temperature(
    checkpoint: &ModelCheckpoint,
    train_set: &[Triplet<f32>],
    val_set: &[Triplet<f32>],
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, CalibrationReport)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("calibration needs non-empty training and validation sets"));
    }
    let model = &checkpoint.model;
    let train = calib_samples(model, train_set, config.scales)?;
    let val = calib_samples(model, val_set, config.scales)?;
    let t0 = model.temperature.as_f64();
    let initial_val_mse = calib_mse(&val, t0);
    let (mut best_t, mut best_mse) = (t0, initial_val_mse);
    let mut theta = [t0.ln() as f32];
    let mut adam = Adam::<f32>::new(config.beta1, config.beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e3a_9e12);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for _ in 0..config.calibration_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let mut grad = 0.0f32;
            for &i in batch {
                let mut g = Graph::new();
                let th = g.param(Tensor::scalar(theta[0]));
                let neg = g.scale(th, -1.0);
                let inv_t = g.exp(neg);
                let pred = calib_forward(&mut g, &train[i], inv_t);
                let tgt = g.constant(train[i].target.clone());
                let d = g.sub(pred, tgt);
                let d2 = g.mul(d, d);
                let loss = g.mean(d2);
                if !g.scalar_value(loss).is_finite() {
                    return Err(Error::NonFinite("calibration loss".into()));
                }
                grad += g.backward(loss).get(th).map_or(0.0, |t| t.data()[0]);
            }
            let grads = vec![vec![grad / batch.len() as f32]];
            let mut params = [(ParamGroup::Main, &mut theta[..])];
            adam.step(&mut params, &grads, |_| config.lr_temp);
        }
        let temp = (theta[0] as f64).exp();
        let mse = calib_mse(&val, temp);
        log::info!("calibration: T = {temp:.5}, val MSE = {mse:.6e}");
        history.push((temp, mse));
        if mse < best_mse {
            best_mse = mse;
            best_t = temp;
        }
    }
    let mut out = checkpoint.clone();
    out.model.temperature = best_t as f32;
    let report = CalibrationReport { initial_temperature: t0, temperature: best_t, initial_val_mse, val_mse: best_mse, history };
    Ok((out, report))
}

/// Finite-difference agreement for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

fn loss_of(model: &Model<f64>, probe: &Triplet<f64>, config: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, BindMode::Train);
    let sl = sample_loss(&mut g, &bound, probe, config)?;
    Ok(g.scalar_value(sl.loss))
}

/// Compares analytic gradients of the total loss with central differences
/// (step `step`) at `per_group` coordinates per group: the largest-gradient
/// coordinates plus seeded random ones.
pub fn grad_check(model: &Model<f64>, probe: &Triplet<f64>, config: &TrainConfig, per_group: usize, step: f64) -> Result<GradCheckReport> {
    let mut model = model.clone();
    model.basis.trainable = true;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, BindMode::Train);
    let sl = sample_loss(&mut g, &bound, probe, config)?;
    let loss = g.scalar_value(sl.loss);
    let grads = g.backward(sl.loss);
    let analytic: Vec<Vec<f64>> =
        bound.trainable.iter().map(|&v| grads.get(v).map_or_else(|| vec![0.0; g.value(v).len()], |t| t.data().to_vec())).collect();
    drop(g);

    // Slot ranges of each group in `trainable_mut` order.
    let n_flow = model.flow.tensors_mut().len();
    let n_occ = model.occlusion.tensors_mut().len();
    let groups: [(&str, core::ops::Range<usize>); 4] = [
        ("fldr", 0..2),
        ("flow", 2..2 + n_flow),
        ("occlusion", 2 + n_flow..2 + n_flow + n_occ),
        ("alpha", 2 + n_flow + n_occ..3 + n_flow + n_occ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9c4e);
    let mut out = Vec::new();
    for (name, range) in groups {
        let mut coords: Vec<(usize, usize, f64)> = Vec::new();
        for slot in range.clone() {
            for (j, &a) in analytic[slot].iter().enumerate() {
                coords.push((slot, j, a));
            }
        }
        let max_abs_grad = coords.iter().map(|c| c.2.abs()).fold(0.0, f64::max);
        coords.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap_or(core::cmp::Ordering::Equal));
        let top = (per_group / 2).max(1).min(coords.len());
        let mut picked: Vec<(usize, usize, f64)> = coords[..top].to_vec();
        let rest = &coords[top..];
        let significant: Vec<_> = rest.iter().filter(|c| c.2.abs() > 1e-3 * max_abs_grad).collect();
        for _ in top..per_group.min(coords.len()) {
            if significant.is_empty() {
                break;
            }
            picked.push(*significant[rng.gen_range(0..significant.len())]);
        }
        let mut worst = 0.0f64;
        for &(slot, j, a) in &picked {
            let orig = model.trainable_mut()[slot].1[j];
            model.trainable_mut()[slot].1[j] = orig + step;
            let lp = loss_of(&model, probe, config)?;
            model.trainable_mut()[slot].1[j] = orig - step;
            let lm = loss_of(&model, probe, config)?;
            model.trainable_mut()[slot].1[j] = orig;
            let num = (lp - lm) / (2.0 * step);
            let denom = a.abs().max(num.abs());
            let rel = if denom < 1e-12 { 0.0 } else { (a - num).abs() / denom };
            worst = worst.max(rel);
        }
        out.push(GroupCheck { group: String::from(name), checked: picked.len(), max_rel_error: worst, max_abs_grad });
    }
    Ok(GradCheckReport { loss, groups: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        let lr = |e| c.lr_main * c.lr_factor(e);
        assert_eq!(lr(69), 1e-4);
        assert!((lr(70) - 2.5e-5).abs() < 1e-18);
        assert!((lr(120) - 6.25e-6).abs() < 1e-18);
        assert!((lr(170) - 1.5625e-6).abs() < 1e-18);
        assert!((lr(119) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn total_loss_arithmetic() {
        let c = LossComponents { recon: 1.0, smooth: 2.0, warp: 3.0 };
        assert_eq!(c.total(&TrainConfig::default()), 2.75);
        assert_eq!(LossComponents::default().total(&TrainConfig::default()), 0.0);
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::<f64>::full(&[3, 8, 8], 0.5);
        let b = a.map(|v| v + 0.1);
        assert!((loss_recon(core::slice::from_ref(&a), core::slice::from_ref(&b)).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss_recon(core::slice::from_ref(&a), &[]).is_err());
        let z = Tensor::<f64>::zeros(&[2, 8, 8]);
        assert!((loss_warp(&a, &a.map(|v| v + 0.2), &z, &z).unwrap() - 0.4).abs() < 1e-12);
        let cf = Tensor::from_fn_chw(2, 2, 2, |c, _, _| c as f64 + 1.0);
        assert_eq!(loss_smooth(&cf, &cf, &a, &a, 150.0).unwrap(), 0.0);
    }

    #[test]
    fn adam_zero_rate_leaves_group_untouched() {
        let mut a = vec![1.0f64, 2.0];
        let mut b = [3.0f64];
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        {
            let mut p = [(ParamGroup::Fldr, &mut a[..]), (ParamGroup::Main, &mut b[..])];
            opt.step(&mut p, &[vec![1.0, 1.0], vec![1.0]], |g| if g == ParamGroup::Fldr { 0.0 } else { 0.1 });
        }
        assert_eq!(a, vec![1.0, 2.0]);
        assert!((b[0] - 2.9).abs() < 1e-6);
    }
}
