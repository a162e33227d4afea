//! Optimisation: full pretraining at one resolution, and multi-scale
//! fine-tuning that updates only the patch-kernel bank.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{format_resolution_list, parse_resolution_list, KeyValues};
use crate::patch_embed::{
    adaptive_kernel_size, extract_patches_batch, kernel_gradient, PatchKernel, PatchKernelBank,
};
use crate::resize::{build_resize_operator, PiResize, ResizeMethod, ResizeOperator};
use crate::vit::{
    argmax, backward_batch, cross_entropy_batch, decays, forward_batch, FreezeMask, ViTConfig, ViTParams,
};
use crate::{Error, Real, Resolution, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::invalid(format!("unknown precision `{s}` (f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the loss at the base resolution.
    pub lambda: f64,
    /// Number of kernels in the bank, and of resolution subsets.
    pub kernels: usize,
    /// Square training resolutions, partitioned into `kernels` subsets.
    pub resolutions: Vec<Resolution>,
    pub base_resolution: Resolution,
    pub seed: u64,
    pub precision: Precision,
    /// Pretraining fails unless final training accuracy beats chance by
    /// this many points (0 disables the check).
    pub accuracy_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 5,
            lambda: 1.0,
            kernels: 4,
            resolutions: [8, 12, 16, 20, 24, 28, 32, 40].iter().map(|&r| (r, r)).collect(),
            base_resolution: (32, 32),
            seed: 0,
            precision: Precision::F32,
            accuracy_margin: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults for full-model pretraining on the synthetic data: a larger
    /// step size and longer schedule than fine-tuning.
    pub fn pretrain_defaults() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            epochs: 60,
            ..Default::default()
        }
    }

    /// Overrides fields from `key = value` pairs.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("learning_rate", &mut self.learning_rate)?;
        kv.apply("momentum", &mut self.momentum)?;
        kv.apply("weight_decay", &mut self.weight_decay)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("lambda", &mut self.lambda)?;
        kv.apply("kernels", &mut self.kernels)?;
        kv.apply("seed", &mut self.seed)?;
        kv.apply("precision", &mut self.precision)?;
        kv.apply("accuracy_margin", &mut self.accuracy_margin)?;
        if let Some(v) = kv.get("resolutions") {
            self.resolutions = parse_resolution_list(v)?;
        }
        if let Some(v) = kv.get("base_resolution") {
            self.base_resolution = crate::config::parse_resolution(v)?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("learning_rate", self.learning_rate.to_string());
        kv.set("momentum", self.momentum.to_string());
        kv.set("weight_decay", self.weight_decay.to_string());
        kv.set("batch_size", self.batch_size.to_string());
        kv.set("epochs", self.epochs.to_string());
        kv.set("lambda", self.lambda.to_string());
        kv.set("kernels", self.kernels.to_string());
        kv.set("resolutions", format_resolution_list(&self.resolutions));
        kv.set("base_resolution", format_resolution_list(&[self.base_resolution]));
        kv.set("seed", self.seed.to_string());
        kv.set("precision", self.precision.to_string());
        kv.set("accuracy_margin", self.accuracy_margin.to_string());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.momentum, self.weight_decay, self.lambda];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "learning_rate, momentum, weight_decay and lambda must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.kernels == 0 || self.kernels > self.resolutions.len() {
            return Err(Error::invalid(format!(
                "need 1 <= kernels <= number of resolutions, got {} and {}",
                self.kernels,
                self.resolutions.len()
            )));
        }
        Ok(())
    }

    /// Sorted, deduplicated resolutions split into `kernels` contiguous
    /// subsets whose sizes differ by at most one (larger subsets first).
    pub fn subsets(&self) -> Result<Vec<Vec<Resolution>>> {
        let mut sorted = self.resolutions.clone();
        sorted.sort_by_key(|&(h, w)| (h * w, h));
        sorted.dedup();
        let k = self.kernels;
        if k == 0 || k > sorted.len() {
            return Err(Error::invalid(format!(
                "cannot split {} resolutions into {k} subsets",
                sorted.len()
            )));
        }
        let (q, rem) = (sorted.len() / k, sorted.len() % k);
        let mut out = Vec::with_capacity(k);
        let mut it = sorted.into_iter();
        for i in 0..k {
            out.push(it.by_ref().take(q + usize::from(i < rem)).collect());
        }
        Ok(out)
    }
}

/// Deterministic generator for one `(epoch, step)` position of a run, so
/// draws never depend on how many numbers earlier steps consumed.
pub fn stream_rng(seed: u64, epoch: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ step);
    rng
}

const SHUFFLE_STEP: u64 = u32::MAX as u64;

/// One uniform draw from each subset.
pub fn sample_resolutions<R: Rng + ?Sized>(
    subsets: &[Vec<Resolution>],
    rng: &mut R,
) -> Result<Vec<Resolution>> {
    subsets
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if s.is_empty() {
                Err(Error::invalid(format!("resolution subset {k} is empty")))
            } else {
                Ok(s[rng.random_range(0..s.len())])
            }
        })
        .collect()
}

/// SGD with classic momentum; weight decay is added to the gradient of
/// decayed tensors before the momentum update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn from_config(config: &TrainConfig) -> Self {
        Sgd {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        }
    }
}

/// Momentum buffers, one per trainable tensor, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    buffers: Vec<ArrayD<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState { buffers: Vec::new() }
    }

    pub fn buffers(&self) -> &[ArrayD<T>] {
        &self.buffers
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Updates `params[i]` from `grads[i]`; names decide weight decay.
    pub fn step(
        &mut self,
        sgd: &Sgd,
        params: Vec<(String, ArrayViewMutD<'_, T>)>,
        grads: &[ArrayViewD<'_, T>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidState("parameter and gradient lists differ".into()));
        }
        if self.buffers.is_empty() {
            self.buffers = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        if self.buffers.len() != grads.len() {
            return Err(Error::InvalidState("optimizer state does not match trainables".into()));
        }
        let lr = T::from_f64_lossy(sgd.learning_rate);
        let mu = T::from_f64_lossy(sgd.momentum);
        let wd = T::from_f64_lossy(sgd.weight_decay);
        for (((name, mut p), g), v) in params.into_iter().zip(grads).zip(&mut self.buffers) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::InvalidState(format!("shape mismatch for `{name}`")));
            }
            let decay = decays(&name) && sgd.weight_decay != 0.0;
            ndarray::Zip::from(&mut p).and(g).and(v).for_each(|p, &g, v| {
                let g = if decay { g + wd * *p } else { g };
                *v = mu * *v + g;
                *p = *p - lr * *v;
            });
        }
        Ok(())
    }
}

fn bank_tensors_mut<T: Real>(bank: &mut PatchKernelBank<T>) -> Vec<(String, ArrayViewMutD<'_, T>)> {
    let mut out = Vec::new();
    for (k, kernel) in bank.kernels_mut().iter_mut().enumerate() {
        out.push((format!("bank.{k}.weight"), kernel.weight.view_mut().into_dyn()));
        out.push((format!("bank.{k}.bias"), kernel.bias.view_mut().into_dyn()));
    }
    out
}

fn kernel_tensors<T: Real>(kernels: &[PatchKernel<T>]) -> Vec<ArrayViewD<'_, T>> {
    kernels
        .iter()
        .flat_map(|k| [k.weight.view().into_dyn(), k.bias.view().into_dyn()])
        .collect()
}

/// Memoised image-resize operators and kernel PI-resize maps.
#[derive(Default)]
pub struct ResizeCache {
    images: HashMap<(Resolution, Resolution), ResizeOperator>,
    kernels: HashMap<(Resolution, Resolution, ResizeMethod), PiResize>,
}

impl ResizeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn image_op(&mut self, src: Resolution, dst: Resolution) -> Result<&ResizeOperator> {
        if !self.images.contains_key(&(src, dst)) {
            let op = build_resize_operator(src, dst, ResizeMethod::Bilinear)?;
            self.images.insert((src, dst), op);
        }
        Ok(&self.images[&(src, dst)])
    }

    pub fn kernel_map(&mut self, src: Resolution, dst: Resolution, method: ResizeMethod) -> Result<&PiResize> {
        let key = (src, dst, method);
        if !self.kernels.contains_key(&key) {
            self.kernels.insert(key, PiResize::new(src, dst, method)?);
        }
        Ok(&self.kernels[&key])
    }
}

/// Bilinearly resizes every image of a batch to `target`.
pub fn resize_batch<T: Real>(
    images: &[ArrayView3<'_, T>],
    target: Resolution,
    cache: &mut ResizeCache,
) -> Result<Vec<Array3<T>>> {
    images
        .iter()
        .map(|img| {
            let (h, w, _) = img.dim();
            cache.image_op((h, w), target)?.apply(*img)
        })
        .collect()
}

/// Patch tokens `B × N² × D` of a batch of equally sized images, and the
/// stacked patches they came from.
pub fn embed_batch<T: Real>(
    kernel: &PatchKernel<T>,
    images: &[ArrayView3<'_, T>],
    grid: usize,
) -> Result<(Array3<T>, Array2<T>)> {
    let patches = extract_patches_batch(images, kernel.size(), grid)?;
    let tokens = patches.dot(&kernel.weight_matrix()) + &kernel.bias;
    let d = kernel.embed_dim();
    let tokens = tokens
        .into_shape_with_order((images.len(), grid * grid, d))
        .expect("batch of grids");
    Ok((tokens, patches))
}

/// Loss and bank gradient for one term: the batch, already at its target
/// resolution, embedded by bank kernel `index` adapted to that resolution.
fn branch_loss_and_grad<T: Real>(
    params: &ViTParams<T>,
    bank: &PatchKernelBank<T>,
    index: usize,
    images: &[ArrayView3<'_, T>],
    labels: &[usize],
    cache: &mut ResizeCache,
) -> Result<(T, PatchKernel<T>)> {
    let grid = params.config.grid;
    let (h, w, _) = images[0].dim();
    let base = bank.kernel(index);
    let target = adaptive_kernel_size((h, w), grid)?;
    let map = cache.kernel_map(base.size(), target, bank.method())?;
    let adapted = base.resized(map)?;
    let (tokens, patches) = embed_batch(&adapted, images, grid)?;
    let (logits, fwd) = forward_batch(params, tokens.view())?;
    let (loss, dlogits) = cross_entropy_batch(logits.view(), labels)?;
    let (dtokens, _) = backward_batch(params, &fwd, dlogits.view(), FreezeMask::AllFrozen)?;
    let d = adapted.embed_dim();
    let dtok = dtokens
        .into_shape_with_order((images.len() * grid * grid, d))
        .expect("token count");
    let g = kernel_gradient(patches.view(), dtok.view(), target, adapted.channels());
    Ok((
        loss,
        PatchKernel {
            weight: map.apply_transpose(g.weight.view())?,
            bias: g.bias,
        },
    ))
}

/// Per-term losses of one fine-tuning step: one per sampled resolution,
/// then the base-resolution term (unweighted).
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub branches: Vec<f64>,
    pub base: f64,
    pub lambda: f64,
}

impl StepLosses {
    /// `Σ_k L_k + λ · L_base`.
    pub fn total(&self) -> f64 {
        self.branches.iter().sum::<f64>() + self.lambda * self.base
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite() && self.base.is_finite()
    }
}

/// Multi-scale objective for one batch of base-resolution images and its
/// gradient with respect to every bank kernel. Branch `k` resizes the batch
/// to `resolutions[k]` and uses kernel `k`; the base term uses the largest
/// kernel on the unresized batch and is weighted by `lambda`.
pub fn mspe_loss_and_grad<T: Real>(
    params: &ViTParams<T>,
    bank: &PatchKernelBank<T>,
    images: &[ArrayView3<'_, T>],
    labels: &[usize],
    resolutions: &[Resolution],
    lambda: f64,
    cache: &mut ResizeCache,
) -> Result<(StepLosses, Vec<PatchKernel<T>>)> {
    if resolutions.len() != bank.len() {
        return Err(Error::invalid(format!(
            "{} sampled resolutions for a bank of {} kernels",
            resolutions.len(),
            bank.len()
        )));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("batch is empty or images and labels differ in count"));
    }
    let mut grads: Vec<PatchKernel<T>> = bank
        .kernels()
        .iter()
        .map(|k| PatchKernel::zeros(k.size(), k.channels(), k.embed_dim()))
        .collect();
    let mut branches = Vec::with_capacity(resolutions.len());
    for (k, &res) in resolutions.iter().enumerate() {
        let resized = resize_batch(images, res, cache)?;
        let views: Vec<_> = resized.iter().map(|a| a.view()).collect();
        let (loss, g) = branch_loss_and_grad(params, bank, k, &views, labels, cache)?;
        grads[k].weight += &g.weight;
        grads[k].bias += &g.bias;
        branches.push(loss.to_f64().unwrap_or(f64::NAN));
    }
    let mut base = 0.0;
    if lambda != 0.0 {
        let last = bank.len() - 1;
        let (loss, g) = branch_loss_and_grad(params, bank, last, images, labels, cache)?;
        let lam = T::from_f64_lossy(lambda);
        grads[last].weight.scaled_add(lam, &g.weight);
        grads[last].bias.scaled_add(lam, &g.bias);
        base = loss.to_f64().unwrap_or(f64::NAN);
    }
    Ok((StepLosses { branches, base, lambda }, grads))
}

/// One SGD step on the bank. The encoder is only read.
#[allow(clippy::too_many_arguments)]
pub fn mspe_step<T: Real>(
    params: &ViTParams<T>,
    bank: &mut PatchKernelBank<T>,
    images: &[ArrayView3<'_, T>],
    labels: &[usize],
    resolutions: &[Resolution],
    config: &TrainConfig,
    state: &mut OptimizerState<T>,
    cache: &mut ResizeCache,
) -> Result<StepLosses> {
    let (losses, grads) =
        mspe_loss_and_grad(params, bank, images, labels, resolutions, config.lambda, cache)?;
    if !losses.is_finite() {
        return Err(Error::TrainingFailure {
            epoch: 0,
            step: 0,
            message: format!("non-finite loss {:?}", losses),
        });
    }
    state.step(&Sgd::from_config(config), bank_tensors_mut(bank), &kernel_tensors(&grads))?;
    Ok(losses)
}

/// One row of a loss history: `term` is `total`, `base`, `branch{k}`, or
/// `accuracy` for pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    /// Step within the epoch; `None` for per-epoch means.
    pub step: Option<usize>,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    fn push(&mut self, epoch: usize, step: Option<usize>, term: impl Into<String>, value: f64) {
        self.records.push(LossRecord {
            epoch,
            step,
            term: term.into(),
            value,
        });
    }

    /// Per-epoch means of one term.
    pub fn epoch_means(&self, term: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.step.is_none() && r.term == term)
            .map(|r| r.value)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with header `epoch,step,term,value`; epoch means have an empty
    /// step column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,term,value\n");
        for r in &self.records {
            let step = r.step.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, step, r.term, r.value));
        }
        out
    }
}

fn batches(len: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, epoch as u64, SHUFFLE_STEP));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_images<T: Real>(images: &[Array3<T>], labels: &[usize], resolution: Resolution) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::invalid("images and labels differ in count"));
    }
    if let Some(img) = images.iter().find(|i| (i.dim().0, i.dim().1) != resolution) {
        let (h, w, _) = img.dim();
        return Err(Error::invalid(format!(
            "training image is {h}x{w}, expected the base resolution {}x{}",
            resolution.0, resolution.1
        )));
    }
    Ok(())
}

/// Called after each epoch with the epoch index (from 1) and the bank.
pub type EpochHook<'a, T> = dyn FnMut(usize, &PatchKernelBank<T>) -> Result<()> + 'a;

/// Runs `config.epochs` epochs of [`mspe_step`] over shuffled batches of
/// base-resolution images. Resolutions are redrawn for every step.
pub fn mspe_train<T: Real>(
    params: &ViTParams<T>,
    bank: &mut PatchKernelBank<T>,
    images: &[Array3<T>],
    labels: &[usize],
    config: &TrainConfig,
    mut on_epoch: Option<&mut EpochHook<'_, T>>,
) -> Result<LossHistory> {
    config.validate()?;
    check_images(images, labels, config.base_resolution)?;
    let subsets = config.subsets()?;
    if subsets.len() != bank.len() {
        return Err(Error::invalid(format!(
            "{} resolution subsets for a bank of {} kernels",
            subsets.len(),
            bank.len()
        )));
    }
    let mut history = LossHistory::default();
    let mut state = OptimizerState::new();
    let mut cache = ResizeCache::new();
    for epoch in 1..=config.epochs {
        let mut sums = vec![0.0; bank.len() + 2];
        let order = batches(images.len(), config.batch_size, config.seed, epoch);
        for (step, idx) in order.iter().enumerate() {
            let views: Vec<_> = idx.iter().map(|&i| images[i].view()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut rng = stream_rng(config.seed, epoch as u64, step as u64);
            let res = sample_resolutions(&subsets, &mut rng)?;
            let losses = mspe_step(params, bank, &views, &ys, &res, config, &mut state, &mut cache)
                .map_err(|e| match e {
                    Error::TrainingFailure { message, .. } => Error::TrainingFailure {
                        epoch,
                        step,
                        message,
                    },
                    e => e,
                })?;
            history.push(epoch, Some(step), "total", losses.total());
            history.push(epoch, Some(step), "base", losses.base);
            for (k, &l) in losses.branches.iter().enumerate() {
                history.push(epoch, Some(step), format!("branch{k}"), l);
            }
            sums[0] += losses.total();
            sums[1] += losses.base;
            for (k, &l) in losses.branches.iter().enumerate() {
                sums[2 + k] += l;
            }
        }
        let n = order.len().max(1) as f64;
        history.push(epoch, None, "total", sums[0] / n);
        history.push(epoch, None, "base", sums[1] / n);
        for k in 0..bank.len() {
            history.push(epoch, None, format!("branch{k}"), sums[2 + k] / n);
        }
        log::info!("mspe epoch {epoch}: mean total loss {:.4}", sums[0] / n);
        if let Some(hook) = on_epoch.as_mut() {
            hook(epoch, bank)?;
        }
    }
    Ok(history)
}

/// Freshly initialised encoder and `(h/N) × (w/N)` patch kernel for a base
/// resolution, seeded deterministically.
pub fn init_model<T: Real>(
    config: ViTConfig,
    base_resolution: Resolution,
    channels: usize,
    seed: u64,
) -> Result<(ViTParams<T>, PatchKernel<T>)> {
    let (h, w) = base_resolution;
    let n = config.grid;
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::invalid(format!(
            "base resolution {h}x{w} is not a multiple of the grid {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ViTParams::init(config, &mut rng)?;
    let kernel = PatchKernel::random((h / n, w / n), channels, config.dim, &mut rng);
    Ok((params, kernel))
}

/// Loss, gradients of the encoder and of the kernel, and the number of
/// correct predictions, for one batch of the plain single-resolution model.
pub fn pretrain_loss_and_grad<T: Real>(
    params: &ViTParams<T>,
    kernel: &PatchKernel<T>,
    images: &[ArrayView3<'_, T>],
    labels: &[usize],
) -> Result<(T, ViTParams<T>, PatchKernel<T>, usize)> {
    let grid = params.config.grid;
    let (tokens, patches) = embed_batch(kernel, images, grid)?;
    let (logits, fwd) = forward_batch(params, tokens.view())?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    let (loss, dlogits) = cross_entropy_batch(logits.view(), labels)?;
    let (dtokens, grads) = backward_batch(params, &fwd, dlogits.view(), FreezeMask::AllTrainable)?;
    let dtok = dtokens
        .into_shape_with_order((images.len() * grid * grid, kernel.embed_dim()))
        .expect("token count");
    let gk = kernel_gradient(patches.view(), dtok.view(), kernel.size(), kernel.channels());
    Ok((loss, grads.expect("trainable mask yields gradients"), gk, correct))
}

/// Trains the encoder, head and single patch kernel at the base
/// resolution. History terms: `loss` and `accuracy` (training, per epoch).
pub fn pretrain<T: Real>(
    params: &mut ViTParams<T>,
    kernel: &mut PatchKernel<T>,
    images: &[Array3<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<LossHistory> {
    config.validate()?;
    check_images(images, labels, config.base_resolution)?;
    let sgd = Sgd::from_config(config);
    let mut state = OptimizerState::new();
    let mut history = LossHistory::default();
    let mut accuracy = 0.0;
    for epoch in 1..=config.epochs {
        let order = batches(images.len(), config.batch_size, config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, idx) in order.iter().enumerate() {
            let views: Vec<_> = idx.iter().map(|&i| images[i].view()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads, gk, c) = pretrain_loss_and_grad(params, kernel, &views, &ys)?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    step,
                    message: format!("non-finite loss {loss}"),
                });
            }
            history.push(epoch, Some(step), "loss", loss);
            loss_sum += loss * idx.len() as f64;
            correct += c;
            let mut targets = params.tensors_mut();
            targets.push(("patch.weight".into(), kernel.weight.view_mut().into_dyn()));
            targets.push(("patch.bias".into(), kernel.bias.view_mut().into_dyn()));
            let mut g: Vec<ArrayViewD<'_, T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            g.push(gk.weight.view().into_dyn());
            g.push(gk.bias.view().into_dyn());
            state.step(&sgd, targets, &g)?;
        }
        let n = images.len().max(1) as f64;
        accuracy = correct as f64 / n;
        history.push(epoch, None, "loss", loss_sum / n);
        history.push(epoch, None, "accuracy", accuracy);
        log::info!("pretrain epoch {epoch}: loss {:.4}, accuracy {:.3}", loss_sum / n, accuracy);
        if !params.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                step: order.len(),
                message: "non-finite parameters".into(),
            });
        }
    }
    if config.accuracy_margin > 0.0 && config.epochs > 0 {
        let chance = 1.0 / params.config.num_classes as f64;
        if accuracy < chance + config.accuracy_margin / 100.0 {
            return Err(Error::TrainingFailure {
                epoch: config.epochs,
                step: 0,
                message: format!(
                    "training accuracy {:.1}% is not {:.1} points above chance",
                    accuracy * 100.0,
                    config.accuracy_margin
                ),
            });
        }
    }
    Ok(history)
}
