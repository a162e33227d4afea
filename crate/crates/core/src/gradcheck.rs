//! Central finite-difference checks of the analytic gradients.

use ndarray::{Array3, ArrayView3, ArrayViewMutD};
use rand::seq::index::sample;
use rand::Rng;

use crate::patch_embed::{PatchKernel, PatchKernelBank};
use crate::train::{mspe_loss_and_grad, pretrain_loss_and_grad, ResizeCache};
use crate::vit::ViTParams;
use crate::{Resolution, Result};

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Perturbs `count` random scalars of `tensor` (all of them if it is
/// smaller) by `±step` and compares `(L+ − L−) / 2·step` with `analytic`.
fn check_tensor<R: Rng + ?Sized>(
    name: &str,
    analytic: &[f64],
    count: usize,
    step: f64,
    rng: &mut R,
    mut loss_with: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<TensorCheck> {
    let n = analytic.len();
    let picks: Vec<usize> = if n <= count {
        (0..n).collect()
    } else {
        sample(rng, n, count).into_vec()
    };
    let mut worst: f64 = 0.0;
    for &i in &picks {
        let plus = loss_with(i, step)?;
        let minus = loss_with(i, -step)?;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(TensorCheck {
        name: name.to_owned(),
        checked: picks.len(),
        max_rel_err: worst,
    })
}

fn nudge(view: &mut ArrayViewMutD<'_, f64>, index: usize, delta: f64) {
    let slot = view.iter_mut().nth(index).expect("index in range");
    *slot += delta;
}

/// Every encoder, head and patch-kernel tensor of the single-resolution
/// model against the mean cross-entropy of one batch.
pub fn check_model<R: Rng + ?Sized>(
    params: &ViTParams<f64>,
    kernel: &PatchKernel<f64>,
    images: &[Array3<f64>],
    labels: &[usize],
    per_tensor: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<TensorCheck>> {
    let views: Vec<ArrayView3<'_, f64>> = images.iter().map(|a| a.view()).collect();
    let (_, grads, gk, _) = pretrain_loss_and_grad(params, kernel, &views, labels)?;
    let mut out = Vec::new();
    let grad_list: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().cloned().collect()))
        .collect();
    for (t, (name, analytic)) in grad_list.iter().enumerate() {
        let check = check_tensor(name, analytic, per_tensor, step, rng, |i, d| {
            let mut p = params.clone();
            nudge(&mut p.tensors_mut()[t].1, i, d);
            Ok(pretrain_loss_and_grad(&p, kernel, &views, labels)?.0)
        })?;
        out.push(check);
    }
    let kw: Vec<f64> = gk.weight.iter().cloned().collect();
    out.push(check_tensor("patch.weight", &kw, per_tensor, step, rng, |i, d| {
        let mut k = kernel.clone();
        *k.weight.iter_mut().nth(i).unwrap() += d;
        Ok(pretrain_loss_and_grad(params, &k, &views, labels)?.0)
    })?);
    let kb: Vec<f64> = gk.bias.to_vec();
    out.push(check_tensor("patch.bias", &kb, per_tensor, step, rng, |i, d| {
        let mut k = kernel.clone();
        k.bias[i] += d;
        Ok(pretrain_loss_and_grad(params, &k, &views, labels)?.0)
    })?);
    Ok(out)
}

/// Every bank tensor against the multi-scale objective with the sampled
/// resolutions pinned.
#[allow(clippy::too_many_arguments)]
pub fn check_bank<R: Rng + ?Sized>(
    params: &ViTParams<f64>,
    bank: &PatchKernelBank<f64>,
    images: &[Array3<f64>],
    labels: &[usize],
    resolutions: &[Resolution],
    lambda: f64,
    per_tensor: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<TensorCheck>> {
    let views: Vec<ArrayView3<'_, f64>> = images.iter().map(|a| a.view()).collect();
    let mut cache = ResizeCache::new();
    let (_, grads) = mspe_loss_and_grad(params, bank, &views, labels, resolutions, lambda, &mut cache)?;
    let mut out = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let gw: Vec<f64> = g.weight.iter().cloned().collect();
        out.push(check_tensor(&format!("bank.{k}.weight"), &gw, per_tensor, step, rng, |i, d| {
            let mut b = bank.clone();
            *b.kernels_mut()[k].weight.iter_mut().nth(i).unwrap() += d;
            let (l, _) = mspe_loss_and_grad(params, &b, &views, labels, resolutions, lambda, &mut cache)?;
            Ok(l.total())
        })?);
        let gb: Vec<f64> = g.bias.to_vec();
        out.push(check_tensor(&format!("bank.{k}.bias"), &gb, per_tensor, step, rng, |i, d| {
            let mut b = bank.clone();
            b.kernels_mut()[k].bias[i] += d;
            let (l, _) = mspe_loss_and_grad(params, &b, &views, labels, resolutions, lambda, &mut cache)?;
            Ok(l.total())
        })?);
    }
    Ok(out)
}
