//! A small pre-norm Vision Transformer with explicit forward and backward
//! passes.
//!
//! Sequences are processed in batches: a batch of `B` images with `N²`
//! patch tokens each becomes a `(B·S) × D` activation matrix, `S = N² + 1`,
//! with the class token first in every sequence. Linear layers act on the
//! whole matrix, attention runs per sequence and head.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::patch_embed::{interpolate_pos_embed, TokenGrid};
use crate::{Error, Real, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Tokens per side of the patch grid.
    pub grid: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("ViT dim, depth, heads and mlp_ratio must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide embedding dim {}",
                self.heads, self.dim
            )));
        }
        if self.grid == 0 || self.num_classes == 0 {
            return Err(Error::invalid("grid and num_classes must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.grid * self.grid + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    /// `D × 3D`, columns ordered `[q | k | v]`, heads contiguous within each.
    pub qkv_weight: Array2<T>,
    pub qkv_bias: Array1<T>,
    pub proj_weight: Array2<T>,
    pub proj_bias: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
    pub fc1_weight: Array2<T>,
    pub fc1_bias: Array1<T>,
    pub fc2_weight: Array2<T>,
    pub fc2_bias: Array1<T>,
}

/// Encoder weights, position embeddings, class token and classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub config: ViTConfig,
    /// `N × N × D`.
    pub pos_embed: Array3<T>,
    pub cls_token: Array1<T>,
    pub cls_pos: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_gamma: Array1<T>,
    pub norm_beta: Array1<T>,
    /// `D × num_classes`.
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

fn normal_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::from_f64_lossy(n.sample(rng)))
}

fn normal_vector<T: Real, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Array1<T> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array1::from_shape_simple_fn(len, || T::from_f64_lossy(n.sample(rng)))
}

impl<T: Real> ViTParams<T> {
    pub fn init<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hid = config.hidden();
        let fan = |n: usize| (n as f64).sqrt().recip();
        let residual_scale = (2.0 * config.depth as f64).sqrt().recip();
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                qkv_weight: normal_matrix(d, 3 * d, fan(d), rng),
                qkv_bias: Array1::zeros(3 * d),
                proj_weight: normal_matrix(d, d, fan(d) * residual_scale, rng),
                proj_bias: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                fc1_weight: normal_matrix(d, hid, fan(d), rng),
                fc1_bias: Array1::zeros(hid),
                fc2_weight: normal_matrix(hid, d, fan(hid) * residual_scale, rng),
                fc2_bias: Array1::zeros(d),
            })
            .collect();
        let pos = normal_matrix::<T, _>(config.grid * config.grid, d, 0.02, rng);
        Ok(ViTParams {
            config,
            pos_embed: pos
                .into_shape_with_order((config.grid, config.grid, d))
                .expect("grid size"),
            cls_token: normal_vector(d, 0.02, rng),
            cls_pos: normal_vector(d, 0.02, rng),
            blocks,
            norm_gamma: Array1::ones(d),
            norm_beta: Array1::zeros(d),
            head_weight: normal_matrix(d, config.num_classes, fan(d), rng),
            head_bias: Array1::zeros(config.num_classes),
        })
    }

    /// All-zero parameters for `config`.
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hid = config.hidden();
        let block = Block {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            qkv_weight: Array2::zeros((d, 3 * d)),
            qkv_bias: Array1::zeros(3 * d),
            proj_weight: Array2::zeros((d, d)),
            proj_bias: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            fc1_weight: Array2::zeros((d, hid)),
            fc1_bias: Array1::zeros(hid),
            fc2_weight: Array2::zeros((hid, d)),
            fc2_bias: Array1::zeros(d),
        };
        Ok(ViTParams {
            config,
            pos_embed: Array3::zeros((config.grid, config.grid, d)),
            cls_token: Array1::zeros(d),
            cls_pos: Array1::zeros(d),
            blocks: vec![block; config.depth],
            norm_gamma: Array1::zeros(d),
            norm_beta: Array1::zeros(d),
            head_weight: Array2::zeros((d, config.num_classes)),
            head_bias: Array1::zeros(config.num_classes),
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v: Vec<(String, ArrayViewD<'_, T>)> = vec![
            ("pos_embed".into(), self.pos_embed.view().into_dyn()),
            ("cls_token".into(), self.cls_token.view().into_dyn()),
            ("cls_pos".into(), self.cls_pos.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            v.push((p("ln1.gamma"), b.ln1_gamma.view().into_dyn()));
            v.push((p("ln1.beta"), b.ln1_beta.view().into_dyn()));
            v.push((p("qkv.weight"), b.qkv_weight.view().into_dyn()));
            v.push((p("qkv.bias"), b.qkv_bias.view().into_dyn()));
            v.push((p("proj.weight"), b.proj_weight.view().into_dyn()));
            v.push((p("proj.bias"), b.proj_bias.view().into_dyn()));
            v.push((p("ln2.gamma"), b.ln2_gamma.view().into_dyn()));
            v.push((p("ln2.beta"), b.ln2_beta.view().into_dyn()));
            v.push((p("fc1.weight"), b.fc1_weight.view().into_dyn()));
            v.push((p("fc1.bias"), b.fc1_bias.view().into_dyn()));
            v.push((p("fc2.weight"), b.fc2_weight.view().into_dyn()));
            v.push((p("fc2.bias"), b.fc2_bias.view().into_dyn()));
        }
        v.push(("norm.gamma".into(), self.norm_gamma.view().into_dyn()));
        v.push(("norm.beta".into(), self.norm_beta.view().into_dyn()));
        v.push(("head.weight".into(), self.head_weight.view().into_dyn()));
        v.push(("head.bias".into(), self.head_bias.view().into_dyn()));
        v
    }

    /// Mutable counterpart of [`ViTParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v: Vec<(String, ArrayViewMutD<'_, T>)> = vec![
            ("pos_embed".into(), self.pos_embed.view_mut().into_dyn()),
            ("cls_token".into(), self.cls_token.view_mut().into_dyn()),
            ("cls_pos".into(), self.cls_pos.view_mut().into_dyn()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            v.push((p("ln1.gamma"), b.ln1_gamma.view_mut().into_dyn()));
            v.push((p("ln1.beta"), b.ln1_beta.view_mut().into_dyn()));
            v.push((p("qkv.weight"), b.qkv_weight.view_mut().into_dyn()));
            v.push((p("qkv.bias"), b.qkv_bias.view_mut().into_dyn()));
            v.push((p("proj.weight"), b.proj_weight.view_mut().into_dyn()));
            v.push((p("proj.bias"), b.proj_bias.view_mut().into_dyn()));
            v.push((p("ln2.gamma"), b.ln2_gamma.view_mut().into_dyn()));
            v.push((p("ln2.beta"), b.ln2_beta.view_mut().into_dyn()));
            v.push((p("fc1.weight"), b.fc1_weight.view_mut().into_dyn()));
            v.push((p("fc1.bias"), b.fc1_bias.view_mut().into_dyn()));
            v.push((p("fc2.weight"), b.fc2_weight.view_mut().into_dyn()));
            v.push((p("fc2.bias"), b.fc2_bias.view_mut().into_dyn()));
        }
        v.push(("norm.gamma".into(), self.norm_gamma.view_mut().into_dyn()));
        v.push(("norm.beta".into(), self.norm_beta.view_mut().into_dyn()));
        v.push(("head.weight".into(), self.head_weight.view_mut().into_dyn()));
        v.push(("head.bias".into(), self.head_bias.view_mut().into_dyn()));
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Copy with the position-embedding grid bilinearly resampled to
    /// `grid × grid`.
    pub fn with_grid(&self, grid: usize) -> Result<Self> {
        let mut out = self.clone();
        if grid != self.config.grid {
            out.pos_embed = interpolate_pos_embed(self.pos_embed.view(), (grid, grid))?;
            out.config.grid = grid;
        }
        Ok(out)
    }
}

/// Whether the weight-decay term applies to a named tensor.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Which parameters receive gradients in [`backward_batch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeMask {
    /// No parameter gradients; only the gradient with respect to the tokens.
    AllFrozen,
    AllTrainable,
}

struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Real>(
    x: ArrayView2<'_, T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let (rows, d) = x.dim();
    let inv_d = T::from_usize(d).unwrap().recip();
    let eps = T::from_f64_lossy(LN_EPS);
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for ((xr, mut hr), r) in x.rows().into_iter().zip(xhat.rows_mut()).zip(rstd.iter_mut()) {
        let mean = xr.sum() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = (var + eps).sqrt().recip();
        *r = s;
        Zip::from(&mut hr).and(&xr).for_each(|h, &v| *h = (v - mean) * s);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx` and accumulates `dγ`, `dβ` when requested.
fn layer_norm_backward<T: Real>(
    dy: ArrayView2<'_, T>,
    cache: &LayerNormCache<T>,
    gamma: &Array1<T>,
    grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    if let Some((dgamma, dbeta)) = grads {
        *dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        *dbeta += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols();
    let inv_d = T::from_usize(d).unwrap().recip();
    let dxhat = &dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((gr, hr), mut dr), &s) in dxhat
        .rows()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dx.rows_mut())
        .zip(cache.rstd.iter())
    {
        let mean_g = gr.sum() * inv_d;
        let mean_gh = gr.iter().zip(hr.iter()).map(|(&g, &h)| g * h).sum::<T>() * inv_d;
        Zip::from(&mut dr)
            .and(&gr)
            .and(&hr)
            .for_each(|o, &g, &h| *o = s * (g - mean_g - h * mean_gh));
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax<T: Real>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let mut m = logits.to_owned().insert_axis(Axis(0));
    softmax_rows_inplace(&mut m);
    m.remove_axis(Axis(0))
}

struct BlockCache<T> {
    x_in: Array2<T>,
    ln1: LayerNormCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    /// `B × H × S × S` attention probabilities.
    att: Array4<T>,
    attn_out: Array2<T>,
    ln2: LayerNormCache<T>,
    h2: Array2<T>,
    fc1_pre: Array2<T>,
    fc1_act: Array2<T>,
}

/// Activations saved by [`forward_batch`] for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    seq: usize,
    dim: usize,
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormCache<T>,
    /// Class-token features after the final layer norm, `B × D`.
    pub features: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Runs the encoder and head on `B × N² × D` patch tokens; returns
/// `B × num_classes` logits.
pub fn forward_batch<T: Real>(
    params: &ViTParams<T>,
    tokens: ArrayView3<'_, T>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let cfg = params.config;
    let (b, n, d) = tokens.dim();
    let (gh, gw, pd) = params.pos_embed.dim();
    if d != cfg.dim || pd != d || n != gh * gw {
        return Err(Error::invalid(format!(
            "tokens {b}x{n}x{d} do not match a {gh}x{gw} grid of dim {}",
            cfg.dim
        )));
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let seq = n + 1;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = T::from_usize(hd).unwrap().sqrt().recip();

    let pos = params
        .pos_embed
        .view()
        .into_shape_with_order((n, d))
        .expect("standard layout");
    let cls = &params.cls_token + &params.cls_pos;
    let mut x = Array2::zeros((b * seq, d));
    for i in 0..b {
        x.row_mut(i * seq).assign(&cls);
        x.slice_mut(s![i * seq + 1..(i + 1) * seq, ..])
            .assign(&(&tokens.slice(s![i, .., ..]) + &pos));
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (h1, ln1) = layer_norm(x.view(), &blk.ln1_gamma, &blk.ln1_beta);
        let qkv = h1.dot(&blk.qkv_weight) + &blk.qkv_bias;
        let mut att = Array4::zeros((b, heads, seq, seq));
        let mut attn_out = Array2::zeros((b * seq, d));
        for i in 0..b {
            let rows = i * seq..(i + 1) * seq;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let mut scores = q.dot(&k.t()) * scale;
                softmax_rows_inplace(&mut scores);
                attn_out
                    .slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&scores.dot(&v));
                att.slice_mut(s![i, h, .., ..]).assign(&scores);
            }
        }
        let x_mid = &x + &(attn_out.dot(&blk.proj_weight) + &blk.proj_bias);
        let (h2, ln2) = layer_norm(x_mid.view(), &blk.ln2_gamma, &blk.ln2_beta);
        let fc1_pre = h2.dot(&blk.fc1_weight) + &blk.fc1_bias;
        let fc1_act = fc1_pre.mapv(gelu);
        let x_out = &x_mid + &(fc1_act.dot(&blk.fc2_weight) + &blk.fc2_bias);
        caches.push(BlockCache {
            x_in: x,
            ln1,
            h1,
            qkv,
            att,
            attn_out,
            ln2,
            h2,
            fc1_pre,
            fc1_act,
        });
        x = x_out;
    }

    let cls_rows = x.slice(s![..;seq, ..]).to_owned();
    let (features, final_ln) = layer_norm(cls_rows.view(), &params.norm_gamma, &params.norm_beta);
    let logits = features.dot(&params.head_weight) + &params.head_bias;
    Ok((
        logits,
        ForwardCache {
            batch: b,
            seq,
            dim: d,
            blocks: caches,
            final_ln,
            features,
        },
    ))
}

/// Single-image forward pass.
pub fn encoder_forward<T: Real>(
    params: &ViTParams<T>,
    tokens: &TokenGrid<T>,
) -> Result<(Array1<T>, ForwardCache<T>)> {
    let m = tokens.as_matrix().insert_axis(Axis(0));
    let (logits, cache) = forward_batch(params, m)?;
    Ok((logits.row(0).to_owned(), cache))
}

/// Backpropagates `dlogits` (`B × num_classes`). Returns the gradient with
/// respect to the input tokens (`B × N² × D`) and, unless frozen, the
/// parameter gradients.
pub fn backward_batch<T: Real>(
    params: &ViTParams<T>,
    cache: &ForwardCache<T>,
    dlogits: ArrayView2<'_, T>,
    mask: FreezeMask,
) -> Result<(Array3<T>, Option<ViTParams<T>>)> {
    let cfg = params.config;
    let (b, seq, d) = (cache.batch, cache.seq, cache.dim);
    if d != cfg.dim
        || cache.blocks.len() != params.blocks.len()
        || seq != params.pos_embed.dim().0 * params.pos_embed.dim().1 + 1
        || dlogits.dim() != (b, cfg.num_classes)
    {
        return Err(Error::InvalidState(
            "forward cache does not match parameters or logit gradient".into(),
        ));
    }
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = T::from_usize(hd).unwrap().sqrt().recip();
    let mut grads = match mask {
        FreezeMask::AllTrainable => Some(params.zeros_like()),
        FreezeMask::AllFrozen => None,
    };

    let dfeat = dlogits.dot(&params.head_weight.t());
    if let Some(g) = grads.as_mut() {
        g.head_weight += &cache.features.t().dot(&dlogits);
        g.head_bias += &dlogits.sum_axis(Axis(0));
    }
    let dcls = layer_norm_backward(
        dfeat.view(),
        &cache.final_ln,
        &params.norm_gamma,
        grads.as_mut().map(|g| (&mut g.norm_gamma, &mut g.norm_beta)),
    );
    let mut dx = Array2::<T>::zeros((b * seq, d));
    dx.slice_mut(s![..;seq, ..]).assign(&dcls);

    for (li, (blk, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let mut gblk = grads.as_mut().map(|g| &mut g.blocks[li]);

        // MLP branch
        let dm = &dx;
        if let Some(g) = gblk.as_mut() {
            g.fc2_weight += &c.fc1_act.t().dot(dm);
            g.fc2_bias += &dm.sum_axis(Axis(0));
        }
        let mut dpre = dm.dot(&blk.fc2_weight.t());
        Zip::from(&mut dpre)
            .and(&c.fc1_pre)
            .for_each(|g, &x| *g = *g * gelu_grad(x));
        if let Some(g) = gblk.as_mut() {
            g.fc1_weight += &c.h2.t().dot(&dpre);
            g.fc1_bias += &dpre.sum_axis(Axis(0));
        }
        let dh2 = dpre.dot(&blk.fc1_weight.t());
        let dx_mid = &dx
            + &layer_norm_backward(
                dh2.view(),
                &c.ln2,
                &blk.ln2_gamma,
                gblk.as_mut().map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta)),
            );

        // attention branch
        if let Some(g) = gblk.as_mut() {
            g.proj_weight += &c.attn_out.t().dot(&dx_mid);
            g.proj_bias += &dx_mid.sum_axis(Axis(0));
        }
        let dattn = dx_mid.dot(&blk.proj_weight.t());
        let mut dqkv = Array2::<T>::zeros((b * seq, 3 * d));
        for i in 0..b {
            let rows = i * seq..(i + 1) * seq;
            for h in 0..heads {
                let qc = h * hd..(h + 1) * hd;
                let kc = d + h * hd..d + (h + 1) * hd;
                let vc = 2 * d + h * hd..2 * d + (h + 1) * hd;
                let q = c.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = c.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = c.qkv.slice(s![rows.clone(), vc.clone()]);
                let att = c.att.slice(s![i, h, .., ..]);
                let dout = dattn.slice(s![rows.clone(), qc.clone()]);
                let datt = dout.dot(&v.t());
                dqkv.slice_mut(s![rows.clone(), vc]).assign(&att.t().dot(&dout));
                let mut dscores = datt;
                for (mut dr, ar) in dscores.rows_mut().into_iter().zip(att.rows()) {
                    let dot = dr.iter().zip(ar.iter()).map(|(&g, &a)| g * a).sum::<T>();
                    Zip::from(&mut dr).and(&ar).for_each(|g, &a| *g = a * (*g - dot) * scale);
                }
                dqkv.slice_mut(s![rows.clone(), qc]).assign(&dscores.dot(&k));
                dqkv.slice_mut(s![rows.clone(), kc]).assign(&dscores.t().dot(&q));
            }
        }
        if let Some(g) = gblk.as_mut() {
            g.qkv_weight += &c.h1.t().dot(&dqkv);
            g.qkv_bias += &dqkv.sum_axis(Axis(0));
        }
        let dh1 = dqkv.dot(&blk.qkv_weight.t());
        dx = dx_mid
            + layer_norm_backward(
                dh1.view(),
                &c.ln1,
                &blk.ln1_gamma,
                gblk.as_mut().map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta)),
            );
        debug_assert_eq!(c.x_in.dim(), dx.dim());
    }

    let n = seq - 1;
    let mut dtokens = Array3::zeros((b, n, d));
    for i in 0..b {
        dtokens
            .slice_mut(s![i, .., ..])
            .assign(&dx.slice(s![i * seq + 1..(i + 1) * seq, ..]));
    }
    if let Some(g) = grads.as_mut() {
        let dcls_in = dx.slice(s![..;seq, ..]).sum_axis(Axis(0));
        g.cls_token += &dcls_in;
        g.cls_pos += &dcls_in;
        let dpos = dtokens.sum_axis(Axis(0));
        g.pos_embed += &dpos
            .into_shape_with_order(params.pos_embed.raw_dim())
            .expect("grid size");
    }
    Ok((dtokens, grads))
}

/// Single-image backward pass; `dlogits` has `num_classes` entries.
pub fn encoder_backward<T: Real>(
    params: &ViTParams<T>,
    cache: &ForwardCache<T>,
    dlogits: ArrayView1<'_, T>,
    mask: FreezeMask,
) -> Result<(Array3<T>, Option<ViTParams<T>>)> {
    if cache.batch != 1 {
        return Err(Error::InvalidState(format!(
            "cache holds a batch of {}, expected a single image",
            cache.batch
        )));
    }
    let (dtokens, grads) = backward_batch(params, cache, dlogits.insert_axis(Axis(0)), mask)?;
    let (gh, gw, d) = params.pos_embed.dim();
    Ok((
        dtokens
            .into_shape_with_order((gh, gw, d))
            .expect("grid size"),
        grads,
    ))
}

/// `-log softmax(logits)[label]` and its gradient `softmax - one_hot`.
pub fn cross_entropy<T: Real>(logits: ArrayView1<'_, T>, label: usize) -> Result<(T, Array1<T>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch and its gradient with respect to the
/// `B × C` logits (already divided by `B`).
pub fn cross_entropy_batch<T: Real>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("logits and labels disagree on batch size"));
    }
    let inv_b = T::from_usize(labels.len()).unwrap().recip();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, &label), mut g) in logits.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        let (l, dl) = cross_entropy(row, label)?;
        total = total + l;
        g.assign(&(dl * inv_b));
    }
    Ok((total * inv_b, grad))
}

/// Predicted class: first index of the maximum logit.
pub fn argmax<T: Real>(logits: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
