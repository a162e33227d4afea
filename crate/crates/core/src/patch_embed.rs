//! Patch embedding: a bank of `K` patch kernels, each anchored at its own
//! resolution, adapted to any input by pseudo-inverse resizing so that the
//! token grid stays `N × N`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::resize::{build_resize_operator, PiResize, ResizeMethod};
use crate::{Error, Real, Resolution, Result};

/// One convolution kernel `kh × kw × C × D` and its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchKernel<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Real> PatchKernel<T> {
    pub fn new(weight: Array4<T>, bias: Array1<T>) -> Result<Self> {
        let (kh, kw, c, d) = weight.dim();
        if kh == 0 || kw == 0 || c == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "empty patch kernel {kh}x{kw}x{c}x{d}"
            )));
        }
        if bias.len() != d {
            return Err(Error::invalid(format!(
                "bias has {} entries for embedding dim {d}",
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch kernel has non-finite values"));
        }
        Ok(PatchKernel { weight, bias })
    }

    pub fn zeros(size: Resolution, channels: usize, dim: usize) -> Self {
        PatchKernel {
            weight: Array4::zeros((size.0, size.1, channels, dim)),
            bias: Array1::zeros(dim),
        }
    }

    /// LeCun-normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(
        size: Resolution,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (size.0 * size.1 * channels) as f64;
        let normal = Normal::new(0.0, fan_in.sqrt().recip()).expect("valid std");
        PatchKernel {
            weight: Array4::from_shape_simple_fn((size.0, size.1, channels, dim), || {
                T::from_f64_lossy(normal.sample(rng))
            }),
            bias: Array1::zeros(dim),
        }
    }

    pub fn size(&self) -> Resolution {
        let (kh, kw, _, _) = self.weight.dim();
        (kh, kw)
    }

    pub fn channels(&self) -> usize {
        self.weight.dim().2
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.dim().3
    }

    /// Weight as a `(kh·kw·C) × D` matrix matching the column order of
    /// [`extract_patches`].
    pub fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (kh, kw, c, d) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((kh * kw * c, d))
            .expect("kernel stored in standard layout")
    }

    pub fn resized(&self, map: &PiResize) -> Result<PatchKernel<T>> {
        Ok(PatchKernel {
            weight: map.apply(self.weight.view())?,
            bias: self.bias.clone(),
        })
    }

    /// Convolves one image with stride equal to the kernel size after
    /// center-cropping to `grid · kernel`.
    pub fn embed(&self, image: ArrayView3<'_, T>, grid: usize) -> Result<TokenGrid<T>> {
        let (h, w, c) = image.dim();
        if c != self.channels() {
            return Err(Error::invalid(format!(
                "image has {c} channels, kernel expects {}",
                self.channels()
            )));
        }
        let patches = extract_patches(image, self.size(), grid)?;
        let tokens = patches.dot(&self.weight_matrix()) + &self.bias;
        Ok(TokenGrid {
            tokens: tokens
                .into_shape_with_order((grid, grid, self.embed_dim()))
                .expect("grid size"),
            source_resolution: (h, w),
        })
    }
}

/// Patch tokens laid out on their spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    /// `Nh × Nw × D`.
    pub tokens: Array3<T>,
    pub source_resolution: Resolution,
}

impl<T: Real> TokenGrid<T> {
    pub fn grid(&self) -> Resolution {
        let (nh, nw, _) = self.tokens.dim();
        (nh, nw)
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim().2
    }

    /// Row-major `(Nh·Nw) × D` view.
    pub fn as_matrix(&self) -> ArrayView2<'_, T> {
        let (nh, nw, d) = self.tokens.dim();
        self.tokens
            .view()
            .into_shape_with_order((nh * nw, d))
            .expect("standard layout")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    /// Stride equals kernel size.
    NonOverlap,
    /// Stride smaller than the kernel, with padding.
    Overlap,
}

/// Number of tokens per axis produced by a patch convolution.
pub fn token_count(
    resolution: Resolution,
    kernel: Resolution,
    stride: Resolution,
    padding: usize,
    mode: TokenMode,
) -> Result<Resolution> {
    let (h, w) = resolution;
    if [h, w, kernel.0, kernel.1, stride.0, stride.1].contains(&0) {
        return Err(Error::invalid("token_count arguments must be positive"));
    }
    match mode {
        TokenMode::NonOverlap => {
            if stride != kernel {
                return Err(Error::invalid(format!(
                    "non-overlapping patches need stride == kernel, got {stride:?} vs {kernel:?}"
                )));
            }
            Ok((h / kernel.0, w / kernel.1))
        }
        TokenMode::Overlap => {
            let axis = |len: usize, k: usize, st: usize| -> Result<usize> {
                // ceil((len - k) / st + p) with exact integer arithmetic
                let num = len as i64 - k as i64 + (padding * st) as i64;
                if num <= 0 {
                    return Err(Error::invalid(format!(
                        "kernel {k} with padding {padding} leaves no tokens on an axis of {len}"
                    )));
                }
                Ok(((num + st as i64 - 1) / st as i64) as usize)
            };
            Ok((
                axis(h, kernel.0, stride.0)?,
                axis(w, kernel.1, stride.1)?,
            ))
        }
    }
}

/// Kernel size that yields an `N × N` grid: `(⌊h/N⌋, ⌊w/N⌋)`.
pub fn adaptive_kernel_size(resolution: Resolution, grid: usize) -> Result<Resolution> {
    let (h, w) = resolution;
    if grid == 0 {
        return Err(Error::invalid("token grid must be positive"));
    }
    if h < grid || w < grid {
        return Err(Error::ResolutionTooSmall { h, w, grid });
    }
    Ok((h / grid, w / grid))
}

/// Top-left corner of the centered `(grid·kh) × (grid·kw)` window; the odd
/// leftover pixel goes to the top/left margin.
pub fn crop_offset(resolution: Resolution, kernel: Resolution, grid: usize) -> Result<Resolution> {
    let (h, w) = resolution;
    let (ch, cw) = (grid * kernel.0, grid * kernel.1);
    if ch > h || cw > w {
        return Err(Error::ResolutionTooSmall { h, w, grid });
    }
    Ok(((h - ch).div_ceil(2), (w - cw).div_ceil(2)))
}

/// im2col for non-overlapping patches: returns a `(grid²) × (kh·kw·C)`
/// matrix, patches in row-major grid order, each flattened as `(kh, kw, C)`.
pub fn extract_patches<T: Real>(
    image: ArrayView3<'_, T>,
    kernel: Resolution,
    grid: usize,
) -> Result<Array2<T>> {
    let (h, w, c) = image.dim();
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || grid == 0 {
        return Err(Error::invalid("kernel and grid must be positive"));
    }
    let (top, left) = crop_offset((h, w), kernel, grid)?;
    let mut out = Array2::zeros((grid * grid, kh * kw * c));
    for gy in 0..grid {
        for gx in 0..grid {
            let y0 = top + gy * kh;
            let x0 = left + gx * kw;
            let patch = image.slice(s![y0..y0 + kh, x0..x0 + kw, ..]);
            let mut row = out.row_mut(gy * grid + gx);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Patches of a batch of equally sized images, stacked: `(B·grid²) × P`.
pub fn extract_patches_batch<T: Real>(
    images: &[ArrayView3<'_, T>],
    kernel: Resolution,
    grid: usize,
) -> Result<Array2<T>> {
    let per = grid * grid;
    let mut out: Option<Array2<T>> = None;
    for (i, img) in images.iter().enumerate() {
        let p = extract_patches(*img, kernel, grid)?;
        let out = out.get_or_insert_with(|| Array2::zeros((images.len() * per, p.ncols())));
        if p.ncols() != out.ncols() {
            return Err(Error::invalid("images in a batch must share channel count"));
        }
        out.slice_mut(s![i * per..(i + 1) * per, ..]).assign(&p);
    }
    out.ok_or_else(|| Error::invalid("empty image batch"))
}

/// Gradient of a loss with respect to a patch kernel, given the stacked
/// patches it was applied to and the gradient with respect to its outputs.
pub fn kernel_gradient<T: Real>(
    patches: ArrayView2<'_, T>,
    grad_tokens: ArrayView2<'_, T>,
    kernel: Resolution,
    channels: usize,
) -> PatchKernel<T> {
    let d = grad_tokens.ncols();
    let weight = patches
        .t()
        .dot(&grad_tokens)
        .into_shape_with_order((kernel.0, kernel.1, channels, d))
        .expect("patch width matches kernel");
    PatchKernel {
        weight,
        bias: grad_tokens.sum_axis(Axis(0)),
    }
}

/// Euclidean nearest anchor, ties to the smaller index.
pub fn nearest_anchor(anchors: &[Resolution], resolution: Resolution) -> usize {
    let dist = |a: Resolution| {
        let dh = a.0 as i128 - resolution.0 as i128;
        let dw = a.1 as i128 - resolution.1 as i128;
        dh * dh + dw * dw
    };
    let mut best = 0;
    for (k, &a) in anchors.iter().enumerate().skip(1) {
        if dist(a) < dist(anchors[best]) {
            best = k;
        }
    }
    best
}

/// Base kernel side lengths `base_patch · (k+1) / K`.
pub fn bank_kernel_sizes(base_patch: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || base_patch == 0 || base_patch % count != 0 {
        return Err(Error::invalid(format!(
            "base patch {base_patch} must be a positive multiple of the kernel count {count}"
        )));
    }
    Ok((1..=count).map(|k| base_patch * k / count).collect())
}

/// The multi-scale patch embedding: `K` base kernels, one per resolution
/// subset, sharing the token grid `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchKernelBank<T> {
    kernels: Vec<PatchKernel<T>>,
    anchors: Vec<Resolution>,
    grid: usize,
    method: ResizeMethod,
}

impl<T: Real> PatchKernelBank<T> {
    /// Anchors are `grid × kernel size`, so each kernel is used unresized at
    /// its anchor.
    pub fn new(kernels: Vec<PatchKernel<T>>, grid: usize, method: ResizeMethod) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::invalid("kernel bank needs at least one kernel"))?;
        if grid == 0 {
            return Err(Error::invalid("token grid must be positive"));
        }
        let (c, d) = (first.channels(), first.embed_dim());
        let mut anchors = Vec::with_capacity(kernels.len());
        for k in &kernels {
            if k.channels() != c || k.embed_dim() != d {
                return Err(Error::invalid("bank kernels disagree on channels or embedding dim"));
            }
            if k.bias.len() != d || k.weight.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("bank kernel is malformed or non-finite"));
            }
            let (kh, kw) = k.size();
            let anchor = (grid * kh, grid * kw);
            if let Some(prev) = anchors.last() {
                let prev: &Resolution = prev;
                if anchor.0 <= prev.0 {
                    return Err(Error::invalid("bank anchors must be strictly increasing"));
                }
            }
            anchors.push(anchor);
        }
        Ok(PatchKernelBank {
            kernels,
            anchors,
            grid,
            method,
        })
    }

    /// Builds `count` kernels of sizes `base · (k+1) / count` from one
    /// pretrained `base × base` kernel by PI-resize.
    pub fn from_pretrained(
        kernel: &PatchKernel<T>,
        count: usize,
        grid: usize,
        method: ResizeMethod,
    ) -> Result<Self> {
        let (kh, kw) = kernel.size();
        if kh != kw {
            return Err(Error::invalid("pretrained kernel must be square"));
        }
        let kernels = bank_kernel_sizes(kh, count)?
            .into_iter()
            .map(|s| kernel.resized(&PiResize::new((kh, kw), (s, s), method)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(kernels, grid, method)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn method(&self) -> ResizeMethod {
        self.method
    }

    pub fn anchors(&self) -> &[Resolution] {
        &self.anchors
    }

    pub fn kernels(&self) -> &[PatchKernel<T>] {
        &self.kernels
    }

    pub fn kernel(&self, index: usize) -> &PatchKernel<T> {
        &self.kernels[index]
    }

    pub fn kernels_mut(&mut self) -> &mut [PatchKernel<T>] {
        &mut self.kernels
    }

    pub fn channels(&self) -> usize {
        self.kernels[0].channels()
    }

    pub fn embed_dim(&self) -> usize {
        self.kernels[0].embed_dim()
    }

    /// Index of the kernel whose anchor is closest to `resolution`.
    pub fn select_kernel(&self, resolution: Resolution) -> usize {
        nearest_anchor(&self.anchors, resolution)
    }

    /// The PI-resize map from kernel `index` to the size that yields the
    /// full token grid at `resolution`.
    pub fn adaptation(&self, index: usize, resolution: Resolution) -> Result<PiResize> {
        let target = adaptive_kernel_size(resolution, self.grid)?;
        PiResize::new(self.kernels[index].size(), target, self.method)
    }

    pub fn adaptive_kernel(&self, index: usize, resolution: Resolution) -> Result<PatchKernel<T>> {
        if index >= self.kernels.len() {
            return Err(Error::invalid(format!(
                "kernel index {index} out of range for a bank of {}",
                self.kernels.len()
            )));
        }
        self.kernels[index].resized(&self.adaptation(index, resolution)?)
    }

    /// Selects, adapts and applies the kernel for this image's resolution.
    pub fn embed(&self, image: ArrayView3<'_, T>) -> Result<TokenGrid<T>> {
        let (h, w, _) = image.dim();
        let index = self.select_kernel((h, w));
        self.adaptive_kernel(index, (h, w))?.embed(image, self.grid)
    }
}

/// Bilinearly resamples an `N0h × N0w × D` position-embedding grid.
pub fn interpolate_pos_embed<T: Real>(
    pos: ArrayView3<'_, T>,
    target: Resolution,
) -> Result<Array3<T>> {
    let (h, w, _) = pos.dim();
    build_resize_operator((h, w), target, ResizeMethod::Bilinear)?.apply(pos)
}

/// Multiply-accumulate count of one non-overlapping patch embedding.
pub fn patch_embed_macs(kernel: Resolution, channels: usize, dim: usize, grid: usize) -> u64 {
    (grid * grid * kernel.0 * kernel.1 * channels * dim) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sq(n: usize) -> Resolution {
        (n, n)
    }

    #[test]
    fn token_count_examples() {
        let nov = TokenMode::NonOverlap;
        assert_eq!(token_count(sq(224), sq(16), sq(16), 0, nov).unwrap(), (14, 14));
        assert_eq!(token_count(sq(112), sq(8), sq(8), 0, nov).unwrap(), (14, 14));
        assert_eq!(
            token_count(sq(224), sq(16), sq(8), 1, TokenMode::Overlap).unwrap(),
            (27, 27)
        );
        assert!(token_count(sq(224), sq(16), sq(8), 0, nov).is_err());
        assert!(token_count(sq(0), sq(16), sq(16), 0, nov).is_err());
    }

    fn bank_with_anchors(sides: &[usize], grid: usize) -> PatchKernelBank<f64> {
        let kernels = sides
            .iter()
            .map(|&s| PatchKernel::zeros(sq(s / grid), 1, 2))
            .collect();
        PatchKernelBank::new(kernels, grid, ResizeMethod::Bilinear).unwrap()
    }

    #[test]
    fn select_kernel_examples() {
        let bank = bank_with_anchors(&[56, 112, 168, 224], 14);
        assert_eq!(bank.select_kernel(sq(100)), 1);
        assert_eq!(bank.select_kernel(sq(84)), 0);
        assert_eq!(bank.select_kernel(sq(448)), 3);
    }

    #[test]
    fn adaptive_kernel_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = PatchKernel::<f64>::random(sq(16), 1, 3, &mut rng);
        let bank = PatchKernelBank::new(vec![k.clone()], 14, ResizeMethod::Bilinear).unwrap();
        assert_eq!(bank.adaptive_kernel(0, sq(224)).unwrap(), k);
        assert_eq!(bank.adaptive_kernel(0, sq(112)).unwrap().size(), (8, 8));
        assert_eq!(bank.adaptive_kernel(0, (230, 118)).unwrap().size(), (16, 8));
        assert!(matches!(
            bank.adaptive_kernel(0, (13, 200)),
            Err(Error::ResolutionTooSmall { .. })
        ));
    }

    #[test]
    fn zero_image_gives_bias() {
        let mut k = PatchKernel::<f64>::random(sq(4), 1, 3, &mut ChaCha8Rng::seed_from_u64(1));
        k.bias = Array1::from(vec![0.5, -1.0, 2.0]);
        let bank = PatchKernelBank::new(vec![k.clone()], 4, ResizeMethod::Bilinear).unwrap();
        let grid = bank.embed(Array3::zeros((23, 17, 1)).view()).unwrap();
        assert_eq!(grid.grid(), (4, 4));
        for tok in grid.as_matrix().rows() {
            assert_eq!(tok, k.bias);
        }
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let k = PatchKernel::new(
            Array4::from_elem((4, 4, 1, 1), 1.0 / 16.0),
            Array1::from(vec![0.25]),
        )
        .unwrap();
        let bank = PatchKernelBank::new(vec![k], 8, ResizeMethod::Bilinear).unwrap();
        let grid = bank.embed(Array3::from_elem((32, 32, 1), 0.7).view()).unwrap();
        for v in grid.tokens.iter() {
            assert!((v - 0.95f64).abs() < 1e-12);
        }
    }

    #[test]
    fn center_crop_rule() {
        assert_eq!(crop_offset((230, 118), (16, 8), 14).unwrap(), (3, 3));
        assert_eq!(crop_offset((33, 34), (4, 4), 8).unwrap(), (1, 1));
        assert_eq!(crop_offset((35, 32), (4, 4), 8).unwrap(), (2, 0));

        // A single-channel identity-like kernel picking the top-left pixel of
        // each patch reveals where the crop starts.
        let mut w = Array4::zeros((16, 8, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        let k = PatchKernel::new(w, Array1::zeros(1)).unwrap();
        let img = Array::from_shape_fn((230, 118, 1), |(i, j, _)| (i * 1000 + j) as f64);
        let grid = k.embed(img.view(), 14).unwrap();
        assert_eq!(grid.grid(), (14, 14));
        assert_eq!(grid.tokens[[0, 0, 0]], 3.0 * 1000.0 + 3.0);
        assert_eq!(grid.tokens[[13, 13, 0]], (3.0 + 13.0 * 16.0) * 1000.0 + 3.0 + 13.0 * 8.0);
    }

    #[test]
    fn single_kernel_at_anchor_is_plain_patchify() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = PatchKernel::<f32>::random(sq(4), 2, 5, &mut rng);
        let bank = PatchKernelBank::new(vec![k.clone()], 8, ResizeMethod::Bilinear).unwrap();
        let img = Array::from_shape_fn((32, 32, 2), |(i, j, c)| ((i * 3 + j * 5 + c) % 13) as f32 / 13.0);
        let ours = bank.embed(img.view()).unwrap();
        // direct patchify with explicit loops
        for gy in 0..8 {
            for gx in 0..8 {
                for d in 0..5 {
                    let mut acc = Vec::new();
                    for y in 0..4 {
                        for x in 0..4 {
                            for c in 0..2 {
                                acc.push(img[[gy * 4 + y, gx * 4 + x, c]] * k.weight[[y, x, c, d]]);
                            }
                        }
                    }
                    let direct: f32 = acc.iter().sum::<f32>() + k.bias[d];
                    assert!((ours.tokens[[gy, gx, d]] - direct).abs() < 1e-5);
                }
            }
        }
        // and bitwise equal to the unadapted kernel's own embedding
        assert_eq!(ours, k.embed(img.view(), 8).unwrap());
    }

    #[test]
    fn bank_from_pretrained_sizes_and_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = PatchKernel::<f64>::random(sq(8), 1, 4, &mut rng);
        let bank = PatchKernelBank::from_pretrained(&k, 4, 4, ResizeMethod::Bilinear).unwrap();
        let sizes: Vec<_> = bank.kernels().iter().map(|k| k.size()).collect();
        assert_eq!(sizes, vec![sq(2), sq(4), sq(6), sq(8)]);
        assert_eq!(bank.anchors(), &[sq(8), sq(16), sq(24), sq(32)]);
        assert_eq!(bank.kernel(3), &k);
        assert!(PatchKernelBank::from_pretrained(&k, 3, 4, ResizeMethod::Bilinear).is_err());
    }

    #[test]
    fn bank_rejects_bad_kernels() {
        assert!(PatchKernelBank::<f32>::new(vec![], 4, ResizeMethod::Bilinear).is_err());
        let a = PatchKernel::<f32>::zeros(sq(4), 1, 2);
        let b = PatchKernel::<f32>::zeros(sq(2), 1, 2);
        assert!(PatchKernelBank::new(vec![a.clone(), b], 4, ResizeMethod::Bilinear).is_err());
        let c = PatchKernel::<f32>::zeros(sq(8), 1, 3);
        assert!(PatchKernelBank::new(vec![a, c], 4, ResizeMethod::Bilinear).is_err());
    }

    #[test]
    fn pos_embed_interpolation() {
        let pos = Array::from_shape_fn((3, 3, 2), |(i, j, d)| (i + j * 2 + d) as f64);
        assert_eq!(interpolate_pos_embed(pos.view(), (3, 3)).unwrap(), pos);

        let constant = Array3::from_elem((2, 3, 4), 0.3f64);
        let up = interpolate_pos_embed(constant.view(), (5, 7)).unwrap();
        assert!(up.iter().all(|v| (v - 0.3).abs() < 1e-12));

        let mut ramp = Array3::zeros((2, 2, 2));
        ramp[[1, 0, 1]] = 1.0;
        ramp[[1, 1, 1]] = 1.0;
        let up = interpolate_pos_embed(ramp.view(), (4, 4)).unwrap();
        for col in 0..4 {
            let column: Vec<f64> = (0..4).map(|r| up[[r, col, 1]]).collect();
            assert_eq!(column, vec![0.0, 0.25, 0.75, 1.0]);
            assert!((0..4).all(|r| up[[r, col, 0]] == 0.0));
        }
    }

    #[test]
    fn kernel_gradient_matches_outer_products() {
        let patches = Array::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let g = Array::from_shape_fn((4, 3), |(i, j)| (i * j) as f64 - 1.0);
        let grad = kernel_gradient(patches.view(), g.view(), (1, 2), 1);
        assert_eq!(grad.weight.dim(), (1, 2, 1, 3));
        assert_eq!(grad.weight[[0, 1, 0, 2]], (0..4).map(|i| ((i + 1) * (2 * i) as usize) as f64 - (i + 1) as f64).sum::<f64>());
        assert_eq!(grad.bias, g.sum_axis(Axis(0)));
    }
}
