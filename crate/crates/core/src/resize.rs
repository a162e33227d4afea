//! Image resizing as explicit linear operators, and pseudo-inverse resizing
//! of patch-embedding kernels.
//!
//! A resize from `(h, w)` to `(h*, w*)` is a matrix `B` acting on the
//! row-major vectorised image. All supported interpolation methods are
//! separable, so `B = R ⊗ C` where `R` (`h* × h`) resizes along rows and `C`
//! (`w* × w`) along columns. Only the two factors are ever stored.
//!
//! Pseudo-inverse resizing maps a kernel `w` to `ŵ = (Bᵀ)⁺ vec(w)`. For an
//! upscale `Bᵀ` has full row rank and `⟨Bx, ŵ⟩ = ⟨x, w⟩` for every `x`.
//! Because `(R ⊗ C)ᵀ⁺ = (Rᵀ)⁺ ⊗ (Cᵀ)⁺`, the kernel map is separable too.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};

use crate::{Error, Real, Resolution, Result};

/// Relative singular value cutoff used by [`pseudo_inverse`] unless a caller
/// asks for something else.
pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResizeMethod {
    Bilinear,
    Nearest,
    /// Catmull-Rom cubic convolution (a = -0.5).
    Bicubic,
}

impl ResizeMethod {
    pub const ALL: [ResizeMethod; 3] = [
        ResizeMethod::Bilinear,
        ResizeMethod::Nearest,
        ResizeMethod::Bicubic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResizeMethod::Bilinear => "bilinear",
            ResizeMethod::Nearest => "nearest",
            ResizeMethod::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for ResizeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResizeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bilinear" => Ok(ResizeMethod::Bilinear),
            "nearest" => Ok(ResizeMethod::Nearest),
            "bicubic" => Ok(ResizeMethod::Bicubic),
            other => Err(Error::invalid(format!("unknown resize method `{other}`"))),
        }
    }
}

/// Dense row-major `f64` matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    data: Array2<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        let data = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Self::from_array(data)
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite entries"));
        }
        Ok(DenseMatrix {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn identity(n: usize) -> Self {
        DenseMatrix {
            data: Array2::eye(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    /// Row-major values.
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix {
            data: self.data.t().as_standard_layout().into_owned(),
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols() != other.rows() {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(DenseMatrix {
            data: self.data.dot(&other.data),
        })
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &DenseMatrix) -> DenseMatrix {
        let (ar, ac) = (self.rows(), self.cols());
        let (br, bc) = (other.rows(), other.cols());
        let mut out = Array2::zeros((ar * br, ac * bc));
        for i in 0..ar {
            for j in 0..ac {
                let a = self.data[[i, j]];
                out.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
                    .assign(&(&other.data * a));
            }
        }
        DenseMatrix { data: out }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        DenseMatrix {
            data: &self.data - &other.data,
        }
    }

    pub fn to_array<T: Real>(&self) -> Array2<T> {
        self.data.mapv(T::from_f64_lossy)
    }
}

/// Interpolation weights for one axis: a `dst × src` matrix whose row `i`
/// samples the source at coordinate `(i + 0.5) * src / dst - 0.5`.
fn axis_weights(src: usize, dst: usize, method: ResizeMethod) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    let last = src - 1;
    for i in 0..dst {
        let x = (i as f64 + 0.5) * scale - 0.5;
        match method {
            ResizeMethod::Nearest => {
                let j = ((i as f64 + 0.5) * scale).floor() as usize;
                m[[i, j.min(last)]] = 1.0;
            }
            ResizeMethod::Bilinear => {
                let x = x.clamp(0.0, last as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(last);
                let t = x - x0 as f64;
                m[[i, x0]] += 1.0 - t;
                m[[i, x1]] += t;
            }
            ResizeMethod::Bicubic => {
                let x0 = x.floor();
                let t = x - x0;
                for tap in -1i64..=2 {
                    let j = (x0 as i64 + tap).clamp(0, last as i64) as usize;
                    m[[i, j]] += catmull_rom(t - tap as f64);
                }
            }
        }
    }
    m
}

fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Separable resize `(h, w) → (h*, w*)` stored as its two axis factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeOperator {
    src: Resolution,
    dst: Resolution,
    method: ResizeMethod,
    row_matrix: DenseMatrix,
    col_matrix: DenseMatrix,
}

pub fn build_resize_operator(
    src: Resolution,
    dst: Resolution,
    method: ResizeMethod,
) -> Result<ResizeOperator> {
    if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
        return Err(Error::invalid(format!(
            "resize dimensions must be positive, got {src:?} -> {dst:?}"
        )));
    }
    Ok(ResizeOperator {
        src,
        dst,
        method,
        row_matrix: DenseMatrix {
            data: axis_weights(src.0, dst.0, method),
        },
        col_matrix: DenseMatrix {
            data: axis_weights(src.1, dst.1, method),
        },
    })
}

impl ResizeOperator {
    pub fn src(&self) -> Resolution {
        self.src
    }

    pub fn dst(&self) -> Resolution {
        self.dst
    }

    pub fn method(&self) -> ResizeMethod {
        self.method
    }

    /// `dst_h × src_h` factor.
    pub fn row_matrix(&self) -> &DenseMatrix {
        &self.row_matrix
    }

    /// `dst_w × src_w` factor.
    pub fn col_matrix(&self) -> &DenseMatrix {
        &self.col_matrix
    }

    /// Every method reduces to the identity when the sizes agree.
    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// The full `(h*·w*) × (h·w)` operator acting on row-major vectorised
    /// images. Only sensible for small sizes.
    pub fn full_matrix(&self) -> DenseMatrix {
        self.row_matrix.kron(&self.col_matrix)
    }

    /// Resizes every channel of an `h × w × C` image independently.
    pub fn apply<T: Real>(&self, image: ArrayView3<'_, T>) -> Result<Array3<T>> {
        let (h, w, _) = image.dim();
        if (h, w) != self.src {
            return Err(Error::invalid(format!(
                "image is {h}x{w} but operator expects {}x{}",
                self.src.0, self.src.1
            )));
        }
        if self.is_identity() {
            return Ok(image.to_owned());
        }
        Ok(separable_apply(
            &self.row_matrix.to_array(),
            &self.col_matrix.to_array(),
            image,
        ))
    }
}

pub fn apply_resize<T: Real>(op: &ResizeOperator, image: ArrayView3<'_, T>) -> Result<Array3<T>> {
    op.apply(image)
}

/// `out[i, j, f] = Σ_{h,w} rows[i, h] · cols[j, w] · x[h, w, f]`.
pub(crate) fn separable_apply<T: Real>(
    rows: &Array2<T>,
    cols: &Array2<T>,
    x: ArrayView3<'_, T>,
) -> Array3<T> {
    let (h, w, f) = x.dim();
    debug_assert_eq!(rows.ncols(), h);
    debug_assert_eq!(cols.ncols(), w);
    let x = x.as_standard_layout();
    let flat = x.view().into_shape_with_order((h, w * f)).expect("contiguous");
    let partial = rows.dot(&flat);
    let out_h = rows.nrows();
    let out_w = cols.nrows();
    let mut out = Array3::zeros((out_h, out_w, f));
    for i in 0..out_h {
        let slab = partial
            .row(i)
            .into_shape_with_order((w, f))
            .expect("contiguous row");
        out.slice_mut(s![i, .., ..]).assign(&cols.dot(&slab));
    }
    out
}

/// Moore-Penrose pseudo-inverse by SVD. Singular values at or below
/// `rel_tol · σ_max` are treated as zero.
pub fn pseudo_inverse(m: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    if !(rel_tol >= 0.0 && rel_tol.is_finite()) {
        return Err(Error::invalid(format!("bad pseudo-inverse tolerance {rel_tol}")));
    }
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pseudo-inverse of a non-finite matrix"));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Ok(DenseMatrix {
            data: Array2::zeros((cols, rows)),
        });
    }
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m.get(i, j));
    let svd = a
        .thin_svd()
        .map_err(|e| Error::InvalidState(format!("SVD did not converge: {e:?}")))?;
    let (u, sigma, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let sigma_max = (0..sigma.nrows()).map(|k| sigma[k]).fold(0.0, f64::max);
    let cutoff = rel_tol * sigma_max;

    let mut out = Array2::<f64>::zeros((cols, rows));
    for k in 0..sigma.nrows() {
        let s = sigma[k];
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..cols {
            let vik = v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[[i, j]] += vik * u[(j, k)];
            }
        }
    }
    DenseMatrix::from_array(out)
}

/// The fixed linear map taking a kernel of size `src` to its pseudo-inverse
/// resized version of size `dst`, stored as per-axis factors
/// `(Rᵀ)⁺` (`dst_h × src_h`) and `(Cᵀ)⁺` (`dst_w × src_w`).
#[derive(Clone, Debug)]
pub struct PiResize {
    src: Resolution,
    dst: Resolution,
    method: ResizeMethod,
    row: DenseMatrix,
    col: DenseMatrix,
}

impl PiResize {
    pub fn new(src: Resolution, dst: Resolution, method: ResizeMethod) -> Result<Self> {
        let op = build_resize_operator(src, dst, method)?;
        let row = pseudo_inverse(&op.row_matrix.transpose(), DEFAULT_PINV_RTOL)?;
        let col = pseudo_inverse(&op.col_matrix.transpose(), DEFAULT_PINV_RTOL)?;
        Ok(PiResize {
            src,
            dst,
            method,
            row,
            col,
        })
    }

    pub fn src(&self) -> Resolution {
        self.src
    }

    pub fn dst(&self) -> Resolution {
        self.dst
    }

    pub fn method(&self) -> ResizeMethod {
        self.method
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn row_factor(&self) -> &DenseMatrix {
        &self.row
    }

    pub fn col_factor(&self) -> &DenseMatrix {
        &self.col
    }

    /// The full `(dst_h·dst_w) × (src_h·src_w)` map on row-major vectorised
    /// kernel slices.
    pub fn full_matrix(&self) -> DenseMatrix {
        self.row.kron(&self.col)
    }

    /// Resizes a `kh × kw × C × D` kernel slice by slice.
    pub fn apply<T: Real>(&self, kernel: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (kh, kw, c, d) = kernel.dim();
        if (kh, kw) != self.src {
            return Err(Error::invalid(format!(
                "kernel is {kh}x{kw} but PI-resize expects {}x{}",
                self.src.0, self.src.1
            )));
        }
        if self.is_identity() {
            return Ok(kernel.to_owned());
        }
        Ok(apply_4d(
            &self.row.to_array(),
            &self.col.to_array(),
            kernel,
            self.dst,
            (c, d),
        ))
    }

    /// Adjoint of [`PiResize::apply`]: maps a gradient with respect to the
    /// resized kernel back to a gradient with respect to the source kernel.
    pub fn apply_transpose<T: Real>(&self, grad: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (gh, gw, c, d) = grad.dim();
        if (gh, gw) != self.dst {
            return Err(Error::invalid(format!(
                "gradient is {gh}x{gw} but PI-resize produces {}x{}",
                self.dst.0, self.dst.1
            )));
        }
        if self.is_identity() {
            return Ok(grad.to_owned());
        }
        Ok(apply_4d(
            &self.row.transpose().to_array(),
            &self.col.transpose().to_array(),
            grad,
            self.src,
            (c, d),
        ))
    }
}

fn apply_4d<T: Real>(
    rows: &Array2<T>,
    cols: &Array2<T>,
    x: ArrayView4<'_, T>,
    out_hw: Resolution,
    (c, d): (usize, usize),
) -> Array4<T> {
    let (h, w, _, _) = x.dim();
    let x = x.as_standard_layout();
    let flat = x
        .view()
        .into_shape_with_order((h, w, c * d))
        .expect("contiguous");
    separable_apply(rows, cols, flat)
        .into_shape_with_order((out_hw.0, out_hw.1, c, d))
        .expect("output size")
}

/// PI-resizes a `kh × kw × C × D` kernel from `src` to `dst`.
pub fn pi_resize_kernel<T: Real>(
    kernel: ArrayView4<'_, T>,
    src: Resolution,
    dst: Resolution,
    method: ResizeMethod,
) -> Result<Array4<T>> {
    PiResize::new(src, dst, method)?.apply(kernel)
}
