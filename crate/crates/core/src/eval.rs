//! Multi-resolution evaluation of the three embedding modes, and the
//! cross-resolution cosine-similarity diagnostic.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView1, ArrayView3, Axis};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, ResolutionSource};
use crate::patch_embed::{adaptive_kernel_size, PatchKernel, PatchKernelBank};
use crate::resize::{PiResize, ResizeMethod};
use crate::train::{embed_batch, ResizeCache};
use crate::vit::{argmax, cross_entropy, forward_batch, ViTParams};
use crate::{Error, Real, Resolution, Result};

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalMode {
    /// Resize the image to the base resolution, use the base kernel.
    Vanilla,
    /// Keep the image, PI-resize the single base kernel.
    FlexiVit,
    /// Keep the image, select and adapt a kernel from the bank.
    Mspe,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Vanilla, EvalMode::FlexiVit, EvalMode::Mspe];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Vanilla => "vanilla",
            EvalMode::FlexiVit => "flexivit",
            EvalMode::Mspe => "mspe",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" | "vanilla_resize" => Ok(EvalMode::Vanilla),
            "flexivit" => Ok(EvalMode::FlexiVit),
            "mspe" => Ok(EvalMode::Mspe),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (vanilla, flexivit, mspe)"
            ))),
        }
    }
}

pub fn parse_modes(s: &str) -> Result<Vec<EvalMode>> {
    let modes: Vec<EvalMode> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::invalid("no evaluation modes given"));
    }
    Ok(modes)
}

/// Maps images of any resolution to an `N × N` token grid.
pub enum Embedder<'a, T> {
    Vanilla {
        kernel: &'a PatchKernel<T>,
        base_resolution: Resolution,
    },
    FlexiVit {
        kernel: &'a PatchKernel<T>,
        method: ResizeMethod,
    },
    Mspe {
        bank: &'a PatchKernelBank<T>,
    },
}

/// A checkpoint's embedding state: the pretrained kernel and, after
/// fine-tuning, the bank.
pub struct ModelState<'a, T> {
    pub kernel: &'a PatchKernel<T>,
    pub bank: Option<&'a PatchKernelBank<T>>,
    pub base_resolution: Resolution,
    pub method: ResizeMethod,
}

impl<'a, T: Real> ModelState<'a, T> {
    pub fn embedder(&self, mode: EvalMode) -> Result<Embedder<'a, T>> {
        Ok(match mode {
            EvalMode::Vanilla => Embedder::Vanilla {
                kernel: self.kernel,
                base_resolution: self.base_resolution,
            },
            EvalMode::FlexiVit => Embedder::FlexiVit {
                kernel: self.kernel,
                method: self.method,
            },
            EvalMode::Mspe => Embedder::Mspe {
                bank: self
                    .bank
                    .ok_or_else(|| Error::invalid("mspe mode needs a checkpoint with a kernel bank"))?,
            },
        })
    }
}

/// Working state reused across batches: adapted kernels per input size.
struct EmbedCache<T> {
    resize: ResizeCache,
    kernels: HashMap<Resolution, PatchKernel<T>>,
}

impl<T: Real> EmbedCache<T> {
    fn new() -> Self {
        EmbedCache {
            resize: ResizeCache::new(),
            kernels: HashMap::new(),
        }
    }
}

impl<T: Real> Embedder<'_, T> {
    /// Patch tokens `B × N² × D` for equally sized images.
    fn embed(
        &self,
        images: &[ArrayView3<'_, T>],
        grid: usize,
        cache: &mut EmbedCache<T>,
    ) -> Result<Array3<T>> {
        let (h, w, _) = images[0].dim();
        if images.iter().any(|i| (i.dim().0, i.dim().1) != (h, w)) {
            return Err(Error::invalid("images in an evaluation batch must share a resolution"));
        }
        adaptive_kernel_size((h, w), grid)?;
        let tokens = match self {
            Embedder::Vanilla {
                kernel,
                base_resolution,
            } => {
                let resized = crate::train::resize_batch(images, *base_resolution, &mut cache.resize)?;
                let views: Vec<_> = resized.iter().map(|a| a.view()).collect();
                embed_batch(kernel, &views, grid)?.0
            }
            Embedder::FlexiVit { kernel, method } => {
                if !cache.kernels.contains_key(&(h, w)) {
                    let target = adaptive_kernel_size((h, w), grid)?;
                    let map = cache.resize.kernel_map(kernel.size(), target, *method)?;
                    cache.kernels.insert((h, w), kernel.resized(map)?);
                }
                embed_batch(&cache.kernels[&(h, w)], images, grid)?.0
            }
            Embedder::Mspe { bank } => {
                if bank.grid() != grid {
                    return Err(Error::invalid(format!(
                        "bank grid {} differs from the encoder grid {grid}",
                        bank.grid()
                    )));
                }
                if !cache.kernels.contains_key(&(h, w)) {
                    let index = bank.select_kernel((h, w));
                    let base = bank.kernel(index);
                    let target = adaptive_kernel_size((h, w), grid)?;
                    let map: &PiResize = cache.resize.kernel_map(base.size(), target, bank.method())?;
                    cache.kernels.insert((h, w), base.resized(map)?);
                }
                embed_batch(&cache.kernels[&(h, w)], images, grid)?.0
            }
        };
        Ok(tokens)
    }
}

/// Accuracy, mean loss and per-sample logits of one evaluation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult<T> {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
    /// `n × num_classes`.
    pub logits: Array2<T>,
}

fn evaluate_with<T: Real>(
    params: &ViTParams<T>,
    embedder: &Embedder<'_, T>,
    dataset: &Dataset,
    cache: &mut EmbedCache<T>,
) -> Result<EvalResult<T>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let images = dataset.images::<T>();
    let grid = params.config.grid;
    let mut logits = Array2::zeros((images.len(), params.config.num_classes));
    let mut start = 0;
    // Consecutive runs of equally sized images form a batch.
    while start < images.len() {
        let size = images[start].dim();
        let mut end = start + 1;
        while end < images.len() && end - start < EVAL_BATCH && images[end].dim() == size {
            end += 1;
        }
        let views: Vec<_> = images[start..end].iter().map(|a| a.view()).collect();
        let tokens = embedder.embed(&views, grid, cache)?;
        let (out, _) = forward_batch(params, tokens.view())?;
        logits.slice_mut(ndarray::s![start..end, ..]).assign(&out);
        start = end;
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    for (row, s) in logits.axis_iter(Axis(0)).zip(&dataset.samples) {
        if argmax(row) == s.label {
            correct += 1;
        }
        loss += cross_entropy(row, s.label)?.0.to_f64().unwrap_or(f64::NAN);
    }
    let n = images.len();
    Ok(EvalResult {
        top1: correct as f64 / n as f64,
        loss: loss / n as f64,
        count: n,
        logits,
    })
}

/// Classifies every image of `dataset` as given (at its native sizes).
pub fn evaluate<T: Real>(
    params: &ViTParams<T>,
    embedder: &Embedder<'_, T>,
    dataset: &Dataset,
) -> Result<EvalResult<T>> {
    evaluate_with(params, embedder, dataset, &mut EmbedCache::new())
}

/// Image-resize baseline.
pub fn eval_mode_vanilla<T: Real>(
    params: &ViTParams<T>,
    kernel: &PatchKernel<T>,
    dataset: &Dataset,
    base_resolution: Resolution,
) -> Result<EvalResult<T>> {
    evaluate(
        params,
        &Embedder::Vanilla {
            kernel,
            base_resolution,
        },
        dataset,
    )
}

/// Kernel PI-resize baseline without retraining.
pub fn eval_mode_flexivit<T: Real>(
    params: &ViTParams<T>,
    kernel: &PatchKernel<T>,
    dataset: &Dataset,
    method: ResizeMethod,
) -> Result<EvalResult<T>> {
    evaluate(params, &Embedder::FlexiVit { kernel, method }, dataset)
}

pub fn eval_mode_mspe<T: Real>(
    params: &ViTParams<T>,
    bank: &PatchKernelBank<T>,
    dataset: &Dataset,
) -> Result<EvalResult<T>> {
    evaluate(params, &Embedder::Mspe { bank }, dataset)
}

/// Square sizes, or one fixed height with varying widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SweepSpec {
    Square(Vec<usize>),
    FixedHeight { height: usize, widths: Vec<usize> },
    List(Vec<Resolution>),
}

impl SweepSpec {
    pub fn resolutions(&self) -> Vec<Resolution> {
        match self {
            SweepSpec::Square(s) => s.iter().map(|&r| (r, r)).collect(),
            SweepSpec::FixedHeight { height, widths } => widths.iter().map(|&w| (*height, w)).collect(),
            SweepSpec::List(l) => l.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: EvalMode,
    pub resolution: Resolution,
    /// `Err` holds the message of a failed cell.
    pub outcome: std::result::Result<CellStats, String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalMetadata {
    pub checkpoint_id: String,
    pub seed: u64,
    pub dataset_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn get(&self, mode: EvalMode, resolution: Resolution) -> Option<&CellStats> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.resolution == resolution)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// Header `mode,height,width,top1,loss,n`. Failed cells carry `error`
    /// in the metric columns and `n = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,height,width,top1,loss,n\n");
        for r in &self.rows {
            let (h, w) = r.resolution;
            match &r.outcome {
                Ok(c) => out.push_str(&format!(
                    "{},{h},{w},{:.6},{:.6},{}\n",
                    r.mode, c.top1, c.loss, c.count
                )),
                Err(_) => out.push_str(&format!("{},{h},{w},error,error,0\n", r.mode)),
            }
        }
        out
    }

    /// `key = value` sidecar describing the run and any failed cells.
    pub fn metadata_text(&self) -> String {
        let mut out = format!(
            "checkpoint_id = {}\nseed = {}\ndataset_id = {}\n",
            self.metadata.checkpoint_id, self.metadata.seed, self.metadata.dataset_id
        );
        for r in &self.rows {
            if let Err(e) = &r.outcome {
                out.push_str(&format!(
                    "failed.{}.{}x{} = {}\n",
                    r.mode,
                    r.resolution.0,
                    r.resolution.1,
                    e.replace('\n', " ")
                ));
            }
        }
        out
    }
}

/// Hex SHA-256 of checkpoint bytes, used to tie reports to their model.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluates every mode at every resolution. Rows come out mode-major in
/// the order given; a failing cell is recorded and the sweep continues.
pub fn sweep<T: Real>(
    params: &ViTParams<T>,
    state: &ModelState<'_, T>,
    source: &dyn ResolutionSource,
    modes: &[EvalMode],
    resolutions: &[Resolution],
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    if resolutions.is_empty() || modes.is_empty() {
        return Err(Error::invalid("sweep needs at least one mode and one resolution"));
    }
    let embedders: Vec<std::result::Result<Embedder<'_, T>, String>> = modes
        .iter()
        .map(|&m| state.embedder(m).map_err(|e| e.to_string()))
        .collect();
    let mut caches: Vec<EmbedCache<T>> = modes.iter().map(|_| EmbedCache::new()).collect();
    let mut cells = vec![Vec::with_capacity(resolutions.len()); modes.len()];
    for &res in resolutions {
        let data = source.at_resolution(res);
        for (m, embedder) in embedders.iter().enumerate() {
            let outcome = match (&data, embedder) {
                (Err(e), _) => Err(e.to_string()),
                (_, Err(e)) => Err(e.clone()),
                (Ok(ds), Ok(emb)) => evaluate_with(params, emb, ds, &mut caches[m])
                    .map(|r| CellStats {
                        top1: r.top1,
                        loss: r.loss,
                        count: r.count,
                    })
                    .map_err(|e| e.to_string()),
            };
            if let Err(e) = &outcome {
                log::warn!("{} at {}x{} failed: {e}", modes[m], res.0, res.1);
            }
            cells[m].push(EvalRow {
                mode: modes[m],
                resolution: res,
                outcome,
            });
        }
    }
    Ok(EvalReport {
        rows: cells.into_iter().flatten().collect(),
        metadata,
    })
}

fn cosine<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| (x * y).to_f64().unwrap()).sum();
    let na = a.iter().map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub image_id: usize,
    pub patch_cos: f64,
    pub cls_cos: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    /// Cosines replaced by 0 because a vector had zero norm.
    pub zero_norm_warnings: usize,
}

impl SimilarityReport {
    pub fn mean_patch(&self) -> f64 {
        self.rows.iter().map(|r| r.patch_cos).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_cls(&self) -> f64 {
        self.rows.iter().map(|r| r.cls_cos).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Header `image_id,patch_cos,cls_cos`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,patch_cos,cls_cos\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.image_id, r.patch_cos, r.cls_cos));
        }
        out
    }
}

/// Patch-token and class-token cosine similarity between the first
/// `count` images embedded by `low` at `r_low` and by `high` at `r_high`.
/// Patch similarity is averaged over corresponding grid positions; class
/// tokens are the final normalised features.
#[allow(clippy::too_many_arguments)]
pub fn cosine_similarity_diag<T: Real>(
    params: &ViTParams<T>,
    low: &Embedder<'_, T>,
    high: &Embedder<'_, T>,
    source: &dyn ResolutionSource,
    r_low: Resolution,
    r_high: Resolution,
    count: usize,
) -> Result<SimilarityReport> {
    let n = count.min(source.len());
    if n == 0 {
        return Err(Error::invalid("similarity diagnostic needs at least one image"));
    }
    let grid = params.config.grid;
    let run = |emb: &Embedder<'_, T>, res: Resolution| -> Result<(Array3<T>, Array2<T>)> {
        let ds = source.at_resolution(res)?.take(n);
        let images = ds.images::<T>();
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        let mut cache = EmbedCache::new();
        let mut tokens = Vec::new();
        let mut feats = Vec::new();
        for chunk in views.chunks(EVAL_BATCH) {
            let t = emb.embed(chunk, grid, &mut cache)?;
            let (_, fwd) = forward_batch(params, t.view())?;
            feats.push(fwd.features);
            tokens.push(t);
        }
        let tv: Vec<_> = tokens.iter().map(|t| t.view()).collect();
        let fv: Vec<_> = feats.iter().map(|f| f.view()).collect();
        Ok((
            ndarray::concatenate(Axis(0), &tv).expect("same token shape"),
            ndarray::concatenate(Axis(0), &fv).expect("same feature width"),
        ))
    };
    let (tok_a, cls_a) = run(low, r_low)?;
    let (tok_b, cls_b) = run(high, r_high)?;
    let mut report = SimilarityReport::default();
    for i in 0..n {
        let mut patch = 0.0;
        let positions = tok_a.dim().1;
        for p in 0..positions {
            let c = cosine(tok_a.slice(ndarray::s![i, p, ..]), tok_b.slice(ndarray::s![i, p, ..]));
            if c.is_none() {
                report.zero_norm_warnings += 1;
            }
            patch += c.unwrap_or(0.0);
        }
        let cls = cosine(cls_a.row(i), cls_b.row(i));
        if cls.is_none() {
            report.zero_norm_warnings += 1;
        }
        report.rows.push(SimilarityRow {
            image_id: i,
            patch_cos: patch / positions as f64,
            cls_cos: cls.unwrap_or(0.0),
        });
    }
    if report.zero_norm_warnings > 0 {
        log::warn!(
            "{} zero-norm vectors in the similarity diagnostic were scored as 0",
            report.zero_norm_warnings
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticShapes, SyntheticShapesSpec};
    use crate::vit::ViTConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        params: ViTParams<f64>,
        kernel: PatchKernel<f64>,
        bank: PatchKernelBank<f64>,
        shapes: SyntheticShapes,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ViTConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            grid: 4,
            num_classes: 4,
        };
        let params = ViTParams::init(cfg, &mut rng).unwrap();
        let kernel = PatchKernel::random((8, 8), 1, 8, &mut rng);
        let bank = PatchKernelBank::from_pretrained(&kernel, 4, 4, ResizeMethod::Bilinear).unwrap();
        let shapes = SyntheticShapes::generate(SyntheticShapesSpec {
            samples_per_class: 3,
            ..Default::default()
        })
        .unwrap();
        Fixture {
            params,
            kernel,
            bank,
            shapes,
        }
    }

    fn state(f: &Fixture) -> ModelState<'_, f64> {
        ModelState {
            kernel: &f.kernel,
            bank: Some(&f.bank),
            base_resolution: (32, 32),
            method: ResizeMethod::Bilinear,
        }
    }

    #[test]
    fn modes_agree_at_base() {
        let f = fixture();
        let ds = f.shapes.at_resolution((32, 32)).unwrap();
        let a = eval_mode_vanilla(&f.params, &f.kernel, &ds, (32, 32)).unwrap();
        let b = eval_mode_flexivit(&f.params, &f.kernel, &ds, ResizeMethod::Bilinear).unwrap();
        let c = eval_mode_mspe(&f.params, &f.bank, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.count, 12);
    }

    #[test]
    fn non_square_and_transposed() {
        let f = fixture();
        for res in [(16, 40), (40, 16)] {
            let ds = f.shapes.at_resolution(res).unwrap();
            let r = eval_mode_mspe(&f.params, &f.bank, &ds).unwrap();
            assert!((0.0..=1.0).contains(&r.top1));
        }
    }

    #[test]
    fn sweep_cardinality_and_failures() {
        let f = fixture();
        let st = state(&f);
        let res = vec![(32, 32), (2, 2), (48, 48)];
        let report = sweep(&f.params, &st, &f.shapes, &EvalMode::ALL, &res, EvalMetadata::default()).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert_eq!(report.failures(), 3);
        assert_eq!(report.rows[0].mode, EvalMode::Vanilla);
        assert_eq!(report.rows[3].mode, EvalMode::FlexiVit);
        let csv = report.to_csv();
        assert!(csv.starts_with("mode,height,width,top1,loss,n\n"));
        assert_eq!(csv.lines().count(), 10);
        assert!(report.metadata_text().contains("failed.mspe.2x2"));
    }

    #[test]
    fn sweep_is_order_independent() {
        let f = fixture();
        let st = state(&f);
        let a = sweep(&f.params, &st, &f.shapes, &EvalMode::ALL, &[(16, 16), (24, 24), (32, 32)], EvalMetadata::default())
            .unwrap();
        let b = sweep(&f.params, &st, &f.shapes, &EvalMode::ALL, &[(32, 32), (16, 16), (24, 24)], EvalMetadata::default())
            .unwrap();
        for r in &a.rows {
            assert_eq!(Some(r.outcome.as_ref().unwrap()), b.get(r.mode, r.resolution));
        }
    }

    #[test]
    fn mspe_mode_requires_bank() {
        let f = fixture();
        let st = ModelState {
            bank: None,
            ..state(&f)
        };
        let r = sweep(&f.params, &st, &f.shapes, &[EvalMode::Mspe], &[(32, 32)], EvalMetadata::default()).unwrap();
        assert_eq!(r.failures(), 1);
    }

    #[test]
    fn similarity_identity_and_negation() {
        let f = fixture();
        let emb = Embedder::Mspe { bank: &f.bank };
        let r = cosine_similarity_diag(&f.params, &emb, &emb, &f.shapes, (24, 24), (24, 24), 5).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!((r.mean_patch() - 1.0).abs() < 1e-9);
        assert!((r.mean_cls() - 1.0).abs() < 1e-9);

        let neg = PatchKernel {
            weight: -&f.kernel.weight,
            bias: -&f.kernel.bias,
        };
        let a = Embedder::FlexiVit {
            kernel: &f.kernel,
            method: ResizeMethod::Bilinear,
        };
        let b = Embedder::FlexiVit {
            kernel: &neg,
            method: ResizeMethod::Bilinear,
        };
        let r = cosine_similarity_diag(&f.params, &a, &b, &f.shapes, (32, 32), (32, 32), 4).unwrap();
        assert!((r.mean_patch() + 1.0).abs() < 1e-9);
        assert!(r.to_csv().starts_with("image_id,patch_cos,cls_cos\n"));
    }

    #[test]
    fn zero_vectors_score_zero() {
        let f = fixture();
        let zero = PatchKernel::zeros((8, 8), 1, 8);
        let emb = Embedder::FlexiVit {
            kernel: &zero,
            method: ResizeMethod::Bilinear,
        };
        let r = cosine_similarity_diag(&f.params, &emb, &emb, &f.shapes, (32, 32), (32, 32), 2).unwrap();
        assert_eq!(r.mean_patch(), 0.0);
        assert_eq!(r.zero_norm_warnings, 32);
    }

    #[test]
    fn modes_parse() {
        assert_eq!(parse_modes("vanilla,flexivit,mspe").unwrap(), EvalMode::ALL.to_vec());
        assert!(parse_modes("bogus").is_err());
        assert_eq!(checkpoint_id(b"").len(), 64);
    }
}
