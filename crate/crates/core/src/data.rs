//! Datasets: procedurally rendered shapes and IDX files.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::write_atomic;
use crate::resize::{build_resize_operator, ResizeMethod};
use crate::{Error, Resolution, Result};

/// One labelled `h × w × C` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<f32>,
    pub label: usize,
}

impl Sample {
    pub fn resolution(&self) -> Resolution {
        let (h, w, _) = self.image.dim();
        (h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub id: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Images converted to the model scalar.
    pub fn images<T: crate::Real>(&self) -> Vec<Array3<T>> {
        self.samples
            .iter()
            .map(|s| s.image.mapv(|v| T::from_f32(v).expect("finite pixel")))
            .collect()
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.dim().2)
    }

    /// Every image bilinearly resized to `resolution`.
    pub fn resized(&self, resolution: Resolution) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.len());
        let mut op = None;
        for s in &self.samples {
            let src = s.resolution();
            let reuse = matches!(&op, Some(o) if crate::resize::ResizeOperator::src(o) == src);
            if !reuse {
                op = Some(build_resize_operator(src, resolution, ResizeMethod::Bilinear)?);
            }
            samples.push(Sample {
                image: op.as_ref().unwrap().apply(s.image.view())?,
                label: s.label,
            });
        }
        Ok(Dataset {
            samples,
            num_classes: self.num_classes,
            id: self.id.clone(),
        })
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            id: self.id.clone(),
        }
    }
}

/// Something that can present the same labelled images at any resolution.
pub trait ResolutionSource {
    fn id(&self) -> String;
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn at_resolution(&self, resolution: Resolution) -> Result<Dataset>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stored images are bilinearly resized.
impl ResolutionSource for Dataset {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn at_resolution(&self, resolution: Resolution) -> Result<Dataset> {
        self.resized(resolution)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    /// Membership of a point in shape-local coordinates (unit circumradius).
    fn contains(self, x: f32, y: f32) -> bool {
        match self {
            ShapeKind::Disk => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            ShapeKind::Triangle => (0..3).all(|k| {
                let a = PI / 2.0 + 2.0 * PI * k as f32 / 3.0;
                x * a.cos() + y * a.sin() <= 0.55
            }),
            ShapeKind::Cross => {
                let (ax, ay) = (x.abs(), y.abs());
                (ax <= 1.0 && ay <= 0.3) || (ax <= 0.3 && ay <= 1.0)
            }
        }
    }
}

/// Resolution-independent description of one rendered image. Coordinates
/// are fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub shape: ShapeKind,
    pub center: (f32, f32),
    pub radius: f32,
    pub angle: f32,
    pub background: f32,
    pub foreground: f32,
    pub resolution: Resolution,
}

impl Scene {
    /// Area-averaged rendering with `supersample²` samples per pixel.
    pub fn render(&self, resolution: Resolution, supersample: usize) -> Array3<f32> {
        let (h, w) = resolution;
        let ss = supersample.max(1);
        let (sin, cos) = (-self.angle).sin_cos();
        let inv = 1.0 / (ss * ss) as f32;
        let mut img = Array3::zeros((h, w, 1));
        for y in 0..h {
            for x in 0..w {
                let mut hits = 0usize;
                for sy in 0..ss {
                    let v = (y as f32 + (sy as f32 + 0.5) / ss as f32) / h as f32;
                    for sx in 0..ss {
                        let u = (x as f32 + (sx as f32 + 0.5) / ss as f32) / w as f32;
                        let dx = (u - self.center.0) / self.radius;
                        let dy = (v - self.center.1) / self.radius;
                        let lx = dx * cos - dy * sin;
                        let ly = dx * sin + dy * cos;
                        if self.shape.contains(lx, ly) {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f32 * inv;
                img[[y, x, 0]] = self.background + (self.foreground - self.background) * cover;
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapesSpec {
    /// Number of shape types used, 1 to 4.
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Inclusive range of native square resolutions.
    pub resolution_range: (usize, usize),
    /// Smallest permitted side, normally the model's token grid.
    pub min_side: usize,
    pub background: (f32, f32),
    pub foreground: (f32, f32),
    /// Maximum center offset from the middle, as a fraction of the side.
    pub position_jitter: f32,
    /// Range of shape radius, as a fraction of the side.
    pub scale: (f32, f32),
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        SyntheticShapesSpec {
            num_classes: 4,
            samples_per_class: 100,
            resolution_range: (32, 32),
            min_side: 1,
            background: (0.0, 0.35),
            foreground: (0.65, 1.0),
            position_jitter: 0.15,
            scale: (0.12, 0.25),
            supersample: 4,
            seed: 0,
        }
    }
}

impl SyntheticShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > ShapeKind::ALL.len() {
            return Err(Error::invalid(format!(
                "num_classes must be 1..=4, got {}",
                self.num_classes
            )));
        }
        let (lo, hi) = self.resolution_range;
        if lo < self.min_side.max(1) {
            return Err(Error::invalid(format!(
                "resolution {lo} is below the minimum side {}",
                self.min_side.max(1)
            )));
        }
        if lo > hi {
            return Err(Error::invalid("resolution range is empty"));
        }
        let ordered = |(a, b): (f32, f32)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.background) || !ordered(self.foreground) || !ordered(self.scale) {
            return Err(Error::invalid("intensity and scale ranges must be finite and ordered"));
        }
        if self.scale.0 <= 0.0 || !(0.0..0.5).contains(&self.position_jitter) {
            return Err(Error::invalid("scale must be positive and jitter in [0, 0.5)"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Scenes drawn from a [`SyntheticShapesSpec`]; renderable at any resolution.
#[derive(Clone, Debug)]
pub struct SyntheticShapes {
    pub spec: SyntheticShapesSpec,
    pub scenes: Vec<Scene>,
}

impl SyntheticShapes {
    pub fn generate(spec: SyntheticShapesSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let total = spec.num_classes * spec.samples_per_class;
        let scenes = (0..total)
            .map(|i| {
                let shape = ShapeKind::ALL[i % spec.num_classes];
                let j = spec.position_jitter;
                let side = rng.random_range(spec.resolution_range.0..=spec.resolution_range.1);
                Scene {
                    shape,
                    center: (uniform(&mut rng, (0.5 - j, 0.5 + j)), uniform(&mut rng, (0.5 - j, 0.5 + j))),
                    radius: uniform(&mut rng, spec.scale),
                    angle: rng.random_range(0.0..2.0 * PI),
                    background: uniform(&mut rng, spec.background),
                    foreground: uniform(&mut rng, spec.foreground),
                    resolution: (side, side),
                }
            })
            .collect();
        Ok(SyntheticShapes { spec, scenes })
    }

    /// Every scene at its own native resolution.
    pub fn native(&self) -> Dataset {
        self.build(|s| s.resolution)
    }

    fn build(&self, res: impl Fn(&Scene) -> Resolution) -> Dataset {
        Dataset {
            samples: self
                .scenes
                .iter()
                .enumerate()
                .map(|(i, s)| Sample {
                    image: s.render(res(s), self.spec.supersample),
                    label: i % self.spec.num_classes,
                })
                .collect(),
            num_classes: self.spec.num_classes,
            id: ResolutionSource::id(self),
        }
    }
}

/// Scenes are re-rendered natively rather than resized.
impl ResolutionSource for SyntheticShapes {
    fn id(&self) -> String {
        format!(
            "shapes-c{}-n{}-seed{}",
            self.spec.num_classes, self.spec.samples_per_class, self.spec.seed
        )
    }

    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn at_resolution(&self, resolution: Resolution) -> Result<Dataset> {
        if resolution.0 == 0 || resolution.1 == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        Ok(self.build(|_| resolution))
    }
}

pub fn generate_synthetic(spec: SyntheticShapesSpec) -> Result<Dataset> {
    Ok(SyntheticShapes::generate(spec)?.native())
}

/// Element payload of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn type_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => 0x08,
            IdxData::I8(_) => 0x09,
            IdxData::I16(_) => 0x0B,
            IdxData::I32(_) => 0x0C,
            IdxData::F32(_) => 0x0D,
            IdxData::F64(_) => 0x0E,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::I8(v) => v.len(),
            IdxData::I16(v) => v.len(),
            IdxData::I32(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as `f32`; unsigned bytes are scaled to `[0, 1]`.
    fn scaled(&self) -> Vec<f32> {
        match self {
            IdxData::U8(v) => v.iter().map(|&x| x as f32 / 255.0).collect(),
            IdxData::I8(v) => v.iter().map(|&x| x as f32).collect(),
            IdxData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            IdxData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            IdxData::F32(v) => v.clone(),
            IdxData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    fn as_labels(&self) -> Option<Vec<usize>> {
        let ints: Vec<i64> = match self {
            IdxData::U8(v) => v.iter().map(|&x| x as i64).collect(),
            IdxData::I8(v) => v.iter().map(|&x| x as i64).collect(),
            IdxData::I16(v) => v.iter().map(|&x| x as i64).collect(),
            IdxData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            _ => return None,
        };
        ints.into_iter().map(|x| usize::try_from(x).ok()).collect()
    }
}

/// An IDX array: big-endian `00 00 <type> <rank>` magic, `rank` u32 dims,
/// then big-endian elements.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(bytes.len() as u64, "truncated IDX magic"));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(Error::format(0, "bad IDX magic, expected leading zero bytes"));
        }
        let code = bytes[2];
        let rank = bytes[3] as usize;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::format(bytes.len() as u64, "truncated IDX dimension header"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
        let size = match code {
            0x08 | 0x09 => 1,
            0x0B => 2,
            0x0C | 0x0D => 4,
            0x0E => 8,
            _ => return Err(Error::format(2, format!("unknown IDX type code 0x{code:02X}"))),
        };
        let body = &bytes[header..];
        let need = count
            .checked_mul(size)
            .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
        if body.len() < need {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated IDX payload: need {need} bytes after offset {header}"),
            ));
        }
        if body.len() > need {
            return Err(Error::format((header + need) as u64, "trailing bytes after IDX payload"));
        }
        let data = match code {
            0x08 => IdxData::U8(body.to_vec()),
            0x09 => IdxData::I8(body.iter().map(|&b| b as i8).collect()),
            0x0B => IdxData::I16(body.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]])).collect()),
            0x0C => IdxData::I32(body.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap())).collect()),
            0x0D => IdxData::F32(body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect()),
            _ => IdxData::F64(body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(IdxArray { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.data.type_code(), self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            IdxData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    IdxArray::decode(&std::fs::read(path)?)
}

pub fn save_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    write_atomic(path, &array.encode())
}

/// Pairs an `n × h × w` (or `n × h × w × C`) image array with `n` labels.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, id: &str) -> Result<Dataset> {
    let (n, h, w, c) = match images.dims.as_slice() {
        &[n, h, w] => (n, h, w, 1),
        &[n, h, w, c] => (n, h, w, c),
        d => return Err(Error::invalid(format!("IDX images must have rank 3 or 4, got {d:?}"))),
    };
    if labels.dims != [n] {
        return Err(Error::invalid(format!(
            "IDX labels have dims {:?}, expected [{n}]",
            labels.dims
        )));
    }
    let label_values = labels
        .data
        .as_labels()
        .ok_or_else(|| Error::invalid("IDX labels must be non-negative integers"))?;
    let values = images.data.scaled();
    let per = h * w * c;
    let samples = label_values
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            image: Array3::from_shape_vec((h, w, c), values[i * per..(i + 1) * per].to_vec())
                .expect("sizes checked"),
            label,
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: label_values.iter().max().map_or(0, |m| m + 1),
        id: id.to_owned(),
    })
}

pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let id = images
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    dataset_from_idx(&load_idx(images)?, &load_idx(labels)?, &id)
}

/// Encodes a uniformly sized dataset as IDX image (`f32`) and label (`u8`)
/// arrays.
pub fn dataset_to_idx(dataset: &Dataset) -> Result<(IdxArray, IdxArray)> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::invalid("cannot encode an empty dataset"))?;
    let (h, w, c) = first.image.dim();
    let mut values = Vec::with_capacity(dataset.len() * h * w * c);
    let mut labels = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        if s.image.dim() != (h, w, c) {
            return Err(Error::invalid("IDX export needs all images at one resolution"));
        }
        values.extend(s.image.iter().cloned());
        labels.push(u8::try_from(s.label).map_err(|_| Error::invalid("label exceeds 255"))?);
    }
    let dims = if c == 1 {
        vec![dataset.len(), h, w]
    } else {
        vec![dataset.len(), h, w, c]
    };
    Ok((
        IdxArray {
            dims,
            data: IdxData::F32(values),
        },
        IdxArray {
            dims: vec![dataset.len()],
            data: IdxData::U8(labels),
        },
    ))
}
