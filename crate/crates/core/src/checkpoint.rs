//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSPE"                     4 bytes
//! version                    u32
//! tensor count               u32
//! per tensor:
//!   name length              u32
//!   name                     UTF-8 bytes
//!   dtype tag                u8   (0 = f32, 1 = f64, 2 = u64)
//!   rank                     u32
//!   dims                     rank × u64
//!   payload offset           u64  (absolute, from start of file)
//! payloads                   IEEE-754 / u64 values, little-endian
//! ```
//!
//! Payload byte length is implied by dims and dtype. Payloads must lie inside
//! the file and must not overlap.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::patch_embed::{PatchKernel, PatchKernelBank};
use crate::resize::ResizeMethod;
use crate::vit::{ViTConfig, ViTParams};
use crate::{Error, Real, Resolution, Result};

pub const MAGIC: &[u8; 4] = b"MSPE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U64 => TensorData::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_array<T: Real>(a: ArrayViewD<'_, T>) -> Self {
        let dims = a.shape().to_vec();
        let values: Vec<f64> = a.iter().map(|v| v.to_f64().unwrap()).collect();
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
            _ => TensorData::F64(values),
        };
        Tensor { dims, data }
    }

    pub fn from_u64(dims: Vec<usize>, values: Vec<u64>) -> Result<Self> {
        Tensor::new(dims, TensorData::U64(values))
    }

    /// Floating-point payload converted to `T`.
    pub fn to_array<T: Real>(&self) -> Result<ArrayD<T>> {
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            TensorData::U64(_) => {
                return Err(Error::invalid("expected a floating-point tensor, found u64"))
            }
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), values).expect("length checked"))
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::invalid("expected a u64 tensor")),
        }
    }
}

/// Uniquely named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    tensors: IndexMap<String, Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let dir_len: usize = self
            .tensors
            .iter()
            .map(|(name, t)| 4 + name.len() + 1 + 4 + 8 * t.dims.len() + 8)
            .sum();
        let mut offset = (header.len() + dir_len) as u64;
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(t.data.dtype().tag());
            header.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            let before = payload.len();
            t.data.write_le(&mut payload);
            offset += (payload.len() - before) as u64;
        }
        header.extend_from_slice(&payload);
        header
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, not an MSPE checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut set = TensorSet::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_owned();
            let tag_at = r.pos as u64;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| Error::format(tag_at, "unknown dtype tag"))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(64));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let off_at = r.pos as u64;
            let offset = r.u64()?;
            let len = dims
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(off_at, "tensor size overflows"))?;
            let end = offset
                .checked_add(len as u64)
                .filter(|&e| e <= bytes.len() as u64)
                .ok_or_else(|| Error::format(off_at, format!("payload of `{name}` runs past end of file")))?;
            if set.contains(&name) || entries.iter().any(|(n, ..): &(String, _, _, _, _)| *n == name) {
                return Err(Error::format(at, format!("duplicate tensor name `{name}`")));
            }
            entries.push((name, dtype, dims, offset, end));
        }
        let dir_end = r.pos as u64;
        let mut ranges: Vec<(u64, u64)> = entries
            .iter()
            .filter(|e| e.4 > e.3)
            .map(|e| (e.3, e.4))
            .collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::format(w[1].0, "tensor payloads overlap"));
            }
        }
        if let Some(first) = ranges.first() {
            if first.0 < dir_end {
                return Err(Error::format(first.0, "tensor payload overlaps the directory"));
            }
        }
        for (name, dtype, dims, offset, end) in entries {
            let data = TensorData::read_le(dtype, &bytes[offset as usize..end as usize]);
            set.insert(name, Tensor { dims, data })?;
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a temporary file in the target directory, then renames.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &TensorSet) -> Result<()> {
    write_atomic(path, &tensors.encode())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorSet> {
    TensorSet::decode(&fs::read(path)?)
}

fn method_code(m: ResizeMethod) -> u64 {
    match m {
        ResizeMethod::Bilinear => 0,
        ResizeMethod::Nearest => 1,
        ResizeMethod::Bicubic => 2,
    }
}

fn method_from_code(c: u64) -> Result<ResizeMethod> {
    match c {
        0 => Ok(ResizeMethod::Bilinear),
        1 => Ok(ResizeMethod::Nearest),
        2 => Ok(ResizeMethod::Bicubic),
        _ => Err(Error::invalid(format!("unknown resize method code {c}"))),
    }
}

fn fixed<T: Real, D: ndarray::Dimension>(set: &TensorSet, name: &str) -> Result<ndarray::Array<T, D>> {
    set.get(name)?
        .to_array::<T>()?
        .into_dimensionality::<D>()
        .map_err(|_| Error::invalid(format!("tensor `{name}` has the wrong rank")))
}

/// Everything needed to evaluate a model: encoder, the single pretrained
/// patch kernel and, after multi-scale fine-tuning, the kernel bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub params: ViTParams<T>,
    pub kernel: PatchKernel<T>,
    pub bank: Option<PatchKernelBank<T>>,
    pub base_resolution: Resolution,
}

impl<T: Real> ModelCheckpoint<T> {
    pub fn to_tensors(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        let c = self.params.config;
        set.insert(
            "meta.vit_config",
            Tensor::from_u64(
                vec![6],
                [c.dim, c.depth, c.heads, c.mlp_ratio, c.grid, c.num_classes]
                    .iter()
                    .map(|&v| v as u64)
                    .collect(),
            )?,
        )?;
        set.insert(
            "meta.base_resolution",
            Tensor::from_u64(
                vec![2],
                vec![self.base_resolution.0 as u64, self.base_resolution.1 as u64],
            )?,
        )?;
        for (name, t) in self.params.tensors() {
            set.insert(format!("vit.{name}"), Tensor::from_array(t))?;
        }
        set.insert("patch.weight", Tensor::from_array(self.kernel.weight.view().into_dyn()))?;
        set.insert("patch.bias", Tensor::from_array(self.kernel.bias.view().into_dyn()))?;
        if let Some(bank) = &self.bank {
            set.insert(
                "bank.config",
                Tensor::from_u64(
                    vec![3],
                    vec![bank.len() as u64, bank.grid() as u64, method_code(bank.method())],
                )?,
            )?;
            for (k, kernel) in bank.kernels().iter().enumerate() {
                set.insert(
                    format!("bank.{k}.weight"),
                    Tensor::from_array(kernel.weight.view().into_dyn()),
                )?;
                set.insert(
                    format!("bank.{k}.bias"),
                    Tensor::from_array(kernel.bias.view().into_dyn()),
                )?;
            }
        }
        Ok(set)
    }

    pub fn from_tensors(set: &TensorSet) -> Result<Self> {
        let cfg = set.get("meta.vit_config")?.as_u64()?;
        if cfg.len() != 6 {
            return Err(Error::invalid("meta.vit_config must hold 6 values"));
        }
        let config = ViTConfig {
            dim: cfg[0] as usize,
            depth: cfg[1] as usize,
            heads: cfg[2] as usize,
            mlp_ratio: cfg[3] as usize,
            grid: cfg[4] as usize,
            num_classes: cfg[5] as usize,
        };
        config.validate()?;
        let base = set.get("meta.base_resolution")?.as_u64()?;
        if base.len() != 2 {
            return Err(Error::invalid("meta.base_resolution must hold 2 values"));
        }
        let base_resolution = (base[0] as usize, base[1] as usize);

        let mut params = ViTParams::<T>::zeros(config)?;
        for (name, mut t) in params.tensors_mut() {
            let stored = set.get(&format!("vit.{name}"))?.to_array::<T>()?;
            if stored.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor vit.{name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.assign(&stored);
        }
        let kernel = PatchKernel::new(
            fixed::<T, ndarray::Ix4>(set, "patch.weight")?,
            fixed::<T, ndarray::Ix1>(set, "patch.bias")?,
        )?;
        let bank = if set.contains("bank.config") {
            let bc = set.get("bank.config")?.as_u64()?;
            if bc.len() != 3 {
                return Err(Error::invalid("bank.config must hold 3 values"));
            }
            let kernels = (0..bc[0] as usize)
                .map(|k| {
                    PatchKernel::new(
                        fixed::<T, ndarray::Ix4>(set, &format!("bank.{k}.weight"))?,
                        fixed::<T, ndarray::Ix1>(set, &format!("bank.{k}.bias"))?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Some(PatchKernelBank::new(
                kernels,
                bc[1] as usize,
                method_from_code(bc[2])?,
            )?)
        } else {
            None
        };
        Ok(ModelCheckpoint {
            params,
            kernel,
            bank,
            base_resolution,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_tensors()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&load_checkpoint(path)?)
    }
}
