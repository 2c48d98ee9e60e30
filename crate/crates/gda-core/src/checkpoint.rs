//! Binary model container: embedded config, step/seed provenance, and a
//! named tensor table, round-trippable through disk bit-exactly.
//!
//! Layout (all integers little-endian, no alignment padding):
//! magic `GDA1` | format version u32 | header length u32 | header bytes |
//! tensor count u32 | per tensor: name length u16, name bytes, rank u8,
//! one u64 extent per axis, precision tag u8 (4 = f32, 8 = f64), raw
//! little-endian scalar data.
//!
//! Design decisions:
//! - The header is the same UTF-8 `key = value` text used by config files,
//!   plus `step` and `seed`. Floats are written with enough digits to parse
//!   back to the identical bit pattern, so config round-trips are exact.
//! - The tensor table is a `BTreeMap`, so serialization order is sorted by
//!   name and the emitted bytes are a deterministic function of contents.
//!   Determinism claims elsewhere reduce to byte-comparing files.
//! - The reader is strict: bad magic, unknown header keys, duplicate or
//!   non-UTF-8 names, a precision tag that disagrees with the header config,
//!   truncated data, and trailing bytes are all distinct errors. A checkpoint
//!   is a certified artifact, not a best-effort one.
//! - Optimizer state travels in the same table under the `optim.` name
//!   prefix; parameter totals exclude it so resumable training does not
//!   inflate reported model sizes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{lm_config_from_kv, lm_config_to_kv, KvFile, LmConfig, LM_KEYS};
use crate::error::{GdaError, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"GDA1";
pub const FORMAT_VERSION: u32 = 1;

/// Name prefix for optimizer-state tensors riding along with the model.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: LmConfig,
    pub step: u64,
    pub seed: u64,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: LmConfig, seed: u64) -> Self {
        Checkpoint {
            config,
            step: 0,
            seed,
            tensors: BTreeMap::new(),
        }
    }

    /// Insert or replace a tensor. Overwriting is intentional: the training
    /// loop rewrites parameter and optimizer entries every save.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| GdaError::Format(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Sorted tensor names; the on-disk order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Model parameter count: every tensor except optimizer state.
    pub fn param_total(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(name, _)| !name.starts_with(OPTIM_PREFIX))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.keys().any(|n| n.starts_with(OPTIM_PREFIX))
    }

    pub fn strip_optimizer_state(&mut self) {
        self.tensors.retain(|name, _| !name.starts_with(OPTIM_PREFIX));
    }

    fn header_text(&self) -> String {
        let mut header = lm_config_to_kv(&self.config);
        header.push_str(&format!("step = {}\n", self.step));
        header.push_str(&format!("seed = {}\n", self.seed));
        header
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header_text();
        let data_guess: usize = self
            .tensors
            .values()
            .map(|t| t.numel() * T::PRECISION.size())
            .sum();
        let mut out = Vec::with_capacity(64 + header.len() + data_guess);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            if name.len() > u16::MAX as usize {
                return Err(GdaError::Format(format!(
                    "tensor name of {} bytes exceeds the u16 length field",
                    name.len()
                )));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.shape().len() as u8);
            for &extent in tensor.shape() {
                out.extend_from_slice(&(extent as u64).to_le_bytes());
            }
            out.push(T::PRECISION.tag());
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let (config, step, seed) = read_preamble(&mut rd)?;
        if config.gda.precision != T::PRECISION {
            return Err(GdaError::PrecisionMismatch {
                expected: T::PRECISION.name(),
                found: config.gda.precision.name(),
            });
        }

        let count = rd.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = rd.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(rd.take(name_len, "tensor name")?)
                .map_err(|_| GdaError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = rd.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let extent = rd.u64("tensor extent")? as usize;
                numel = numel.checked_mul(extent).ok_or_else(|| {
                    GdaError::Format(format!("tensor `{name}` extents overflow"))
                })?;
                shape.push(extent);
            }
            let tag = rd.u8("precision tag")?;
            if tag != T::PRECISION.tag() {
                return Err(GdaError::Format(format!(
                    "tensor `{name}` has precision tag {tag} but the header config says {}",
                    T::PRECISION.name()
                )));
            }
            let size = T::PRECISION.size();
            let raw = rd.take(numel * size, "tensor data")?;
            let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(GdaError::Format(format!("duplicate tensor `{name}`")));
            }
        }
        if !rd.at_end() {
            return Err(GdaError::Format(format!(
                "{} trailing bytes after the last tensor",
                rd.remaining()
            )));
        }

        Ok(Checkpoint {
            config,
            step,
            seed,
            tensors,
        })
    }

    /// Write via a sibling temp file and rename, so an interrupted save never
    /// leaves a half-written checkpoint at the target path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A checkpoint whose precision is only known at run time (CLI paths).
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let (config, _, _) = read_preamble(&mut rd)?;
        match config.gda.precision {
            Precision::F32 => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?)),
            Precision::F64 => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn config(&self) -> &LmConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.step,
            AnyCheckpoint::F64(c) => c.step,
        }
    }

    pub fn precision(&self) -> Precision {
        self.config().gda.precision
    }
}

/// Magic/version/header shared by the typed and the dispatching readers.
fn read_preamble(rd: &mut Reader) -> Result<(LmConfig, u64, u64)> {
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(GdaError::Format(format!(
            "bad magic {magic:?}, expected `GDA1`"
        )));
    }
    let version = rd.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(GdaError::Format(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let header_len = rd.u32("header length")? as usize;
    let header = std::str::from_utf8(rd.take(header_len, "header")?)
        .map_err(|_| GdaError::Format("header is not UTF-8".into()))?;
    let kv = KvFile::parse(header)?;
    let mut allowed: Vec<&str> = LM_KEYS.to_vec();
    allowed.extend_from_slice(&["step", "seed"]);
    kv.check_known(&allowed)?;
    let config = lm_config_from_kv(&kv)?;
    config.validate()?;
    let step = kv
        .get_u64("step")?
        .ok_or_else(|| GdaError::MissingKey("step".into()))?;
    let seed = kv
        .get_u64("seed")?
        .ok_or_else(|| GdaError::MissingKey("seed".into()))?;
    Ok((config, step, seed))
}

/// Bounds-checked cursor over the raw bytes; every failure names the field
/// being read so truncation errors are self-explanatory.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GdaError::Format(format!(
                "truncated reading {what}: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
