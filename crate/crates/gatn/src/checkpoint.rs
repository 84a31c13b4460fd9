//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `"GATN"` magic, u32 version, u8 stage (0 = global, 1 = local), u8
//! element tag (0 = f32, 1 = f64), u32 config-text length + bytes, u32
//! tensor count, then per tensor: u32 name length + UTF-8 name, u32 rank,
//! u64 extents, raw little-endian payload. Tensors round-trip bit-exactly;
//! a 32-bit checkpoint loads in 64-bit mode by exact widening.

use crate::error::{Error, Result};
use crate::global::GlobalParams;
use crate::local::LocalParams;
use crate::tensor::{Elem, ElemTag, Tensor};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GATN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    Local,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Global => 0,
            Stage::Local => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Global),
            1 => Ok(Stage::Local),
            _ => Err(Error::Checkpoint(format!("unknown stage tag {tag}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Global => "global",
            Stage::Local => "local",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub stage: Stage,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Header-only view for `info`-style inspection.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub stage: Stage,
    pub elem: ElemTag,
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Vec<usize>)>,
}

fn elem_tag_byte(tag: ElemTag) -> u8 {
    match tag {
        ElemTag::F32 => 0,
        ElemTag::F64 => 1,
    }
}

fn elem_tag_from_byte(b: u8) -> Result<ElemTag> {
    match b {
        0 => Ok(ElemTag::F32),
        1 => Ok(ElemTag::F64),
        _ => Err(Error::Checkpoint(format!("unknown element tag {b}"))),
    }
}

pub fn save_checkpoint<T: Elem>(
    path: &Path,
    stage: Stage,
    config_text: &str,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(stage.tag());
    buf.push(elem_tag_byte(T::TAG));
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string in checkpoint".into()))
    }
}

fn read_header(r: &mut Reader) -> Result<(Stage, ElemTag, String, usize)> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"GATN\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let stage = Stage::from_tag(r.u8()?)?;
    let elem = elem_tag_from_byte(r.u8()?)?;
    let config_text = r.string()?;
    let count = r.u32()? as usize;
    Ok((stage, elem, config_text, count))
}

fn read_shape(r: &mut Reader) -> Result<Vec<usize>> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
    }
    (0..rank).map(|_| r.u64().map(|e| e as usize)).collect()
}

pub fn load_checkpoint<T: Elem>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (stage, elem, config_text, count) = read_header(&mut r)?;
    if elem == ElemTag::F64 && T::TAG == ElemTag::F32 {
        return Err(Error::Checkpoint(
            "checkpoint stores f64 tensors; loading into f32 would narrow them".into(),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let shape = read_shape(&mut r)?;
        let numel: usize = shape.iter().product();
        // validate the payload extent before allocating
        let width = match elem {
            ElemTag::F32 => 4,
            ElemTag::F64 => 8,
        };
        let payload = r.take(numel * width)?;
        let data: Vec<T> = match elem {
            ElemTag::F32 => payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            ElemTag::F64 => payload
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { stage, config_text, tensors })
}

/// Inspect a checkpoint without committing to an element type.
pub fn checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (stage, elem, config_text, count) = read_header(&mut r)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let shape = read_shape(&mut r)?;
        let numel: usize = shape.iter().product();
        let width = match elem {
            ElemTag::F32 => 4,
            ElemTag::F64 => 8,
        };
        r.take(numel * width)?;
        tensors.push((name, shape));
    }
    Ok(CheckpointInfo { stage, elem, version: VERSION, config_text, tensors })
}

fn fill_from_table<T: Elem>(
    targets: Vec<(String, &mut Tensor<T>)>,
    table: &[(String, Tensor<T>)],
) -> Result<()> {
    if targets.len() != table.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, checkpoint has {}",
            targets.len(),
            table.len()
        )));
    }
    for (name, target) in targets {
        let (_, stored) = table
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if stored.shape() != target.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                stored.shape(),
                target.shape()
            )));
        }
        *target = stored.clone();
    }
    Ok(())
}

pub fn save_global<T: Elem>(
    path: &Path,
    params: &GlobalParams<T>,
    config_text: &str,
) -> Result<()> {
    let named = params.named_tensors();
    let refs: Vec<(String, &Tensor<T>)> = named.into_iter().collect();
    save_checkpoint(path, Stage::Global, config_text, &refs)
}

pub fn load_global<T: Elem>(path: &Path) -> Result<(GlobalParams<T>, String)> {
    let ckpt = load_checkpoint::<T>(path)?;
    if ckpt.stage != Stage::Global {
        return Err(Error::Checkpoint(format!(
            "expected a global-stage checkpoint, found {}",
            ckpt.stage
        )));
    }
    let find = |name: &str| -> Result<&Tensor<T>> {
        ckpt.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    };
    let head = find("global.head.weight")?;
    let conv1 = find("global.conv1.weight")?;
    let mut params = GlobalParams::<T>::init(head.shape()[0], conv1.shape()[1], 0);
    fill_from_table(params.named_tensors_mut(), &ckpt.tensors)?;
    Ok((params, ckpt.config_text))
}

pub fn save_local<T: Elem>(
    path: &Path,
    params: &LocalParams<T>,
    config_text: &str,
) -> Result<()> {
    let named = params.named_tensors();
    let refs: Vec<(String, &Tensor<T>)> = named.into_iter().collect();
    save_checkpoint(path, Stage::Local, config_text, &refs)
}

pub fn load_local<T: Elem>(path: &Path) -> Result<(LocalParams<T>, String)> {
    let ckpt = load_checkpoint::<T>(path)?;
    if ckpt.stage != Stage::Local {
        return Err(Error::Checkpoint(format!(
            "expected a local-stage checkpoint, found {}",
            ckpt.stage
        )));
    }
    let mut filters = Vec::new();
    let mut in_channels = 0;
    for i in 0.. {
        match ckpt.tensors.iter().find(|(n, _)| *n == format!("local.block{i}.conv.weight")) {
            Some((_, w)) => {
                if i == 0 {
                    in_channels = w.shape()[1];
                }
                filters.push(w.shape()[0]);
            }
            None => break,
        }
    }
    if filters.is_empty() {
        return Err(Error::Checkpoint("no local blocks found in checkpoint".into()));
    }
    let mut params = LocalParams::<T>::init(&filters, in_channels, 0);
    fill_from_table(params.named_tensors_mut(), &ckpt.tensors)?;
    Ok((params, ckpt.config_text))
}
