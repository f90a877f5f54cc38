//! `MFN1` model files.
//!
//! Layout (little-endian): magic `MFN1`, u32 version, u32 descriptor length and
//! descriptor text, u32 tensor count, then per tensor: u16 name length, name,
//! u8 dtype (0 = f32), u8 rank, u32 dims, raw data.

use std::path::Path;

use crate::arch::{build_model, ArchSpec, Mode, Model};
use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::fold::fold_batchnorm;

pub const MODEL_MAGIC: [u8; 4] = *b"MFN1";
pub const MODEL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Train | Mode::Eval => "eval",
        Mode::Folded => "folded",
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let desc = format!("mode={}\n{}", mode_name(model.mode()), model.arch().to_descriptor());
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (info, t) in tensors {
        let name = info.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name {} too long", info.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: MODEL_MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch { expected: MODEL_VERSION, found: version });
    }
    let len = r.u32("descriptor length")? as usize;
    let desc = std::str::from_utf8(r.take(len, "descriptor")?)
        .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
    let mut folded = false;
    let mut arch_text = String::new();
    for line in desc.lines() {
        match line.trim().strip_prefix("mode=") {
            Some("eval") => folded = false,
            Some("folded") => folded = true,
            Some(m) => return Err(Error::Format(format!("unknown model mode {m:?}"))),
            None => {
                arch_text.push_str(line);
                arch_text.push('\n');
            }
        }
    }
    let arch = ArchSpec::from_descriptor(&arch_text)?;
    let mut model = build_model(&arch, &mut Rng::new(0))?;
    if folded {
        model = fold_batchnorm(&model)?;
    }
    let count = r.u32("tensor count")? as usize;
    let names: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(i, t)| (i.name, t.shape().to_vec()))
        .collect();
    if count != names.len() {
        return Err(Error::Format(format!("file holds {count} tensors, architecture needs {}", names.len())));
    }
    for ((expect, shape), t) in names.iter().zip(model.tensors_mut()) {
        let nlen = r.u16("tensor name length")? as usize;
        let name = r.take(nlen, "tensor name")?;
        if name != expect.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {expect}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{expect}: unsupported dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Format(format!("{expect}: shape {dims:?}, expected {shape:?}")));
        }
        let raw = r.take(t.len() * 4, &format!("{expect} data"))?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

/// Writes `model` and returns the file size in bytes.
pub fn save_model(model: &Model, path: &Path) -> Result<u64> {
    let bytes = encode_model(model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
