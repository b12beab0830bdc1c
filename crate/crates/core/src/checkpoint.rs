//! Parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic [4] | version u32 | tag u8 | config_len u32 | config (UTF-8 TOML)
//! tensor_count u32
//! manifest: tensor_count × (name_len u16 | name | rows u32 | cols u32 | offset u64)
//! data: f32 values, each tensor row-major at its manifest offset (bytes from data start)
//! digest u64: first 8 bytes (LE) of SHA-256 over everything before it
//! ```
//!
//! Magics: `ICLE` encoder, `ICLH` ICL head, `ICLB` baseline. The tag byte
//! carries the head variant or baseline kind (0 for encoders).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

fn digest(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(Sha256::digest(bytes)[..8].try_into().expect("digest has 32 bytes"))
}

pub const ENCODER_MAGIC: &[u8; 4] = b"ICLE";
pub const HEAD_MAGIC: &[u8; 4] = b"ICLH";
pub const BASELINE_MAGIC: &[u8; 4] = b"ICLB";
pub const CHECKPOINT_VERSION: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: u8,
    pub config: String,
    pub params: ParamStore,
}

pub fn encode(magic: &[u8; 4], ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic);
    w.u32(CHECKPOINT_VERSION);
    w.u8(ckpt.tag);
    w.u32(ckpt.config.len() as u32);
    w.bytes(ckpt.config.as_bytes());
    let tensors = ckpt.params.tensors();
    w.u32(tensors.len() as u32);
    let mut offset = 0u64;
    for t in tensors {
        w.u16(t.name.len() as u16);
        w.bytes(t.name.as_bytes());
        w.u32(t.value.rows as u32);
        w.u32(t.value.cols as u32);
        w.u64(offset);
        offset += 4 * t.value.data.len() as u64;
    }
    for t in tensors {
        w.f64s_as_f32(&t.value.data);
    }
    let mut bytes = w.into_inner();
    let d = digest(&bytes);
    bytes.extend_from_slice(&d.to_le_bytes());
    bytes
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Checkpoint> {
    let mut head = ByteReader::new(bytes);
    head.magic(magic)?;
    head.version(CHECKPOINT_VERSION)?;
    if bytes.len() < 8 + 8 {
        return Err(Error::format(bytes.len() as u64, "file ends before the digest"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if digest(body).to_le_bytes() != tail {
        return Err(Error::format(body.len() as u64, "digest mismatch"));
    }
    let mut r = ByteReader::new(body);
    r.take(8)?;
    let tag = r.u8()?;
    let cfg_len = r.u32()? as usize;
    let at = r.offset();
    let config = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| Error::format(at, "config block is not UTF-8"))?;
    let count = r.u32()? as usize;

    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let at = r.offset();
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(Error::format(at, format!("tensor {name} offset {offset}, expected {expected_offset}")));
        }
        expected_offset += 4 * (rows as u64) * (cols as u64);
        manifest.push((name, rows, cols));
    }
    let data_start = r.offset();
    if (r.remaining() as u64) != expected_offset {
        return Err(Error::format(
            data_start,
            format!("data section holds {} bytes, manifest needs {expected_offset}", r.remaining()),
        ));
    }
    let mut params = ParamStore::new();
    for (name, rows, cols) in manifest {
        let values = r.f32s(rows * cols)?;
        if params.id(&name).is_some() {
            return Err(Error::format(r.offset(), format!("duplicate tensor {name}")));
        }
        params.insert(&name, Mat::from_f32(rows, cols, &values));
    }
    r.expect_end()?;
    Ok(Checkpoint { tag, config, params })
}

pub fn save(path: &Path, magic: &[u8; 4], ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode(magic, ckpt))
}

pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Checkpoint> {
    decode(magic, &read_file(path)?)
}

/// Copies values from `loaded` into `target`, requiring identical names and
/// shapes in the same order.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for (t, l) in target.tensors_mut().iter_mut().zip(loaded.tensors()) {
        if t.name != l.name || t.value.shape() != l.value.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                l.name,
                l.value.shape(),
                t.name,
                t.value.shape()
            )));
        }
        t.value = l.value.clone();
    }
    Ok(())
}
