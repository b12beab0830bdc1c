//! Dataset directories: a `meta` TOML file plus one binary file per split.
//!
//! Split file layout (little-endian):
//!
//! ```text
//! "ICLD" | version u32 | count u64
//! count × (id u64 | pattern u8 | label u32 | m1_present u8 | m2_present u8
//!          | m1 f32[tokens_m1·input_dim_m1] if present | m2 f32[...] if present)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::synth::{Dataset, Fingerprint, Pattern, RawSample, Split, SynthConfig};

pub const SPLIT_MAGIC: &[u8; 4] = b"ICLD";
pub const SPLIT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: String,
    pub file: String,
    pub count: usize,
    pub fingerprint: String,
    /// SHA-256 of the split file's bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub synth: SynthConfig,
    pub splits: Vec<SplitEntry>,
}

pub fn split_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(SPLIT_MAGIC);
    w.u32(SPLIT_VERSION);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        w.u64(s.id);
        w.u8(s.pattern().code());
        w.u32(s.label);
        w.u8(s.x_m1.is_some() as u8);
        w.u8(s.x_m2.is_some() as u8);
        if let Some(x) = &s.x_m1 {
            w.f32s(x);
        }
        if let Some(x) = &s.x_m2 {
            w.f32s(x);
        }
    }
    w.into_inner()
}

pub fn split_from_bytes(bytes: &[u8], config: &SynthConfig, split: Split, fingerprint: Fingerprint) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(SPLIT_MAGIC)?;
    r.version(SPLIT_VERSION)?;
    let count = r.u64()?;
    let (len1, len2) = (config.m1_len(), config.m2_len());
    let min_record = 8 + 1 + 4 + 1 + 1;
    if count > (r.remaining() / min_record) as u64 {
        return Err(Error::format(r.offset(), format!("record count {count} exceeds file size")));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let id = r.u64()?;
        let code = r.u8()?;
        let label = r.u32()?;
        let has1 = r.u8()?;
        let has2 = r.u8()?;
        if has1 > 1 || has2 > 1 {
            return Err(Error::format(at, "presence flags must be 0 or 1"));
        }
        let x_m1 = if has1 == 1 { Some(r.f32s(len1)?) } else { None };
        let x_m2 = if has2 == 1 { Some(r.f32s(len2)?) } else { None };
        let pattern = Pattern::from_code(code).ok_or_else(|| Error::format(at, format!("unknown pattern code {code}")))?;
        let expected = match pattern {
            Pattern::Full => (true, true),
            Pattern::M1Only => (true, false),
            Pattern::M2Only => (false, true),
        };
        if expected != (x_m1.is_some(), x_m2.is_some()) {
            return Err(Error::format(at, format!("record {id}: pattern {pattern:?} disagrees with presence flags")));
        }
        if label as usize >= config.num_classes {
            return Err(Error::format(at, format!("record {id}: label {label} out of range")));
        }
        samples.push(RawSample { id, x_m1, x_m2, label });
    }
    r.expect_end()?;
    Ok(Dataset {
        config: config.clone(),
        split,
        samples,
        fingerprint,
    })
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the given splits (sharing one synth config) under `dir`.
pub fn save_dataset(dir: &Path, splits: &[&Dataset]) -> Result<()> {
    let first = splits.first().ok_or_else(|| Error::Precondition("no splits to save".into()))?;
    let mut entries = Vec::with_capacity(splits.len());
    for ds in splits {
        if ds.config != first.config {
            return Err(Error::Precondition("splits come from different synthetic worlds".into()));
        }
        let file = format!("{}.bin", ds.split.name());
        let bytes = split_to_bytes(ds);
        write_file(&dir.join(&file), &bytes)?;
        entries.push(SplitEntry {
            split: ds.split.name().to_string(),
            file,
            count: ds.len(),
            fingerprint: ds.fingerprint.to_hex(),
            sha256: sha_hex(&bytes),
        });
    }
    let meta = DatasetMeta {
        synth: first.config.clone(),
        splits: entries,
    };
    write_file(&dir.join("meta"), toml::to_string(&meta).expect("meta serializes").as_bytes())
}

fn parse_split(name: &str) -> Result<Split> {
    [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Data(format!("unknown split name {name:?}")))
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let text = read_file(&dir.join("meta"))?;
    let text = String::from_utf8(text).map_err(|_| Error::Data("dataset meta is not UTF-8".into()))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("dataset meta: {e}")))
}

/// Loads every split listed in `dir/meta`, verifying file hashes.
pub fn load_dataset(dir: &Path) -> Result<Vec<Dataset>> {
    let meta = load_meta(dir)?;
    meta.synth.validate()?;
    let mut out = Vec::with_capacity(meta.splits.len());
    for e in &meta.splits {
        let bytes = read_file(&dir.join(&e.file))?;
        if sha_hex(&bytes) != e.sha256 {
            return Err(Error::Fingerprint(format!("{} does not match the hash recorded in meta", e.file)));
        }
        let ds = split_from_bytes(&bytes, &meta.synth, parse_split(&e.split)?, Fingerprint::from_hex(&e.fingerprint)?)?;
        if ds.len() != e.count {
            return Err(Error::Data(format!("{} holds {} records, meta says {}", e.file, ds.len(), e.count)));
        }
        out.push(ds);
    }
    Ok(out)
}

/// The split named `split` from a loaded directory.
pub fn take_split(splits: &[Dataset], split: Split) -> Result<&Dataset> {
    splits
        .iter()
        .find(|d| d.split == split)
        .ok_or_else(|| Error::Data(format!("dataset has no {} split", split.name())))
}
