//! Pooled feature bundles and the on-disk feature cache.
//!
//! Cache file layout (little-endian):
//!
//! ```text
//! "ICLF" | version u32 | d u32 | T u32 | count u64 | fingerprint [32]
//! count × (id u64 | pattern u8 | label u32 | cls f32[d] | p f32[T·d])
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::encoder::{FeatureBundle, FrozenEncoder};
use crate::error::{Error, Result};
use crate::metrics::SampleMeta;
use crate::synth::{Dataset, Fingerprint, Pattern};

pub const CACHE_MAGIC: &[u8; 4] = b"ICLF";
pub const CACHE_VERSION: u32 = 1;

/// `T` pooled feature tokens (half per modality) plus the cls vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledBundle {
    pub id: u64,
    pub label: u32,
    pub pattern: Pattern,
    pub pooled_len: usize,
    pub dim: usize,
    /// Row-major `pooled_len × dim`.
    pub p: Vec<f32>,
    pub cls: Vec<f32>,
}

impl PooledBundle {
    pub fn token(&self, t: usize) -> &[f32] {
        &self.p[t * self.dim..(t + 1) * self.dim]
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            id: self.id,
            label: self.label,
            pattern: self.pattern,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    Full,
    Missing,
}

impl From<Pattern> for GroupTag {
    fn from(p: Pattern) -> Self {
        if p.is_full() {
            GroupTag::Full
        } else {
            GroupTag::Missing
        }
    }
}

pub fn check_pooled_len(t: usize, l1: usize, l2: usize) -> Result<()> {
    if t % 2 != 0 {
        return Err(Error::config(format!("pooled length T={t} must be even")));
    }
    if t / 2 > l1.min(l2) {
        return Err(Error::config(format!(
            "pooled length T={t} needs T/2 <= min(L1, L2) = {}",
            l1.min(l2)
        )));
    }
    Ok(())
}

/// Mean-pools `rows × d` into `segments × d` over contiguous segments with
/// boundaries `round(j · rows / segments)`.
fn pool_block(block: &crate::autodiff::Mat, segments: usize, out: &mut Vec<f32>) {
    let l = block.rows;
    let bound = |j: usize| (2 * j * l + segments) / (2 * segments);
    for j in 0..segments {
        let (start, end) = (bound(j), bound(j + 1));
        let mut acc = vec![0.0f64; block.cols];
        for r in start..end {
            for (a, v) in acc.iter_mut().zip(block.row(r)) {
                *a += v;
            }
        }
        let n = (end - start) as f64;
        out.extend(acc.into_iter().map(|a| (a / n) as f32));
    }
}

pub fn pool(bundle: &FeatureBundle, t: usize) -> Result<PooledBundle> {
    check_pooled_len(t, bundle.h_m1.rows, bundle.h_m2.rows)?;
    let dim = bundle.cls.len();
    let mut p = Vec::with_capacity(t * dim);
    if t > 0 {
        pool_block(&bundle.h_m1, t / 2, &mut p);
        pool_block(&bundle.h_m2, t / 2, &mut p);
    }
    Ok(PooledBundle {
        id: bundle.id,
        label: bundle.label,
        pattern: bundle.pattern,
        pooled_len: t,
        dim,
        p,
        cls: bundle.cls.iter().map(|&v| v as f32).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub dim: usize,
    pub pooled_len: usize,
    /// Identifies the (dataset, encoder) pair that produced the entries.
    pub fingerprint: Fingerprint,
    entries: Vec<PooledBundle>,
}

/// Fingerprint of a cache built from `dataset` with an encoder whose
/// parameter checksum is `encoder_checksum`.
pub fn cache_fingerprint(dataset: &Fingerprint, encoder_checksum: &[u8; 32]) -> Fingerprint {
    Fingerprint::of(&[b"cache", &dataset.0, encoder_checksum])
}

impl FeatureCache {
    /// Builds a cache, sorting entries by id.
    pub fn new(dim: usize, pooled_len: usize, fingerprint: Fingerprint, mut entries: Vec<PooledBundle>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::Data(format!("duplicate cache id {}", e.id)));
            }
            if e.dim != dim || e.pooled_len != pooled_len || e.cls.len() != dim || e.p.len() != pooled_len * dim {
                return Err(Error::Data(format!("cache entry {} does not match (d={dim}, T={pooled_len})", e.id)));
            }
        }
        Ok(FeatureCache {
            dim,
            pooled_len,
            fingerprint,
            entries,
        })
    }

    pub fn entries(&self) -> &[PooledBundle] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_tag(&self, tag: GroupTag) -> usize {
        self.entries.iter().filter(|e| GroupTag::from(e.pattern) == tag).count()
    }

    pub fn metas(&self) -> Vec<SampleMeta> {
        self.entries.iter().map(PooledBundle::meta).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// The entries whose ids appear in `ids`, under a new fingerprint.
    pub fn subset(&self, ids: &[u64], fingerprint: Fingerprint) -> Result<FeatureCache> {
        let wanted: HashSet<u64> = ids.iter().copied().collect();
        let entries: Vec<PooledBundle> = self.entries.iter().filter(|e| wanted.contains(&e.id)).cloned().collect();
        if entries.len() != wanted.len() {
            return Err(Error::Data(format!(
                "{} requested ids are not in the cache",
                wanted.len() - entries.len()
            )));
        }
        FeatureCache::new(self.dim, self.pooled_len, fingerprint, entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.pooled_len as u32);
        w.u64(self.entries.len() as u64);
        w.bytes(&self.fingerprint.0);
        for e in &self.entries {
            w.u64(e.id);
            w.u8(e.pattern.code());
            w.u32(e.label);
            w.f32s(&e.cls);
            w.f32s(&e.p);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CACHE_MAGIC)?;
        r.version(CACHE_VERSION)?;
        let dim = r.u32()? as usize;
        let pooled_len = r.u32()? as usize;
        let at = r.offset();
        let count = r.u64()?;
        let fingerprint = Fingerprint(r.take(32)?.try_into().unwrap());
        let entry_bytes = 8 + 1 + 4 + 4 * (dim as u64) * (1 + pooled_len as u64);
        if count.checked_mul(entry_bytes) != Some(r.remaining() as u64) {
            return Err(Error::format(
                at,
                format!("count {count} × {entry_bytes} bytes does not match {} remaining bytes", r.remaining()),
            ));
        }
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = r.u64()?;
            let at = r.offset();
            let pattern = Pattern::from_code(r.u8()?).ok_or_else(|| Error::format(at, "invalid pattern code"))?;
            let label = r.u32()?;
            let cls = r.f32s(dim)?;
            let p = r.f32s(pooled_len * dim)?;
            entries.push(PooledBundle {
                id,
                label,
                pattern,
                pooled_len,
                dim,
                p,
                cls,
            });
        }
        r.expect_end()?;
        let unsorted = entries.windows(2).any(|w| w[0].id >= w[1].id);
        if unsorted {
            return Err(Error::format(0, "cache entries are not strictly ordered by id"));
        }
        FeatureCache::new(dim, pooled_len, fingerprint, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureCache::from_bytes(&read_file(path)?)
    }
}

/// Extracts, pools and tags every sample of `dataset`.
pub fn build_cache(encoder: &FrozenEncoder, dataset: &Dataset, t: usize) -> Result<FeatureCache> {
    let cfg = encoder.config();
    check_pooled_len(t, cfg.l1, cfg.l2)?;
    let bundles = encoder.extract_all(&dataset.samples)?;
    let pooled = bundles.iter().map(|b| pool(b, t)).collect::<Result<Vec<_>>>()?;
    FeatureCache::new(cfg.d, t, cache_fingerprint(&dataset.fingerprint, &encoder.checksum()), pooled)
}

/// Re-pools already extracted bundles at a different `t`.
pub fn cache_from_bundles(bundles: &[FeatureBundle], t: usize, fingerprint: Fingerprint) -> Result<FeatureCache> {
    let dim = bundles.first().map_or(0, |b| b.cls.len());
    let pooled = bundles.iter().map(|b| pool(b, t)).collect::<Result<Vec<_>>>()?;
    FeatureCache::new(dim, t, fingerprint, pooled)
}
