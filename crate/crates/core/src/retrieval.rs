//! Exact cosine top-Q neighbor search over cached cls vectors.
//!
//! Ranking is by similarity descending, then id ascending. A zero vector,
//! on either side, ranks below every real similarity.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::dot;
use crate::error::{Error, Result};
use crate::features::{FeatureCache, GroupTag, PooledBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RetrievalGroup {
    All,
    FullOnly,
    MissingOnly,
}

impl RetrievalGroup {
    pub fn admits(self, tag: GroupTag) -> bool {
        match self {
            RetrievalGroup::All => true,
            RetrievalGroup::FullOnly => tag == GroupTag::Full,
            RetrievalGroup::MissingOnly => tag == GroupTag::Missing,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RetrievalGroup::All => "NN-all",
            RetrievalGroup::FullOnly => "NN-full",
            RetrievalGroup::MissingOnly => "NN-miss",
        }
    }
}

/// Cosine similarity; 0.0 when either vector is zero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("cosine_sim length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            id: u64::MAX,
            reason: "cosine_sim on non-finite input".into(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub bundle: PooledBundle,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub query_id: Option<u64>,
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.bundle.id).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.entries.iter().map(|n| n.bundle.label).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `query_id, rank, neighbor_id, similarity` lines, ranks from 1.
    pub fn trace(&self, query_id: u64) -> String {
        let mut out = String::new();
        for (rank, n) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{query_id}\t{}\t{}\t{:.6}", rank + 1, n.bundle.id, n.similarity);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub group: RetrievalGroup,
    rows: Vec<PooledBundle>,
    unit_cls: Vec<Option<Vec<f64>>>,
}

impl RetrievalIndex {
    pub fn build(cache: &FeatureCache, group: RetrievalGroup) -> Result<Self> {
        let rows: Vec<PooledBundle> = cache
            .entries()
            .iter()
            .filter(|e| group.admits(GroupTag::from(e.pattern)))
            .cloned()
            .collect();
        if rows.is_empty() {
            return Err(Error::config(format!(
                "retrieval group {} is empty in a cache of {} entries",
                group.label(),
                cache.len()
            )));
        }
        let unit_cls = rows
            .iter()
            .map(|r| normalize(&r.cls.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect();
        Ok(RetrievalIndex { group, rows, unit_cls })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.id).collect()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.rows.binary_search_by_key(&id, |r| r.id).is_ok()
    }

    /// Exact top-`q` rows by cosine similarity to `cls`, never returning
    /// `exclude_id`.
    pub fn query(&self, cls: &[f64], q: usize, exclude_id: Option<u64>) -> Result<NeighborSet> {
        if q == 0 {
            return Err(Error::config("Q must be at least 1"));
        }
        if cls.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: exclude_id.unwrap_or(u64::MAX),
                reason: "non-finite query vector".into(),
            });
        }
        let unit_q = normalize(cls);
        let mut scored: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| Some(r.id) != exclude_id)
            .map(|(i, _)| {
                let rank_sim = match (&unit_q, &self.unit_cls[i]) {
                    (Some(a), Some(b)) => dot(a, b),
                    _ => f64::NEG_INFINITY,
                };
                (rank_sim, i)
            })
            .collect();
        if scored.len() < q {
            return Err(Error::Capacity {
                requested: q,
                available: scored.len(),
            });
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(self.rows[a.1].id.cmp(&self.rows[b.1].id))
        };
        if scored.len() > q {
            scored.select_nth_unstable_by(q - 1, cmp);
            scored.truncate(q);
        }
        scored.sort_by(cmp);
        Ok(NeighborSet {
            query_id: exclude_id,
            entries: scored
                .into_iter()
                .map(|(s, i)| Neighbor {
                    bundle: self.rows[i].clone(),
                    similarity: if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 },
                })
                .collect(),
        })
    }

    /// Queries with a bundle's own cls vector.
    pub fn query_bundle(&self, bundle: &PooledBundle, q: usize, exclude_self: bool) -> Result<NeighborSet> {
        let cls: Vec<f64> = bundle.cls.iter().map(|&v| v as f64).collect();
        self.query(&cls, q, exclude_self.then_some(bundle.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synth::{Fingerprint, Pattern};

    fn entry(id: u64, cls: Vec<f32>, pattern: Pattern) -> PooledBundle {
        PooledBundle {
            id,
            label: 0,
            pattern,
            pooled_len: 0,
            dim: cls.len(),
            p: vec![],
            cls,
        }
    }

    fn cache(entries: Vec<PooledBundle>) -> FeatureCache {
        let d = entries[0].dim;
        FeatureCache::new(d, 0, Fingerprint::default(), entries).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1., 0.], &[1., 0.]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert!((cosine_sim(&[1., 1.], &[1., 0.]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0., 0.], &[1., 0.]).unwrap(), 0.0);
        assert!(cosine_sim(&[f64::NAN, 0.], &[1., 0.]).is_err());
    }

    #[test]
    fn group_filtering() {
        let mut entries = Vec::new();
        for i in 0..10 {
            let p = if i < 3 { Pattern::Full } else { Pattern::M1Only };
            entries.push(entry(i, vec![1.0, i as f32], p));
        }
        let c = cache(entries);
        assert_eq!(RetrievalIndex::build(&c, RetrievalGroup::FullOnly).unwrap().len(), 3);
        assert_eq!(RetrievalIndex::build(&c, RetrievalGroup::All).unwrap().len(), 10);
        assert_eq!(RetrievalIndex::build(&c, RetrievalGroup::MissingOnly).unwrap().len(), 7);

        let all_full = cache(vec![entry(0, vec![1.0], Pattern::Full)]);
        assert!(matches!(
            RetrievalIndex::build(&all_full, RetrievalGroup::MissingOnly),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn self_is_excluded_even_with_duplicates() {
        let c = cache(vec![
            entry(1, vec![1.0, 0.0], Pattern::Full),
            entry(2, vec![1.0, 0.0], Pattern::Full),
            entry(3, vec![0.0, 1.0], Pattern::Full),
        ]);
        let idx = RetrievalIndex::build(&c, RetrievalGroup::All).unwrap();
        let n = idx.query(&[1.0, 0.0], 2, Some(1)).unwrap();
        assert_eq!(n.ids(), vec![2, 3]);
        assert_eq!(n.entries[0].similarity, 1.0);
        let n = idx.query(&[1.0, 0.0], 2, None).unwrap();
        assert_eq!(n.ids(), vec![1, 2]);
    }

    #[test]
    fn capacity_error_reports_available() {
        let c = cache(vec![entry(1, vec![1.0], Pattern::Full), entry(2, vec![2.0], Pattern::Full)]);
        let idx = RetrievalIndex::build(&c, RetrievalGroup::All).unwrap();
        assert!(matches!(
            idx.query(&[1.0], 2, Some(1)),
            Err(Error::Capacity {
                requested: 2,
                available: 1
            })
        ));
        assert!(idx.query(&[1.0], 0, None).is_err());
    }

    #[test]
    fn zero_vectors_rank_last() {
        let c = cache(vec![
            entry(1, vec![0.0, 0.0], Pattern::Full),
            entry(2, vec![-1.0, 0.0], Pattern::Full),
            entry(3, vec![1.0, 1.0], Pattern::Full),
        ]);
        let idx = RetrievalIndex::build(&c, RetrievalGroup::All).unwrap();
        let n = idx.query(&[1.0, 0.0], 3, None).unwrap();
        assert_eq!(n.ids(), vec![3, 2, 1]);
        assert_eq!(n.entries[2].similarity, 0.0);
    }

    #[test]
    fn default_q_returns_four() {
        let mut rng = Rng::new(3);
        let entries = (0..10).map(|i| entry(i, (0..4).map(|_| rng.normal() as f32).collect(), Pattern::Full)).collect();
        let idx = RetrievalIndex::build(&cache(entries), RetrievalGroup::FullOnly).unwrap();
        let n = idx.query(&[0.1, 0.2, 0.3, 0.4], 4, None).unwrap();
        assert_eq!(n.len(), 4);
        assert!(n.entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert!(n.trace(99).lines().next().unwrap().starts_with("99\t1\t"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn index_and_query(seed: u64, rows: usize, d: usize) -> (RetrievalIndex, Vec<f64>) {
            let mut rng = crate::rng::Rng::new(seed);
            let entries = (0..rows)
                .map(|i| entry(i as u64 * 3, (0..d).map(|_| rng.normal() as f32).collect(), Pattern::Full))
                .collect();
            let q = (0..d).map(|_| rng.normal()).collect();
            (RetrievalIndex::build(&cache(entries), RetrievalGroup::All).unwrap(), q)
        }

        proptest! {
            #[test]
            fn scale_invariance(seed in 0u64..500, rows in 2usize..60, d in 1usize..12, c in 0.01f64..100.0) {
                let (idx, q) = index_and_query(seed, rows, d);
                let k = rows.min(5);
                let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
                prop_assert_eq!(idx.query(&q, k, None).unwrap().ids(), idx.query(&scaled, k, None).unwrap().ids());
            }

            #[test]
            fn top_q_is_prefix_of_top_q_plus_one(seed in 0u64..500, rows in 3usize..60, d in 1usize..12, q in 1usize..8) {
                let (idx, v) = index_and_query(seed, rows, d);
                prop_assume!(q + 1 <= rows);
                let small = idx.query(&v, q, None).unwrap().ids();
                let big = idx.query(&v, q + 1, None).unwrap().ids();
                prop_assert_eq!(&big[..q], &small[..]);
            }
        }
    }
}
