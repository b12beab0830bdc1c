use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::features::PooledBundle;
use crate::retrieval::NeighborSet;

/// Where a token of the flattened context sequence comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// `0..Q` for neighbors in retrieval order, `Q` for the current sample.
    pub owner: usize,
    /// `0..T` for pooled feature tokens, `T` for the cls token.
    pub position: usize,
    pub is_cls: bool,
}

/// `[h¹₁ … hᵀ₁ cls₁ ; … ; h¹_Q … hᵀ_Q cls_Q ; h¹_cur … hᵀ_cur cls_cur]`
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence {
    pub q: usize,
    pub t: usize,
    pub dim: usize,
    /// `(Q+1)(T+1) × d`
    pub tokens: Mat,
    pub slots: Vec<Slot>,
    /// Owner labels: `Q` neighbor labels then the current sample's label.
    pub labels: Vec<u32>,
}

/// Rows `[p₀ … p_{T−1}, cls]` of one pooled bundle.
pub(crate) fn bundle_rows(b: &PooledBundle, out: &mut Vec<f64>) {
    out.extend(b.p.iter().map(|&v| v as f64));
    out.extend(b.cls.iter().map(|&v| v as f64));
}

impl ContextSequence {
    pub fn new(current: &PooledBundle, neighbors: &NeighborSet) -> Result<Self> {
        let bundles: Vec<&PooledBundle> = neighbors.entries.iter().map(|n| &n.bundle).collect();
        Self::from_bundles(current, &bundles)
    }

    pub fn from_bundles(current: &PooledBundle, neighbors: &[&PooledBundle]) -> Result<Self> {
        let (t, dim) = (current.pooled_len, current.dim);
        if let Some(b) = neighbors.iter().find(|b| b.pooled_len != t || b.dim != dim) {
            return Err(Error::config(format!(
                "neighbor {} has shape (T={}, d={}), current has (T={t}, d={dim})",
                b.id, b.pooled_len, b.dim
            )));
        }
        let q = neighbors.len();
        let mut data = Vec::with_capacity((q + 1) * (t + 1) * dim);
        let mut slots = Vec::with_capacity((q + 1) * (t + 1));
        let mut labels = Vec::with_capacity(q + 1);
        for (owner, b) in neighbors.iter().copied().chain(std::iter::once(current)).enumerate() {
            bundle_rows(b, &mut data);
            for position in 0..=t {
                slots.push(Slot {
                    owner,
                    position,
                    is_cls: position == t,
                });
            }
            labels.push(b.label);
        }
        Ok(ContextSequence {
            q,
            t,
            dim,
            tokens: Mat::from_vec((q + 1) * (t + 1), dim, data),
            slots,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Index of the current sample's cls slot (always the last).
    pub fn current_cls_slot(&self) -> usize {
        self.len() - 1
    }

    pub fn label_of(&self, slot: usize) -> u32 {
        self.labels[self.slots[slot].owner]
    }
}
