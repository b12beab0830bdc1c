use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, PooledBundle};
use crate::fit::{fit, ValScores};
use crate::metrics::Prediction;
use crate::nn::Binder;
use crate::retrieval::{NeighborSet, RetrievalIndex};
use crate::rng::{derive_seed, Rng};

use super::loss::slot_loss_graph;
use super::{ContextSequence, IclHead, Variant};

/// MF mask over `n` slots: the last slot (current cls) always, plus
/// `round(ratio · (n−1))` of the others drawn uniformly without replacement.
pub fn sample_mf_mask(n: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    if n == 0 {
        return mask;
    }
    mask[n - 1] = true;
    let k = ((ratio * (n - 1) as f64).round() as usize).min(n - 1);
    let mut others: Vec<usize> = (0..n - 1).collect();
    rng.shuffle(&mut others);
    for &j in &others[..k] {
        mask[j] = true;
    }
    mask
}

pub(crate) fn mf_mask_for(seed: u64, step: usize, sample: usize, n: usize, ratio: f64) -> Vec<bool> {
    let s = derive_seed(seed, &["icl", "mf-mask", &step.to_string(), &sample.to_string()]);
    sample_mf_mask(n, ratio, &mut Rng::new(s))
}

impl IclHead {
    fn check_cache(&self, cache: &FeatureCache, what: &str) -> Result<()> {
        if cache.dim != self.config.d || cache.pooled_len != self.config.t {
            return Err(Error::config(format!(
                "{what} cache has (T={}, d={}), head expects (T={}, d={})",
                cache.pooled_len, cache.dim, self.config.t, self.config.d
            )));
        }
        Ok(())
    }

    /// Per-sample loss graph given precomputed neighbors.
    pub(crate) fn sample_loss_graph(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        current: &PooledBundle,
        neighbors: &[&PooledBundle],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        match self.config.variant {
            Variant::Ca => {
                let logits = self.ca_graph(tape, bind, current, neighbors);
                if current.label as usize >= self.config.num_classes {
                    return Err(Error::Data(format!("label {} out of range", current.label)));
                }
                Ok(tape.cross_entropy(logits, current.label as usize))
            }
            Variant::Ntp => {
                let seq = ContextSequence::from_bundles(current, neighbors)?;
                let preds = self.ntp_graph(tape, bind, &seq);
                slot_loss_graph(tape, &preds, &seq, self.config.lambda_ntp, false)
            }
            Variant::Mf => {
                let seq = ContextSequence::from_bundles(current, neighbors)?;
                let mask = mask.ok_or_else(|| Error::Precondition("MF loss needs a mask".into()))?;
                super::check_mask(&seq, mask)?;
                let preds = self.mf_graph(tape, bind, &seq, mask);
                slot_loss_graph(tape, &preds, &seq, self.config.lambda_mf(), true)
            }
        }
    }

    /// Loss and parameter gradients for one sample; the gradient vector is
    /// indexed like `self.params`.
    pub fn sample_loss_and_grad(
        &self,
        current: &PooledBundle,
        neighbors: &[&PooledBundle],
        mask: Option<&[bool]>,
    ) -> Result<(f64, Vec<Option<crate::autodiff::Mat>>)> {
        let mut tape = Tape::new();
        let mut bind = Binder::trainable(&self.params);
        let loss = self.sample_loss_graph(&mut tape, &mut bind, current, neighbors, mask)?;
        Ok((tape.scalar(loss), tape.backward(loss, self.params.len())))
    }

    /// Loss for one sample without building gradients.
    pub fn sample_loss(&self, current: &PooledBundle, neighbors: &[&PooledBundle], mask: Option<&[bool]>) -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let loss = self.sample_loss_graph(&mut tape, &mut bind, current, neighbors, mask)?;
        Ok(tape.scalar(loss))
    }

    /// Predictions for every entry of `cache`, retrieving from `index`.
    pub fn predict_cache(&self, cache: &FeatureCache, index: &RetrievalIndex) -> Result<Vec<Prediction>> {
        cache
            .entries()
            .par_iter()
            .map(|b| {
                Ok(Prediction {
                    id: b.id,
                    probs: self.predict(b, index)?,
                })
            })
            .collect()
    }
}

fn neighbor_sets(cache: &FeatureCache, index: &RetrievalIndex, q: usize, exclude_self: bool) -> Result<Vec<NeighborSet>> {
    cache
        .entries()
        .par_iter()
        .map(|b| index.query_bundle(b, q, exclude_self))
        .collect()
}

/// Trains the head's parameters on `train_cache`, retrieving neighbors from
/// `index` (which must be built from the same training cache), with early
/// stopping on the combined validation score.
pub fn train(mut head: IclHead, train_cache: &FeatureCache, val_cache: &FeatureCache, index: &RetrievalIndex) -> Result<IclHead> {
    head.check_cache(train_cache, "train")?;
    head.check_cache(val_cache, "validation")?;
    let train_ids = train_cache.ids();
    if let Some(id) = index.ids().into_iter().find(|id| train_ids.binary_search(id).is_err()) {
        return Err(Error::Leakage(format!("index row {id} is not a training sample")));
    }
    if let Some(b) = val_cache.entries().iter().find(|b| index.contains(b.id)) {
        return Err(Error::Leakage(format!("validation sample {} is in the retrieval index", b.id)));
    }
    if val_cache.is_empty() {
        return Err(Error::config("validation cache is empty"));
    }
    let cfg = head.config.clone();
    let train_nb = neighbor_sets(train_cache, index, cfg.q, cfg.exclude_self)?;
    let val_nb = neighbor_sets(val_cache, index, cfg.q, false)?;
    let val_metas = val_cache.metas();
    let entries = train_cache.entries();
    let n_seq = cfg.seq_len();

    let mut store = head.params.clone();
    let settings = cfg.fit_settings();
    let mask_seed = derive_seed(cfg.seed, &["icl", "mask"]);
    let curve = {
        let shadow = &head;
        fit(
            &mut store,
            entries.len(),
            &settings,
            |tape, bind, i, step| {
                let nb: Vec<&PooledBundle> = train_nb[i].entries.iter().map(|n| &n.bundle).collect();
                let mask = (cfg.variant == Variant::Mf).then(|| mf_mask_for(mask_seed, step, i, n_seq, cfg.mask_ratio));
                shadow.sample_loss_graph(tape, bind, &entries[i], &nb, mask.as_deref())
            },
            |params| {
                let probe = IclHead {
                    params: params.clone(),
                    ..shadow.clone()
                };
                let preds: Result<Vec<Prediction>> = val_cache
                    .entries()
                    .par_iter()
                    .zip(val_nb.par_iter())
                    .map(|(b, nb)| {
                        Ok(Prediction {
                            id: b.id,
                            probs: probe.predict_with(b, nb)?,
                        })
                    })
                    .collect();
                ValScores::from_predictions(&preds?, &val_metas, cfg.num_classes)
            },
        )?
    };
    head.params = store;
    head.curve = curve;
    Ok(head)
}
