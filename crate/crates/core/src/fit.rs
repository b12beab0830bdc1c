//! Mini-batch training with early stopping, shared by the ICL heads and the
//! baselines.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, primary_metric, Prediction, SampleMeta, Subgroup};
use crate::nn::{Adam, Binder, ParamStore};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            seed: 0,
        }
    }
}

/// Validation scores of one evaluation, by subgroup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValScores {
    pub metric: String,
    pub full: Option<f64>,
    pub miss: Option<f64>,
    pub all: Option<f64>,
}

impl ValScores {
    /// Primary-metric scores of `predictions` on a validation split.
    pub fn from_predictions(predictions: &[Prediction], metas: &[SampleMeta], num_classes: usize) -> Result<Self> {
        let report = evaluate_split(predictions, metas, num_classes)?;
        Ok(ValScores {
            metric: primary_metric(num_classes).to_string(),
            full: report.primary(Subgroup::Full),
            miss: report.primary(Subgroup::Miss),
            all: report.primary(Subgroup::All),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val: ValScores,
}

/// Renders curve points as tab-separated records:
/// `step, split, subgroup, metric, value`.
pub fn curve_records(curve: &[CurvePoint]) -> String {
    let mut out = String::new();
    for p in curve {
        let _ = writeln!(out, "{}\ttrain\tall\tloss\t{:.6}", p.step, p.train_loss);
        for (name, v) in [("full", p.val.full), ("miss", p.val.miss), ("all", p.val.all)] {
            let v = v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(out, "{}\tval\t{name}\t{}\t{v}", p.step, p.val.metric);
        }
    }
    out
}

/// Mean loss and mean gradient over `batch`, one tape per sample. Samples run
/// in parallel; the reduction follows batch order.
pub fn batch_gradient<F>(store: &ParamStore, batch: &[usize], loss_fn: &F) -> Result<(f64, Vec<Option<Mat>>)>
where
    F: Fn(&mut Tape, &mut Binder, usize) -> Result<Var> + Sync,
{
    let per_sample: Vec<Result<(f64, Vec<Option<Mat>>)>> = batch
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new();
            let mut bind = Binder::trainable(store);
            let loss = loss_fn(&mut tape, &mut bind, i)?;
            Ok((tape.scalar(loss), tape.backward(loss, store.len())))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Option<Mat>> = (0..store.len()).map(|_| None).collect();
    for r in per_sample {
        let (loss, g) = r?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            let Some(gi) = gi else { continue };
            match acc {
                Some(a) => a.data.iter_mut().zip(&gi.data).for_each(|(x, y)| *x += y),
                None => *acc = Some(gi),
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.data.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grads))
}

/// Trains `store` over `n_train` samples with Adam and early stopping on the
/// combined validation score (higher is better). The best-scoring parameters
/// are restored. `loss_fn` receives the sample index and the global step.
pub fn fit<F, E>(
    store: &mut ParamStore,
    n_train: usize,
    settings: &FitSettings,
    loss_fn: F,
    mut evaluate: E,
) -> Result<Vec<CurvePoint>>
where
    F: Fn(&mut Tape, &mut Binder, usize, usize) -> Result<Var> + Sync,
    E: FnMut(&ParamStore) -> Result<ValScores>,
{
    let mut curve = Vec::new();
    if settings.max_epochs == 0 || n_train == 0 {
        return Ok(curve);
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut opt = Adam::new(store, settings.lr);
    let mut rng = Rng::new(derive_seed(settings.seed, &["fit", "order"]));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0;

    for epoch in 1..=settings.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(settings.batch_size) {
            let this_step = step;
            let (loss, grads) = batch_gradient(store, batch, &|t: &mut Tape, b: &mut Binder, i| loss_fn(t, b, i, this_step))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step, loss });
            }
            opt.step(store, &grads);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }

        let val = evaluate(store)?;
        let score = val.all.unwrap_or(f64::NEG_INFINITY);
        curve.push(CurvePoint {
            epoch,
            step,
            train_loss: epoch_loss / batches as f64,
            val,
        });
        match &best {
            Some((b, _)) if score <= *b => {
                stale += 1;
                if stale >= settings.patience {
                    break;
                }
            }
            _ => {
                best = Some((score, store.clone()));
                stale = 0;
            }
        }
    }
    if let Some((_, params)) = best {
        *store = params;
    }
    Ok(curve)
}
