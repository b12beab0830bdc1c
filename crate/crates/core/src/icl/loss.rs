use crate::autodiff::{log_sum_exp, Mat, Tape, Var};
use crate::error::{Error, Result};

use super::{check_mask, ContextSequence, PredKind, SlotOutputs, SlotPred};

fn check_label(label: u32, k: usize) -> Result<()> {
    if label as usize >= k {
        return Err(Error::Data(format!("label {label} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean softmax cross-entropy over a batch of logit vectors.
pub fn loss_ca(logits: &[Vec<f64>], y: &[u32]) -> Result<f64> {
    if logits.len() != y.len() || logits.is_empty() {
        return Err(Error::Precondition(format!(
            "{} logit rows for {} labels",
            logits.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (l, &label) in logits.iter().zip(y) {
        check_label(label, l.len())?;
        total += log_sum_exp(l) - l[label as usize];
    }
    Ok(total / logits.len() as f64)
}

/// `λ·R + Σ CE` where `R` is the summed squared reconstruction error, or its
/// mean per entry when `mean_recon` is set.
pub(crate) fn slot_loss_graph(
    tape: &mut Tape,
    preds: &[SlotPred],
    seq: &ContextSequence,
    lambda: f64,
    mean_recon: bool,
) -> Result<Var> {
    let mut recon = Vec::new();
    let mut cls = Vec::new();
    for p in preds {
        match p.kind {
            PredKind::Recon => {
                let target = Mat::from_vec(1, seq.dim, seq.tokens.row(p.slot).to_vec());
                recon.push(tape.sq_err_sum(p.var, target));
            }
            PredKind::Logits => {
                let label = seq.label_of(p.slot);
                check_label(label, tape.value(p.var).cols)?;
                cls.push(tape.cross_entropy(p.var, label as usize));
            }
        }
    }
    let mut terms = Vec::with_capacity(2);
    if !recon.is_empty() {
        let r = tape.sum(&recon);
        let scale = if mean_recon {
            lambda / (recon.len() * seq.dim) as f64
        } else {
            lambda
        };
        terms.push(tape.scale(r, scale));
    }
    if !cls.is_empty() {
        terms.push(tape.sum(&cls));
    }
    Ok(match terms.len() {
        0 => tape.constant(Mat::zeros(1, 1)),
        _ => tape.sum(&terms),
    })
}

fn constant_preds(tape: &mut Tape, out: &SlotOutputs) -> Vec<SlotPred> {
    let mut preds = Vec::new();
    for slot in 0..out.recon.len() {
        if let Some(r) = &out.recon[slot] {
            preds.push(SlotPred {
                slot,
                kind: PredKind::Recon,
                var: tape.constant(Mat::row_vec(r.clone())),
            });
        }
        if let Some(l) = &out.logits[slot] {
            preds.push(SlotPred {
                slot,
                kind: PredKind::Logits,
                var: tape.constant(Mat::row_vec(l.clone())),
            });
        }
    }
    preds
}

fn check_outputs(out: &SlotOutputs, seq: &ContextSequence) -> Result<()> {
    if out.recon.len() != seq.len() || out.logits.len() != seq.len() {
        return Err(Error::Precondition("outputs do not belong to this sequence".into()));
    }
    for j in 0..seq.len() {
        let is_cls = seq.slots[j].is_cls;
        if (out.recon[j].is_some() && is_cls) || (out.logits[j].is_some() && !is_cls) {
            return Err(Error::Precondition(format!("output kind does not match slot {j}")));
        }
        if out.recon[j].as_ref().is_some_and(|r| r.len() != seq.dim) {
            return Err(Error::Precondition(format!("reconstruction at slot {j} has the wrong width")));
        }
    }
    Ok(())
}

/// NTP objective for one sequence.
pub fn loss_ntp(out: &SlotOutputs, seq: &ContextSequence, lambda_ntp: f64) -> Result<f64> {
    if !(lambda_ntp >= 0.0 && lambda_ntp.is_finite()) {
        return Err(Error::config(format!("lambda_ntp must be finite and >= 0, got {lambda_ntp}")));
    }
    check_outputs(out, seq)?;
    let mut tape = Tape::new();
    let preds = constant_preds(&mut tape, out);
    let loss = slot_loss_graph(&mut tape, &preds, seq, lambda_ntp, false)?;
    Ok(tape.scalar(loss))
}

/// Unweighted sum of squared reconstruction errors over scored feature slots.
pub fn reconstruction_sum(out: &SlotOutputs, seq: &ContextSequence) -> f64 {
    out.recon
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.as_ref().map(|r| (j, r)))
        .map(|(j, r)| r.iter().zip(seq.tokens.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// MF objective: `λ · MSE` over masked feature slots plus cross-entropy over
/// masked cls slots.
pub fn loss_mf(out: &SlotOutputs, seq: &ContextSequence, mask: &[bool], lambda_mf: f64) -> Result<f64> {
    if !(lambda_mf >= 0.0 && lambda_mf.is_finite()) {
        return Err(Error::config(format!("lambda_mf must be finite and >= 0, got {lambda_mf}")));
    }
    check_mask(seq, mask)?;
    check_outputs(out, seq)?;
    for j in 0..seq.len() {
        let scored = out.recon[j].is_some() || out.logits[j].is_some();
        if scored != mask[j] {
            return Err(Error::Precondition(format!("outputs and mask disagree at slot {j}")));
        }
    }
    let mut tape = Tape::new();
    let preds = constant_preds(&mut tape, out);
    let loss = slot_loss_graph(&mut tape, &preds, seq, lambda_mf, true)?;
    Ok(tape.scalar(loss))
}
