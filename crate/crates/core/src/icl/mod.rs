//! Trainable in-context learning heads over pooled, frozen features.
//!
//! * CA: the current sample's `T+1` tokens are queries; the `Q` neighbors'
//!   blocks are keys and values. Per layer: self-attention over current
//!   tokens, cross-attention to the neighbors, feed-forward, each pre-norm
//!   with a residual. The classifier reads the current cls row after a final
//!   layer norm.
//! * NTP: the flattened `(Q+1)(T+1)` sequence with learned absolute positions
//!   and a feature/cls slot-type embedding goes through causal blocks. The
//!   output at row `j−1` predicts slot `j`: a linear reconstruction for
//!   feature slots, the shared classifier for cls slots.
//! * MF: the same sequence, with masked slots replaced by a learned mask
//!   token, through bidirectional blocks. Outputs are read at masked slots.

mod loss;
mod sequence;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_vec, AttnMask, Mat, Tape, Var};
use crate::checkpoint::{self, Checkpoint, HEAD_MAGIC};
use crate::error::{Error, Result};
use crate::features::PooledBundle;
use crate::fit::{CurvePoint, FitSettings};
use crate::nn::{
    causal_mask, AttentionIds, Binder, BlockIds, FeedForwardIds, Init, LayerNormIds, LinearIds, ParamId, ParamStore,
};
use crate::retrieval::{NeighborSet, RetrievalIndex};
use crate::rng::{derive_seed, Rng};

pub use loss::{loss_ca, loss_mf, loss_ntp, reconstruction_sum};
pub use sequence::{ContextSequence, Slot};
pub use train::{sample_mf_mask, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Ca,
    Ntp,
    Mf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ca, Variant::Ntp, Variant::Mf];

    pub fn code(self) -> u8 {
        match self {
            Variant::Ca => 0,
            Variant::Ntp => 1,
            Variant::Mf => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ca => "CA",
            Variant::Ntp => "NTP",
            Variant::Mf => "MF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclConfig {
    pub variant: Variant,
    pub q: usize,
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub num_classes: usize,
    pub lambda_ntp: f64,
    /// Reconstruction weight for MF; falls back to `lambda_ntp`.
    pub lambda_mf: Option<f64>,
    pub mask_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
    /// Drop a training sample from its own neighbor list.
    pub exclude_self: bool,
    /// CA only: learned position embeddings on current and context tokens.
    pub slot_embeddings: bool,
    /// CA only: self-attention over current tokens before cross-attention.
    pub ca_self_attention: bool,
}

impl Default for IclConfig {
    fn default() -> Self {
        let fit = FitSettings::default();
        IclConfig {
            variant: Variant::Ca,
            q: 4,
            t: 8,
            layers: 2,
            heads: 4,
            d: 32,
            num_classes: 2,
            lambda_ntp: 0.1,
            lambda_mf: None,
            mask_ratio: 0.3,
            lr: fit.lr,
            batch_size: fit.batch_size,
            max_epochs: fit.max_epochs,
            patience: fit.patience,
            seed: 0,
            exclude_self: true,
            slot_embeddings: true,
            ca_self_attention: true,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::config("Q must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(self.lambda_ntp >= 0.0 && self.lambda_ntp.is_finite()) {
            return Err(Error::config(format!("lambda_ntp must be finite and >= 0, got {}", self.lambda_ntp)));
        }
        if let Some(l) = self.lambda_mf {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(format!("lambda_mf must be finite and >= 0, got {l}")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lambda_mf(&self) -> f64 {
        self.lambda_mf.unwrap_or(self.lambda_ntp)
    }

    pub fn seq_len(&self) -> usize {
        (self.q + 1) * (self.t + 1)
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: derive_seed(self.seed, &["icl", "fit"]),
        }
    }
}

#[derive(Clone, Debug)]
struct CaLayer {
    ln_self: LayerNormIds,
    self_attn: AttentionIds,
    ln_q: LayerNormIds,
    ln_kv: LayerNormIds,
    cross: AttentionIds,
    ln_ffn: LayerNormIds,
    ffn: FeedForwardIds,
}

#[derive(Clone, Debug)]
struct CaIds {
    cur_pos: Option<ParamId>,
    ctx_pos: Option<ParamId>,
    layers: Vec<CaLayer>,
    ln_out: LayerNormIds,
    classifier: LinearIds,
}

#[derive(Clone, Debug)]
struct SeqIds {
    pos: ParamId,
    slot_type: ParamId,
    mask_token: Option<ParamId>,
    blocks: Vec<BlockIds>,
    ln_out: LayerNormIds,
    recon: LinearIds,
    classifier: LinearIds,
}

#[derive(Clone, Debug)]
enum HeadIds {
    Ca(CaIds),
    Seq(SeqIds),
}

impl HeadIds {
    fn build(cfg: &IclConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let (d, n_tok) = (cfg.d, cfg.t + 1);
        match cfg.variant {
            Variant::Ca => {
                let (cur_pos, ctx_pos) = if cfg.slot_embeddings {
                    (
                        Some(store.add("cur_pos", n_tok, d, Init::Normal(0.02), rng)),
                        Some(store.add("ctx_pos", cfg.q * n_tok, d, Init::Normal(0.02), rng)),
                    )
                } else {
                    (None, None)
                };
                let layers = (0..cfg.layers)
                    .map(|l| CaLayer {
                        ln_self: LayerNormIds::new(store, &format!("layer{l}.ln_self"), d, rng),
                        self_attn: AttentionIds::new(store, &format!("layer{l}.self_attn"), d, cfg.heads, rng),
                        ln_q: LayerNormIds::new(store, &format!("layer{l}.ln_q"), d, rng),
                        ln_kv: LayerNormIds::new(store, &format!("layer{l}.ln_kv"), d, rng),
                        cross: AttentionIds::new(store, &format!("layer{l}.cross"), d, cfg.heads, rng),
                        ln_ffn: LayerNormIds::new(store, &format!("layer{l}.ln_ffn"), d, rng),
                        ffn: FeedForwardIds::new(store, &format!("layer{l}.ffn"), d, 4 * d, rng),
                    })
                    .collect();
                HeadIds::Ca(CaIds {
                    cur_pos,
                    ctx_pos,
                    layers,
                    ln_out: LayerNormIds::new(store, "ln_out", d, rng),
                    classifier: LinearIds::new(store, "classifier", d, cfg.num_classes, rng),
                })
            }
            Variant::Ntp | Variant::Mf => HeadIds::Seq(SeqIds {
                pos: store.add("pos", cfg.seq_len(), d, Init::Normal(0.02), rng),
                slot_type: store.add("slot_type", 2, d, Init::Normal(0.02), rng),
                mask_token: (cfg.variant == Variant::Mf).then(|| store.add("mask_token", 1, d, Init::Normal(0.02), rng)),
                blocks: (0..cfg.layers)
                    .map(|l| BlockIds::new(store, &format!("block{l}"), d, cfg.heads, rng))
                    .collect(),
                ln_out: LayerNormIds::new(store, "ln_out", d, rng),
                recon: LinearIds::new(store, "recon", d, d, rng),
                classifier: LinearIds::new(store, "classifier", d, cfg.num_classes, rng),
            }),
        }
    }
}

/// Output of one head prediction, addressed by sequence slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PredKind {
    Recon,
    Logits,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SlotPred {
    pub slot: usize,
    pub kind: PredKind,
    pub var: Var,
}

/// Value-level NTP/MF outputs: `recon[j]` is the reconstruction predicted for
/// feature slot `j`, `logits[j]` the class logits for cls slot `j`; `None`
/// where the variant produces nothing for that slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotOutputs {
    pub recon: Vec<Option<Vec<f64>>>,
    pub logits: Vec<Option<Vec<f64>>>,
}

impl SlotOutputs {
    pub fn num_reconstructions(&self) -> usize {
        self.recon.iter().flatten().count()
    }

    pub fn num_classifications(&self) -> usize {
        self.logits.iter().flatten().count()
    }

    pub(crate) fn from_preds(tape: &Tape, preds: &[SlotPred], n: usize) -> Self {
        let mut out = SlotOutputs {
            recon: vec![None; n],
            logits: vec![None; n],
        };
        for p in preds {
            let v = tape.value(p.var).data.clone();
            match p.kind {
                PredKind::Recon => out.recon[p.slot] = Some(v),
                PredKind::Logits => out.logits[p.slot] = Some(v),
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct IclHead {
    pub config: IclConfig,
    pub params: ParamStore,
    ids: HeadIds,
    /// One point per evaluation during training.
    pub curve: Vec<CurvePoint>,
}

impl IclHead {
    pub fn init(config: &IclConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(config.seed, &["icl", "init", config.variant.name()]));
        let mut params = ParamStore::new();
        let ids = HeadIds::build(config, &mut params, &mut rng);
        Ok(IclHead {
            config: config.clone(),
            params,
            ids,
            curve: Vec::new(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Trainable scalar count. Encoder parameters live elsewhere.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn expect_variant(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::Precondition(format!(
                "head variant is {}, operation needs {}",
                self.config.variant.name(),
                v.name()
            )));
        }
        Ok(())
    }

    fn check_bundle(&self, b: &PooledBundle) -> Result<()> {
        if b.dim != self.config.d || b.pooled_len != self.config.t {
            return Err(Error::config(format!(
                "bundle {} has (T={}, d={}), head expects (T={}, d={})",
                b.id, b.pooled_len, b.dim, self.config.t, self.config.d
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &ContextSequence) -> Result<()> {
        if seq.dim != self.config.d || seq.t != self.config.t || seq.q != self.config.q {
            return Err(Error::config(format!(
                "sequence has (Q={}, T={}, d={}), head expects (Q={}, T={}, d={})",
                seq.q, seq.t, seq.dim, self.config.q, self.config.t, self.config.d
            )));
        }
        Ok(())
    }

    // ---- graph builders ----

    /// CA logits `1 × K`.
    pub(crate) fn ca_graph(&self, tape: &mut Tape, bind: &mut Binder, current: &PooledBundle, neighbors: &[&PooledBundle]) -> Var {
        let HeadIds::Ca(ids) = &self.ids else {
            unreachable!("ca_graph on a sequence head")
        };
        let n_tok = self.config.t + 1;
        let mut cur = Vec::with_capacity(n_tok * self.config.d);
        sequence::bundle_rows(current, &mut cur);
        let mut ctx = Vec::with_capacity(neighbors.len() * n_tok * self.config.d);
        for b in neighbors {
            sequence::bundle_rows(b, &mut ctx);
        }
        let mut x = tape.constant(Mat::from_vec(n_tok, self.config.d, cur));
        let mut c = tape.constant(Mat::from_vec(neighbors.len() * n_tok, self.config.d, ctx));
        if let (Some(cp), Some(xp)) = (ids.cur_pos, ids.ctx_pos) {
            let cp = bind.get(tape, cp);
            x = tape.add(x, cp);
            let xp = bind.get(tape, xp);
            c = tape.add(c, xp);
        }
        for layer in &ids.layers {
            if self.config.ca_self_attention {
                let h = layer.ln_self.apply(tape, bind, x);
                let a = layer.self_attn.apply(tape, bind, h, h, None);
                x = tape.add(x, a);
            }
            let hq = layer.ln_q.apply(tape, bind, x);
            let hkv = layer.ln_kv.apply(tape, bind, c);
            let a = layer.cross.apply(tape, bind, hq, hkv, None);
            x = tape.add(x, a);
            let h = layer.ln_ffn.apply(tape, bind, x);
            let f = layer.ffn.apply(tape, bind, h);
            x = tape.add(x, f);
        }
        let x = ids.ln_out.apply(tape, bind, x);
        let cls = tape.slice_rows(x, n_tok - 1, 1);
        ids.classifier.apply(tape, bind, cls)
    }

    /// Hidden states `n × d` of the NTP/MF sequence model.
    fn seq_hidden(&self, tape: &mut Tape, bind: &mut Binder, seq: &ContextSequence, mask: Option<&[bool]>) -> (Var, &SeqIds) {
        let HeadIds::Seq(ids) = &self.ids else {
            unreachable!("seq_hidden on a CA head")
        };
        let n = seq.len();
        let d = seq.dim;
        let mut x = match (mask, ids.mask_token) {
            (Some(mask), Some(tok)) => {
                let mut data = seq.tokens.data.clone();
                for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    data[j * d..(j + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                }
                let base = tape.constant(Mat::from_vec(n, d, data));
                let zero = tape.constant(Mat::zeros(1, d));
                let tok = bind.get(tape, tok);
                let table = tape.concat_rows(&[zero, tok]);
                let pick: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
                let fill = tape.select_rows(table, &pick);
                tape.add(base, fill)
            }
            _ => tape.constant(seq.tokens.clone()),
        };
        let pos = bind.get(tape, ids.pos);
        x = tape.add(x, pos);
        let st = bind.get(tape, ids.slot_type);
        let kinds: Vec<usize> = seq.slots.iter().map(|s| s.is_cls as usize).collect();
        let st = tape.select_rows(st, &kinds);
        x = tape.add(x, st);
        let causal: Option<AttnMask> = (self.config.variant == Variant::Ntp).then(|| causal_mask(n));
        for block in &ids.blocks {
            x = block.apply(tape, bind, x, causal.as_ref());
        }
        (ids.ln_out.apply(tape, bind, x), ids)
    }

    /// Next-token predictions for every slot `j ≥ 1`, read from row `j−1`.
    pub(crate) fn ntp_graph(&self, tape: &mut Tape, bind: &mut Binder, seq: &ContextSequence) -> Vec<SlotPred> {
        let (h, ids) = self.seq_hidden(tape, bind, seq, None);
        self.read_out(tape, bind, ids, h, (1..seq.len()).map(|j| (j, j - 1)), seq)
    }

    /// Predictions at masked slots, read from the slot's own row.
    pub(crate) fn mf_graph(&self, tape: &mut Tape, bind: &mut Binder, seq: &ContextSequence, mask: &[bool]) -> Vec<SlotPred> {
        let (h, ids) = self.seq_hidden(tape, bind, seq, Some(mask));
        let targets = mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| (j, j));
        self.read_out(tape, bind, ids, h, targets, seq)
    }

    fn read_out(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        ids: &SeqIds,
        h: Var,
        targets: impl Iterator<Item = (usize, usize)>,
        seq: &ContextSequence,
    ) -> Vec<SlotPred> {
        let (mut feat, mut cls): (Vec<(usize, usize)>, Vec<(usize, usize)>) = (Vec::new(), Vec::new());
        for (slot, row) in targets {
            if seq.slots[slot].is_cls {
                cls.push((slot, row));
            } else {
                feat.push((slot, row));
            }
        }
        let mut preds = Vec::with_capacity(feat.len() + cls.len());
        for (group, head, kind) in [(&feat, &ids.recon, PredKind::Recon), (&cls, &ids.classifier, PredKind::Logits)] {
            if group.is_empty() {
                continue;
            }
            let rows: Vec<usize> = group.iter().map(|&(_, r)| r).collect();
            let sel = tape.select_rows(h, &rows);
            let out = head.apply(tape, bind, sel);
            for (k, &(slot, _)) in group.iter().enumerate() {
                preds.push(SlotPred {
                    slot,
                    kind,
                    var: tape.slice_rows(out, k, 1),
                });
            }
        }
        preds.sort_by_key(|p| p.slot);
        preds
    }

    // ---- value-level forwards ----

    pub fn forward_ca(&self, current: &PooledBundle, neighbors: &NeighborSet) -> Result<Vec<f64>> {
        let refs: Vec<&PooledBundle> = neighbors.entries.iter().map(|n| &n.bundle).collect();
        self.forward_ca_bundles(current, &refs)
    }

    pub fn forward_ca_bundles(&self, current: &PooledBundle, neighbors: &[&PooledBundle]) -> Result<Vec<f64>> {
        self.expect_variant(Variant::Ca)?;
        self.check_bundle(current)?;
        for b in neighbors {
            self.check_bundle(b)?;
        }
        if neighbors.len() != self.config.q {
            return Err(Error::Precondition(format!(
                "expected {} neighbors, got {}",
                self.config.q,
                neighbors.len()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let logits = self.ca_graph(&mut tape, &mut bind, current, neighbors);
        Ok(tape.value(logits).data.clone())
    }

    pub fn forward_ntp(&self, seq: &ContextSequence) -> Result<SlotOutputs> {
        self.expect_variant(Variant::Ntp)?;
        self.check_sequence(seq)?;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let preds = self.ntp_graph(&mut tape, &mut bind, seq);
        Ok(SlotOutputs::from_preds(&tape, &preds, seq.len()))
    }

    pub fn forward_mf(&self, seq: &ContextSequence, mask: &[bool]) -> Result<SlotOutputs> {
        self.expect_variant(Variant::Mf)?;
        self.check_sequence(seq)?;
        check_mask(seq, mask)?;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let preds = self.mf_graph(&mut tape, &mut bind, seq, mask);
        Ok(SlotOutputs::from_preds(&tape, &preds, seq.len()))
    }

    /// Logits for the current sample given its neighbors.
    pub fn current_logits(&self, current: &PooledBundle, neighbors: &NeighborSet) -> Result<Vec<f64>> {
        match self.config.variant {
            Variant::Ca => self.forward_ca(current, neighbors),
            Variant::Ntp | Variant::Mf => {
                self.check_bundle(current)?;
                if neighbors.len() != self.config.q {
                    return Err(Error::Precondition(format!(
                        "expected {} neighbors, got {}",
                        self.config.q,
                        neighbors.len()
                    )));
                }
                let seq = ContextSequence::new(current, neighbors)?;
                let last = seq.current_cls_slot();
                let out = if self.config.variant == Variant::Ntp {
                    self.forward_ntp(&seq)?
                } else {
                    let mut mask = vec![false; seq.len()];
                    mask[last] = true;
                    self.forward_mf(&seq, &mask)?
                };
                Ok(out.logits[last].clone().expect("current cls is always scored"))
            }
        }
    }

    /// Class probabilities given an explicit neighbor set.
    pub fn predict_with(&self, current: &PooledBundle, neighbors: &NeighborSet) -> Result<Vec<f64>> {
        let logits = self.current_logits(current, neighbors)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: current.id,
                reason: "non-finite logits".into(),
            });
        }
        Ok(softmax_vec(&logits))
    }

    /// Retrieves `Q` neighbors for `current` (no self-exclusion) and returns
    /// class probabilities.
    pub fn predict(&self, current: &PooledBundle, index: &RetrievalIndex) -> Result<Vec<f64>> {
        let neighbors = index.query_bundle(current, self.config.q, false)?;
        self.predict_with(current, &neighbors)
    }

    // ---- persistence ----

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: self.config.variant.code(),
            config: toml::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: IclConfig =
            toml::from_str(&ckpt.config).map_err(|e| Error::Data(format!("head config block: {e}")))?;
        if Variant::from_code(ckpt.tag) != Some(config.variant) {
            return Err(Error::Data(format!(
                "variant tag {} does not match config variant {}",
                ckpt.tag,
                config.variant.name()
            )));
        }
        let mut head = IclHead::init(&config)?;
        checkpoint::restore_into(&mut head.params, &ckpt.params)?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, HEAD_MAGIC, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path, HEAD_MAGIC)?)
    }
}

pub(crate) fn check_mask(seq: &ContextSequence, mask: &[bool]) -> Result<()> {
    if mask.len() != seq.len() {
        return Err(Error::Precondition(format!(
            "mask has {} entries for a sequence of {}",
            mask.len(),
            seq.len()
        )));
    }
    if !mask[seq.current_cls_slot()] {
        return Err(Error::Precondition("the current cls slot must be masked".into()));
    }
    Ok(())
}
