//! Small multimodal transformer used as the frozen feature extractor.
//!
//! Input layout is `[cls; m1 tokens; m2 tokens]` plus learned position and
//! modality-type embeddings. A missing modality is replaced by its learned
//! empty-token bank before the transformer. Each modality is embedded as
//! `mix · X · W + b`, where `mix` maps raw token count to encoder token count.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint::{self, Checkpoint, ENCODER_MAGIC};
use crate::error::{Error, Result};
use crate::fit::batch_gradient;
use crate::nn::{Adam, Binder, BlockIds, Init, LayerNormIds, LinearIds, ParamId, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::synth::{Dataset, Fingerprint, Pattern, RawSample, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub l1: usize,
    pub l2: usize,
    pub layers: usize,
    pub heads: usize,
    pub pretrain_classes: usize,
    pub pretrain_steps: usize,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
    pub raw_tokens_m1: usize,
    pub raw_tokens_m2: usize,
    pub input_dim_m1: usize,
    pub input_dim_m2: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 32,
            l1: 6,
            l2: 6,
            layers: 2,
            heads: 4,
            pretrain_classes: 16,
            pretrain_steps: 2000,
            seed: 0,
            raw_tokens_m1: 6,
            raw_tokens_m2: 6,
            input_dim_m1: 8,
            input_dim_m2: 8,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl EncoderConfig {
    /// Default encoder sized for the given synthetic world.
    pub fn for_world(synth: &SynthConfig) -> Self {
        EncoderConfig {
            raw_tokens_m1: synth.tokens_m1,
            raw_tokens_m2: synth.tokens_m2,
            input_dim_m1: synth.input_dim_m1,
            input_dim_m2: synth.input_dim_m2,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} must be a positive multiple of heads={}", self.d, self.heads)));
        }
        if self.l1 == 0 || self.l2 == 0 || self.layers == 0 {
            return Err(Error::config("l1, l2 and layers must be positive"));
        }
        if self.raw_tokens_m1 == 0 || self.raw_tokens_m2 == 0 || self.input_dim_m1 == 0 || self.input_dim_m2 == 0 {
            return Err(Error::config("raw input shape must be positive"));
        }
        if self.pretrain_classes < 2 {
            return Err(Error::config("pretrain_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        1 + self.l1 + self.l2
    }

    pub fn accepts(&self, synth: &SynthConfig) -> Result<()> {
        if (self.raw_tokens_m1, self.input_dim_m1, self.raw_tokens_m2, self.input_dim_m2)
            != (synth.tokens_m1, synth.input_dim_m1, synth.tokens_m2, synth.input_dim_m2)
        {
            return Err(Error::config("encoder input shape does not match the dataset's modality shapes"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct EmbedIds {
    mix: ParamId,
    proj: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderIds {
    embed_m1: EmbedIds,
    embed_m2: EmbedIds,
    empty_m1: ParamId,
    empty_m2: ParamId,
    cls: ParamId,
    pos: ParamId,
    modality_type: ParamId,
    blocks: Vec<BlockIds>,
    ln_out: LayerNormIds,
}

impl EncoderIds {
    fn build(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let mut embed = |name: &str, l: usize, raw: usize, input_dim: usize, store: &mut ParamStore| EmbedIds {
            mix: store.add(&format!("{name}.mix"), l, raw, Init::Normal(1.0 / (raw as f64).sqrt()), rng),
            proj: LinearIds::new(store, &format!("{name}.proj"), input_dim, d, rng),
        };
        let embed_m1 = embed("embed_m1", cfg.l1, cfg.raw_tokens_m1, cfg.input_dim_m1, store);
        let embed_m2 = embed("embed_m2", cfg.l2, cfg.raw_tokens_m2, cfg.input_dim_m2, store);
        EncoderIds {
            embed_m1,
            embed_m2,
            empty_m1: store.add("empty_m1", cfg.l1, d, Init::Normal(0.02), rng),
            empty_m2: store.add("empty_m2", cfg.l2, d, Init::Normal(0.02), rng),
            cls: store.add("cls", 1, d, Init::Normal(0.02), rng),
            pos: store.add("pos", cfg.seq_len(), d, Init::Normal(0.02), rng),
            modality_type: store.add("modality_type", 3, d, Init::Normal(0.02), rng),
            blocks: (0..cfg.layers)
                .map(|l| BlockIds::new(store, &format!("block{l}"), d, cfg.heads, rng))
                .collect(),
            ln_out: LayerNormIds::new(store, "ln_out", d, rng),
        }
    }
}

/// Parameters plus layout; shared by the frozen encoder and its trainable
/// copies.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
    ids: EncoderIds,
}

impl EncoderModel {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(config.seed, &["encoder", "init"]));
        let mut params = ParamStore::new();
        let ids = EncoderIds::build(config, &mut params, &mut rng);
        Ok(EncoderModel {
            config: config.clone(),
            params,
            ids,
        })
    }

    pub fn freeze(self) -> FrozenEncoder {
        FrozenEncoder { model: self }
    }

    fn check_sample(&self, sample: &RawSample) -> Result<()> {
        let c = &self.config;
        let ok1 = sample.x_m1.as_ref().map_or(true, |x| x.len() == c.raw_tokens_m1 * c.input_dim_m1);
        let ok2 = sample.x_m2.as_ref().map_or(true, |x| x.len() == c.raw_tokens_m2 * c.input_dim_m2);
        if !ok1 || !ok2 {
            return Err(Error::Data(format!("sample {} has modality shapes the encoder does not accept", sample.id)));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, bind: &mut Binder, ids: &EmbedIds, x: &[f32], raw: usize, dim: usize) -> Var {
        let x = tape.constant(Mat::from_f32(raw, dim, x));
        let mix = bind.get(tape, ids.mix);
        let mixed = tape.matmul(mix, x);
        ids.proj.apply(tape, bind, mixed)
    }

    /// Token blocks entering the transformer, before position and type
    /// embeddings: embedded modality or its empty-token bank.
    pub(crate) fn fill_missing_graph(&self, tape: &mut Tape, bind: &mut Binder, sample: &RawSample) -> (Var, Var) {
        let c = &self.config;
        let t1 = match &sample.x_m1 {
            Some(x) => self.embed(tape, bind, &self.ids.embed_m1, x, c.raw_tokens_m1, c.input_dim_m1),
            None => bind.get(tape, self.ids.empty_m1),
        };
        let t2 = match &sample.x_m2 {
            Some(x) => self.embed(tape, bind, &self.ids.embed_m2, x, c.raw_tokens_m2, c.input_dim_m2),
            None => bind.get(tape, self.ids.empty_m2),
        };
        (t1, t2)
    }

    /// Full forward pass; returns the `(1 + l1 + l2) × d` output sequence.
    /// `prompts`, when given, holds one `P × d` block per layer that is
    /// prepended to that layer's input and dropped from its output.
    pub(crate) fn forward_graph(&self, tape: &mut Tape, bind: &mut Binder, sample: &RawSample, prompts: Option<&[Var]>) -> Var {
        let c = &self.config;
        let (t1, t2) = self.fill_missing_graph(tape, bind, sample);
        let cls = bind.get(tape, self.ids.cls);
        let x = tape.concat_rows(&[cls, t1, t2]);
        let pos = bind.get(tape, self.ids.pos);
        let mut x = tape.add(x, pos);
        let types = bind.get(tape, self.ids.modality_type);
        let mut type_rows = vec![0usize];
        type_rows.extend(std::iter::repeat(1).take(c.l1));
        type_rows.extend(std::iter::repeat(2).take(c.l2));
        let type_emb = tape.select_rows(types, &type_rows);
        x = tape.add(x, type_emb);

        let n = c.seq_len();
        for (l, block) in self.ids.blocks.iter().enumerate() {
            match prompts {
                Some(p) => {
                    let plen = tape.value(p[l]).rows;
                    let xp = tape.concat_rows(&[p[l], x]);
                    let y = block.apply(tape, bind, xp, None);
                    x = tape.slice_rows(y, plen, n);
                }
                None => x = block.apply(tape, bind, x, None),
            }
        }
        self.ids.ln_out.apply(tape, bind, x)
    }

    pub(crate) fn cls_graph(&self, tape: &mut Tape, bind: &mut Binder, sample: &RawSample, prompts: Option<&[Var]>) -> Var {
        let out = self.forward_graph(tape, bind, sample, prompts);
        tape.slice_rows(out, 0, 1)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: 0,
            config: toml::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig =
            toml::from_str(&ckpt.config).map_err(|e| Error::Data(format!("encoder config block: {e}")))?;
        let mut model = EncoderModel::init(&config)?;
        checkpoint::restore_into(&mut model.params, &ckpt.params)?;
        Ok(model)
    }
}

/// Encoder output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub id: u64,
    pub label: u32,
    pub pattern: Pattern,
    /// `l1 × d`
    pub h_m1: Mat,
    /// `l2 × d`
    pub h_m2: Mat,
    pub cls: Vec<f64>,
}

/// An encoder whose parameters can no longer change.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    model: EncoderModel,
}

impl FrozenEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.model.params
    }

    pub(crate) fn model(&self) -> &EncoderModel {
        &self.model
    }

    /// Trainable copy for full fine-tuning; `self` is untouched.
    pub fn thaw_copy(&self) -> EncoderModel {
        self.model.clone()
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.model.params.checksum()
    }

    pub fn empty_bank_m1(&self) -> &Mat {
        self.model.params.get(self.model.ids.empty_m1)
    }

    pub fn empty_bank_m2(&self) -> &Mat {
        self.model.params.get(self.model.ids.empty_m2)
    }

    /// Token blocks at the transformer input: embeddings of present
    /// modalities, empty-token banks for absent ones.
    pub fn fill_missing(&self, sample: &RawSample) -> Result<(Mat, Mat)> {
        self.model.check_sample(sample)?;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.model.params);
        let (a, b) = self.model.fill_missing_graph(&mut tape, &mut bind, sample);
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    pub fn extract_features(&self, sample: &RawSample) -> Result<FeatureBundle> {
        self.model.check_sample(sample)?;
        let c = &self.model.config;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.model.params);
        let out = self.model.forward_graph(&mut tape, &mut bind, sample, None);
        let out = tape.value(out);
        if !out.is_finite() {
            return Err(Error::Numeric {
                id: sample.id,
                reason: "encoder produced non-finite features".into(),
            });
        }
        let rows = |start: usize, n: usize| Mat::from_vec(n, c.d, out.data[start * c.d..(start + n) * c.d].to_vec());
        Ok(FeatureBundle {
            id: sample.id,
            label: sample.label,
            pattern: sample.pattern(),
            cls: out.row(0).to_vec(),
            h_m1: rows(1, c.l1),
            h_m2: rows(1 + c.l1, c.l2),
        })
    }

    /// Extracts every sample in parallel; output follows input order.
    pub fn extract_all(&self, samples: &[RawSample]) -> Result<Vec<FeatureBundle>> {
        samples.par_iter().map(|s| self.extract_features(s)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ENCODER_MAGIC, &self.model.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path, ENCODER_MAGIC)?;
        Ok(EncoderModel::from_checkpoint(&ckpt)?.freeze())
    }
}

/// Trains an encoder with a throwaway linear head on `pretext` labels for
/// `pretrain_steps` mini-batches, then freezes it.
///
/// `downstream` lists fingerprints of datasets the encoder will later serve;
/// a pretext dataset sharing any of them is rejected.
pub fn pretrain_encoder(config: &EncoderConfig, pretext: &Dataset, downstream: &[Fingerprint]) -> Result<FrozenEncoder> {
    config.validate()?;
    config.accepts(&pretext.config)?;
    if downstream.contains(&pretext.fingerprint) {
        return Err(Error::Leakage(format!(
            "pretext dataset {} is also a downstream dataset",
            pretext.fingerprint
        )));
    }
    if pretext.config.num_classes != config.pretrain_classes {
        return Err(Error::config(format!(
            "pretext has {} classes, encoder expects pretrain_classes={}",
            pretext.config.num_classes, config.pretrain_classes
        )));
    }
    let mut model = EncoderModel::init(config)?;
    if config.pretrain_steps == 0 {
        return Ok(model.freeze());
    }
    if pretext.is_empty() {
        return Err(Error::Precondition("pretext dataset is empty".into()));
    }
    let has_full = pretext.samples.iter().any(|s| s.pattern() == Pattern::Full);
    let has_missing = pretext.samples.iter().any(|s| s.pattern() != Pattern::Full);
    if !has_full || !has_missing {
        return Err(Error::Precondition(
            "pretext needs both full and missing-modality samples so the empty banks are trained".into(),
        ));
    }

    // throwaway head lives at the end of the same store and is dropped after
    let mut rng = Rng::new(derive_seed(config.seed, &["encoder", "pretrain-head"]));
    let n_encoder = model.params.len();
    let head = LinearIds::new(&mut model.params, "pretrain_head", config.d, config.pretrain_classes, &mut rng);

    let mut opt = Adam::new(&model.params, config.lr);
    let mut order_rng = Rng::new(derive_seed(config.seed, &["encoder", "order"]));
    let mut order: Vec<usize> = (0..pretext.len()).collect();
    let mut cursor = order.len();
    let batch_size = config.batch_size.max(1);
    for step in 0..config.pretrain_steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let model_ref = &model;
        let (loss, grads) = batch_gradient(&model.params, &batch, &|tape: &mut Tape, bind: &mut Binder, i| {
            let sample = &pretext.samples[i];
            let cls = model_ref.cls_graph(tape, bind, sample, None);
            let logits = head.apply(tape, bind, cls);
            Ok(tape.cross_entropy(logits, sample.label as usize))
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut model.params, &grads);
        if step % 250 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }

    let mut trimmed = ParamStore::new();
    for t in &model.params.tensors()[..n_encoder] {
        trimmed.insert(&t.name, t.value.clone());
    }
    model.params = trimmed;
    Ok(model.freeze())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, inject_missingness, MissingState, SplitSizes};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            l1: 3,
            l2: 2,
            layers: 1,
            heads: 2,
            pretrain_classes: 3,
            pretrain_steps: 0,
            raw_tokens_m1: 4,
            raw_tokens_m2: 4,
            input_dim_m1: 3,
            input_dim_m2: 3,
            ..EncoderConfig::default()
        }
    }

    fn world() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            latent_dim: 6,
            tokens_m1: 4,
            tokens_m2: 4,
            input_dim_m1: 3,
            input_dim_m2: 3,
            ..SynthConfig::default()
        }
    }

    fn data() -> Dataset {
        let (train, ..) = generate_dataset(
            &world(),
            SplitSizes {
                train: 12,
                val: 1,
                test: 1,
            },
            3,
        )
        .unwrap();
        inject_missingness(&train, MissingState::new(0.5, 0.25, 0.25), 1).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let enc = pretrain_encoder(&small_cfg(), &data(), &[]).unwrap();
        for s in &data().samples {
            let f = enc.extract_features(s).unwrap();
            assert_eq!(f.h_m1.shape(), (3, 8));
            assert_eq!(f.h_m2.shape(), (2, 8));
            assert_eq!(f.cls.len(), 8);
            assert_eq!(f.pattern, s.pattern());
        }
    }

    #[test]
    fn empty_banks_substitute_verbatim() {
        let enc = pretrain_encoder(&small_cfg(), &data(), &[]).unwrap();
        let ds = data();
        let m1 = ds.samples.iter().find(|s| s.pattern() == Pattern::M1Only).unwrap();
        let (_, t2) = enc.fill_missing(m1).unwrap();
        assert_eq!(&t2, enc.empty_bank_m2());

        let m2s: Vec<_> = ds.samples.iter().filter(|s| s.pattern() == Pattern::M2Only).collect();
        let (a1, a2) = enc.fill_missing(m2s[0]).unwrap();
        let (b1, b2) = enc.fill_missing(m2s[1]).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(&a1, enc.empty_bank_m1());
        assert_ne!(a2, b2);

        let full = ds.samples.iter().find(|s| s.pattern() == Pattern::Full).unwrap();
        let (f1, f2) = enc.fill_missing(full).unwrap();
        assert_ne!(&f1, enc.empty_bank_m1());
        assert_ne!(&f2, enc.empty_bank_m2());
    }

    #[test]
    fn leakage_and_class_mismatch_rejected() {
        let ds = data();
        assert!(matches!(pretrain_encoder(&small_cfg(), &ds, &[ds.fingerprint]), Err(Error::Leakage(_))));
        let cfg = EncoderConfig {
            pretrain_classes: 5,
            ..small_cfg()
        };
        assert!(matches!(pretrain_encoder(&cfg, &ds, &[]), Err(Error::Config(_))));
        let bad = EncoderConfig { heads: 3, ..small_cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_trims_head() {
        let cfg = EncoderConfig {
            pretrain_steps: 3,
            batch_size: 4,
            ..small_cfg()
        };
        let a = pretrain_encoder(&cfg, &data(), &[]).unwrap();
        let b = pretrain_encoder(&cfg, &data(), &[]).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params().id("pretrain_head.w").is_none());
        let init = EncoderModel::init(&cfg).unwrap().freeze();
        assert_ne!(a.checksum(), init.checksum());
        assert_ne!(a.empty_bank_m1(), init.empty_bank_m1());
    }

    #[test]
    fn extraction_does_not_mutate_parameters() {
        let enc = pretrain_encoder(&small_cfg(), &data(), &[]).unwrap();
        let before = enc.checksum();
        let ds = data();
        let first = enc.extract_features(&ds.samples[0]).unwrap();
        enc.extract_all(&ds.samples).unwrap();
        assert_eq!(enc.extract_features(&ds.samples[0]).unwrap(), first);
        assert_eq!(enc.checksum(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let cfg = EncoderConfig {
            pretrain_steps: 2,
            batch_size: 3,
            ..small_cfg()
        };
        let enc = pretrain_encoder(&cfg, &data(), &[]).unwrap();
        enc.save(&path).unwrap();
        let back = FrozenEncoder::load(&path).unwrap();
        assert_eq!(back.checksum(), enc.checksum());
        assert_eq!(back.config(), enc.config());
    }
}
