//! Comparison methods: a linear probe on cached cls features (FT-C), full
//! fine-tuning of an encoder copy (FT-A), and missing-aware prompts
//! (MAP-lite): per-pattern banks of `P` prompt tokens per encoder layer,
//! prepended to that layer's input, with the encoder itself frozen.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_vec, Mat, Tape, Var};
use crate::checkpoint::{self, Checkpoint, BASELINE_MAGIC};
use crate::encoder::{EncoderConfig, EncoderModel, FrozenEncoder};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, PooledBundle};
use crate::fit::{fit, CurvePoint, FitSettings, ValScores};
use crate::metrics::{Prediction, SampleMeta};
use crate::nn::{Binder, Init, LinearIds, ParamId, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::synth::{Dataset, Pattern, RawSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "FT_C")]
    FtC,
    #[serde(rename = "FT_A")]
    FtA,
    #[serde(rename = "MAP")]
    Map,
}

impl BaselineKind {
    pub fn code(self) -> u8 {
        match self {
            BaselineKind::FtC => 0,
            BaselineKind::FtA => 1,
            BaselineKind::Map => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [BaselineKind::FtC, BaselineKind::FtA, BaselineKind::Map]
            .into_iter()
            .find(|k| k.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FtC => "FT-C",
            BaselineKind::FtA => "FT-A",
            BaselineKind::Map => "MAP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub prompt_length: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let fit = FitSettings::default();
        BaselineConfig {
            kind: BaselineKind::FtC,
            prompt_length: 4,
            num_classes: 2,
            lr: fit.lr,
            batch_size: fit.batch_size,
            max_epochs: fit.max_epochs,
            patience: fit.patience,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == BaselineKind::Map && self.prompt_length == 0 {
            return Err(Error::config("prompt_length must be at least 1 for MAP"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    fn expect(&self, kind: BaselineKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::config(format!(
                "config kind is {}, expected {}",
                self.kind.name(),
                kind.name()
            )));
        }
        Ok(())
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: derive_seed(self.seed, &["baseline", "fit", self.kind.name()]),
        }
    }

    fn init_rng(&self) -> Rng {
        Rng::new(derive_seed(self.seed, &["baseline", "init", self.kind.name()]))
    }
}

/// Header carried in a baseline checkpoint's config block.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    baseline: BaselineConfig,
    d: usize,
    encoder: Option<EncoderConfig>,
    encoder_checksum: Option<String>,
}

fn save_baseline(path: &Path, meta: &Meta, params: &ParamStore) -> Result<()> {
    let ckpt = Checkpoint {
        tag: meta.baseline.kind.code(),
        config: toml::to_string(meta).expect("meta serializes"),
        params: params.clone(),
    };
    checkpoint::save(path, BASELINE_MAGIC, &ckpt)
}

fn load_baseline(path: &Path, kind: BaselineKind) -> Result<(Meta, ParamStore)> {
    let ckpt = checkpoint::load(path, BASELINE_MAGIC)?;
    let meta: Meta = toml::from_str(&ckpt.config).map_err(|e| Error::Data(format!("baseline config block: {e}")))?;
    if BaselineKind::from_code(ckpt.tag) != Some(meta.baseline.kind) || meta.baseline.kind != kind {
        return Err(Error::Data(format!(
            "checkpoint holds {:?} (tag {}), expected {}",
            meta.baseline.kind,
            ckpt.tag,
            kind.name()
        )));
    }
    Ok((meta, ckpt.params))
}

fn check_label(label: u32, k: usize) -> Result<usize> {
    if label as usize >= k {
        return Err(Error::Data(format!("label {label} out of range for {k} classes")));
    }
    Ok(label as usize)
}

fn probs(logits: &Mat, id: u64) -> Result<Vec<f64>> {
    if !logits.is_finite() {
        return Err(Error::Numeric {
            id,
            reason: "non-finite logits".into(),
        });
    }
    Ok(softmax_vec(&logits.data))
}

fn metas_of(ds: &Dataset) -> Vec<SampleMeta> {
    ds.samples
        .iter()
        .map(|s| SampleMeta {
            id: s.id,
            label: s.label,
            pattern: s.pattern(),
        })
        .collect()
}

// ---------------------------------------------------------------- FT-C

/// Affine classifier on frozen cls features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub config: BaselineConfig,
    pub d: usize,
    pub params: ParamStore,
    classifier: LinearIds,
    pub curve: Vec<CurvePoint>,
}

impl LinearProbe {
    pub fn init(config: &BaselineConfig, d: usize) -> Result<Self> {
        config.expect(BaselineKind::FtC)?;
        let mut params = ParamStore::new();
        let classifier = LinearIds::new(&mut params, "classifier", d, config.num_classes, &mut config.init_rng());
        Ok(LinearProbe {
            config: config.clone(),
            d,
            params,
            classifier,
            curve: Vec::new(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn logits_graph(&self, tape: &mut Tape, bind: &mut Binder, b: &PooledBundle) -> Var {
        let x = tape.constant(Mat::from_f32(1, self.d, &b.cls));
        self.classifier.apply(tape, bind, x)
    }

    fn check(&self, b: &PooledBundle) -> Result<()> {
        if b.dim != self.d {
            return Err(Error::config(format!("bundle {} has d={}, probe expects {}", b.id, b.dim, self.d)));
        }
        Ok(())
    }

    pub fn predict(&self, b: &PooledBundle) -> Result<Vec<f64>> {
        self.check(b)?;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let l = self.logits_graph(&mut tape, &mut bind, b);
        probs(tape.value(l), b.id)
    }

    pub fn predict_cache(&self, cache: &FeatureCache) -> Result<Vec<Prediction>> {
        cache
            .entries()
            .par_iter()
            .map(|b| Ok(Prediction { id: b.id, probs: self.predict(b)? }))
            .collect()
    }

    fn meta(&self) -> Meta {
        Meta {
            baseline: self.config.clone(),
            d: self.d,
            encoder: None,
            encoder_checksum: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_baseline(path, &self.meta(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_baseline(path, BaselineKind::FtC)?;
        let mut probe = LinearProbe::init(&meta.baseline, meta.d)?;
        checkpoint::restore_into(&mut probe.params, &params)?;
        Ok(probe)
    }
}

pub fn ftc_train(train: &FeatureCache, val: &FeatureCache, config: &BaselineConfig) -> Result<LinearProbe> {
    let mut probe = LinearProbe::init(config, train.dim)?;
    if val.dim != train.dim {
        return Err(Error::config("train and validation caches differ in d"));
    }
    let entries = train.entries();
    for b in entries {
        check_label(b.label, config.num_classes)?;
    }
    let val_metas = val.metas();
    let mut store = probe.params.clone();
    let curve = {
        let shadow = &probe;
        fit(
            &mut store,
            entries.len(),
            &config.fit_settings(),
            |tape, bind, i, _| {
                let l = shadow.logits_graph(tape, bind, &entries[i]);
                Ok(tape.cross_entropy(l, entries[i].label as usize))
            },
            |params| {
                let probe = LinearProbe {
                    params: params.clone(),
                    ..shadow.clone()
                };
                ValScores::from_predictions(&probe.predict_cache(val)?, &val_metas, config.num_classes)
            },
        )?
    };
    probe.params = store;
    probe.curve = curve;
    Ok(probe)
}

// ---------------------------------------------------------------- FT-A

/// Encoder copy plus classifier, trained end to end. The classifier tensors
/// sit after the encoder's tensors in one store.
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub config: BaselineConfig,
    model: EncoderModel,
    classifier: LinearIds,
    n_encoder: usize,
    pub curve: Vec<CurvePoint>,
}

impl FineTuned {
    pub fn init(config: &BaselineConfig, encoder: &FrozenEncoder) -> Result<Self> {
        config.expect(BaselineKind::FtA)?;
        Ok(Self::wrap(config, encoder.thaw_copy()))
    }

    fn wrap(config: &BaselineConfig, mut model: EncoderModel) -> Self {
        let n_encoder = model.params.len();
        let d = model.config.d;
        let classifier = LinearIds::new(&mut model.params, "classifier", d, config.num_classes, &mut config.init_rng());
        FineTuned {
            config: config.clone(),
            model,
            classifier,
            n_encoder,
            curve: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.model.params
    }

    /// Encoder scalars plus classifier scalars.
    pub fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// Checksum of the fine-tuned encoder tensors only.
    pub fn encoder_checksum(&self) -> [u8; 32] {
        let mut enc = ParamStore::new();
        for t in &self.model.params.tensors()[..self.n_encoder] {
            enc.insert(&t.name, t.value.clone());
        }
        enc.checksum()
    }

    fn logits_graph(&self, tape: &mut Tape, bind: &mut Binder, s: &RawSample) -> Var {
        let cls = self.model.cls_graph(tape, bind, s, None);
        self.classifier.apply(tape, bind, cls)
    }

    pub fn predict(&self, s: &RawSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.model.params);
        let l = self.logits_graph(&mut tape, &mut bind, s);
        probs(tape.value(l), s.id)
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Prediction>> {
        ds.samples
            .par_iter()
            .map(|s| Ok(Prediction { id: s.id, probs: self.predict(s)? }))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            baseline: self.config.clone(),
            d: self.model.config.d,
            encoder: Some(self.model.config.clone()),
            encoder_checksum: None,
        };
        save_baseline(path, &meta, &self.model.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_baseline(path, BaselineKind::FtA)?;
        let enc = meta
            .encoder
            .ok_or_else(|| Error::Data("FT-A checkpoint lacks its encoder config".into()))?;
        let mut ft = Self::wrap(&meta.baseline, EncoderModel::init(&enc)?);
        checkpoint::restore_into(&mut ft.model.params, &params)?;
        Ok(ft)
    }
}

pub fn fta_train(encoder: &FrozenEncoder, train: &Dataset, val: &Dataset, config: &BaselineConfig) -> Result<FineTuned> {
    let mut ft = FineTuned::init(config, encoder)?;
    encoder.config().accepts(&train.config)?;
    for s in &train.samples {
        check_label(s.label, config.num_classes)?;
    }
    let val_metas = metas_of(val);
    let mut store = ft.model.params.clone();
    let curve = {
        let shadow = &ft;
        fit(
            &mut store,
            train.len(),
            &config.fit_settings(),
            |tape, bind, i, _| {
                let s = &train.samples[i];
                let l = shadow.logits_graph(tape, bind, s);
                Ok(tape.cross_entropy(l, s.label as usize))
            },
            |params| {
                let mut probe = shadow.clone();
                probe.model.params = params.clone();
                ValScores::from_predictions(&probe.predict_dataset(val)?, &val_metas, config.num_classes)
            },
        )?
    };
    ft.model.params = store;
    ft.curve = curve;
    Ok(ft)
}

// ---------------------------------------------------------------- MAP-lite

/// Prompt banks indexed by missingness pattern, one `P × d` tensor per
/// encoder layer, plus a classifier on the output cls token.
#[derive(Clone, Debug)]
pub struct MapModel {
    pub config: BaselineConfig,
    pub d: usize,
    pub layers: usize,
    pub params: ParamStore,
    banks: [Vec<ParamId>; 3],
    classifier: LinearIds,
    encoder_checksum: [u8; 32],
    pub curve: Vec<CurvePoint>,
}

fn bank_index(p: Pattern) -> usize {
    match p {
        Pattern::Full => 0,
        Pattern::M1Only => 1,
        Pattern::M2Only => 2,
    }
}

impl MapModel {
    pub fn init(config: &BaselineConfig, encoder: &FrozenEncoder) -> Result<Self> {
        config.expect(BaselineKind::Map)?;
        let (d, layers) = (encoder.config().d, encoder.config().layers);
        let mut rng = config.init_rng();
        let mut params = ParamStore::new();
        let banks = [Pattern::Full, Pattern::M1Only, Pattern::M2Only].map(|p| {
            (0..layers)
                .map(|l| {
                    let name = format!("prompt.{}.layer{l}", pattern_name(p));
                    params.add(&name, config.prompt_length, d, Init::Normal(0.02), &mut rng)
                })
                .collect::<Vec<_>>()
        });
        let classifier = LinearIds::new(&mut params, "classifier", d, config.num_classes, &mut rng);
        Ok(MapModel {
            config: config.clone(),
            d,
            layers,
            params,
            banks,
            classifier,
            encoder_checksum: encoder.checksum(),
            curve: Vec::new(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Ids of the prompt tensors used for `pattern`, one per layer.
    pub fn bank(&self, pattern: Pattern) -> &[ParamId] {
        &self.banks[bank_index(pattern)]
    }

    fn check_encoder(&self, encoder: &FrozenEncoder) -> Result<()> {
        if encoder.checksum() != self.encoder_checksum {
            return Err(Error::Fingerprint("MAP prompts were trained against a different encoder".into()));
        }
        Ok(())
    }

    fn logits_graph(&self, tape: &mut Tape, bind: &mut Binder, encoder: &FrozenEncoder, s: &RawSample) -> Var {
        let prompts: Vec<Var> = self.bank(s.pattern()).iter().map(|&id| bind.get(tape, id)).collect();
        let mut enc_bind = Binder::frozen(encoder.params());
        let cls = encoder.model().cls_graph(tape, &mut enc_bind, s, Some(&prompts));
        self.classifier.apply(tape, bind, cls)
    }

    /// Loss and gradients (indexed like `self.params`) for one sample.
    pub fn sample_loss_and_grad(&self, encoder: &FrozenEncoder, s: &RawSample) -> Result<(f64, Vec<Option<Mat>>)> {
        self.check_encoder(encoder)?;
        let label = check_label(s.label, self.config.num_classes)?;
        let mut tape = Tape::new();
        let mut bind = Binder::trainable(&self.params);
        let l = self.logits_graph(&mut tape, &mut bind, encoder, s);
        let loss = tape.cross_entropy(l, label);
        Ok((tape.scalar(loss), tape.backward(loss, self.params.len())))
    }

    pub fn predict(&self, encoder: &FrozenEncoder, s: &RawSample) -> Result<Vec<f64>> {
        self.check_encoder(encoder)?;
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let l = self.logits_graph(&mut tape, &mut bind, encoder, s);
        probs(tape.value(l), s.id)
    }

    pub fn predict_dataset(&self, encoder: &FrozenEncoder, ds: &Dataset) -> Result<Vec<Prediction>> {
        ds.samples
            .par_iter()
            .map(|s| Ok(Prediction { id: s.id, probs: self.predict(encoder, s)? }))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            baseline: self.config.clone(),
            d: self.d,
            encoder: None,
            encoder_checksum: Some(hex::encode(self.encoder_checksum)),
        };
        save_baseline(path, &meta, &self.params)
    }

    /// Loads prompts trained against `encoder`; a different encoder is a
    /// fingerprint error.
    pub fn load(path: &Path, encoder: &FrozenEncoder) -> Result<Self> {
        let (meta, params) = load_baseline(path, BaselineKind::Map)?;
        if meta.encoder_checksum.as_deref() != Some(hex::encode(encoder.checksum()).as_str()) {
            return Err(Error::Fingerprint("MAP checkpoint was trained against a different encoder".into()));
        }
        let mut m = MapModel::init(&meta.baseline, encoder)?;
        checkpoint::restore_into(&mut m.params, &params)?;
        Ok(m)
    }
}

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::Full => "full",
        Pattern::M1Only => "m1",
        Pattern::M2Only => "m2",
    }
}

pub fn map_train(encoder: &FrozenEncoder, train: &Dataset, val: &Dataset, config: &BaselineConfig) -> Result<MapModel> {
    let mut map = MapModel::init(config, encoder)?;
    encoder.config().accepts(&train.config)?;
    for s in &train.samples {
        check_label(s.label, config.num_classes)?;
    }
    let val_metas = metas_of(val);
    let mut store = map.params.clone();
    let curve = {
        let shadow = &map;
        fit(
            &mut store,
            train.len(),
            &config.fit_settings(),
            |tape, bind, i, _| {
                let s = &train.samples[i];
                let l = shadow.logits_graph(tape, bind, encoder, s);
                Ok(tape.cross_entropy(l, s.label as usize))
            },
            |params| {
                let probe = MapModel {
                    params: params.clone(),
                    ..shadow.clone()
                };
                ValScores::from_predictions(&probe.predict_dataset(encoder, val)?, &val_metas, config.num_classes)
            },
        )?
    };
    map.params = store;
    map.curve = curve;
    Ok(map)
}
