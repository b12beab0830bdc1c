//! Encoder, retrieval, heads and baselines wired together on small worlds.

mod common;

use std::sync::OnceLock;

use common::bundle;
use icl_borrow::baselines::{fta_train, ftc_train, map_train, BaselineConfig, BaselineKind};
use icl_borrow::encoder::{EncoderConfig, EncoderModel};
use icl_borrow::features::{FeatureCache, PooledBundle};
use icl_borrow::harness::{prepare, ExperimentConfig, Prepared};
use icl_borrow::icl::{self, IclConfig, IclHead, Variant};
use icl_borrow::metrics::{accuracy, Prediction};
use icl_borrow::retrieval::{RetrievalGroup, RetrievalIndex};
use icl_borrow::rng::Rng;
use icl_borrow::synth::{Fingerprint, MissingState, Pattern, RawSample, SplitSizes};

fn easy_world() -> &'static (ExperimentConfig, Prepared) {
    static CELL: OnceLock<(ExperimentConfig, Prepared)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.num_classes = 4;
        cfg.synth.complementarity = 0.0;
        cfg.synth.noise_std = 0.05;
        cfg.sizes = SplitSizes {
            train: 400,
            val: 100,
            test: 200,
        };
        cfg.missing = MissingState::new(1.0, 0.0, 0.0);
        cfg.pretext.size = 600;
        cfg.encoder.pretrain_steps = 500;
        let prepared = prepare(&cfg).unwrap();
        (cfg, prepared)
    })
}

fn acc(preds: &[Prediction], cache: &FeatureCache) -> f64 {
    let p: Vec<u32> = preds.iter().map(Prediction::argmax).collect();
    let t: Vec<u32> = cache.entries().iter().map(|b| b.label).collect();
    accuracy(&p, &t).unwrap()
}

fn baseline(kind: BaselineKind, k: usize) -> BaselineConfig {
    BaselineConfig {
        kind,
        num_classes: k,
        max_epochs: 30,
        lr: 3e-3,
        ..BaselineConfig::default()
    }
}

#[test]
fn pretrained_features_support_a_linear_probe() {
    let (cfg, p) = easy_world();
    let caches = p.caches(cfg.icl.t).unwrap();
    let probe = ftc_train(&caches.train, &caches.val, &baseline(BaselineKind::FtC, 4)).unwrap();
    let got = acc(&probe.predict_cache(&caches.test).unwrap(), &caches.test);
    let mut counts = [0usize; 4];
    caches.test.entries().iter().for_each(|b| counts[b.label as usize] += 1);
    let majority = *counts.iter().max().unwrap() as f64 / caches.test.len() as f64;
    assert!(got > majority + 0.2, "probe {got} vs majority {majority}");
}

#[test]
fn encoder_cls_reacts_to_a_single_input_token() {
    let enc = EncoderModel::init(&EncoderConfig::default()).unwrap().freeze();
    let c = enc.config().clone();
    let mut rng = Rng::new(3);
    let mut draw = |n: usize| (0..n).map(|_| rng.normal() as f32).collect::<Vec<_>>();
    let s = RawSample {
        id: 1,
        x_m1: Some(draw(c.raw_tokens_m1 * c.input_dim_m1)),
        x_m2: Some(draw(c.raw_tokens_m2 * c.input_dim_m2)),
        label: 0,
    };
    let base = enc.extract_features(&s).unwrap();
    for (m2, tok) in [(false, 0), (false, c.raw_tokens_m1 - 1), (true, 2)] {
        let mut t = s.clone();
        let x = if m2 { t.x_m2.as_mut() } else { t.x_m1.as_mut() }.unwrap();
        let w = if m2 { c.input_dim_m2 } else { c.input_dim_m1 };
        x[tok * w] += 0.5;
        let f = enc.extract_features(&t).unwrap();
        assert_ne!(f.cls, base.cls, "m2={m2} token {tok}");
    }
    assert_eq!(enc.extract_features(&s).unwrap(), base);
}

/// Two well-separated classes: cls and pooled tokens sit near ±μ. Ids start
/// at `seed·10⁴`.
fn separable(n: usize, t: usize, d: usize, seed: u64) -> FeatureCache {
    let mut rng = Rng::new(seed);
    let first = seed * 10_000;
    let mu: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let entries = (first..first + n as u64)
        .map(|i| {
            let y = (i % 2) as u32;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let mut b = bundle(i, y, t, d, &mut rng);
            b.pattern = Pattern::Full;
            for (j, v) in b.cls.iter_mut().enumerate() {
                *v = (sign * mu[j] + 0.2 * *v as f64) as f32;
            }
            for (j, v) in b.p.iter_mut().enumerate() {
                *v = (sign * mu[j % d] + 0.2 * *v as f64) as f32;
            }
            b
        })
        .collect();
    FeatureCache::new(d, t, Fingerprint::of(&[&seed.to_le_bytes()]), entries).unwrap()
}

fn small_head(variant: Variant) -> IclConfig {
    IclConfig {
        variant,
        q: 2,
        t: 2,
        d: 8,
        layers: 1,
        heads: 2,
        num_classes: 2,
        max_epochs: 20,
        lr: 3e-3,
        ..IclConfig::default()
    }
}

#[test]
fn ca_learns_a_separable_task() {
    let train = separable(200, 2, 8, 1);
    let val = separable(60, 2, 8, 2);
    let index = RetrievalIndex::build(&train, RetrievalGroup::FullOnly).unwrap();
    let head = icl::train(IclHead::init(&small_head(Variant::Ca)).unwrap(), &train, &val, &index).unwrap();
    let got = acc(&head.predict_cache(&train, &index).unwrap(), &train);
    assert!(got > 0.95, "train accuracy {got}");
    assert!(!head.curve.is_empty());
}

#[test]
fn linear_probe_learns_a_separable_task() {
    let train = separable(200, 2, 8, 3);
    let val = separable(60, 2, 8, 4);
    let probe = ftc_train(&train, &val, &baseline(BaselineKind::FtC, 2)).unwrap();
    let got = acc(&probe.predict_cache(&train).unwrap(), &train);
    assert!(got > 0.95, "train accuracy {got}");
}

#[test]
fn encoder_baselines_learn_an_easy_world() {
    let (cfg, p) = easy_world();
    let before = p.encoder.checksum();
    let fta = fta_train(&p.encoder, &p.train, &p.val, &baseline(BaselineKind::FtA, cfg.synth.num_classes)).unwrap();
    let map = map_train(&p.encoder, &p.train, &p.val, &baseline(BaselineKind::Map, cfg.synth.num_classes)).unwrap();
    assert_eq!(p.encoder.checksum(), before);
    let truth: Vec<u32> = p.test.samples.iter().map(|s| s.label).collect();
    let score = |preds: Vec<Prediction>| accuracy(&preds.iter().map(Prediction::argmax).collect::<Vec<_>>(), &truth).unwrap();
    let a = score(fta.predict_dataset(&p.test).unwrap());
    let m = score(map.predict_dataset(&p.encoder, &p.test).unwrap());
    assert!(a > 0.95, "FT-A {a}");
    assert!(m > 0.95, "MAP {m}");

    let caches = p.caches(cfg.icl.t).unwrap();
    let probe = ftc_train(&caches.train, &caches.val, &baseline(BaselineKind::FtC, cfg.synth.num_classes)).unwrap();
    let c = acc(&probe.predict_cache(&caches.test).unwrap(), &caches.test);
    assert!(a >= c, "FT-A {a} < FT-C {c} with the full training set");
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

#[test]
fn predictions_depend_on_the_retrieved_neighbors() {
    let cache = separable(40, 2, 8, 5);
    let index = RetrievalIndex::build(&cache, RetrievalGroup::All).unwrap();
    for v in Variant::ALL {
        let head = IclHead::init(&small_head(v)).unwrap();
        let cur = &cache.entries()[0];
        let near = index.query_bundle(cur, 2, true).unwrap();
        let mut far = near.clone();
        for (slot, other) in far.entries.iter_mut().zip(&cache.entries()[1..3]) {
            slot.bundle = other.clone();
        }
        let a = head.predict_with(cur, &near).unwrap();
        let b = head.predict_with(cur, &far).unwrap();
        assert!(tv(&a, &b) > 0.0, "{v:?}");
    }
}

#[test]
fn retrieval_group_restricts_candidates() {
    let mut rng = Rng::new(8);
    let entries: Vec<PooledBundle> = (0..50u64)
        .map(|i| {
            let mut b = bundle(i, 0, 0, 8, &mut rng);
            b.pattern = [Pattern::Full, Pattern::M1Only, Pattern::M2Only][i as usize % 3];
            b
        })
        .collect();
    let cache = FeatureCache::new(8, 0, Fingerprint::of(&[b"g"]), entries).unwrap();
    let full = RetrievalIndex::build(&cache, RetrievalGroup::FullOnly).unwrap();
    let miss = RetrievalIndex::build(&cache, RetrievalGroup::MissingOnly).unwrap();
    assert_eq!(full.len(), 17);
    assert_eq!(miss.len(), 33);
    for q in 0..20 {
        let cls: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let ids = full.query(&cls, 5, None).unwrap().ids();
        assert!(ids.iter().all(|id| id % 3 == 0), "query {q}: {ids:?}");
        let ids = miss.query(&cls, 5, None).unwrap().ids();
        assert!(ids.iter().all(|id| id % 3 != 0), "query {q}: {ids:?}");
    }
    let probe = &cache.entries()[3];
    assert!(!full.query_bundle(probe, 16, true).unwrap().ids().contains(&3));
    assert!(full.query_bundle(probe, 17, true).is_err());
}
