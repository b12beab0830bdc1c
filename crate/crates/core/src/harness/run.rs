use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use super::config::{ExperimentConfig, Method};
use crate::baselines::{fta_train, ftc_train, map_train, FineTuned, LinearProbe, MapModel};
use crate::binio::write_file;
use crate::encoder::{pretrain_encoder, FeatureBundle, FrozenEncoder};
use crate::error::{Error, Result};
use crate::features::{cache_fingerprint, cache_from_bundles, check_pooled_len, FeatureCache};
use crate::fit::{curve_records, CurvePoint};
use crate::icl::{train as icl_train, IclHead};
use crate::metrics::{evaluate_split, MetricsReport, Prediction};
use crate::retrieval::RetrievalIndex;
use crate::rng::derive_seed;
use crate::synth::{generate_dataset, inject_missingness, subsample, Dataset, Fingerprint, SplitSizes, SynthConfig};

pub const RECORD_HEADER: &str = "method\tr_sub\tmissing_state\tseed\tsubgroup\tmetric\tvalue";
pub const CURVE_HEADER: &str = "step\tsplit\tsubgroup\tmetric\tvalue";

/// Train, val and test splits of the downstream task, with missingness
/// injected.
pub fn downstream_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, val, test) = generate_dataset(&cfg.synth, cfg.sizes, derive_seed(cfg.master_seed, &["data"]))?;
    let inject = |ds: &Dataset| {
        inject_missingness(
            ds,
            cfg.missing,
            derive_seed(cfg.master_seed, &["missing", ds.split.name()]),
        )
    };
    Ok((inject(&train)?, inject(&val)?, inject(&test)?))
}

/// Pretext data for the encoder: the same modality maps, relabelled with
/// `pretrain_classes` classes and drawn from an independent seed.
pub fn pretext_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let synth = SynthConfig {
        num_classes: cfg.encoder.pretrain_classes,
        ..cfg.synth.clone()
    };
    let sizes = SplitSizes {
        train: cfg.pretext.size,
        val: 1,
        test: 1,
    };
    let (train, _, _) = generate_dataset(&synth, sizes, derive_seed(cfg.master_seed, &["pretext"]))?;
    inject_missingness(&train, cfg.pretext.missing, derive_seed(cfg.master_seed, &["pretext", "missing"]))
}

/// Everything shared by the cells of one experiment.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub encoder: FrozenEncoder,
    pub encoder_checksum: [u8; 32],
    bundles: [Vec<FeatureBundle>; 3],
}

pub struct SplitCaches {
    pub train: FeatureCache,
    pub val: FeatureCache,
    pub test: FeatureCache,
}

impl Prepared {
    pub fn new(train: Dataset, val: Dataset, test: Dataset, encoder: FrozenEncoder) -> Result<Self> {
        check_disjoint(&train.ids(), &test.ids(), "train", "test")?;
        check_disjoint(&train.ids(), &val.ids(), "train", "validation")?;
        check_disjoint(&val.ids(), &test.ids(), "validation", "test")?;
        let bundles = [
            encoder.extract_all(&train.samples)?,
            encoder.extract_all(&val.samples)?,
            encoder.extract_all(&test.samples)?,
        ];
        Ok(Prepared {
            encoder_checksum: encoder.checksum(),
            train,
            val,
            test,
            encoder,
            bundles,
        })
    }

    /// Feature caches of all three splits pooled to `t` tokens.
    pub fn caches(&self, t: usize) -> Result<SplitCaches> {
        let cfg = self.encoder.config();
        check_pooled_len(t, cfg.l1, cfg.l2)?;
        let build = |ds: &Dataset, b: &[FeatureBundle]| {
            cache_from_bundles(b, t, cache_fingerprint(&ds.fingerprint, &self.encoder_checksum))
        };
        Ok(SplitCaches {
            train: build(&self.train, &self.bundles[0])?,
            val: build(&self.val, &self.bundles[1])?,
            test: build(&self.test, &self.bundles[2])?,
        })
    }
}

/// Generates the data and pretrains the encoder.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, val, test) = downstream_datasets(cfg)?;
    let pretext = pretext_dataset(cfg)?;
    info!("pretraining encoder on {} pretext samples", pretext.len());
    let encoder = pretrain_encoder(
        &cfg.encoder_config(),
        &pretext,
        &[train.fingerprint, val.fingerprint, test.fingerprint],
    )?;
    Prepared::new(train, val, test, encoder)
}

pub fn check_disjoint(a: &[u64], b: &[u64], name_a: &str, name_b: &str) -> Result<()> {
    let set: HashSet<u64> = a.iter().copied().collect();
    match b.iter().find(|id| set.contains(id)) {
        Some(id) => Err(Error::Leakage(format!("sample {id} appears in both {name_a} and {name_b}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellKey {
    pub method: Method,
    pub r_sub: f64,
    pub replicate: u64,
}

impl CellKey {
    /// File stem such as `ICL-CA_r0.05_s3`.
    pub fn stem(&self) -> String {
        format!("{}_r{}_s{}", self.method.name(), self.r_sub, self.replicate)
    }

    /// Seeds model initialisation and batch order.
    pub fn train_seed(&self, master: u64) -> u64 {
        derive_seed(
            master,
            &["cell", self.method.name(), &self.r_sub.to_string(), &self.replicate.to_string()],
        )
    }

    /// Seeds the training subsample; shared by every method of a
    /// (r_sub, replicate) pair so that methods see the same data.
    pub fn subsample_seed(&self, master: u64) -> u64 {
        derive_seed(master, &["subsample", &self.r_sub.to_string(), &self.replicate.to_string()])
    }

    fn order(&self, other: &Self) -> std::cmp::Ordering {
        self.method
            .cmp(&other.method)
            .then(self.r_sub.total_cmp(&other.r_sub))
            .then(self.replicate.cmp(&other.replicate))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub samples: usize,
    pub mean_us: f64,
    pub std_us: f64,
}

impl Timing {
    fn from_micros(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Timing {
            samples: xs.len(),
            mean_us: mean,
            std_us: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub report: MetricsReport,
    pub curve: Vec<CurvePoint>,
    pub num_parameters: usize,
    pub timing: Option<Timing>,
    pub trace: Option<String>,
}

#[derive(Clone, Debug)]
pub enum CellResult {
    Done(Box<CellRun>),
    Skipped(String),
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub key: CellKey,
    pub result: CellResult,
}

impl CellOutcome {
    pub fn run(&self) -> Option<&CellRun> {
        match &self.result {
            CellResult::Done(r) => Some(r),
            CellResult::Skipped(_) => None,
        }
    }
}

fn time_each<F: FnMut(usize) -> Result<()>>(n: usize, mut f: F) -> Result<Option<Timing>> {
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        let start = Instant::now();
        f(i)?;
        xs.push(start.elapsed().as_secs_f64() * 1e6);
    }
    Ok(Timing::from_micros(&xs))
}

/// Training data of one cell.
pub struct CellData {
    pub train: Dataset,
    pub train_cache: FeatureCache,
    /// Present for ICL methods.
    pub index: Option<RetrievalIndex>,
}

/// Subsamples the training split for `key` and, for ICL methods, builds the
/// retrieval index. `Ok(Err(reason))` means the cell cannot run.
pub fn cell_data(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    caches: &SplitCaches,
    key: CellKey,
) -> Result<std::result::Result<CellData, String>> {
    let train = subsample(&prepared.train, key.r_sub, key.subsample_seed(cfg.master_seed))?;
    check_disjoint(&train.ids(), &prepared.test.ids(), "the training subset", "test")?;
    check_disjoint(&train.ids(), &prepared.val.ids(), "the training subset", "validation")?;
    for (cache, ds) in [
        (&caches.train, &prepared.train),
        (&caches.val, &prepared.val),
        (&caches.test, &prepared.test),
    ] {
        if cache.fingerprint != cache_fingerprint(&ds.fingerprint, &prepared.encoder_checksum) {
            return Err(Error::Fingerprint(format!(
                "{} cache was built from other data or another encoder",
                ds.split.name()
            )));
        }
    }
    let train_cache = caches.train.subset(
        &train.ids(),
        cache_fingerprint(&train.fingerprint, &prepared.encoder_checksum),
    )?;
    let index = match key.method.variant() {
        Some(_) => {
            let index = RetrievalIndex::build(&train_cache, cfg.retrieval_group)?;
            check_disjoint(&index.ids(), &prepared.test.ids(), "the retrieval index", "test")?;
            let need = cfg.icl.q + usize::from(cfg.icl.exclude_self);
            if index.len() < need {
                return Ok(Err(format!(
                    "{} holds {} rows, Q={} needs {need}",
                    cfg.retrieval_group.label(),
                    index.len(),
                    cfg.icl.q
                )));
            }
            Some(index)
        }
        None => None,
    };
    Ok(Ok(CellData {
        train,
        train_cache,
        index,
    }))
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Icl(IclHead),
    FtC(LinearProbe),
    FtA(FineTuned),
    Map(MapModel),
}

impl TrainedModel {
    pub fn method(&self) -> Method {
        match self {
            TrainedModel::Icl(h) => Method::from_variant(h.variant()),
            TrainedModel::FtC(_) => Method::FtC,
            TrainedModel::FtA(_) => Method::FtA,
            TrainedModel::Map(_) => Method::Map,
        }
    }

    pub fn curve(&self) -> &[CurvePoint] {
        match self {
            TrainedModel::Icl(h) => &h.curve,
            TrainedModel::FtC(m) => &m.curve,
            TrainedModel::FtA(m) => &m.curve,
            TrainedModel::Map(m) => &m.curve,
        }
    }

    pub fn num_parameters(&self) -> usize {
        match self {
            TrainedModel::Icl(h) => h.num_parameters(),
            TrainedModel::FtC(m) => m.num_parameters(),
            TrainedModel::FtA(m) => m.num_parameters(),
            TrainedModel::Map(m) => m.num_parameters(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::Icl(h) => h.save(path),
            TrainedModel::FtC(m) => m.save(path),
            TrainedModel::FtA(m) => m.save(path),
            TrainedModel::Map(m) => m.save(path),
        }
    }

    /// Loads a checkpoint of `method`; MAP checkpoints are checked against
    /// `encoder`.
    pub fn load(path: &Path, method: Method, encoder: &FrozenEncoder) -> Result<Self> {
        Ok(match method {
            Method::FtC => TrainedModel::FtC(LinearProbe::load(path)?),
            Method::FtA => TrainedModel::FtA(FineTuned::load(path)?),
            Method::Map => TrainedModel::Map(MapModel::load(path, encoder)?),
            icl => {
                let head = IclHead::load(path)?;
                if Some(head.variant()) != icl.variant() {
                    return Err(Error::config(format!(
                        "{} holds an {} head, not {}",
                        path.display(),
                        Method::from_variant(head.variant()).name(),
                        icl.name()
                    )));
                }
                TrainedModel::Icl(head)
            }
        })
    }
}

pub fn train_model(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    caches: &SplitCaches,
    data: &CellData,
    key: CellKey,
) -> Result<TrainedModel> {
    let seed = key.train_seed(cfg.master_seed);
    let model = match (key.method.variant(), key.method.baseline_kind()) {
        (Some(variant), _) => {
            let index = data
                .index
                .as_ref()
                .ok_or_else(|| Error::Precondition("ICL training needs a retrieval index".into()))?;
            let head = IclHead::init(&cfg.icl_for(variant, seed))?;
            TrainedModel::Icl(icl_train(head, &data.train_cache, &caches.val, index)?)
        }
        (None, Some(kind)) => {
            let bcfg = cfg.baseline_for(kind, seed);
            match key.method {
                Method::FtC => TrainedModel::FtC(ftc_train(&data.train_cache, &caches.val, &bcfg)?),
                Method::FtA => TrainedModel::FtA(fta_train(&prepared.encoder, &data.train, &prepared.val, &bcfg)?),
                _ => TrainedModel::Map(map_train(&prepared.encoder, &data.train, &prepared.val, &bcfg)?),
            }
        }
        (None, None) => unreachable!("every method is an ICL head or a baseline"),
    };
    if prepared.encoder.checksum() != prepared.encoder_checksum {
        return Err(Error::Fingerprint(format!("encoder parameters changed during cell {}", key.stem())));
    }
    Ok(model)
}

/// Test-set predictions, metrics, timing and (optionally) the retrieval trace.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    caches: &SplitCaches,
    data: &CellData,
    model: &TrainedModel,
    key: CellKey,
) -> Result<CellRun> {
    let n_time = cfg.timing_samples.min(prepared.test.len());
    let test_cache = caches.test.entries();
    let test = &prepared.test.samples;
    let enc = &prepared.encoder;
    let mut trace = None;
    let (predictions, timing): (Vec<Prediction>, _) = match model {
        TrainedModel::Icl(head) => {
            let index = data
                .index
                .as_ref()
                .ok_or_else(|| Error::Precondition("ICL evaluation needs a retrieval index".into()))?;
            if cfg.trace_retrieval {
                let mut out = String::new();
                for b in test_cache {
                    out.push_str(&index.query_bundle(b, head.config.q, false)?.trace(b.id));
                }
                trace = Some(out);
            }
            (
                head.predict_cache(&caches.test, index)?,
                time_each(n_time, |i| head.predict(&test_cache[i], index).map(drop))?,
            )
        }
        TrainedModel::FtC(m) => (
            m.predict_cache(&caches.test)?,
            time_each(n_time, |i| m.predict(&test_cache[i]).map(drop))?,
        ),
        TrainedModel::FtA(m) => (
            m.predict_dataset(&prepared.test)?,
            time_each(n_time, |i| m.predict(&test[i]).map(drop))?,
        ),
        TrainedModel::Map(m) => (
            m.predict_dataset(enc, &prepared.test)?,
            time_each(n_time, |i| m.predict(enc, &test[i]).map(drop))?,
        ),
    };
    let mut report = evaluate_split(&predictions, &caches.test.metas(), cfg.synth.num_classes)?;
    report.method = key.method.name().to_string();
    report.r_sub = key.r_sub;
    report.missing_state = cfg.missing.label();
    report.seed = key.replicate;
    Ok(CellRun {
        report,
        curve: model.curve().to_vec(),
        num_parameters: model.num_parameters(),
        timing,
        trace,
    })
}

/// Trains and evaluates one (method, r_sub, replicate) cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    caches: &SplitCaches,
    key: CellKey,
    checkpoint_dir: Option<&Path>,
) -> Result<CellResult> {
    let data = match cell_data(cfg, prepared, caches, key)? {
        Ok(d) => d,
        Err(reason) => return Ok(CellResult::Skipped(reason)),
    };
    let model = train_model(cfg, prepared, caches, &data, key)?;
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join(format!("{}.ckpt", key.stem())))?;
    }
    Ok(CellResult::Done(Box::new(evaluate_model(cfg, prepared, caches, &data, &model, key)?)))
}

/// The cell grid in canonical order.
pub fn cell_keys(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for &method in &cfg.methods {
        for &r_sub in &cfg.r_sub {
            for &replicate in &cfg.seeds {
                keys.push(CellKey {
                    method,
                    r_sub,
                    replicate,
                });
            }
        }
    }
    keys.sort_by(|a, b| a.order(b));
    keys.dedup_by(|a, b| a.order(b).is_eq());
    keys
}

/// Runs every cell of `cfg` on already prepared data. With `out`, per-cell
/// files are written as cells finish and merged tables at the end.
pub fn run_cells(cfg: &ExperimentConfig, prepared: &Prepared, out: Option<&Path>) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    if prepared.train.config != cfg.synth {
        return Err(Error::Fingerprint("prepared data comes from another synthetic world".into()));
    }
    let caches = prepared.caches(cfg.icl.t)?;
    let ckpt_dir = out.filter(|_| cfg.save_checkpoints).map(|d| d.join("checkpoints"));
    let mut outcomes = Vec::new();
    for key in cell_keys(cfg) {
        info!("cell {}", key.stem());
        let result = match run_cell(cfg, prepared, &caches, key, ckpt_dir.as_deref()) {
            Ok(r) => r,
            Err(e @ Error::Capacity { .. }) => CellResult::Skipped(e.to_string()),
            Err(e) => return Err(e),
        };
        if let CellResult::Skipped(reason) = &result {
            warn!("skipping cell {}: {reason}", key.stem());
        }
        let outcome = CellOutcome { key, result };
        if let Some(dir) = out {
            write_cell(dir, &outcome)?;
        }
        outcomes.push(outcome);
    }
    if let Some(dir) = out {
        write_merged(dir, cfg, prepared, &outcomes)?;
    }
    Ok(outcomes)
}

/// Full pipeline into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    let out = output_dir(cfg)?;
    let prepared = prepare(cfg)?;
    run_cells(cfg, &prepared, Some(&out))
}

pub fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| Error::config("out_dir is not set (use --out or out_dir in the config)"))
}

fn write_cell(dir: &Path, outcome: &CellOutcome) -> Result<()> {
    let Some(run) = outcome.run() else { return Ok(()) };
    let stem = outcome.key.stem();
    write_file(
        &dir.join("cells").join(format!("{stem}.tsv")),
        format!("{RECORD_HEADER}\n{}", run.report.to_records()).as_bytes(),
    )?;
    write_file(
        &dir.join("curves").join(format!("{stem}.tsv")),
        format!("{CURVE_HEADER}\n{}", curve_records(&run.curve)).as_bytes(),
    )?;
    if let Some(trace) = &run.trace {
        write_file(&dir.join("trace").join(format!("{stem}.tsv")), trace.as_bytes())?;
    }
    Ok(())
}

fn write_merged(dir: &Path, cfg: &ExperimentConfig, prepared: &Prepared, outcomes: &[CellOutcome]) -> Result<()> {
    let mut sorted: Vec<&CellOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.key.order(&b.key));

    let mut results = format!("{RECORD_HEADER}\n");
    let mut skipped = String::from("method\tr_sub\tseed\treason\n");
    let mut timing = String::from("method\tr_sub\tseed\tsamples\tmean_us\tstd_us\n");
    let mut params: BTreeMap<Method, usize> = BTreeMap::new();
    for o in &sorted {
        let k = &o.key;
        match &o.result {
            CellResult::Done(run) => {
                results.push_str(&run.report.to_records());
                params.entry(k.method).or_insert(run.num_parameters);
                if let Some(t) = run.timing {
                    let _ = writeln!(
                        timing,
                        "{}\t{}\t{}\t{}\t{:.3}\t{:.3}",
                        k.method.name(),
                        k.r_sub,
                        k.replicate,
                        t.samples,
                        t.mean_us,
                        t.std_us
                    );
                }
            }
            CellResult::Skipped(reason) => {
                let _ = writeln!(skipped, "{}\t{}\t{}\t{reason}", k.method.name(), k.r_sub, k.replicate);
            }
        }
    }
    let mut param_table = String::from("method\ttrainable_parameters\n");
    for m in &cfg.methods {
        let v = params.get(m).map_or_else(|| "NA".to_string(), |n| n.to_string());
        let _ = writeln!(param_table, "{}\t{v}", m.name());
    }
    let manifest = format!(
        "key\tvalue\nconfig\t{}\ntrain\t{}\nval\t{}\ntest\t{}\nencoder\t{}\n",
        cfg.fingerprint(),
        prepared.train.fingerprint,
        prepared.val.fingerprint,
        prepared.test.fingerprint,
        Fingerprint(prepared.encoder_checksum),
    );

    write_file(&dir.join("results.tsv"), results.as_bytes())?;
    write_file(&dir.join("skipped.tsv"), skipped.as_bytes())?;
    write_file(&dir.join("params.tsv"), param_table.as_bytes())?;
    write_file(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&dir.join("timing.tsv"), timing.as_bytes())
}
