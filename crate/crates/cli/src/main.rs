use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use icl_borrow::binio::write_file;
use icl_borrow::dataset_io::{load_dataset, load_meta, save_dataset, take_split};
use icl_borrow::encoder::{pretrain_encoder, FrozenEncoder};
use icl_borrow::features::{build_cache, cache_fingerprint, FeatureCache};
use icl_borrow::fit::curve_records;
use icl_borrow::harness::run::{CURVE_HEADER, RECORD_HEADER};
use icl_borrow::harness::{
    cell_data, downstream_datasets, evaluate_model, pretext_dataset, report, run_ablation, run_experiment,
    train_model, AblationKind, CellKey, CellResult, ExperimentConfig, Method, Prepared, SplitCaches, TrainedModel,
};
use icl_borrow::retrieval::RetrievalIndex;
use icl_borrow::synth::{Fingerprint, Split};
use icl_borrow::{Error, Result};

#[derive(Parser)]
#[command(name = "icl-borrow", version, about = "Retrieval-augmented in-context learning with missing modalities")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML). Defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log the neighbors retrieved for every test query.
    #[arg(long)]
    trace_retrieval: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Encoder checkpoint written by `pretrain`.
    #[arg(long)]
    encoder: PathBuf,
    /// Directory of `{split}.cache` files written by `cache`; rebuilt in
    /// memory when absent.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Defaults to the first method of the config.
    #[arg(long)]
    method: Option<String>,
    /// Defaults to the first r_sub of the config.
    #[arg(long)]
    r_sub: Option<f64>,
    /// Defaults to the first replicate of the config.
    #[arg(long)]
    replicate: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the downstream dataset directory.
    Gen(Common),
    /// Pretrain and freeze the encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Extract and pool features for every split of a dataset.
    Cache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Defaults to `icl.t` from the config.
        #[arg(long)]
        pooled_len: Option<usize>,
    },
    /// Build a retrieval index over a cache and optionally trace queries.
    Index {
        #[command(flatten)]
        common: Common,
        /// Cache whose rows form the index.
        #[arg(long)]
        cache: PathBuf,
        /// Cache of query samples (required for tracing).
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Train one model for one cell and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// neighbors | pooled_length | retrieval_group | variant
        #[arg(long)]
        kind: String,
    },
    /// Render tables and plots for a results directory.
    Report {
        #[command(flatten)]
        common: Common,
        dir: Option<PathBuf>,
    },
    /// Run the full experiment grid.
    Run(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if c.trace_retrieval {
        cfg.trace_retrieval = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| Error::config("--out is required"))
}

fn load_prepared(cfg: &ExperimentConfig, m: &ModelArgs) -> Result<(Prepared, SplitCaches)> {
    let meta = load_meta(&m.data)?;
    if meta.synth != cfg.synth {
        return Err(Error::Fingerprint(format!(
            "{} was generated from a different synth config",
            m.data.display()
        )));
    }
    let splits = load_dataset(&m.data)?;
    let encoder = FrozenEncoder::load(&m.encoder)?;
    encoder.config().accepts(&cfg.synth)?;
    let prepared = Prepared::new(
        take_split(&splits, Split::Train)?.clone(),
        take_split(&splits, Split::Val)?.clone(),
        take_split(&splits, Split::Test)?.clone(),
        encoder,
    )?;
    let caches = match &m.cache_dir {
        None => prepared.caches(cfg.icl.t)?,
        Some(dir) => {
            let load = |ds: &icl_borrow::synth::Dataset| -> Result<FeatureCache> {
                let c = FeatureCache::load(&dir.join(format!("{}.cache", ds.split.name())))?;
                if c.fingerprint != cache_fingerprint(&ds.fingerprint, &prepared.encoder_checksum) {
                    return Err(Error::Fingerprint(format!(
                        "{} cache does not belong to this dataset and encoder",
                        ds.split.name()
                    )));
                }
                if c.pooled_len != cfg.icl.t {
                    return Err(Error::config(format!(
                        "{} cache has T={}, config asks for T={}",
                        ds.split.name(),
                        c.pooled_len,
                        cfg.icl.t
                    )));
                }
                Ok(c)
            };
            SplitCaches {
                train: load(&prepared.train)?,
                val: load(&prepared.val)?,
                test: load(&prepared.test)?,
            }
        }
    };
    Ok((prepared, caches))
}

fn cell_key(cfg: &ExperimentConfig, m: &ModelArgs) -> Result<CellKey> {
    let method = match &m.method {
        Some(s) => Method::parse(s)?,
        None => cfg.methods[0],
    };
    let r_sub = m.r_sub.unwrap_or(cfg.r_sub[0]);
    if !(r_sub > 0.0 && r_sub <= 1.0) {
        return Err(Error::config(format!("--r-sub must lie in (0, 1], got {r_sub}")));
    }
    Ok(CellKey {
        method,
        r_sub,
        replicate: m.replicate.unwrap_or(cfg.seeds[0]),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(c) => {
            let cfg = load_config(&c)?;
            let out = need_out(&c)?;
            let (train, val, test) = downstream_datasets(&cfg)?;
            save_dataset(out, &[&train, &val, &test])?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                train.len(),
                val.len(),
                test.len(),
                out.display()
            );
        }
        Cmd::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let out = need_out(&common)?;
            let (train, val, test) = downstream_datasets(&cfg)?;
            let pretext = pretext_dataset(&cfg)?;
            let enc = pretrain_encoder(
                &cfg.encoder_config(),
                &pretext,
                &[train.fingerprint, val.fingerprint, test.fingerprint],
            )?;
            enc.save(out)?;
            println!("encoder checksum {}", Fingerprint(enc.checksum()));
        }
        Cmd::Cache {
            common,
            data,
            encoder,
            pooled_len,
        } => {
            let cfg = load_config(&common)?;
            let out = need_out(&common)?;
            let enc = FrozenEncoder::load(&encoder)?;
            let t = pooled_len.unwrap_or(cfg.icl.t);
            for ds in load_dataset(&data)? {
                let cache = build_cache(&enc, &ds, t)?;
                let path = out.join(format!("{}.cache", ds.split.name()));
                cache.save(&path)?;
                println!("{}\t{} entries\t{}", path.display(), cache.len(), cache.fingerprint);
            }
        }
        Cmd::Index { common, cache, queries } => {
            let cfg = load_config(&common)?;
            let rows = FeatureCache::load(&cache)?;
            let index = RetrievalIndex::build(&rows, cfg.retrieval_group)?;
            println!("{}: {} of {} rows indexed", cfg.retrieval_group.label(), index.len(), rows.len());
            if common.trace_retrieval {
                let q = FeatureCache::load(
                    queries
                        .as_deref()
                        .ok_or_else(|| Error::config("--trace-retrieval needs --queries"))?,
                )?;
                let mut text = String::new();
                for b in q.entries() {
                    text.push_str(&index.query_bundle(b, cfg.icl.q, cfg.icl.exclude_self)?.trace(b.id));
                }
                match &common.out {
                    Some(p) => write_file(p, text.as_bytes())?,
                    None => print!("{text}"),
                }
            }
        }
        Cmd::Train { common, model } => {
            let cfg = load_config(&common)?;
            let out = need_out(&common)?;
            let key = cell_key(&cfg, &model)?;
            let (prepared, caches) = load_prepared(&cfg, &model)?;
            let data = cell_data(&cfg, &prepared, &caches, key)?.map_err(|reason| {
                Error::Precondition(format!("cell {} cannot run: {reason}", key.stem()))
            })?;
            let trained = train_model(&cfg, &prepared, &caches, &data, key)?;
            trained.save(out)?;
            write_file(
                &with_suffix(out, ".curve.tsv"),
                format!("{CURVE_HEADER}\n{}", curve_records(trained.curve())).as_bytes(),
            )?;
            println!("{}\ttrainable_parameters\t{}", key.method.name(), trained.num_parameters());
        }
        Cmd::Eval {
            common,
            model,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let key = cell_key(&cfg, &model)?;
            let (prepared, caches) = load_prepared(&cfg, &model)?;
            let trained = TrainedModel::load(&checkpoint, key.method, &prepared.encoder)?;
            let data = cell_data(&cfg, &prepared, &caches, key)?.map_err(|reason| {
                Error::Precondition(format!("cell {} cannot run: {reason}", key.stem()))
            })?;
            let run = evaluate_model(&cfg, &prepared, &caches, &data, &trained, key)?;
            let text = format!("{RECORD_HEADER}\n{}", run.report.to_records());
            match &common.out {
                Some(p) => {
                    write_file(p, text.as_bytes())?;
                    if let Some(trace) = &run.trace {
                        write_file(&with_suffix(p, ".trace.tsv"), trace.as_bytes())?;
                    }
                }
                None => print!("{text}"),
            }
        }
        Cmd::Ablate { common, kind } => {
            let mut cfg = load_config(&common)?;
            cfg.out_dir = Some(need_out(&common)?.to_path_buf());
            let table = run_ablation(AblationKind::parse(&kind)?, &cfg)?;
            print!("{}", table.to_tsv());
        }
        Cmd::Report { common, dir } => {
            let dir = dir
                .or(common.out)
                .ok_or_else(|| Error::config("give the results directory"))?;
            let out = report(&dir)?;
            println!(
                "{} summary rows, {} curve files -> {}",
                out.summary.len(),
                out.curve_files,
                out.dir.display()
            );
        }
        Cmd::Run(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(out) = &c.out {
                cfg.out_dir = Some(out.clone());
            }
            let outcomes = run_experiment(&cfg)?;
            let skipped = outcomes
                .iter()
                .filter(|o| matches!(o.result, CellResult::Skipped(_)))
                .count();
            info!("{} cells run, {skipped} skipped", outcomes.len() - skipped);
            println!("{} cells, {skipped} skipped", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
