use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use super::config::{ExperimentConfig, Method};
use super::report::median;
use super::run::{run_cells, CellOutcome, Prepared};
use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::features::check_pooled_len;
use crate::icl::Variant;
use crate::metrics::{primary_metric, Subgroup};
use crate::retrieval::RetrievalGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Neighbors,
    PooledLength,
    RetrievalGroup,
    Variant,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Neighbors,
        AblationKind::PooledLength,
        AblationKind::RetrievalGroup,
        AblationKind::Variant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Neighbors => "neighbors",
            AblationKind::PooledLength => "pooled_length",
            AblationKind::RetrievalGroup => "retrieval_group",
            AblationKind::Variant => "variant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }

    /// Column header of the swept value.
    pub fn column(self) -> &'static str {
        match self {
            AblationKind::Neighbors => "q",
            AblationKind::PooledLength => "t",
            AblationKind::RetrievalGroup => "group",
            AblationKind::Variant => "variant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Q(usize),
    T(usize),
    Group(RetrievalGroup),
    Variant(Variant),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Q(q) => q.to_string(),
            SweepValue::T(t) => t.to_string(),
            SweepValue::Group(g) => g.label().to_string(),
            SweepValue::Variant(v) => Method::from_variant(*v).name().to_string(),
        }
    }
}

pub fn sweep_values(kind: AblationKind) -> Vec<SweepValue> {
    match kind {
        AblationKind::Neighbors => [1, 2, 4, 8, 16].map(SweepValue::Q).to_vec(),
        AblationKind::PooledLength => [0, 4, 8, 16, 32].map(SweepValue::T).to_vec(),
        AblationKind::RetrievalGroup => [RetrievalGroup::All, RetrievalGroup::FullOnly, RetrievalGroup::MissingOnly]
            .map(SweepValue::Group)
            .to_vec(),
        AblationKind::Variant => Variant::ALL.map(SweepValue::Variant).to_vec(),
    }
}

/// The base config with one swept value applied. Non-variant sweeps use the
/// base config's ICL methods (ICL-CA when it has none).
pub fn apply(base: &ExperimentConfig, value: SweepValue) -> ExperimentConfig {
    let mut cfg = base.clone();
    let icl: Vec<Method> = base.methods.iter().copied().filter(|m| m.variant().is_some()).collect();
    cfg.methods = if icl.is_empty() { vec![Method::IclCa] } else { icl };
    match value {
        SweepValue::Q(q) => cfg.icl.q = q,
        SweepValue::T(t) => cfg.icl.t = t,
        SweepValue::Group(g) => cfg.retrieval_group = g,
        SweepValue::Variant(v) => cfg.methods = vec![Method::from_variant(v)],
    }
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub method: String,
    pub metric: String,
    pub cells: usize,
    pub full: Option<f64>,
    pub miss: Option<f64>,
    pub all: Option<f64>,
    pub gap_pct: Option<f64>,
    /// Set when the value could not run at all.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub kind: AblationKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = format!("{}\tmethod\tmetric\tcells\tfull\tmiss\tall\tgap_pct\n", self.kind.column());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.value,
                r.method,
                r.metric,
                r.cells,
                fmt(r.full),
                fmt(r.miss),
                fmt(r.all),
                fmt(r.gap_pct)
            );
        }
        out
    }

    pub fn row(&self, value: &str, method: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value && r.method == method)
    }
}

fn rows_for(value: &str, cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Vec<SweepRow> {
    let metric = primary_metric(cfg.synth.num_classes);
    cfg.methods
        .iter()
        .map(|m| {
            let runs: Vec<_> = outcomes.iter().filter(|o| o.key.method == *m).filter_map(|o| o.run()).collect();
            let med = |g: Subgroup| median(&runs.iter().filter_map(|r| r.report.primary(g)).collect::<Vec<_>>());
            let gaps: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.report.relative_gap.get(metric).copied().flatten())
                .collect();
            SweepRow {
                value: value.to_string(),
                method: m.name().to_string(),
                metric: metric.to_string(),
                cells: runs.len(),
                full: med(Subgroup::Full),
                miss: med(Subgroup::Miss),
                all: med(Subgroup::All),
                gap_pct: median(&gaps),
                note: None,
            }
        })
        .collect()
}

/// Runs one sweep on prepared data. Each value's full experiment output goes
/// to `out/<kind>/<value>/` and the table to `out/<kind>.tsv`.
pub fn run_ablation_prepared(
    kind: AblationKind,
    base: &ExperimentConfig,
    prepared: &Prepared,
    out: Option<&Path>,
) -> Result<SweepTable> {
    base.validate()?;
    let mut rows = Vec::new();
    for value in sweep_values(kind) {
        let cfg = apply(base, value);
        let label = value.label();
        if let SweepValue::T(t) = value {
            let e = prepared.encoder.config();
            if let Err(err) = check_pooled_len(t, e.l1, e.l2) {
                warn!("{} = {label} skipped: {err}", kind.name());
                for m in &cfg.methods {
                    rows.push(SweepRow {
                        value: label.clone(),
                        method: m.name().to_string(),
                        metric: primary_metric(cfg.synth.num_classes).to_string(),
                        cells: 0,
                        full: None,
                        miss: None,
                        all: None,
                        gap_pct: None,
                        note: Some(err.to_string()),
                    });
                }
                continue;
            }
        }
        let sub = out.map(|d| d.join(kind.name()).join(&label));
        let outcomes = run_cells(&cfg, prepared, sub.as_deref())?;
        rows.extend(rows_for(&label, &cfg, &outcomes));
    }
    let table = SweepTable { kind, rows };
    if let Some(dir) = out {
        write_file(&dir.join(format!("{}.tsv", kind.name())), table.to_tsv().as_bytes())?;
        let notes: String = table
            .rows
            .iter()
            .filter_map(|r| r.note.as_ref().map(|n| format!("{}\t{}\t{n}\n", r.value, r.method)))
            .collect();
        if !notes.is_empty() {
            write_file(
                &dir.join(format!("{}_skipped.tsv", kind.name())),
                format!("{}\tmethod\treason\n{notes}", kind.column()).as_bytes(),
            )?;
        }
    }
    Ok(table)
}
