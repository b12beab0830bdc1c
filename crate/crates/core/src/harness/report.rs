use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::plot::{LinePlot, Series};
use super::run::RECORD_HEADER;
use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::metrics::relative_gap;

/// One line of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub method: String,
    pub r_sub: f64,
    pub missing_state: String,
    pub seed: u64,
    pub subgroup: String,
    pub metric: String,
    pub value: Option<f64>,
}

fn bad(line_no: usize, why: &str) -> Error {
    Error::Data(format!("results line {line_no}: {why}"))
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line == RECORD_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 tab-separated fields"));
        }
        let value = match f[6] {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad(i + 1, "value is not a number"))?),
        };
        out.push(Record {
            method: f[0].to_string(),
            r_sub: f[1].parse().map_err(|_| bad(i + 1, "r_sub is not a number"))?,
            missing_state: f[2].to_string(),
            seed: f[3].parse().map_err(|_| bad(i + 1, "seed is not an integer"))?,
            subgroup: f[4].to_string(),
            metric: f[5].to_string(),
            value,
        });
    }
    Ok(out)
}

fn tsv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let Ok(rd) = std::fs::read_dir(dir) else { return Ok(Vec::new()) };
    let mut files = Vec::new();
    for e in rd {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "tsv") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))
}

/// Records of `dir/results.tsv`, or of the per-cell files when no merged
/// table exists.
pub fn load_records(dir: &Path) -> Result<Vec<Record>> {
    let merged = dir.join("results.tsv");
    let texts = if merged.is_file() {
        vec![read_text(&merged)?]
    } else {
        tsv_files(&dir.join("cells"))?
            .iter()
            .map(|p| read_text(p))
            .collect::<Result<_>>()?
    };
    let mut records = Vec::new();
    for t in texts {
        records.extend(parse_records(&t)?);
    }
    Ok(records)
}

/// Median of the finite values; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Metric values of one cell.
#[derive(Clone, Debug, Default)]
pub struct CellValues {
    pub missing_state: String,
    pub values: BTreeMap<(String, String), Option<f64>>,
}

impl CellValues {
    pub fn get(&self, subgroup: &str, metric: &str) -> Option<f64> {
        self.values.get(&(subgroup.to_string(), metric.to_string())).copied().flatten()
    }

    pub fn primary_metric(&self) -> &'static str {
        if self.values.keys().any(|(_, m)| m == "auroc") {
            "auroc"
        } else {
            "accuracy"
        }
    }

    /// Full-vs-missing gap of `metric`, recomputed from the subgroup values.
    pub fn gap(&self, metric: &str) -> Option<f64> {
        relative_gap(self.get("full", metric)?, self.get("miss", metric)?).ok()
    }
}

/// `(method, r_sub bits, seed)`. Positive floats order like their bits.
pub type CellId = (String, u64, u64);

pub fn group_cells(records: &[Record]) -> BTreeMap<CellId, CellValues> {
    let mut cells: BTreeMap<CellId, CellValues> = BTreeMap::new();
    for r in records {
        let c = cells.entry((r.method.clone(), r.r_sub.to_bits(), r.seed)).or_default();
        c.missing_state.clone_from(&r.missing_state);
        c.values.insert((r.subgroup.clone(), r.metric.clone()), r.value);
    }
    cells
}

/// Per-(method, r_sub) medians over replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub r_sub: f64,
    pub metric: String,
    pub cells: usize,
    pub full: Option<f64>,
    pub miss: Option<f64>,
    pub all: Option<f64>,
    pub gap_pct: Option<f64>,
}

pub fn summarize(cells: &BTreeMap<CellId, CellValues>) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&CellValues>> = BTreeMap::new();
    for ((m, r, _), c) in cells {
        groups.entry((m.clone(), *r)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((method, r), cs)| {
            let metric = cs[0].primary_metric();
            let med = |g: &str| median(&cs.iter().filter_map(|c| c.get(g, metric)).collect::<Vec<_>>());
            SummaryRow {
                r_sub: f64::from_bits(r),
                metric: metric.to_string(),
                cells: cs.len(),
                full: med("full"),
                miss: med("miss"),
                all: med("all"),
                gap_pct: median(&cs.iter().filter_map(|c| c.gap(metric)).collect::<Vec<_>>()),
                method,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub method: String,
    pub dataset: String,
    pub metric: String,
    pub cells: usize,
    pub gap_pct: Option<f64>,
}

/// Median relative gap per (method, missing state) over every cell.
pub fn gap_summary(cells: &BTreeMap<CellId, CellValues>) -> Vec<GapRow> {
    let mut groups: BTreeMap<(String, String), Vec<&CellValues>> = BTreeMap::new();
    for ((m, _, _), c) in cells {
        groups.entry((m.clone(), c.missing_state.clone())).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((method, dataset), cs)| {
            let metric = cs[0].primary_metric();
            GapRow {
                gap_pct: median(&cs.iter().filter_map(|c| c.gap(metric)).collect::<Vec<_>>()),
                metric: metric.to_string(),
                cells: cs.len(),
                method,
                dataset,
            }
        })
        .collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn comparison(rows: &[SummaryRow], subgroup: &str) -> (String, LinePlot) {
    let mut table = String::from("method\tr_sub\tmetric\tmedian\tcells\n");
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let v = match subgroup {
            "full" => r.full,
            "miss" => r.miss,
            _ => r.all,
        };
        let _ = writeln!(table, "{}\t{}\t{}\t{}\t{}", r.method, r.r_sub, r.metric, fmt(v), r.cells);
        if series.last().is_none_or(|s| s.name != r.method) {
            series.push(Series {
                name: r.method.clone(),
                points: Vec::new(),
            });
        }
        series.last_mut().expect("pushed").points.push((r.r_sub, v.unwrap_or(f64::NAN)));
    }
    let metric = rows.first().map_or("metric", |r| r.metric.as_str());
    let plot = LinePlot {
        title: format!("{subgroup} test samples"),
        x_label: "r_sub".into(),
        y_label: metric.into(),
        log_x: true,
        series,
    };
    (table, plot)
}

/// Wide table `step, train_loss, full, miss, all` from a curve file.
fn learning_curve(text: &str, title: &str) -> (String, LinePlot) {
    let mut steps: BTreeMap<u64, [Option<f64>; 4]> = BTreeMap::new();
    let mut metric = String::from("metric");
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            continue;
        }
        let Ok(step) = f[0].parse::<u64>() else { continue };
        let v = f[4].parse::<f64>().ok();
        let col = match (f[1], f[2]) {
            ("train", _) => 0,
            ("val", "full") => 1,
            ("val", "miss") => 2,
            ("val", "all") => 3,
            _ => continue,
        };
        if col > 0 {
            metric = f[3].to_string();
        }
        steps.entry(step).or_default()[col] = v;
    }
    let mut table = format!("step\ttrain_loss\tval_{metric}_full\tval_{metric}_miss\tval_{metric}_all\n");
    let mut series: Vec<Series> = ["full", "miss", "all"]
        .iter()
        .map(|n| Series {
            name: (*n).into(),
            points: Vec::new(),
        })
        .collect();
    for (step, v) in &steps {
        let _ = writeln!(table, "{step}\t{}\t{}\t{}\t{}", fmt(v[0]), fmt(v[1]), fmt(v[2]), fmt(v[3]));
        for (s, x) in series.iter_mut().zip(&v[1..]) {
            s.points.push((*step as f64, x.unwrap_or(f64::NAN)));
        }
    }
    let plot = LinePlot {
        title: title.to_string(),
        x_label: "step".into(),
        y_label: format!("validation {metric}"),
        log_x: false,
        series,
    };
    (table, plot)
}

/// Pools per-cell timing rows into one mean ± std per method.
fn timing_summary(text: &str) -> String {
    // method -> (n, Σx, Σx²)
    let mut acc: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            continue;
        }
        let (Ok(n), Ok(mean), Ok(std)) = (f[3].parse::<f64>(), f[4].parse::<f64>(), f[5].parse::<f64>()) else {
            continue;
        };
        let a = acc.entry(f[0].to_string()).or_default();
        a.0 += n;
        a.1 += n * mean;
        a.2 += n * (std * std + mean * mean);
    }
    let mut out = String::from("method\tsamples\tmean_us\tstd_us\n");
    for (m, (n, s1, s2)) in acc {
        if n == 0.0 {
            continue;
        }
        let mean = s1 / n;
        let std = (s2 / n - mean * mean).max(0.0).sqrt();
        let _ = writeln!(out, "{m}\t{n}\t{mean:.3}\t{std:.3}");
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct ReportOutput {
    pub summary: Vec<SummaryRow>,
    pub gaps: Vec<GapRow>,
    pub curve_files: usize,
    pub dir: PathBuf,
}

/// Renders tables and plots for a results directory into `dir/report`.
pub fn report(dir: &Path) -> Result<ReportOutput> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(Error::Precondition(format!("no report records under {}", dir.display())));
    }
    let out = dir.join("report");
    let cells = group_cells(&records);
    let summary = summarize(&cells);
    let gaps = gap_summary(&cells);

    let mut text = String::from("method\tr_sub\tmetric\tcells\tfull\tmiss\tall\tgap_pct\n");
    for r in &summary {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.method,
            r.r_sub,
            r.metric,
            r.cells,
            fmt(r.full),
            fmt(r.miss),
            fmt(r.all),
            fmt(r.gap_pct)
        );
    }
    write_file(&out.join("summary.tsv"), text.as_bytes())?;

    let mut text = String::from("method\tdataset\tmetric\tcells\tgap_pct\n");
    for g in &gaps {
        let _ = writeln!(text, "{}\t{}\t{}\t{}\t{}", g.method, g.dataset, g.metric, g.cells, fmt(g.gap_pct));
    }
    write_file(&out.join("gap_summary.tsv"), text.as_bytes())?;

    for sg in ["full", "miss", "all"] {
        let (table, plot) = comparison(&summary, sg);
        write_file(&out.join(format!("metric_vs_rsub_{sg}.tsv")), table.as_bytes())?;
        write_file(&out.join(format!("metric_vs_rsub_{sg}.svg")), plot.to_svg().as_bytes())?;
    }

    let curve_paths = tsv_files(&dir.join("curves"))?;
    for p in &curve_paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        let (table, plot) = learning_curve(&read_text(p)?, stem);
        write_file(&out.join("curves").join(format!("{stem}.tsv")), table.as_bytes())?;
        write_file(&out.join("curves").join(format!("{stem}.svg")), plot.to_svg().as_bytes())?;
    }

    let timing = dir.join("timing.tsv");
    if timing.is_file() {
        write_file(&out.join("timing_summary.tsv"), timing_summary(&read_text(&timing)?).as_bytes())?;
    }

    Ok(ReportOutput {
        summary,
        gaps,
        curve_files: curve_paths.len(),
        dir: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, r: f64, seed: u64, sg: &str, metric: &str, v: f64) -> String {
        format!("{method}\t{r}\t30F-70m1-0m2\t{seed}\t{sg}\t{metric}\t{v}\n")
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(parse_records("a\tb\n").is_err());
        assert!(parse_records("m\tx\ts\t0\tall\tauroc\t0.5\n").is_err());
        let r = parse_records(&format!("{RECORD_HEADER}\nm\t0.1\ts\t2\tall\tauroc\tNA\n")).unwrap();
        assert_eq!(r[0].value, None);
        assert_eq!(r[0].seed, 2);
    }

    #[test]
    fn summary_uses_primary_metric_and_recomputed_gap() {
        let mut text = String::new();
        for (seed, full, miss) in [(0, 0.8, 0.6), (1, 0.9, 0.6), (2, 0.7, 0.7)] {
            text += &rec("ICL-CA", 0.1, seed, "full", "auroc", full);
            text += &rec("ICL-CA", 0.1, seed, "miss", "auroc", miss);
            text += &rec("ICL-CA", 0.1, seed, "all", "auroc", (full + miss) / 2.0);
            text += &rec("ICL-CA", 0.1, seed, "full", "accuracy", 0.1);
        }
        let cells = group_cells(&parse_records(&text).unwrap());
        let rows = summarize(&cells);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].metric, "auroc");
        assert_eq!(rows[0].full, Some(0.8));
        assert_eq!(rows[0].cells, 3);
        let gaps = [relative_gap(0.8, 0.6).unwrap(), relative_gap(0.9, 0.6).unwrap(), 0.0];
        assert_eq!(rows[0].gap_pct, median(&gaps));
    }

    #[test]
    fn timing_pools_cells() {
        let t = "method\tr_sub\tseed\tsamples\tmean_us\tstd_us\nA\t0.1\t0\t2\t1.0\t0.0\nA\t0.1\t1\t2\t3.0\t0.0\n";
        let s = timing_summary(t);
        assert!(s.contains("A\t4\t2.000\t1.000"), "{s}");
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::Precondition(_))));
    }
}
