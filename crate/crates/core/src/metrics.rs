//! AUROC, AUPRC, accuracy and subgroup-separated reports.
//!
//! Undefined metrics (a subgroup with a single class, say) are carried as
//! `None` and printed as `NA`, never as zero.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Pattern;

/// Mann–Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision over a descending-score sweep, tied scores forming a
/// single threshold step.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut group_pos = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_pos;
        if group_pos > 0 {
            ap += (group_pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}

pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty list".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `(high − low) / low` as a percentage.
pub fn relative_gap(a: f64, b: f64) -> Result<f64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if !(lo > 0.0) || !hi.is_finite() {
        return Err(Error::UndefinedMetric(format!("relative gap undefined for ({a}, {b})")));
    }
    Ok((hi - lo) / lo * 100.0)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("length mismatch: {a} scores vs {b} labels")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    Full,
    Miss,
    All,
}

impl Subgroup {
    pub fn name(self) -> &'static str {
        match self {
            Subgroup::Full => "full",
            Subgroup::Miss => "miss",
            Subgroup::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Subgroup::Full),
            "miss" => Some(Subgroup::Miss),
            "all" => Some(Subgroup::All),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: u64,
    pub label: u32,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best as u32
    }
}

/// The metric used for model selection and headline comparisons.
pub fn primary_metric(num_classes: usize) -> &'static str {
    if num_classes == 2 {
        "auroc"
    } else {
        "accuracy"
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupMetrics {
    pub count: usize,
    pub values: BTreeMap<String, Option<f64>>,
}

impl GroupMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied().flatten()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub r_sub: f64,
    pub missing_state: String,
    pub seed: u64,
    pub num_classes: usize,
    pub groups: BTreeMap<Subgroup, GroupMetrics>,
    pub relative_gap: BTreeMap<String, Option<f64>>,
}

impl MetricsReport {
    pub fn value(&self, group: Subgroup, metric: &str) -> Option<f64> {
        self.groups.get(&group).and_then(|g| g.get(metric))
    }

    pub fn primary(&self, group: Subgroup) -> Option<f64> {
        self.value(group, primary_metric(self.num_classes))
    }

    /// One tab-separated record per (subgroup, metric), plus counts and gaps.
    /// Columns: method, r_sub, missing_state, seed, subgroup, metric, value.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let prefix = format!("{}\t{}\t{}\t{}", self.method, self.r_sub, self.missing_state, self.seed);
        for (g, m) in &self.groups {
            let _ = writeln!(out, "{prefix}\t{}\tcount\t{}", g.name(), m.count);
            for (name, v) in &m.values {
                let _ = writeln!(out, "{prefix}\t{}\t{name}\t{}", g.name(), fmt(*v));
            }
        }
        for (name, v) in &self.relative_gap {
            let _ = writeln!(out, "{prefix}\tgap\t{name}\t{}", fmt(*v));
        }
        out
    }
}

fn group_metrics(preds: &[&Prediction], metas: &[SampleMeta], num_classes: usize) -> GroupMetrics {
    let mut values = BTreeMap::new();
    let truth: Vec<u32> = metas.iter().map(|m| m.label).collect();
    let argmax: Vec<u32> = preds.iter().map(|p| p.argmax()).collect();
    values.insert("accuracy".to_string(), accuracy(&argmax, &truth).ok());
    if num_classes == 2 {
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
        let labels: Vec<bool> = truth.iter().map(|&y| y == 1).collect();
        values.insert("auroc".to_string(), auroc(&scores, &labels).ok());
        values.insert("auprc".to_string(), auprc(&scores, &labels).ok());
    }
    GroupMetrics {
        count: metas.len(),
        values,
    }
}

/// Scores predictions on `test`, separately for full-modality samples,
/// missing-modality samples and all samples. Empty subgroups are omitted.
pub fn evaluate_split(predictions: &[Prediction], test: &[SampleMeta], num_classes: usize) -> Result<MetricsReport> {
    let mut by_id: HashMap<u64, &Prediction> = HashMap::with_capacity(predictions.len());
    let mut duplicate = Vec::new();
    for p in predictions {
        if by_id.insert(p.id, p).is_some() {
            duplicate.push(p.id);
        }
        if p.probs.len() != num_classes {
            return Err(Error::Data(format!("prediction {} has {} classes", p.id, p.probs.len())));
        }
    }
    let test_ids: std::collections::HashSet<u64> = test.iter().map(|m| m.id).collect();
    let mut missing: Vec<u64> = test.iter().map(|m| m.id).filter(|id| !by_id.contains_key(id)).collect();
    missing.extend(by_id.keys().filter(|id| !test_ids.contains(id)));
    if !missing.is_empty() || !duplicate.is_empty() {
        missing.sort_unstable();
        duplicate.sort_unstable();
        return Err(Error::Coverage { missing, duplicate });
    }

    let mut groups = BTreeMap::new();
    for group in [Subgroup::Full, Subgroup::Miss, Subgroup::All] {
        let metas: Vec<SampleMeta> = test
            .iter()
            .filter(|m| match group {
                Subgroup::Full => m.pattern.is_full(),
                Subgroup::Miss => !m.pattern.is_full(),
                Subgroup::All => true,
            })
            .copied()
            .collect();
        if metas.is_empty() {
            continue;
        }
        let preds: Vec<&Prediction> = metas.iter().map(|m| by_id[&m.id]).collect();
        groups.insert(group, group_metrics(&preds, &metas, num_classes));
    }

    let mut gaps = BTreeMap::new();
    if let (Some(full), Some(miss)) = (groups.get(&Subgroup::Full), groups.get(&Subgroup::Miss)) {
        for name in full.values.keys() {
            let gap = match (full.get(name), miss.get(name)) {
                (Some(a), Some(b)) => relative_gap(a, b).ok(),
                _ => None,
            };
            gaps.insert(name.clone(), gap);
        }
    }

    Ok(MetricsReport {
        num_classes,
        groups,
        relative_gap: gaps,
        ..MetricsReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_worked_example() {
        let s = [0.9, 0.8, 0.7, 0.1];
        let l = [true, false, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn auroc_extremes_and_ties() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.1, 0.9], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auprc(&[0.1, 0.9], &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn relative_gap_examples() {
        let g = relative_gap(0.769, 0.689).unwrap();
        assert_eq!((g * 10.0).round() / 10.0, 11.6);
        let g = relative_gap(0.719, 0.632).unwrap();
        assert_eq!((g * 10.0).round() / 10.0, 13.8);
        assert_eq!(relative_gap(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(relative_gap(0.689, 0.769).unwrap(), relative_gap(0.769, 0.689).unwrap());
        assert!(relative_gap(0.0, 0.5).is_err());
    }

    fn meta(id: u64, label: u32, full: bool) -> SampleMeta {
        SampleMeta {
            id,
            label,
            pattern: if full { Pattern::Full } else { Pattern::M1Only },
        }
    }

    fn pred(id: u64, p1: f64) -> Prediction {
        Prediction {
            id,
            probs: vec![1.0 - p1, p1],
        }
    }

    #[test]
    fn all_full_split_has_no_miss_group() {
        let metas = [meta(0, 1, true), meta(1, 0, true)];
        let preds = [pred(0, 0.8), pred(1, 0.3)];
        let r = evaluate_split(&preds, &metas, 2).unwrap();
        assert!(!r.groups.contains_key(&Subgroup::Miss));
        assert_eq!(r.groups[&Subgroup::Full].values, r.groups[&Subgroup::All].values);
        assert!(r.relative_gap.is_empty());
    }

    #[test]
    fn hand_built_eight_sample_split() {
        // full: ids 0..4, miss: ids 4..8
        let metas = [
            meta(0, 1, true),
            meta(1, 0, true),
            meta(2, 1, true),
            meta(3, 0, true),
            meta(4, 1, false),
            meta(5, 0, false),
            meta(6, 0, false),
            meta(7, 1, false),
        ];
        let preds = [
            pred(0, 0.9),
            pred(1, 0.8),
            pred(2, 0.7),
            pred(3, 0.1),
            pred(4, 0.6),
            pred(5, 0.4),
            pred(6, 0.7),
            pred(7, 0.2),
        ];
        let r = evaluate_split(&preds, &metas, 2).unwrap();
        // full: pairs (0>1),(0>3),(2<1),(2>3) -> 3/4
        assert_eq!(r.value(Subgroup::Full, "auroc"), Some(0.75));
        // full accuracy: 0 ok, 1 wrong, 2 ok, 3 ok
        assert_eq!(r.value(Subgroup::Full, "accuracy"), Some(0.75));
        // miss: positives {0.6, 0.2}, negatives {0.4, 0.7}: 0.6>0.4 only -> 1/4
        assert_eq!(r.value(Subgroup::Miss, "auroc"), Some(0.25));
        // miss accuracy: 4 ok, 5 ok, 6 wrong, 7 wrong
        assert_eq!(r.value(Subgroup::Miss, "accuracy"), Some(0.5));
        // full AP: ranks .9(+) .8(-) .7(+) -> (1 + 2/3)/2
        assert!((r.value(Subgroup::Full, "auprc").unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.groups[&Subgroup::All].count, 8);
        assert_eq!(r.relative_gap["auroc"], Some(200.0));
    }

    #[test]
    fn identical_subgroups_have_identical_metrics() {
        let metas = [meta(0, 1, true), meta(1, 0, true), meta(2, 1, false), meta(3, 0, false)];
        let preds = [pred(0, 0.7), pred(1, 0.2), pred(2, 0.7), pred(3, 0.2)];
        let r = evaluate_split(&preds, &metas, 2).unwrap();
        assert_eq!(r.groups[&Subgroup::Full].values, r.groups[&Subgroup::Miss].values);
    }

    #[test]
    fn coverage_errors_list_ids() {
        let metas = [meta(0, 1, true), meta(1, 0, true)];
        match evaluate_split(&[pred(0, 0.5), pred(0, 0.5)], &metas, 2) {
            Err(Error::Coverage { missing, duplicate }) => {
                assert_eq!(missing, vec![1]);
                assert_eq!(duplicate, vec![0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_class_subgroup_reports_absence() {
        let metas = [meta(0, 1, true), meta(1, 1, true), meta(2, 0, false)];
        let preds = [pred(0, 0.7), pred(1, 0.2), pred(2, 0.7)];
        let r = evaluate_split(&preds, &metas, 2).unwrap();
        assert_eq!(r.groups[&Subgroup::Full].values["auroc"], None);
        assert!(r.to_records().contains("full\tauroc\tNA"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (2usize..30).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-5.0f64..5.0, n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
        }

        proptest! {
            #[test]
            fn auroc_monotone_invariant((s, l) in instance()) {
                prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
                let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            }

            #[test]
            fn auroc_complement((s, l) in instance()) {
                prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
                let mut sorted = s.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.dedup();
                prop_assume!(sorted.len() == s.len());
                let neg: Vec<f64> = s.iter().map(|x| -x).collect();
                let a = auroc(&s, &l).unwrap();
                prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
            }

            #[test]
            fn auprc_in_unit_interval((s, l) in instance()) {
                prop_assume!(l.iter().any(|&x| x));
                let ap = auprc(&s, &l).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }
}
