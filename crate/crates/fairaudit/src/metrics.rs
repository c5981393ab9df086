//! Weighted-F1 and Equalized Odds computation, stratified by social factor.
//!
//! Equalized Odds here is a scalar: per (factor, label), the TPR gap and FPR
//! gap across the factor's groups (absolute difference for two groups,
//! population standard deviation for more) combined per `EoCombine`, then
//! aggregated over labels by gold support. Lower is fairer. Groups whose rate
//! denominator is empty are dropped from the affected component only.
//!
//! Parse failures never enter rate computation; whether they count against
//! F1 is controlled by `FailurePolicy`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabelValue;
use crate::prompt::{TaskKind, TaskShape};

/// Raw confusion counts for one (group, label) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    fn record(&mut self, gold_pos: bool, pred_pos: bool) {
        match (gold_pos, pred_pos) {
            (true, true) => self.true_positives += 1,
            (true, false) => self.false_negatives += 1,
            (false, true) => self.false_positives += 1,
            (false, false) => self.true_negatives += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// tp / (tp + fn); undefined without gold positives.
    pub fn tpr(&self) -> Option<f64> {
        let denom = self.true_positives + self.false_negatives;
        (denom > 0).then(|| self.true_positives as f64 / denom as f64)
    }

    /// fp / (fp + tn); undefined without gold negatives.
    pub fn fpr(&self) -> Option<f64> {
        let denom = self.false_positives + self.true_negatives;
        (denom > 0).then(|| self.false_positives as f64 / denom as f64)
    }
}

/// Rates for one (factor, group, label) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub factor: String,
    pub group: String,
    pub label: String,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    /// Gold-positive count behind the TPR.
    pub support: u64,
}

/// How TPR and FPR gap components combine into one EO value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EoCombine {
    Mean,
    Max,
}

/// What happens to parse failures when scoring F1. Rates always exclude
/// them, so no TPR/FPR entry is ever fabricated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// A failed parse counts as a miss on the gold label(s).
    CountAsWrong,
    /// Failed parses are dropped from F1 as well.
    Exclude,
    /// One re-request with a format reminder before falling back to
    /// `CountAsWrong`.
    RetryOnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub eo_combine: EoCombine,
    pub failure_policy: FailurePolicy,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            eo_combine: EoCombine::Mean,
            failure_policy: FailurePolicy::CountAsWrong,
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("no label has a defined EO value")]
    AllUndefined,
}

/// One-vs-rest target for confusion counting.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Label(&'a str),
}

fn is_positive(value: &LabelValue, target: Target<'_>) -> bool {
    match (value, target) {
        (LabelValue::Class(c), Target::Class(t)) => *c == t,
        (LabelValue::Multi(map), Target::Label(name)) => {
            map.get(name).copied().unwrap_or(0) == 1
        }
        // Shape mismatch: treat as negative rather than panic; the loaders
        // make this unreachable for well-formed rows.
        _ => false,
    }
}

/// Confusion counts over (gold, predicted) pairs for one target. Predictions
/// of `None` (failures kept under `CountAsWrong`) never count as positive.
pub fn confusion(
    pairs: &[(LabelValue, Option<LabelValue>)],
    target: Target<'_>,
    _task: &TaskKind,
) -> Result<ConfusionCounts, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts = ConfusionCounts::default();
    for (gold, pred) in pairs {
        let gold_pos = is_positive(gold, target);
        let pred_pos = pred.as_ref().is_some_and(|p| is_positive(p, target));
        counts.record(gold_pos, pred_pos);
    }
    Ok(counts)
}

/// Population standard deviation (the groups are the whole population of
/// categories, not a sample).
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

fn gap(rates: &[f64]) -> Option<f64> {
    match rates.len() {
        0 | 1 => None,
        2 => Some((rates[0] - rates[1]).abs()),
        _ => Some(population_std(rates)),
    }
}

/// The TPR-gap and FPR-gap components over one factor's groups, each
/// computed over the groups where that rate is defined.
pub fn eo_components(rates: &[GroupRates]) -> (Option<f64>, Option<f64>) {
    debug_assert!(
        rates
            .windows(2)
            .all(|w| w[0].factor == w[1].factor && w[0].label == w[1].label),
        "eo_components expects rates for a single (factor, label)"
    );
    let tprs: Vec<f64> = rates.iter().filter_map(|r| r.tpr).collect();
    let fprs: Vec<f64> = rates.iter().filter_map(|r| r.fpr).collect();
    (gap(&tprs), gap(&fprs))
}

/// Scalar EO for one (factor, label): the combined TPR/FPR gap, or the lone
/// computable component, or `None` when fewer than two groups have rates.
pub fn eo_for_factor(rates: &[GroupRates], combine: EoCombine) -> Option<f64> {
    let (gap_tpr, gap_fpr) = eo_components(rates);
    combine_components(gap_tpr, gap_fpr, combine)
}

fn combine_components(
    gap_tpr: Option<f64>,
    gap_fpr: Option<f64>,
    combine: EoCombine,
) -> Option<f64> {
    match (gap_tpr, gap_fpr) {
        (Some(t), Some(f)) => Some(match combine {
            EoCombine::Mean => (t + f) / 2.0,
            EoCombine::Max => t.max(f),
        }),
        (Some(t), None) => Some(t),
        (None, Some(f)) => Some(f),
        (None, None) => None,
    }
}

/// Support-weighted mean over labels with a defined EO. Labels without one
/// are dropped; all-undefined is an error. When every contributing label has
/// zero support the mean is unweighted.
pub fn eo_aggregate(
    per_label: &BTreeMap<String, Option<f64>>,
    supports: &BTreeMap<String, u64>,
) -> Result<f64, MetricsError> {
    let defined: Vec<(&str, f64)> = per_label
        .iter()
        .filter_map(|(label, eo)| eo.map(|v| (label.as_str(), v)))
        .collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    let total_weight: u64 = defined
        .iter()
        .map(|(label, _)| supports.get(*label).copied().unwrap_or(0))
        .sum();
    if total_weight == 0 {
        return Ok(defined.iter().map(|(_, v)| v).sum::<f64>() / defined.len() as f64);
    }
    let weighted: f64 = defined
        .iter()
        .map(|(label, v)| v * supports.get(*label).copied().unwrap_or(0) as f64)
        .sum();
    Ok(weighted / total_weight as f64)
}

/// Weighted-F1 over (gold, predicted) pairs: per-class F1 weighted by gold
/// support; for multilabel tasks, per-label binary F1 weighted by
/// gold-positive count.
pub fn weighted_f1(
    pairs: &[(LabelValue, Option<LabelValue>)],
    task: &TaskKind,
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let targets: Vec<(Target<'_>, u64)> = match task.shape {
        TaskShape::Binary | TaskShape::Multiclass => (0..task.labels.len())
            .map(|c| {
                let support = pairs
                    .iter()
                    .filter(|(g, _)| is_positive(g, Target::Class(c)))
                    .count() as u64;
                (Target::Class(c), support)
            })
            .collect(),
        TaskShape::Multilabel => task
            .labels
            .iter()
            .map(|def| {
                let support = pairs
                    .iter()
                    .filter(|(g, _)| is_positive(g, Target::Label(&def.name)))
                    .count() as u64;
                (Target::Label(def.name.as_str()), support)
            })
            .collect(),
    };
    let total: u64 = targets.iter().map(|(_, s)| s).sum();
    if total == 0 {
        // No gold positives anywhere (possible for degenerate multilabel
        // input): every per-label F1 would carry zero weight.
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (target, support) in targets {
        if support == 0 {
            continue;
        }
        let c = confusion(pairs, target, task)?;
        acc += f1_from_counts(&c) * support as f64;
    }
    Ok(acc / total as f64)
}

fn f1_from_counts(c: &ConfusionCounts) -> f64 {
    let tp = c.true_positives as f64;
    let fp = c.false_positives as f64;
    let fneg = c.false_negatives as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// One scored (sample, variant) row with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub factor: String,
    pub group: String,
    pub gold: LabelValue,
    /// `None` when the response failed to parse (or was never obtained).
    pub pred: Option<LabelValue>,
}

/// Dump record: raw counts and rates for one (factor, label, group).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRateCell {
    pub factor: String,
    pub label: String,
    pub group: String,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fneg: u64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub support: u64,
}

/// Dump record: EO components for one (factor, label).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EoCell {
    pub factor: String,
    pub label: String,
    pub gap_tpr: Option<f64>,
    pub gap_fpr: Option<f64>,
    pub eo: Option<f64>,
    pub support: u64,
}

/// Per-factor F1 and EO, the shape behind the stratified results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMetrics {
    pub factor: String,
    pub f1: f64,
    pub eo: Option<f64>,
}

/// All metrics for one run, plus the dump cells to recompute them externally.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub f1_by_factor: BTreeMap<String, f64>,
    pub eo_by_factor: BTreeMap<String, Option<f64>>,
    pub f1_overall: f64,
    pub eo_overall: Option<f64>,
    pub group_cells: Vec<GroupRateCell>,
    pub eo_cells: Vec<EoCell>,
    pub balance_warnings: Vec<String>,
}

fn f1_pairs(
    rows: &[&PredictionRow],
    policy: FailurePolicy,
) -> Vec<(LabelValue, Option<LabelValue>)> {
    rows.iter()
        .filter(|r| !matches!(policy, FailurePolicy::Exclude) || r.pred.is_some())
        .map(|r| (r.gold.clone(), r.pred.clone()))
        .collect()
}

/// Per-factor F1 and EO over rows carrying variant provenance, in sorted
/// factor order.
pub fn stratify(rows: &[PredictionRow], task: &TaskKind, opts: &MetricOptions) -> Vec<FactorMetrics> {
    compute_run_metrics(rows, task, opts)
        .f1_by_factor
        .iter()
        .map(|(factor, f1)| FactorMetrics {
            factor: factor.clone(),
            f1: *f1,
            eo: compute_run_metrics(rows, task, opts).eo_by_factor[factor],
        })
        .collect()
}

/// Computes everything for one run in a single deterministic pass (factors,
/// labels, and groups are reduced in sorted order).
pub fn compute_run_metrics(
    rows: &[PredictionRow],
    task: &TaskKind,
    opts: &MetricOptions,
) -> RunMetrics {
    let mut by_factor: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for row in rows {
        by_factor.entry(row.factor.as_str()).or_default().push(row);
    }

    let mut f1_by_factor = BTreeMap::new();
    let mut eo_by_factor = BTreeMap::new();
    let mut group_cells = Vec::new();
    let mut eo_cells = Vec::new();
    let balance_warnings = check_group_balance(rows, task);

    for (factor, factor_rows) in &by_factor {
        let pairs = f1_pairs(factor_rows, opts.failure_policy);
        let f1 = weighted_f1(&pairs, task).unwrap_or(0.0);
        f1_by_factor.insert(factor.to_string(), f1);

        let mut groups: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
        for row in factor_rows {
            groups.entry(row.group.as_str()).or_default().push(row);
        }

        let targets: Vec<(String, Target<'_>)> = match task.shape {
            TaskShape::Binary => vec![(task.labels[1].name.clone(), Target::Class(1))],
            TaskShape::Multiclass => task
                .labels
                .iter()
                .enumerate()
                .map(|(i, def)| (def.name.clone(), Target::Class(i)))
                .collect(),
            TaskShape::Multilabel => task
                .labels
                .iter()
                .map(|def| (def.name.clone(), Target::Label(def.name.as_str())))
                .collect(),
        };

        let mut per_label: BTreeMap<String, Option<f64>> = BTreeMap::new();
        let mut supports: BTreeMap<String, u64> = BTreeMap::new();
        for (label, target) in &targets {
            let label_support = factor_rows
                .iter()
                .filter(|r| is_positive(&r.gold, *target))
                .count() as u64;
            supports.insert(label.clone(), label_support);

            let mut rates = Vec::new();
            for (group, group_rows) in &groups {
                // Rates only ever come from parsed responses.
                let parsed: Vec<(LabelValue, Option<LabelValue>)> = group_rows
                    .iter()
                    .filter(|r| r.pred.is_some())
                    .map(|r| (r.gold.clone(), r.pred.clone()))
                    .collect();
                let counts = if parsed.is_empty() {
                    ConfusionCounts::default()
                } else {
                    confusion(&parsed, *target, task).expect("non-empty pairs")
                };
                let group_support = group_rows
                    .iter()
                    .filter(|r| is_positive(&r.gold, *target))
                    .count() as u64;
                group_cells.push(GroupRateCell {
                    factor: factor.to_string(),
                    label: label.clone(),
                    group: group.to_string(),
                    tp: counts.true_positives,
                    fp: counts.false_positives,
                    tn: counts.true_negatives,
                    fneg: counts.false_negatives,
                    tpr: counts.tpr(),
                    fpr: counts.fpr(),
                    support: group_support,
                });
                rates.push(GroupRates {
                    factor: factor.to_string(),
                    group: group.to_string(),
                    label: label.clone(),
                    tpr: counts.tpr(),
                    fpr: counts.fpr(),
                    support: group_support,
                });
            }
            let (gap_tpr, gap_fpr) = eo_components(&rates);
            let eo = combine_components(gap_tpr, gap_fpr, opts.eo_combine);
            eo_cells.push(EoCell {
                factor: factor.to_string(),
                label: label.clone(),
                gap_tpr,
                gap_fpr,
                eo,
                support: label_support,
            });
            per_label.insert(label.clone(), eo);
        }
        let eo = eo_aggregate(&per_label, &supports).ok();
        eo_by_factor.insert(factor.to_string(), eo);
    }

    let f1_overall = if f1_by_factor.is_empty() {
        0.0
    } else {
        f1_by_factor.values().sum::<f64>() / f1_by_factor.len() as f64
    };
    let defined: Vec<f64> = eo_by_factor.values().filter_map(|v| *v).collect();
    let eo_overall = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    RunMetrics {
        f1_by_factor,
        eo_by_factor,
        f1_overall,
        eo_overall,
        group_cells,
        eo_cells,
        balance_warnings,
    }
}

/// Every category of a factor should carry the same sample set; enrichment
/// guarantees it, and this check catches externally assembled rows that
/// break it.
pub fn check_group_balance(rows: &[PredictionRow], task: &TaskKind) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut by_factor: BTreeMap<&str, BTreeMap<&str, (u64, u64)>> = BTreeMap::new();
    for row in rows {
        let gold_positives = match (&row.gold, task.shape) {
            (LabelValue::Class(c), _) => (*c == 1 || task.shape != TaskShape::Binary) as u64,
            (LabelValue::Multi(map), _) => map.values().map(|v| *v as u64).sum(),
        };
        let entry = by_factor
            .entry(row.factor.as_str())
            .or_default()
            .entry(row.group.as_str())
            .or_insert((0, 0));
        entry.0 += 1;
        entry.1 += gold_positives;
    }
    for (factor, groups) in by_factor {
        let mut iter = groups.iter();
        if let Some((_, first)) = iter.next() {
            if iter.clone().any(|(_, counts)| counts != first) {
                warnings.push(format!(
                    "factor '{factor}': groups differ in row count or gold support"
                ));
            }
        }
    }
    warnings
}

/// The aggregated audit result for one (model, dataset, strategy), averaged
/// over runs. F1 and EO are percentages (exactly 100x the internal rates),
/// each averaged over all social factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub model: String,
    pub dataset: String,
    pub strategy: String,
    pub f1_weighted: f64,
    pub f1_std: f64,
    pub eo_overall: Option<f64>,
    pub eo_std: Option<f64>,
    pub f1_by_factor: BTreeMap<String, f64>,
    pub eo_by_factor: BTreeMap<String, Option<f64>>,
    pub parse_failure_rate: f64,
    pub n_samples: usize,
    pub n_variants: usize,
    pub n_runs: u32,
    pub config_digest: String,
}

/// Report metadata supplied by the pipeline.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub model: String,
    pub dataset: String,
    pub strategy: String,
    pub parse_failure_rate: f64,
    pub n_samples: usize,
    pub n_variants: usize,
    pub config_digest: String,
}

impl FairnessReport {
    /// Averages per-run metrics into one report: per-factor means first, then
    /// the overall numbers as unweighted means of the defined per-factor
    /// entries, and standard deviations across runs alongside.
    pub fn from_runs(ctx: ReportContext, runs: &[RunMetrics]) -> Self {
        assert!(!runs.is_empty(), "at least one run required");
        let factors: Vec<String> = runs[0].f1_by_factor.keys().cloned().collect();

        let mut f1_by_factor = BTreeMap::new();
        let mut eo_by_factor = BTreeMap::new();
        for factor in &factors {
            let f1s: Vec<f64> = runs.iter().map(|r| r.f1_by_factor[factor]).collect();
            f1_by_factor.insert(
                factor.clone(),
                100.0 * (f1s.iter().sum::<f64>() / f1s.len() as f64),
            );
            let eos: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.eo_by_factor.get(factor).copied().flatten())
                .collect();
            let eo = if eos.is_empty() {
                None
            } else {
                Some(100.0 * (eos.iter().sum::<f64>() / eos.len() as f64))
            };
            eo_by_factor.insert(factor.clone(), eo);
        }

        let f1_weighted = if f1_by_factor.is_empty() {
            0.0
        } else {
            f1_by_factor.values().sum::<f64>() / f1_by_factor.len() as f64
        };
        let defined: Vec<f64> = eo_by_factor.values().filter_map(|v| *v).collect();
        let eo_overall = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };

        let run_f1s: Vec<f64> = runs.iter().map(|r| 100.0 * r.f1_overall).collect();
        let f1_std = population_std(&run_f1s);
        let run_eos: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.eo_overall.map(|v| 100.0 * v))
            .collect();
        let eo_std = if run_eos.is_empty() {
            None
        } else {
            Some(population_std(&run_eos))
        };

        FairnessReport {
            model: ctx.model,
            dataset: ctx.dataset,
            strategy: ctx.strategy,
            f1_weighted,
            f1_std,
            eo_overall,
            eo_std,
            f1_by_factor,
            eo_by_factor,
            parse_failure_rate: ctx.parse_failure_rate,
            n_samples: ctx.n_samples,
            n_variants: ctx.n_variants,
            n_runs: runs.len() as u32,
            config_digest: ctx.config_digest,
        }
    }
}
