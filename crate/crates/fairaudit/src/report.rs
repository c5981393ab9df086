//! Result tables, mitigation comparison views, and the error-annotation
//! distribution.
//!
//! Every table renders in two variants: delimited text (bit-stable, for
//! machines) and markdown (best F1 bolded, best EO underlined, for humans).
//! Rendering is a pure function of its inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::FairnessReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no reference (SP or CoT) run available for the mitigation comparison")]
    MissingReference,
    #[error("empty input")]
    EmptyInput,
    #[error("model '{0}' has no size class assigned")]
    UnknownModel(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: bad annotation record: {message}")]
    BadRecord { line: usize, message: String },
}

/// A rendered table in both output variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub tsv: String,
    pub markdown: String,
}

fn pct(v: f64) -> String {
    format!("{v:.1}")
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".to_string())
}

/// Renders the aggregated results: one row per (model, strategy), an F1/EO
/// column pair per dataset. In the markdown variant the best F1 per dataset
/// is bold and the best (lowest) EO underlined, ties broken by first
/// occurrence.
pub fn render_results_table(reports: &[FairnessReport]) -> RenderedTable {
    let mut datasets: Vec<String> = Vec::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        let key = (r.model.clone(), r.strategy.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let cell = |model: &str, strategy: &str, dataset: &str| {
        reports
            .iter()
            .find(|r| r.model == model && r.strategy == strategy && r.dataset == dataset)
    };

    // Best markers per dataset: argmax F1, argmin EO, first occurrence wins.
    let mut best_f1: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    let mut best_eo: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    for ds in &datasets {
        let mut f1_best: Option<(usize, f64)> = None;
        let mut eo_best: Option<(usize, f64)> = None;
        for (i, (model, strategy)) in rows.iter().enumerate() {
            if let Some(r) = cell(model, strategy, ds) {
                if f1_best.is_none_or(|(_, v)| r.f1_weighted > v) {
                    f1_best = Some((i, r.f1_weighted));
                }
                if let Some(eo) = r.eo_overall {
                    if eo_best.is_none_or(|(_, v)| eo < v) {
                        eo_best = Some((i, eo));
                    }
                }
            }
        }
        best_f1.insert(ds, f1_best.map(|(i, _)| i));
        best_eo.insert(ds, eo_best.map(|(i, _)| i));
    }

    let mut tsv = String::from("model\tstrategy");
    let mut md_header = String::from("| Model | Strategy |");
    let mut md_rule = String::from("| --- | --- |");
    for ds in &datasets {
        tsv.push_str(&format!("\t{ds} F1\t{ds} EO"));
        md_header.push_str(&format!(" {ds} F1 | {ds} EO |"));
        md_rule.push_str(" ---: | ---: |");
    }
    tsv.push('\n');
    let mut markdown = format!("{md_header}\n{md_rule}\n");

    for (i, (model, strategy)) in rows.iter().enumerate() {
        tsv.push_str(&format!("{model}\t{strategy}"));
        markdown.push_str(&format!("| {model} | {strategy} |"));
        for ds in &datasets {
            match cell(model, strategy, ds) {
                Some(r) => {
                    let f1 = pct(r.f1_weighted);
                    let eo = opt_pct(r.eo_overall);
                    tsv.push_str(&format!("\t{f1}\t{eo}"));
                    let f1_md = if best_f1[ds.as_str()] == Some(i) {
                        format!("**{f1}**")
                    } else {
                        f1.clone()
                    };
                    let eo_md = if best_eo[ds.as_str()] == Some(i) && r.eo_overall.is_some() {
                        format!("<u>{eo}</u>")
                    } else {
                        eo.clone()
                    };
                    markdown.push_str(&format!(" {f1_md} | {eo_md} |"));
                }
                None => {
                    tsv.push_str("\t-\t-");
                    markdown.push_str(" - | - |");
                }
            }
        }
        tsv.push('\n');
        markdown.push('\n');
    }
    RenderedTable { tsv, markdown }
}

/// One mitigation-table row: strategy name with its F1 and EO percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationRow {
    pub strategy: String,
    pub f1: f64,
    pub eo: f64,
}

/// Fairness-aware strategies compared against a reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationComparison {
    pub dataset: String,
    pub model: String,
    /// First row is the reference; the rest are mitigation strategies.
    pub rows: Vec<MitigationRow>,
}

/// Mitigation strategies in table order.
const MITIGATION_ORDER: [&str; 4] = ["FC", "EBR", "RP", "CC"];

impl MitigationComparison {
    pub fn new(
        dataset: &str,
        model: &str,
        rows: Vec<MitigationRow>,
    ) -> Result<Self, ReportError> {
        if rows.first().map(|r| r.strategy.as_str()) != Some("Ref") {
            return Err(ReportError::MissingReference);
        }
        if rows.iter().filter(|r| r.strategy == "Ref").count() != 1 {
            return Err(ReportError::MissingReference);
        }
        Ok(MitigationComparison {
            dataset: dataset.to_string(),
            model: model.to_string(),
            rows,
        })
    }

    /// Builds the comparison from one (dataset, model)'s reports. The
    /// reference is the chain-of-thought run when present, else the standard
    /// run; strategies without a defined EO are skipped.
    pub fn from_reports(
        dataset: &str,
        model: &str,
        reports: &[FairnessReport],
    ) -> Result<Self, ReportError> {
        let find = |strategy: &str| {
            reports.iter().find(|r| {
                r.dataset == dataset && r.model == model && r.strategy == strategy
            })
        };
        let reference = find("CoT")
            .or_else(|| find("SP"))
            .ok_or(ReportError::MissingReference)?;
        let ref_eo = reference.eo_overall.ok_or(ReportError::MissingReference)?;
        let mut rows = vec![MitigationRow {
            strategy: "Ref".into(),
            f1: reference.f1_weighted,
            eo: ref_eo,
        }];
        for strategy in MITIGATION_ORDER {
            if let Some(r) = find(strategy) {
                if let Some(eo) = r.eo_overall {
                    rows.push(MitigationRow {
                        strategy: strategy.into(),
                        f1: r.f1_weighted,
                        eo,
                    });
                }
            }
        }
        MitigationComparison::new(dataset, model, rows)
    }

    pub fn reference(&self) -> &MitigationRow {
        &self.rows[0]
    }

    /// Relative fairness improvement versus the reference:
    /// (EO_ref - EO_strategy) / EO_ref. `None` when the reference EO is 0.
    pub fn improvement(&self, row: &MitigationRow) -> Option<f64> {
        let ref_eo = self.reference().eo;
        (ref_eo != 0.0).then(|| (ref_eo - row.eo) / ref_eo)
    }
}

/// Renders a mitigation comparison with per-row deltas against the reference
/// and the relative EO improvement column.
pub fn render_mitigation(cmp: &MitigationComparison) -> Result<RenderedTable, ReportError> {
    if cmp.rows.first().map(|r| r.strategy.as_str()) != Some("Ref") {
        return Err(ReportError::MissingReference);
    }
    let reference = cmp.reference().clone();
    let mut tsv = format!(
        "# dataset={} model={}\nstrategy\tf1\teo\tdelta_f1\tdelta_eo\teo_improvement\n",
        cmp.dataset, cmp.model
    );
    let mut markdown = format!(
        "**{} / {}**\n\n| Strategy | F1 | EO | ΔF1 | ΔEO | EO improvement |\n| --- | ---: | ---: | ---: | ---: | ---: |\n",
        cmp.dataset, cmp.model
    );
    for row in &cmp.rows {
        let delta_f1 = row.f1 - reference.f1;
        let delta_eo = row.eo - reference.eo;
        let improvement = cmp
            .improvement(row)
            .map(|v| format!("{:.1}%", 100.0 * v))
            .unwrap_or_else(|| "n/a".to_string());
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.strategy,
            pct(row.f1),
            pct(row.eo),
            pct(delta_f1),
            pct(delta_eo),
            improvement
        ));
        let (name, f1, eo) = if row.strategy == "Ref" {
            // The reference row is italicized, as in the published tables.
            (
                format!("*{}*", row.strategy),
                format!("*{}*", pct(row.f1)),
                format!("*{}*", pct(row.eo)),
            )
        } else {
            (row.strategy.clone(), pct(row.f1), pct(row.eo))
        };
        markdown.push_str(&format!(
            "| {name} | {f1} | {eo} | {} | {} | {improvement} |\n",
            pct(delta_f1),
            pct(delta_eo)
        ));
    }
    Ok(RenderedTable { tsv, markdown })
}

/// The closed set of error types used in manual annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorType {
    #[serde(alias = "Misinterpretation")]
    Misinterpretation,
    #[serde(rename = "SentimentMisjudgment", alias = "Sentiment Misjudgment")]
    SentimentMisjudgment,
    #[serde(alias = "Overinterpretation")]
    Overinterpretation,
    #[serde(alias = "Ambiguity")]
    Ambiguity,
    #[serde(rename = "DemographicBias", alias = "Demographic Bias")]
    DemographicBias,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::Misinterpretation,
        ErrorType::SentimentMisjudgment,
        ErrorType::Overinterpretation,
        ErrorType::Ambiguity,
        ErrorType::DemographicBias,
    ];
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorType::Misinterpretation => "Misinterpretation",
            ErrorType::SentimentMisjudgment => "Sentiment Misjudgment",
            ErrorType::Overinterpretation => "Overinterpretation",
            ErrorType::Ambiguity => "Ambiguity",
            ErrorType::DemographicBias => "Demographic Bias",
        };
        f.write_str(name)
    }
}

/// Model size class for the error-distribution table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    S,
    M,
    L,
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::S => "S",
            SizeClass::M => "M",
            SizeClass::L => "L",
        })
    }
}

/// One manual error annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTag {
    pub sample_id: String,
    pub variant: String,
    pub model: String,
    pub tag: ErrorType,
    pub annotator: String,
    #[serde(default)]
    pub note: String,
}

/// Loads annotations from a JSONL file, one tag record per line.
pub fn load_error_tags(path: &Path) -> Result<Vec<ErrorTag>, ReportError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tags = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tag: ErrorTag = serde_json::from_str(line).map_err(|e| ReportError::BadRecord {
            line: idx + 1,
            message: e.to_string(),
        })?;
        tags.push(tag);
    }
    Ok(tags)
}

/// Percentage of each error type within each size class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorDistribution {
    /// Size classes present, in S < M < L order.
    pub classes: Vec<SizeClass>,
    /// percentages[tag][class], over `ErrorType::ALL` and `classes`.
    pub percentages: BTreeMap<ErrorType, BTreeMap<SizeClass, f64>>,
    pub totals: BTreeMap<SizeClass, u64>,
}

/// Computes the error-type distribution per model size class.
pub fn error_distribution(
    tags: &[ErrorTag],
    size_class_of: &BTreeMap<String, SizeClass>,
) -> Result<ErrorDistribution, ReportError> {
    if tags.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut counts: BTreeMap<SizeClass, BTreeMap<ErrorType, u64>> = BTreeMap::new();
    for tag in tags {
        let class = size_class_of
            .get(&tag.model)
            .ok_or_else(|| ReportError::UnknownModel(tag.model.clone()))?;
        *counts
            .entry(*class)
            .or_default()
            .entry(tag.tag)
            .or_insert(0) += 1;
    }
    let classes: Vec<SizeClass> = counts.keys().copied().collect();
    let totals: BTreeMap<SizeClass, u64> = counts
        .iter()
        .map(|(c, by_tag)| (*c, by_tag.values().sum()))
        .collect();
    let mut percentages: BTreeMap<ErrorType, BTreeMap<SizeClass, f64>> = BTreeMap::new();
    for tag in ErrorType::ALL {
        let mut row = BTreeMap::new();
        for class in &classes {
            let count = counts[class].get(&tag).copied().unwrap_or(0);
            row.insert(*class, 100.0 * count as f64 / totals[class] as f64);
        }
        percentages.insert(tag, row);
    }
    Ok(ErrorDistribution {
        classes,
        percentages,
        totals,
    })
}

/// Renders the error distribution with one column per size class.
pub fn render_error_distribution(dist: &ErrorDistribution) -> RenderedTable {
    let mut tsv = String::from("error_type");
    let mut md_header = String::from("| Error Type |");
    let mut md_rule = String::from("| --- |");
    for class in &dist.classes {
        tsv.push_str(&format!("\t{class} (%)"));
        md_header.push_str(&format!(" {class} (%) |"));
        md_rule.push_str(" ---: |");
    }
    tsv.push('\n');
    let mut markdown = format!("{md_header}\n{md_rule}\n");
    for tag in ErrorType::ALL {
        tsv.push_str(&tag.to_string());
        markdown.push_str(&format!("| {tag} |"));
        for class in &dist.classes {
            let value = dist.percentages[&tag][class];
            tsv.push_str(&format!("\t{}", pct(value)));
            markdown.push_str(&format!(" {} |", pct(value)));
        }
        tsv.push('\n');
        markdown.push('\n');
    }
    RenderedTable { tsv, markdown }
}
