//! Dataset ingestion, task specs for the eight supported benchmarks, and the
//! seeded subsampling protocol.
//!
//! Input files are JSON Lines, one record per line:
//!
//! ```text
//! {"id": "d-0001", "text": "...", "label": 1}                  // binary / multiclass
//! {"id": "i-0001", "text": "...", "labels": {"TBe": 1, "PBu": 0}}  // multilabel
//! ```
//!
//! No dataset content is bundled; `builtin_specs` only carries task shape,
//! label sets, and sampling defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{LabelDef, TaskKind, TaskShape};

/// Gold label (or a parsed prediction) for any task shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    /// Class index for binary / multiclass tasks.
    Class(usize),
    /// Per-label 0/1 assignments for multilabel tasks, keyed by canonical
    /// label name.
    Multi(BTreeMap<String, u8>),
}

/// One labeled test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub gold: LabelValue,
}

/// How many test rows an audit draws from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    /// Use every available row, order preserved.
    All,
    /// Draw exactly this many rows uniformly without replacement.
    N(usize),
}

impl fmt::Display for SampleCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleCount::All => write!(f, "all"),
            SampleCount::N(n) => write!(f, "{n}"),
        }
    }
}

/// A dataset plus the protocol for auditing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub task: TaskKind,
    /// Path to the JSONL file; builtins ship without one (data is
    /// user-supplied).
    pub source_path: Option<PathBuf>,
    pub test_subsample: SampleCount,
    pub runs: u32,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: unknown label {label}")]
    UnknownLabel { line: usize, label: String },
    #[error("requested {requested} samples but only {available} available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("dataset '{0}' has no source path configured")]
    MissingPath(String),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    label: Option<u64>,
    #[serde(default)]
    labels: Option<BTreeMap<String, u8>>,
}

/// Loads and validates every record of `spec`'s source file.
///
/// Rows with unknown labels or empty text are rejected with the offending
/// 1-based line number. An empty file is valid and yields an empty list.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>, DatasetError> {
    let path = spec
        .source_path
        .as_ref()
        .ok_or_else(|| DatasetError::MissingPath(spec.name.clone()))?;
    load_samples(path, &spec.task)
}

/// Loads a JSONL sample file against a task definition.
pub fn load_samples(path: &Path, task: &TaskKind) -> Result<Vec<Sample>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            line: line_no,
            message: format!("bad record: {e}"),
        })?;
        let sample = validate_record(record, task, line_no)?;
        if !seen_ids.insert(sample.id.clone()) {
            return Err(DatasetError::Schema {
                line: line_no,
                message: format!("duplicate sample id '{}'", sample.id),
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        log::warn!("{}: no samples loaded (empty file)", path.display());
    }
    Ok(samples)
}

fn validate_record(
    record: RawRecord,
    task: &TaskKind,
    line: usize,
) -> Result<Sample, DatasetError> {
    if record.id.trim().is_empty() {
        return Err(DatasetError::Schema {
            line,
            message: "empty id".into(),
        });
    }
    if record.text.trim().is_empty() {
        return Err(DatasetError::Schema {
            line,
            message: "empty text".into(),
        });
    }
    let gold = match task.shape {
        TaskShape::Binary | TaskShape::Multiclass => {
            let value = record.label.ok_or_else(|| DatasetError::Schema {
                line,
                message: "missing integer 'label' field".into(),
            })?;
            if record.labels.is_some() {
                return Err(DatasetError::Schema {
                    line,
                    message: "unexpected 'labels' map on a single-label task".into(),
                });
            }
            let idx = value as usize;
            if idx >= task.labels.len() {
                return Err(DatasetError::UnknownLabel {
                    line,
                    label: value.to_string(),
                });
            }
            LabelValue::Class(idx)
        }
        TaskShape::Multilabel => {
            let map = record.labels.ok_or_else(|| DatasetError::Schema {
                line,
                message: "missing 'labels' map field".into(),
            })?;
            if record.label.is_some() {
                return Err(DatasetError::Schema {
                    line,
                    message: "unexpected integer 'label' on a multilabel task".into(),
                });
            }
            let mut gold = BTreeMap::new();
            for (name, value) in map {
                let canonical = task
                    .resolve_label(&name)
                    .ok_or_else(|| DatasetError::UnknownLabel {
                        line,
                        label: name.clone(),
                    })?;
                if value > 1 {
                    return Err(DatasetError::Schema {
                        line,
                        message: format!("label '{name}' must be 0 or 1, got {value}"),
                    });
                }
                gold.insert(task.labels[canonical].name.clone(), value);
            }
            // Absent labels default to 0 so sources may list positives only.
            for def in &task.labels {
                gold.entry(def.name.clone()).or_insert(0);
            }
            LabelValue::Multi(gold)
        }
    };
    Ok(Sample {
        id: record.id,
        text: record.text,
        gold,
    })
}

/// Draws `n` samples uniformly without replacement, deterministically for a
/// given seed. `All` preserves the input order untouched.
pub fn subsample(
    samples: &[Sample],
    n: SampleCount,
    seed: u64,
) -> Result<Vec<Sample>, DatasetError> {
    let n = match n {
        SampleCount::All => return Ok(samples.to_vec()),
        SampleCount::N(n) => n,
    };
    if n > samples.len() {
        return Err(DatasetError::NotEnoughSamples {
            requested: n,
            available: samples.len(),
        });
    }
    // Partial Fisher-Yates over an index vector; hand-rolled so the draw is
    // stable across library upgrades.
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(n);
    Ok(indices.into_iter().map(|i| samples[i].clone()).collect())
}

fn labels(names: &[&str]) -> Vec<LabelDef> {
    names.iter().map(|n| LabelDef::new(n)).collect()
}

/// Preconfigured specs for the eight supported benchmarks. Source paths are
/// left unset; callers point them at local copies of the data.
pub fn builtin_specs() -> Vec<DatasetSpec> {
    let default = |name: &str, task: TaskKind| DatasetSpec {
        name: name.to_string(),
        task,
        source_path: None,
        test_subsample: SampleCount::N(200),
        runs: 3,
        seed: 42,
    };
    let mut specs = vec![
        default(
            "DepEmail",
            TaskKind::new(TaskShape::Binary, labels(&["Non-depression", "Depression"])),
        ),
        default(
            "Dreaddit",
            TaskKind::new(TaskShape::Binary, labels(&["Non-stress", "Stress"])),
        ),
        default(
            "C-SSRS",
            TaskKind::new(
                TaskShape::Multiclass,
                labels(&["Ideation", "Supportive", "Indicator", "Attempt", "Behavior"]),
            ),
        ),
        default(
            "CAMS",
            TaskKind::new(
                TaskShape::Multiclass,
                labels(&[
                    "No Reason",
                    "Bias or Abuse",
                    "Jobs and Careers",
                    "Medication",
                    "Relationship",
                    "Alienation",
                ]),
            ),
        ),
        default(
            "SWMH",
            TaskKind::new(
                TaskShape::Multiclass,
                labels(&["Anxiety", "Bipolar", "Depression", "SuicideWatch", "Offmychest"]),
            ),
        ),
        default(
            "IRF",
            TaskKind::new(
                TaskShape::Multilabel,
                vec![
                    LabelDef::with_display("TBe", "Thwarted Belongingness"),
                    LabelDef::with_display("PBu", "Perceived Burdensomeness"),
                ],
            ),
        ),
        default(
            "MultiWD",
            TaskKind::new(
                TaskShape::Multilabel,
                labels(&[
                    "Spiritual",
                    "Physical",
                    "Intellectual",
                    "Social",
                    "Vocational",
                    "Emotional",
                ]),
            ),
        ),
        default(
            "SAD",
            TaskKind::new(
                TaskShape::Multilabel,
                labels(&[
                    "Finance",
                    "Family",
                    "Health",
                    "Emotion",
                    "Work",
                    "Social Relation",
                    "School",
                    "Decision",
                    "Other",
                ]),
            ),
        ),
    ];
    // C-SSRS ships a 100-row test split; the audit uses all of it.
    for spec in &mut specs {
        if spec.name == "C-SSRS" {
            spec.test_subsample = SampleCount::All;
        }
    }
    specs
}

/// Looks up a builtin spec by case-insensitive name ("c-ssrs" and "cssrs"
/// both match).
pub fn builtin_spec(name: &str) -> Option<DatasetSpec> {
    let wanted = name.to_ascii_lowercase().replace('-', "");
    builtin_specs()
        .into_iter()
        .find(|s| s.name.to_ascii_lowercase().replace('-', "") == wanted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn binary_task() -> TaskKind {
        TaskKind::new(TaskShape::Binary, labels(&["Non-stress", "Stress"]))
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn synthetic_rows(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| {
                format!(
                    r#"{{"id": "s{i}", "text": "synthetic post number {i}", "label": {}}}"#,
                    i % 2
                )
            })
            .collect()
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_jsonl(&synthetic_rows(715));
        let task = binary_task();
        let samples = load_samples(f.path(), &task).unwrap();
        assert_eq!(samples.len(), 715);
        assert_eq!(samples[3].gold, LabelValue::Class(1));
    }

    #[test]
    fn rejects_out_of_range_label_with_line_number() {
        let mut rows = synthetic_rows(4);
        rows[2] = r#"{"id": "bad", "text": "post", "label": 9}"#.to_string();
        let f = write_jsonl(&rows);
        let err = load_samples(f.path(), &binary_task()).unwrap_err();
        match err {
            DatasetError::UnknownLabel { line, label } => {
                assert_eq!(line, 3);
                assert_eq!(label, "9");
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_text_and_duplicate_ids() {
        let f = write_jsonl(&[r#"{"id": "a", "text": "   ", "label": 0}"#.to_string()]);
        assert!(matches!(
            load_samples(f.path(), &binary_task()),
            Err(DatasetError::Schema { line: 1, .. })
        ));

        let f = write_jsonl(&[
            r#"{"id": "a", "text": "x", "label": 0}"#.to_string(),
            r#"{"id": "a", "text": "y", "label": 1}"#.to_string(),
        ]);
        assert!(matches!(
            load_samples(f.path(), &binary_task()),
            Err(DatasetError::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn empty_file_is_valid() {
        let f = write_jsonl(&[]);
        let samples = load_samples(f.path(), &binary_task()).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn multilabel_records_accept_partial_maps_and_aliases() {
        let spec = builtin_spec("irf").unwrap();
        let f = write_jsonl(&[
            r#"{"id": "a", "text": "x", "labels": {"TBe": 1}}"#.to_string(),
            r#"{"id": "b", "text": "y", "labels": {"Thwarted Belongingness": 0, "PBu": 1}}"#
                .to_string(),
        ]);
        let samples = load_samples(f.path(), &spec.task).unwrap();
        let expect = |pairs: &[(&str, u8)]| {
            LabelValue::Multi(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
        };
        assert_eq!(samples[0].gold, expect(&[("TBe", 1), ("PBu", 0)]));
        assert_eq!(samples[1].gold, expect(&[("TBe", 0), ("PBu", 1)]));
    }

    #[test]
    fn multilabel_rejects_unknown_label_name() {
        let spec = builtin_spec("irf").unwrap();
        let f = write_jsonl(&[r#"{"id": "a", "text": "x", "labels": {"Bogus": 1}}"#.to_string()]);
        assert!(matches!(
            load_samples(f.path(), &spec.task),
            Err(DatasetError::UnknownLabel { line: 1, .. })
        ));
    }

    fn make_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                text: format!("text {i}"),
                gold: LabelValue::Class(i % 2),
            })
            .collect()
    }

    #[test]
    fn subsample_is_deterministic_per_seed() {
        let samples = make_samples(1000);
        let a = subsample(&samples, SampleCount::N(200), 7).unwrap();
        let b = subsample(&samples, SampleCount::N(200), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        let c = subsample(&samples, SampleCount::N(200), 8).unwrap();
        assert_ne!(a, c);
        // Without replacement: ids are unique.
        let ids: std::collections::HashSet<_> = a.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn subsample_all_preserves_order() {
        let samples = make_samples(100);
        let out = subsample(&samples, SampleCount::All, 99).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn subsample_rejects_oversized_request() {
        let samples = make_samples(50);
        assert!(matches!(
            subsample(&samples, SampleCount::N(200), 1),
            Err(DatasetError::NotEnoughSamples {
                requested: 200,
                available: 50
            })
        ));
    }

    #[test]
    fn builtin_specs_match_published_label_sets() {
        let specs = builtin_specs();
        assert_eq!(specs.len(), 8);
        let by_name = |n: &str| builtin_spec(n).unwrap();

        let counts: Vec<(String, usize)> = specs
            .iter()
            .map(|s| (s.name.clone(), s.task.labels.len()))
            .collect();
        let expected = [
            ("DepEmail", 2),
            ("Dreaddit", 2),
            ("C-SSRS", 5),
            ("CAMS", 6),
            ("SWMH", 5),
            ("IRF", 2),
            ("MultiWD", 6),
            ("SAD", 9),
        ];
        for ((name, count), (exp_name, exp_count)) in counts.iter().zip(expected.iter()) {
            assert_eq!(name, exp_name);
            assert_eq!(count, exp_count, "{name} label count");
        }

        let cams = by_name("cams");
        let cams_names: Vec<_> = cams.task.labels.iter().map(|l| l.name.as_str()).collect();
        assert!(cams_names.contains(&"Alienation"));
        assert!(cams_names.contains(&"No Reason"));

        let sad = by_name("sad");
        assert!(sad.task.labels.iter().any(|l| l.name == "Other"));

        let irf = by_name("irf");
        let irf_names: Vec<_> = irf.task.labels.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(irf_names, ["TBe", "PBu"]);

        let cssrs = by_name("c-ssrs");
        assert_eq!(cssrs.test_subsample, SampleCount::All);
        for spec in &specs {
            if spec.name != "C-SSRS" {
                assert_eq!(spec.test_subsample, SampleCount::N(200));
            }
            assert_eq!(spec.runs, 3);
        }
    }
}
