//! Deterministic mock backend with planted per-group bias.
//!
//! The mock answers in the same format the prompts request, with the
//! prediction drawn from per-group TPR/FPR rates: the base rates shifted by
//! the group's configured deltas. Decision draws are keyed on the sample (not
//! the variant), so every variant of a sample shares its random numbers;
//! group-rate differences measured downstream then reflect planted deltas
//! exactly instead of draw noise, and a zero-delta profile yields identical
//! predictions across groups.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendResponse;
use crate::datasets::LabelValue;
use crate::prompt::{TaskKind, TaskShape};
use crate::taxonomy::EnrichedSample;

/// TPR/FPR offsets for one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateDelta {
    #[serde(default)]
    pub tpr: f64,
    #[serde(default)]
    pub fpr: f64,
}

/// The planted bias profile: base rates plus per-variant-label deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBiasProfile {
    pub base_tpr: f64,
    pub base_fpr: f64,
    #[serde(default)]
    pub group_deltas: BTreeMap<String, RateDelta>,
    pub seed: u64,
}

impl MockBiasProfile {
    /// Always predicts the gold label: F1 = 1 and EO = 0 downstream.
    pub fn perfect(seed: u64) -> Self {
        MockBiasProfile {
            base_tpr: 1.0,
            base_fpr: 0.0,
            group_deltas: BTreeMap::new(),
            seed,
        }
    }

    /// Plausible-looking unbiased classifier.
    pub fn unbiased(base_tpr: f64, base_fpr: f64, seed: u64) -> Self {
        MockBiasProfile {
            base_tpr,
            base_fpr,
            group_deltas: BTreeMap::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, rate) in [("base_tpr", self.base_tpr), ("base_fpr", self.base_fpr)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(format!("{name} must lie in [0, 1], got {rate}"));
            }
        }
        Ok(())
    }

    /// Same profile with a different seed (used to salt repeated runs).
    pub fn with_seed(&self, seed: u64) -> Self {
        MockBiasProfile {
            seed,
            ..self.clone()
        }
    }

    /// Effective (TPR, FPR) for a variant label, clamped to [0, 1].
    pub fn rates_for(&self, group: &str) -> (f64, f64) {
        let delta = self.group_deltas.get(group).copied().unwrap_or_default();
        (
            (self.base_tpr + delta.tpr).clamp(0.0, 1.0),
            (self.base_fpr + delta.fpr).clamp(0.0, 1.0),
        )
    }
}

/// Uniform draw in [0, 1) from a hash of the given parts and seed.
fn unit_draw(parts: &[&str], seed: u64) -> f64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// The label the mock plants for this (sample, variant) under `profile`.
/// Pure function of (sample id, variant label, profile).
pub fn mock_predict(
    enriched: &EnrichedSample,
    task: &TaskKind,
    profile: &MockBiasProfile,
) -> LabelValue {
    let (tpr, fpr) = profile.rates_for(&enriched.variant.label);
    let sid = enriched.sample_id.as_str();
    match (&enriched.gold, task.shape) {
        (LabelValue::Class(gold), TaskShape::Binary) => {
            let u = unit_draw(&["decision", sid], profile.seed);
            let predicted_positive = if *gold == 1 { u < tpr } else { u < fpr };
            LabelValue::Class(predicted_positive as usize)
        }
        (LabelValue::Class(gold), _) => {
            let u = unit_draw(&["decision", sid], profile.seed);
            if u < tpr {
                LabelValue::Class(*gold)
            } else {
                // A wrong class, chosen by a sample-keyed draw.
                let w = unit_draw(&["wrong-class", sid], profile.seed);
                let others = task.labels.len() - 1;
                let mut index = (w * others as f64) as usize;
                if index >= others {
                    index = others - 1;
                }
                if index >= *gold {
                    index += 1;
                }
                LabelValue::Class(index)
            }
        }
        (LabelValue::Multi(gold), _) => {
            let mut predicted = BTreeMap::new();
            for def in &task.labels {
                let gold_pos = gold.get(&def.name).copied().unwrap_or(0) == 1;
                let u = unit_draw(&["multilabel", sid, &def.name], profile.seed);
                let pred = if gold_pos { u < tpr } else { u < fpr };
                predicted.insert(def.name.clone(), pred as u8);
            }
            LabelValue::Multi(predicted)
        }
    }
}

/// Emits a well-formed answer block carrying the planted prediction, in the
/// same format a live model is instructed to use.
pub fn mock_complete(
    enriched: &EnrichedSample,
    task: &TaskKind,
    profile: &MockBiasProfile,
) -> BackendResponse {
    let prediction = mock_predict(enriched, task, profile);
    let text = match &prediction {
        LabelValue::Class(index) => {
            let name = task.labels[*index].display_name();
            format!(
                "OUTPUT: {index} ({name})\nREASONING: 1. Synthetic rationale generated for \
                 pipeline validation."
            )
        }
        LabelValue::Multi(map) => task
            .labels
            .iter()
            .enumerate()
            .map(|(i, def)| {
                let value = map.get(&def.name).copied().unwrap_or(0);
                let word = if value == 1 { "Yes" } else { "No" };
                format!(
                    "{}: {value} ({word})\nREASONING: {}. Synthetic rationale generated for \
                     pipeline validation.",
                    def.display_name(),
                    i + 1
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
    };
    BackendResponse {
        text,
        latency: Duration::ZERO,
        from_cache: false,
        attempt_count: 1,
    }
}

/// Backend wrapper holding a profile.
pub struct MockBackend {
    pub profile: MockBiasProfile,
}

impl MockBackend {
    pub fn new(profile: MockBiasProfile) -> Self {
        MockBackend { profile }
    }

    pub fn complete(&self, enriched: &EnrichedSample, task: &TaskKind) -> BackendResponse {
        mock_complete(enriched, task, &self.profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_response;
    use crate::prompt::LabelDef;
    use crate::taxonomy::{build_taxonomy, enrich, InjectionMode};
    use crate::Sample;

    fn binary_task() -> TaskKind {
        TaskKind::new(
            TaskShape::Binary,
            vec![LabelDef::new("Non-stress"), LabelDef::new("Stress")],
        )
    }

    fn multiclass_task() -> TaskKind {
        TaskKind::new(
            TaskShape::Multiclass,
            vec![
                LabelDef::new("Ideation"),
                LabelDef::new("Supportive"),
                LabelDef::new("Indicator"),
                LabelDef::new("Attempt"),
                LabelDef::new("Behavior"),
            ],
        )
    }

    fn irf_task() -> TaskKind {
        TaskKind::new(
            TaskShape::Multilabel,
            vec![
                LabelDef::with_display("TBe", "Thwarted Belongingness"),
                LabelDef::with_display("PBu", "Perceived Burdensomeness"),
            ],
        )
    }

    fn samples(task: &TaskKind, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let gold = match task.shape {
                    TaskShape::Binary => LabelValue::Class(i % 2),
                    TaskShape::Multiclass => LabelValue::Class(i % task.labels.len()),
                    TaskShape::Multilabel => LabelValue::Multi(
                        task.labels
                            .iter()
                            .enumerate()
                            .map(|(j, def)| (def.name.clone(), ((i + j) % 2) as u8))
                            .collect(),
                    ),
                };
                Sample {
                    id: format!("s{i}"),
                    text: format!("synthetic post {i}"),
                    gold,
                }
            })
            .collect()
    }

    #[test]
    fn mock_is_a_pure_function_of_its_inputs() {
        let tax = build_taxonomy();
        let task = binary_task();
        let profile = MockBiasProfile::unbiased(0.8, 0.2, 7);
        let enriched = enrich(&samples(&task, 3)[0], &tax, InjectionMode::PromptInstruction)
            .unwrap();
        for e in &enriched {
            assert_eq!(
                mock_complete(e, &task, &profile),
                mock_complete(e, &task, &profile)
            );
        }
        let reseeded = profile.with_seed(8);
        assert!(enriched
            .iter()
            .any(|e| mock_complete(e, &task, &profile) != mock_complete(e, &task, &reseeded)));
    }

    #[test]
    fn perfect_profile_reproduces_gold() {
        let tax = build_taxonomy();
        let profile = MockBiasProfile::perfect(3);
        for task in [binary_task(), multiclass_task(), irf_task()] {
            for sample in samples(&task, 10) {
                for e in enrich(&sample, &tax, InjectionMode::PromptInstruction).unwrap() {
                    assert_eq!(mock_predict(&e, &task, &profile), e.gold);
                }
            }
        }
    }

    #[test]
    fn zero_deltas_give_identical_predictions_across_groups() {
        let tax = build_taxonomy();
        let profile = MockBiasProfile::unbiased(0.7, 0.3, 21);
        for task in [binary_task(), multiclass_task(), irf_task()] {
            for sample in samples(&task, 8) {
                let enriched = enrich(&sample, &tax, InjectionMode::PromptInstruction).unwrap();
                let first = mock_predict(&enriched[0], &task, &profile);
                for e in &enriched {
                    assert_eq!(mock_predict(e, &task, &profile), first);
                }
            }
        }
    }

    #[test]
    fn planted_fpr_delta_converges_to_its_analytic_value() {
        // Monte-Carlo convergence: with a +0.3 FPR delta on "female", the
        // measured female FPR over many gold-negative samples approaches
        // base_fpr + 0.3 while the male FPR stays at base_fpr.
        let tax = build_taxonomy();
        let task = binary_task();
        let mut profile = MockBiasProfile::unbiased(0.9, 0.1, 2024);
        profile
            .group_deltas
            .insert("female".into(), RateDelta { tpr: 0.0, fpr: 0.3 });

        let mut female_fp = 0u32;
        let mut male_fp = 0u32;
        let mut negatives = 0u32;
        for sample in samples(&task, 4000) {
            if sample.gold != LabelValue::Class(0) {
                continue;
            }
            negatives += 1;
            for label in ["female", "male"] {
                let e = EnrichedSample {
                    sample_id: sample.id.clone(),
                    variant: tax.find_variant(label).unwrap().clone(),
                    original_text: sample.text.clone(),
                    gold: sample.gold.clone(),
                    injection_mode: InjectionMode::PromptInstruction,
                };
                if mock_predict(&e, &task, &profile) == LabelValue::Class(1) {
                    if label == "female" {
                        female_fp += 1;
                    } else {
                        male_fp += 1;
                    }
                }
            }
        }
        let female_fpr = f64::from(female_fp) / f64::from(negatives);
        let male_fpr = f64::from(male_fp) / f64::from(negatives);
        assert!((female_fpr - 0.4).abs() < 0.03, "female FPR {female_fpr}");
        assert!((male_fpr - 0.1).abs() < 0.03, "male FPR {male_fpr}");
    }

    #[test]
    fn rates_clamp_to_the_unit_interval() {
        let mut profile = MockBiasProfile::unbiased(0.9, 0.9, 1);
        profile
            .group_deltas
            .insert("female".into(), RateDelta { tpr: 0.5, fpr: 0.5 });
        assert_eq!(profile.rates_for("female"), (1.0, 1.0));
        assert_eq!(profile.rates_for("male"), (0.9, 0.9));
        assert!(MockBiasProfile::unbiased(1.3, 0.0, 0).validate().is_err());
    }

    #[test]
    fn every_mock_answer_parses_and_recovers_the_planted_label() {
        let tax = build_taxonomy();
        let profile = MockBiasProfile::unbiased(0.6, 0.4, 99);
        for task in [binary_task(), multiclass_task(), irf_task()] {
            for sample in samples(&task, 6) {
                for e in enrich(&sample, &tax, InjectionMode::PromptInstruction).unwrap() {
                    let response = mock_complete(&e, &task, &profile);
                    let parsed = parse_response(&response.text, &task);
                    assert!(parsed.is_ok(), "unparsable: {}", response.text);
                    assert_eq!(
                        parsed.to_label_value().unwrap(),
                        mock_predict(&e, &task, &profile)
                    );
                }
            }
        }
    }
}
