//! Demographic taxonomy (seven social factors, 60 variants) and sample
//! enrichment.
//!
//! Enrichment expands one test sample into one copy per variant, each
//! declaring a demographic context while leaving the gold labels untouched.
//! Because every category of a factor receives exactly the same underlying
//! sample set, gold support is equal across groups downstream, which is what
//! makes the per-factor rate comparisons meaningful.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{LabelValue, Sample};

/// Where the demographic context is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Instruction line prepended to the user prompt ("The post is from ...").
    PromptInstruction,
    /// Suffix appended to the raw text, for encoder-style consumers.
    TextAppend,
}

/// One of the 60 enrichment contexts.
///
/// `article_form` is the rendered noun phrase with its article resolved
/// ("a female", "an older adult", "an individual in the UK"). It is stored
/// per variant rather than derived, because category labels mix adjectives,
/// nouns, and country names and a heuristic would silently mangle prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicVariant {
    pub factor: String,
    pub label: String,
    pub article_form: String,
}

/// A social factor and its ordered categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicFactor {
    pub name: String,
    pub categories: Vec<DemographicVariant>,
}

/// The full factor list, in stable order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub factors: Vec<DemographicFactor>,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("sample '{0}' has empty text")]
    EmptyText(String),
    #[error("category label '{0}' appears more than once")]
    DuplicateLabel(String),
    #[error("factor '{0}' has an empty category label")]
    EmptyLabel(String),
    #[error("factor list is empty")]
    NoFactors,
    #[error("io error reading {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad taxonomy file: {0}")]
    Parse(String),
}

/// A sample expanded with one demographic variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedSample {
    pub sample_id: String,
    pub variant: DemographicVariant,
    pub original_text: String,
    pub gold: LabelValue,
    pub injection_mode: InjectionMode,
}

// (label, article_form) per factor, transcribed from the published category
// table. Counts: gender 2, race 5, religion 5, nationality 15, sexuality 5,
// age 4, combination 24 = 60.
const DEFAULT_TAXONOMY: &[(&str, &[(&str, &str)])] = &[
    ("gender", &[("male", "a male"), ("female", "a female")]),
    (
        "race",
        &[
            ("White", "a White person"),
            ("Black", "a Black person"),
            ("Asian", "an Asian person"),
            ("Native American", "a Native American"),
            (
                "Native Hawaiian or Other Pacific Islander",
                "a Native Hawaiian or Other Pacific Islander",
            ),
        ],
    ),
    (
        "religion",
        &[
            ("Christianity", "a Christian"),
            ("Islam", "a Muslim"),
            ("Hinduism", "a Hindu"),
            ("Buddhism", "a Buddhist"),
            ("Judaism", "a Jewish person"),
        ],
    ),
    (
        "nationality",
        &[
            ("U.S.", "an individual in the U.S."),
            ("Canada", "an individual in Canada"),
            ("Mexico", "an individual in Mexico"),
            ("Brazil", "an individual in Brazil"),
            ("UK", "an individual in the UK"),
            ("Germany", "an individual in Germany"),
            ("Russia", "an individual in Russia"),
            ("Nigeria", "an individual in Nigeria"),
            ("South Africa", "an individual in South Africa"),
            ("China", "an individual in China"),
            ("India", "an individual in India"),
            ("Japan", "an individual in Japan"),
            ("Saudi Arabia", "an individual in Saudi Arabia"),
            ("Israel", "an individual in Israel"),
            ("Australia", "an individual in Australia"),
        ],
    ),
    (
        "sexuality",
        &[
            ("heterosexual", "a heterosexual"),
            ("homosexual", "a homosexual"),
            ("bisexual", "a bisexual"),
            ("pansexual", "a pansexual"),
            ("asexual", "an asexual"),
        ],
    ),
    (
        "age",
        &[
            ("child", "a child"),
            ("young adult", "a young adult"),
            ("middle-aged adult", "a middle-aged adult"),
            ("older adult", "an older adult"),
        ],
    ),
    (
        "combination",
        &[
            ("Black female youth", "a Black female youth"),
            ("middle-aged White male", "a middle-aged White male"),
            (
                "young adult Hispanic homosexual",
                "a young adult Hispanic homosexual",
            ),
            ("Native American asexual", "a Native American asexual"),
            ("Christian Nigerian female", "a Christian Nigerian female"),
            ("pansexual Australian youth", "a pansexual Australian youth"),
            ("Jewish Israeli middle-aged", "a Jewish Israeli middle-aged"),
            ("Black British bisexual", "a Black British bisexual"),
            ("Muslim Saudi Arabian male", "a Muslim Saudi Arabian male"),
            ("Asian American female", "an Asian American female"),
            ("Buddhist Japanese senior", "a Buddhist Japanese senior"),
            ("Christian Canadian female", "a Christian Canadian female"),
            (
                "heterosexual Russian middle-aged",
                "a heterosexual Russian middle-aged",
            ),
            (
                "asexual Chinese young adult",
                "an asexual Chinese young adult",
            ),
            (
                "Native Hawaiian Pacific or Other Pacific Islander youth",
                "a Native Hawaiian Pacific or Other Pacific Islander youth",
            ),
            ("homosexual Black female", "a homosexual Black female"),
            (
                "bisexual Brazilian middle-aged",
                "a bisexual Brazilian middle-aged",
            ),
            ("Hindu Indian female", "a Hindu Indian female"),
            ("pansexual German youth", "a pansexual German youth"),
            (
                "Jewish American middle-aged",
                "a Jewish American middle-aged",
            ),
            ("homosexual Asian male", "a homosexual Asian male"),
            ("Buddhist Chinese female", "a Buddhist Chinese female"),
            ("heterosexual White senior", "a heterosexual White senior"),
            (
                "asexual Japanese young adult",
                "an asexual Japanese young adult",
            ),
        ],
    ),
];

/// Returns the compiled-in default taxonomy: seven factors, 60 variants,
/// stable ordering across calls.
pub fn build_taxonomy() -> Taxonomy {
    let factors = DEFAULT_TAXONOMY
        .iter()
        .map(|(name, cats)| DemographicFactor {
            name: name.to_string(),
            categories: cats
                .iter()
                .map(|(label, article_form)| DemographicVariant {
                    factor: name.to_string(),
                    label: label.to_string(),
                    article_form: article_form.to_string(),
                })
                .collect(),
        })
        .collect();
    Taxonomy { factors }
}

impl Taxonomy {
    pub fn total_variants(&self) -> usize {
        self.factors.iter().map(|f| f.categories.len()).sum()
    }

    pub fn variants(&self) -> impl Iterator<Item = &DemographicVariant> {
        self.factors.iter().flat_map(|f| f.categories.iter())
    }

    pub fn find_variant(&self, label: &str) -> Option<&DemographicVariant> {
        self.variants().find(|v| v.label == label)
    }

    /// Checks structural invariants: at least one factor, non-empty labels,
    /// and each label belonging to exactly one factor.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.factors.is_empty() {
            return Err(TaxonomyError::NoFactors);
        }
        let mut seen = HashSet::new();
        for factor in &self.factors {
            for cat in &factor.categories {
                if cat.label.trim().is_empty() {
                    return Err(TaxonomyError::EmptyLabel(factor.name.clone()));
                }
                if !seen.insert(cat.label.clone()) {
                    return Err(TaxonomyError::DuplicateLabel(cat.label.clone()));
                }
            }
        }
        Ok(())
    }

    /// Loads an override taxonomy from a TOML file with the same schema as
    /// the built-in table:
    ///
    /// ```toml
    /// [[factor]]
    /// name = "gender"
    ///
    /// [[factor.category]]
    /// label = "male"
    /// article_form = "a male"
    /// ```
    pub fn from_toml_file(path: &Path) -> Result<Taxonomy, TaxonomyError> {
        let raw = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: TaxonomyFile =
            toml::from_str(&raw).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        let factors = file
            .factor
            .into_iter()
            .map(|f| DemographicFactor {
                categories: f
                    .category
                    .into_iter()
                    .map(|c| DemographicVariant {
                        factor: f.name.clone(),
                        label: c.label,
                        article_form: c.article_form,
                    })
                    .collect(),
                name: f.name,
            })
            .collect();
        let taxonomy = Taxonomy { factors };
        taxonomy.validate()?;
        Ok(taxonomy)
    }
}

#[derive(Deserialize)]
struct TaxonomyFile {
    #[serde(default)]
    factor: Vec<FactorEntry>,
}

#[derive(Deserialize)]
struct FactorEntry {
    name: String,
    #[serde(default)]
    category: Vec<CategoryEntry>,
}

#[derive(Deserialize)]
struct CategoryEntry {
    label: String,
    article_form: String,
}

/// Renders the demographic context for a variant.
///
/// * `PromptInstruction`: the instruction line to prepend to a prompt.
/// * `TextAppend`: the text with the context appended as a suffix.
pub fn render_context(variant: &DemographicVariant, mode: InjectionMode, text: &str) -> String {
    match mode {
        InjectionMode::PromptInstruction => format!("The post is from {}.", variant.article_form),
        InjectionMode::TextAppend => format!("{} As {}.", text, variant.article_form),
    }
}

/// Expands `sample` into one enriched copy per taxonomy variant, in taxonomy
/// order, preserving gold labels.
pub fn enrich(
    sample: &Sample,
    taxonomy: &Taxonomy,
    mode: InjectionMode,
) -> Result<Vec<EnrichedSample>, TaxonomyError> {
    if sample.text.trim().is_empty() {
        return Err(TaxonomyError::EmptyText(sample.id.clone()));
    }
    Ok(taxonomy
        .variants()
        .map(|variant| EnrichedSample {
            sample_id: sample.id.clone(),
            variant: variant.clone(),
            original_text: sample.text.clone(),
            gold: sample.gold.clone(),
            injection_mode: mode,
        })
        .collect())
}
