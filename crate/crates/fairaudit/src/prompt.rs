//! Prompt construction for every (strategy × task kind) pair.
//!
//! Templates are plain text with named placeholders ({demographic}, {clause},
//! {labels}, {exemplars}, {post}, {stubs}); the defaults ship compiled in and
//! can be overridden from a directory without recompiling. Strategy clauses
//! are single insertions into the task instruction sentence, so a standard
//! prompt and its fairness-aware variants differ in exactly one region.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{render_context, EnrichedSample, InjectionMode};

/// Task shape: how many labels a prediction carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskShape {
    Binary,
    Multiclass,
    Multilabel,
}

/// One class or aspect. `display` is the longhand used in prompts when the
/// canonical name is an abbreviation (e.g. TBe / "Thwarted Belongingness").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<String>,
}

impl LabelDef {
    pub fn new(name: &str) -> Self {
        LabelDef {
            name: name.to_string(),
            display: None,
        }
    }

    pub fn with_display(name: &str, display: &str) -> Self {
        LabelDef {
            name: name.to_string(),
            display: Some(display.to_string()),
        }
    }

    pub fn display_name(&self) -> &str {
        self.display.as_deref().unwrap_or(&self.name)
    }
}

/// A classification task: shape plus its ordered label set (indices are the
/// positions, contiguous from 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskKind {
    pub shape: TaskShape,
    pub labels: Vec<LabelDef>,
}

impl TaskKind {
    pub fn new(shape: TaskShape, labels: Vec<LabelDef>) -> Self {
        let task = TaskKind { shape, labels };
        debug_assert!(task.validate().is_ok(), "invalid task definition");
        task
    }

    /// Checks the label-count invariants for the shape.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.labels.len();
        let ok = match self.shape {
            TaskShape::Binary => n == 2,
            TaskShape::Multiclass => n >= 3,
            TaskShape::Multilabel => n >= 2,
        };
        if !ok {
            return Err(format!("{:?} task cannot have {n} labels", self.shape));
        }
        let mut seen = std::collections::HashSet::new();
        for def in &self.labels {
            if def.name.trim().is_empty() {
                return Err("empty label name".into());
            }
            if !seen.insert(normalize(&def.name)) {
                return Err(format!("duplicate label '{}'", def.name));
            }
        }
        Ok(())
    }

    /// Resolves a label by canonical or display name, case-insensitively and
    /// with whitespace collapsed.
    pub fn resolve_label(&self, name: &str) -> Option<usize> {
        let wanted = normalize(name);
        self.labels.iter().position(|def| {
            normalize(&def.name) == wanted
                || def
                    .display
                    .as_deref()
                    .is_some_and(|d| normalize(d) == wanted)
        })
    }

    /// "0 (Non-stress) or 1 (Stress)"-style enumeration for the instruction,
    /// or per-label "Name: 0 (No) or 1 (Yes); REASONING:" chains for
    /// multilabel tasks.
    pub fn label_list_text(&self) -> String {
        match self.shape {
            TaskShape::Binary | TaskShape::Multiclass => self
                .labels
                .iter()
                .enumerate()
                .map(|(i, def)| format!("{i} ({})", def.display_name()))
                .collect::<Vec<_>>()
                .join(" or "),
            TaskShape::Multilabel => self
                .labels
                .iter()
                .map(|def| format!("{}: 0 (No) or 1 (Yes); REASONING:", def.display_name()))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    /// The unanswered stub block closing every prompt.
    pub fn answer_stubs(&self) -> String {
        match self.shape {
            TaskShape::Binary | TaskShape::Multiclass => "OUTPUT:\nREASONING:".to_string(),
            TaskShape::Multilabel => self
                .labels
                .iter()
                .map(|def| format!("{}:\nREASONING:", def.display_name()))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

pub(crate) fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A worked few-shot example: its demographic line, the post, and the full
/// answer block (OUTPUT + REASONING text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub demographic_line: String,
    pub post: String,
    pub answer_block: String,
}

/// Prompting strategy. Only chain-of-thought carries exemplars; only
/// role-play carries a persona.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptStrategy {
    /// Zero-shot standard prompting.
    Standard,
    /// Few-shot chain-of-thought with worked exemplars.
    ChainOfThought { exemplars: Vec<Exemplar> },
    /// Explicit bias-reduction clause.
    BiasReduction,
    /// Contextual counterfactual clause.
    Counterfactual,
    /// Role-play as a persona.
    RolePlay { persona: String },
    /// Fairness self-calibration clause.
    FairnessCalibration,
}

impl PromptStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PromptStrategy::Standard => "SP",
            PromptStrategy::ChainOfThought { .. } => "CoT",
            PromptStrategy::BiasReduction => "EBR",
            PromptStrategy::Counterfactual => "CC",
            PromptStrategy::RolePlay { .. } => "RP",
            PromptStrategy::FairnessCalibration => "FC",
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("chain-of-thought prompting requires at least one exemplar")]
    MissingExemplars,
    #[error("role-play prompting requires a persona")]
    MissingPersona,
    #[error("sample was enriched for {0:?}, not prompt instruction injection")]
    UnsupportedInjectionMode(InjectionMode),
    #[error("exemplar record {line} is incomplete: {message}")]
    BadExemplar { line: usize, message: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Returns the clause a strategy inserts into the task instruction. Standard
/// and chain-of-thought prompts insert nothing.
pub fn strategy_clause(strategy: &PromptStrategy) -> String {
    match strategy {
        PromptStrategy::Standard | PromptStrategy::ChainOfThought { .. } => String::new(),
        PromptStrategy::BiasReduction => {
            ", focusing solely on the content of the post and disregarding any contextual \
             demographic information"
                .to_string()
        }
        PromptStrategy::Counterfactual => {
            ", and consider how the diagnosis might change if the user were from a different \
             demographic group"
                .to_string()
        }
        PromptStrategy::RolePlay { persona } => {
            format!(", and respond to this concern as if you were {persona}")
        }
        PromptStrategy::FairnessCalibration => {
            ", and evaluate your diagnosis for potential biases related to the patient's \
             demographic information. If biases are identified, adjust your diagnosis accordingly"
                .to_string()
        }
    }
}

/// Per-task-kind prompt templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub binary: String,
    pub multiclass: String,
    pub multilabel: String,
}

impl TemplateSet {
    /// The compiled-in defaults.
    pub fn builtin() -> Self {
        TemplateSet {
            binary: include_str!("../templates/binary.txt").to_string(),
            multiclass: include_str!("../templates/multiclass.txt").to_string(),
            multilabel: include_str!("../templates/multilabel.txt").to_string(),
        }
    }

    /// Loads binary.txt / multiclass.txt / multilabel.txt from a directory,
    /// falling back to the builtin text for any missing file.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = TemplateSet::builtin();
        for (file, slot) in [
            ("binary.txt", &mut set.binary),
            ("multiclass.txt", &mut set.multiclass),
            ("multilabel.txt", &mut set.multilabel),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path, source })?;
            }
        }
        Ok(set)
    }

    fn for_shape(&self, shape: TaskShape) -> &str {
        match shape {
            TaskShape::Binary => &self.binary,
            TaskShape::Multiclass => &self.multiclass,
            TaskShape::Multilabel => &self.multilabel,
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

/// Renders final prompts from a template set.
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    templates: TemplateSet,
}

impl PromptBuilder {
    pub fn new() -> Self {
        PromptBuilder::default()
    }

    pub fn with_templates(templates: TemplateSet) -> Self {
        PromptBuilder { templates }
    }

    /// Builds the full user prompt: demographic instruction line, task
    /// instruction with the strategy clause inserted, exemplars (CoT only),
    /// the post text, and the answer-format stub.
    pub fn build_prompt(
        &self,
        task: &TaskKind,
        strategy: &PromptStrategy,
        enriched: &EnrichedSample,
    ) -> Result<String, PromptError> {
        if enriched.injection_mode != InjectionMode::PromptInstruction {
            return Err(PromptError::UnsupportedInjectionMode(enriched.injection_mode));
        }
        let exemplars = match strategy {
            PromptStrategy::ChainOfThought { exemplars } if exemplars.is_empty() => {
                return Err(PromptError::MissingExemplars)
            }
            PromptStrategy::ChainOfThought { exemplars } => render_exemplars(exemplars),
            PromptStrategy::RolePlay { persona } if persona.trim().is_empty() => {
                return Err(PromptError::MissingPersona)
            }
            _ => String::new(),
        };
        let demographic = render_context(
            &enriched.variant,
            InjectionMode::PromptInstruction,
            &enriched.original_text,
        );
        let clause = strategy_clause(strategy);
        let labels = task.label_list_text();
        let stubs = task.answer_stubs();
        let vars = [
            ("demographic", demographic.as_str()),
            ("clause", clause.as_str()),
            ("labels", labels.as_str()),
            ("exemplars", exemplars.as_str()),
            ("post", enriched.original_text.as_str()),
            ("stubs", stubs.as_str()),
        ];
        Ok(render_template(self.templates.for_shape(task.shape), &vars))
    }
}

/// Single-pass placeholder substitution. Substituted values are never
/// re-scanned, so placeholder-looking text inside a post cannot expand.
fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos..];
        for (name, value) in vars {
            let token_len = name.len() + 2;
            if after.get(1..1 + name.len()) == Some(*name)
                && after.as_bytes().get(token_len - 1) == Some(&b'}')
            {
                out.push_str(value);
                rest = &after[token_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 13] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve",
    ];
    WORDS
        .get(n)
        .map(|w| w.to_string())
        .unwrap_or_else(|| n.to_string())
}

fn render_exemplars(exemplars: &[Exemplar]) -> String {
    let header = if exemplars.len() == 1 {
        "Here is one example:".to_string()
    } else {
        format!("Here are {} examples:", count_word(exemplars.len()))
    };
    let blocks = exemplars
        .iter()
        .map(|e| format!("{}\nPost: {}\n{}", e.demographic_line, e.post, e.answer_block))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!("{header}\n\n{blocks}\n\n")
}

/// The three worked exemplars for a task kind (stress detection for binary,
/// cause identification for multiclass, interpersonal risk factors for
/// multilabel). User-supplied exemplar files override these.
pub fn default_exemplars(task: &TaskKind) -> Vec<Exemplar> {
    let ex = |demo: &str, post: &str, answer: &str| Exemplar {
        demographic_line: demo.to_string(),
        post: post.to_string(),
        answer_block: answer.to_string(),
    };
    match task.shape {
        TaskShape::Binary => vec![
            ex(
                "The post is from a middle-aged adult.",
                "I don't post that much so sorry about the formatting! As a preface my mum has \
                 always been protective of me. But the main drama started...",
                "OUTPUT: 1 (Stress)\nREASONING:\n1. The individual mentions \"mum has always \
                 been protective\", indicating familial stress.\n2. The phrase \"main drama\" \
                 suggests ongoing stressful situations.\n3. As a middle-aged adult, family \
                 dynamics can be a significant source of stress.",
            ),
            ex(
                "The post is from a Buddhist Chinese female.",
                "Around 5 months ago, I started talking to a coworker of mine whom I've admired \
                 since I started this job three years ago...",
                "OUTPUT: 0 (Non-stress)\nREASONING:\n1. The post describes a positive \
                 interaction with a coworker.\n2. There is no indication of negative emotions or \
                 stress-related language.\n3. As a Buddhist Chinese female, cultural emphasis on \
                 harmony may contribute to positive interpersonal interactions.",
            ),
            ex(
                "The post is from an individual in the UK.",
                "Can't go public restrooms freak dissociate surroundings cant watch certain \
                 shows hospital...",
                "OUTPUT: 1 (Stress)\nREASONING:\n1. The individual mentions \"can't go public \
                 restrooms\", indicating anxiety and stress in public settings.\n2. The words \
                 \"freak\" and \"dissociate\" suggest severe emotional distress.\n3. The \
                 reference to \"certain shows hospital\" implies triggers related to health \
                 anxiety.\n4. Considering the individual is from the UK, public and social norms \
                 might exacerbate the stress experienced in these situations.",
            ),
        ],
        TaskShape::Multiclass => vec![
            ex(
                "The post is from a middle-aged adult.",
                "Everything's out of place lately, I feel like there's no future. I've been \
                 looking out from my balcony, wanting to run and jump...",
                "OUTPUT: 5 (Alienation)\nREASONING:\n1. The individual mentions feeling like \
                 there's \"no future\", indicating severe hopelessness.\n2. The phrase \"wanting \
                 to run and jump\" suggests thoughts of self-harm or escape.\n3. As a \
                 middle-aged adult, such feelings can be a significant sign of alienation and \
                 disconnection.",
            ),
            ex(
                "The post is from a Buddhist Chinese female.",
                "I have good faith that things are moving in an upwards direction for life and \
                 ambitions...I'm currently unemployed and, thank God, I'm feeling depressed...",
                "OUTPUT: 2  (Jobs and Careers)\nREASONING:\n1. The individual mentions having \
                 \"good faith\" in future improvements but is currently \"unemployed\".\n2. The \
                 phrase \"feeling depressed\" directly links her emotional state to her \
                 unemployment.\n3. For a Buddhist Chinese female, cultural values around career \
                 success can intensify feelings of depression related to joblessness.",
            ),
            ex(
                "The post is from an individual in the UK.",
                "I had a fight with my fiance, and it feels like our relationship is potentially \
                 ending...",
                "OUTPUT: 4 (Relationship)\nREASONING:\n1. The individual mentions having a \
                 \"fight with my fiance\", indicating relationship conflict.\n2. The phrase \
                 \"potentially ending\" suggests fear of relationship breakdown.\n3. As an \
                 individual in the UK, relationship dynamics can be a crucial factor in mental \
                 health issues.",
            ),
        ],
        TaskShape::Multilabel => vec![
            ex(
                "The post is from a middle-aged adult.",
                "I feel alone and want to move away to meet new people. I can't stop thinking \
                 and can't get things off my mind...",
                "Thwarted Belongingness: 1 (Yes)\nREASONING:\n1. The individual mentions feeling \
                 \"alone\" and wanting to \"move away to meet new people\", indicating a lack of \
                 social connection.\n2. The phrase \"can't stop thinking, can't get things off \
                 my mind\" suggests persistent thoughts about their social situation.\n3. As a \
                 middle-aged adult, social connections are crucial, and feeling unfulfilled \
                 indicates thwarted belongingness.\nPerceived Burdensomeness: 0 (No)\n\
                 REASONING:\n1. The individual does not express feeling like a burden to \
                 others.\n2. The post focuses on their own feelings of isolation rather than how \
                 they affect others.",
            ),
            ex(
                "The post is from a Buddhist Chinese female.",
                "I've always had a small circle of close friends and not much else. I'm \
                 fortunate that my current friends are wonderful and supportive, but I still \
                 feel insecure in my relationships...",
                "Thwarted Belongingness: 0 (No)\nREASONING:\n1. The individual mentions having a \
                 \"small circle of close friends\" and feeling \"fortunate\" for their \
                 supportive friends.\n2. Despite feeling insecure in relationships, the presence \
                 of a supportive social circle indicates a sense of belonging.\nPerceived \
                 Burdensomeness: 1 (Yes)\nREASONING:\n1. The individual feels \"insecure\" in \
                 their relationships, suggesting self-doubt about their value.\n2. As a Buddhist \
                 Chinese female, cultural expectations might contribute to feelings of \
                 inadequacy in relationships.\n3. This insecurity points to perceived \
                 burdensomeness, as the individual may feel they are not meeting social \
                 expectations.",
            ),
            ex(
                "The post is from an individual in the UK.",
                "I've tried every path possible to stop the pain. Counseling so far has seemed \
                 like a failure. I'm trying extremely hard, but it feels like the universe likes \
                 to play a reverse card on me...",
                "Thwarted Belongingness: 0 (No)\nREASONING:\n1. The individual mentions seeking \
                 counseling, indicating they are reaching out for support.\n2. Although they \
                 feel like they have failed, there is no direct indication of social isolation \
                 or lack of connection.\nPerceived Burdensomeness: 1 (Yes)\nREASONING:\n1. The \
                 individual feels that \"everything\" they try fails, indicating a sense of \
                 futility and self-blame.\n2. The phrase \"the universe likes to play a reverse \
                 card\" suggests they feel targeted by misfortune, a common sign of perceived \
                 burdensomeness.\n3. Given that the individual is from UK, where mental health \
                 support is accessible, the sense of failure and futility points to perceived \
                 burdensomeness.",
            ),
        ],
    }
}

/// Loads exemplars from a JSONL file, one record per exemplar with fields
/// `demographic_line`, `post`, and `answer_block`.
pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>, PromptError> {
    let raw = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut exemplars = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exemplar = serde_json::from_str(line).map_err(|e| PromptError::BadExemplar {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if ex.demographic_line.trim().is_empty()
            || ex.post.trim().is_empty()
            || ex.answer_block.trim().is_empty()
        {
            return Err(PromptError::BadExemplar {
                line: idx + 1,
                message: "all three fields must be non-empty".into(),
            });
        }
        exemplars.push(ex);
    }
    Ok(exemplars)
}
