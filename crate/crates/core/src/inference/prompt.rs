use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaRecord;
use crate::error::{Error, Result};
use crate::labeler::MaskedDataset;

pub const QUESTION_PLACEHOLDER: &str = "{q}";

/// QA-tuned seq2seq checkpoints take the bare question.
pub const DEFAULT_ZEROSHOT_TEMPLATE: &str = "{q}";

pub const INSTRUCTION: &str =
    "Answer to the question only if you know the answer, otherwise answer \"I don't know\"";

/// The abstention answer the instruction asks for.
pub const IDK_ANSWER: &str = "I don't know";

pub fn build_zeroshot_prompt(record: &QaRecord, template: &str) -> Result<String> {
    match template.matches(QUESTION_PLACEHOLDER).count() {
        1 => Ok(template.replacen(QUESTION_PLACEHOLDER, &record.question, 1)),
        n => Err(Error::Template(format!(
            "template must contain exactly one `{QUESTION_PLACEHOLDER}` placeholder, found {n}"
        ))),
    }
}

pub fn build_instruct_prompt(record: &QaRecord) -> String {
    format!("{INSTRUCTION}\n{}", record.question)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub target: String,
    pub masked: bool,
}

/// Demonstrations to draw few-shot prompts from, with a fixed selection seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPool {
    pub examples: Vec<FewShotExample>,
    pub seed: u64,
}

impl FewShotPool {
    pub fn new(examples: Vec<FewShotExample>, seed: u64) -> Self {
        Self { examples, seed }
    }

    /// Uses a labeled dataset (typically the train split) as the pool.
    pub fn from_masked(dataset: &MaskedDataset, seed: u64) -> Self {
        let examples = dataset
            .examples
            .iter()
            .map(|e| FewShotExample {
                question: e.question.clone(),
                target: e.target.clone(),
                masked: e.was_masked,
            })
            .collect();
        Self { examples, seed }
    }

    fn sides(&self) -> (Vec<&FewShotExample>, Vec<&FewShotExample>) {
        self.examples.iter().partition(|e| !e.masked)
    }

    /// Picks `k/2` answered and `k/2` masked demonstrations and shuffles them together.
    pub fn select(&self, k: usize) -> Result<Vec<&FewShotExample>> {
        if k == 0 || k % 2 != 0 {
            return Err(Error::Domain(format!(
                "few-shot k must be a positive even number, got {k}"
            )));
        }
        let half = k / 2;
        let (answered, masked) = self.sides();
        if answered.len() < half {
            return Err(Error::Balance {
                side: "answered",
                needed: half,
                available: answered.len(),
            });
        }
        if masked.len() < half {
            return Err(Error::Balance {
                side: "masked",
                needed: half,
                available: masked.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut chosen: Vec<&FewShotExample> = answered
            .choose_multiple(&mut rng, half)
            .copied()
            .chain(masked.choose_multiple(&mut rng, half).copied())
            .collect();
        chosen.shuffle(&mut rng);
        Ok(chosen)
    }
}

fn push_turn(out: &mut String, question: &str, answer: Option<&str>) {
    out.push_str("Q: ");
    out.push_str(question);
    out.push_str("\nA:");
    if let Some(a) = answer {
        out.push(' ');
        out.push_str(a);
        out.push_str("\n\n");
    }
}

pub fn build_fewshot_balanced_prompt(pool: &FewShotPool, k: usize, record: &QaRecord) -> Result<String> {
    let demos = pool.select(k)?;
    let mut out = String::new();
    for d in demos {
        push_turn(&mut out, &d.question, Some(&d.target));
    }
    push_turn(&mut out, &record.question, None);
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum PromptBuilder {
    ZeroShot { template: String },
    FewShot { pool: FewShotPool, k: usize },
    Instruct,
}

impl PromptBuilder {
    pub fn style(&self) -> super::PromptStyle {
        match self {
            PromptBuilder::ZeroShot { .. } => super::PromptStyle::ZeroshotQa,
            PromptBuilder::FewShot { .. } => super::PromptStyle::FewshotBalanced,
            PromptBuilder::Instruct => super::PromptStyle::InstructIdk,
        }
    }

    pub fn build(&self, record: &QaRecord) -> Result<String> {
        match self {
            PromptBuilder::ZeroShot { template } => build_zeroshot_prompt(record, template),
            PromptBuilder::FewShot { pool, k } => build_fewshot_balanced_prompt(pool, *k, record),
            PromptBuilder::Instruct => Ok(build_instruct_prompt(record)),
        }
    }
}
