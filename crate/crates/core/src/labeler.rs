//! Hallucination masking: turn a model's own closed-book predictions into
//! answer-or-search training targets.
//!
//! A prediction that exact-matches a gold answer is kept verbatim as the
//! target; anything else is replaced by the search token. The emitted
//! dataset is a line-delimited file of `{id, question, target, was_masked}`
//! plus a sidecar manifest carrying counts and provenance.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NormalizationProfile, Normalizer, QaRecord, Split};
use crate::error::{Error, Result};
use crate::inference::Prediction;

pub const DEFAULT_SEARCH_TOKEN: &str = "<search>";
pub const MASKED_DATASET_FORMAT: &str = "halm-masked-dataset/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchToken {
    pub literal: String,
}

impl Default for SearchToken {
    fn default() -> Self {
        Self {
            literal: DEFAULT_SEARCH_TOKEN.to_string(),
        }
    }
}

impl SearchToken {
    pub fn new(literal: impl Into<String>) -> Result<Self> {
        let literal = literal.into();
        if literal.trim().is_empty() {
            return Err(Error::Config("search token literal is empty".to_string()));
        }
        Ok(Self { literal })
    }

    /// True when `text` is the token itself, ignoring surrounding whitespace.
    pub fn matches(&self, text: &str) -> bool {
        text.trim() == self.literal
    }

    /// Fails on the first record whose normalized gold answer equals the
    /// normalized token, since such a record could never be judged correctly.
    pub fn check_collisions(&self, corpus: &Corpus) -> Result<()> {
        let norm = corpus.normalization_profile.normalizer();
        let token = norm.normalize(&self.literal);
        for r in corpus.iter() {
            if r.gold_answers.iter().any(|g| norm.normalize(g) == token) {
                return Err(Error::TokenCollision {
                    token: self.literal.clone(),
                    id: r.id.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    #[serde(rename = "id")]
    pub record_id: String,
    pub question: String,
    pub target: String,
    pub was_masked: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub n_total: usize,
    pub n_answer: usize,
    pub n_masked: usize,
}

impl MaskStats {
    pub fn from_examples(examples: &[MaskedExample]) -> Self {
        let n_masked = examples.iter().filter(|e| e.was_masked).count();
        Self {
            n_total: examples.len(),
            n_answer: examples.len() - n_masked,
            n_masked,
        }
    }

    /// Fraction of examples masked; `None` for an empty dataset.
    pub fn mask_rate(&self) -> Option<f64> {
        (self.n_total > 0).then(|| self.n_masked as f64 / self.n_total as f64)
    }

    pub fn answer_rate(&self) -> Option<f64> {
        (self.n_total > 0).then(|| self.n_answer as f64 / self.n_total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_tag: String,
    pub corpus_name: String,
    pub source_splits: Vec<Split>,
    pub normalization_profile: NormalizationProfile,
    pub search_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDataset {
    pub examples: Vec<MaskedExample>,
    pub stats: MaskStats,
    pub provenance: Provenance,
}

/// Applies the masking rule to a single prediction.
pub fn halm_mask(
    prediction: &Prediction,
    record: &QaRecord,
    normalizer: &Normalizer<'_>,
    token: &SearchToken,
) -> Result<MaskedExample> {
    if prediction.record_id != record.id {
        return Err(Error::Pairing(format!(
            "prediction for `{}` paired with record `{}`",
            prediction.record_id, record.id
        )));
    }
    let correct = normalizer.exact_match(&prediction.text, &record.gold_answers);
    Ok(MaskedExample {
        record_id: record.id.clone(),
        question: record.question.clone(),
        target: if correct {
            prediction.text.clone()
        } else {
            token.literal.clone()
        },
        was_masked: !correct,
    })
}

/// Labels every prediction; examples come out in corpus order.
pub fn build_masked_dataset(
    predictions: &[Prediction],
    corpus: &Corpus,
    profile: &NormalizationProfile,
    token: &SearchToken,
) -> Result<MaskedDataset> {
    let index = corpus.index();
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut ordered: Vec<(usize, &Prediction)> = Vec::with_capacity(predictions.len());
    for p in predictions {
        let Some(&pos) = index.get(p.record_id.as_str()) else {
            return Err(Error::UnknownId(p.record_id.clone()));
        };
        if !seen.insert(p.record_id.as_str()) {
            return Err(Error::DuplicateId(p.record_id.clone()));
        }
        ordered.push((pos, p));
    }
    ordered.sort_by_key(|(pos, _)| *pos);

    let normalizer = profile.normalizer();
    let examples = ordered
        .iter()
        .map(|(pos, p)| halm_mask(p, &corpus.records[*pos], &normalizer, token))
        .collect::<Result<Vec<_>>>()?;

    let mut tags: Vec<&str> = Vec::new();
    for p in predictions {
        if !tags.contains(&p.model_tag.as_str()) {
            tags.push(&p.model_tag);
        }
    }
    let mut splits: Vec<Split> = ordered
        .iter()
        .map(|(pos, _)| corpus.records[*pos].split)
        .collect();
    splits.sort();
    splits.dedup();

    Ok(MaskedDataset {
        stats: MaskStats::from_examples(&examples),
        examples,
        provenance: Provenance {
            model_tag: tags.join(","),
            corpus_name: corpus.name.clone(),
            source_splits: splits,
            normalization_profile: profile.clone(),
            search_token: token.literal.clone(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub stats: MaskStats,
    pub provenance: Provenance,
    pub profile_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Trainer hints carried through untouched (e.g. adapter rank, learning rate).
    #[serde(default)]
    pub training_metadata: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Writes the examples file and its manifest. Refuses to write if the search
/// token collides with any gold answer in `corpus`.
pub fn emit_dataset(
    dataset: &MaskedDataset,
    corpus: &Corpus,
    path: &Path,
    config_hash: Option<&str>,
    training_metadata: serde_json::Value,
) -> Result<DatasetManifest> {
    SearchToken::new(dataset.provenance.search_token.clone())?.check_collisions(corpus)?;
    let recomputed = MaskStats::from_examples(&dataset.examples);
    if recomputed != dataset.stats {
        return Err(Error::Domain(format!(
            "dataset stats {:?} disagree with examples {:?}",
            dataset.stats, recomputed
        )));
    }
    crate::io::write_jsonl(path, &dataset.examples)?;
    let manifest = DatasetManifest {
        format: MASKED_DATASET_FORMAT.to_string(),
        stats: dataset.stats,
        provenance: dataset.provenance.clone(),
        profile_hash: dataset.provenance.normalization_profile.hash(),
        config_hash: config_hash.map(str::to_string),
        training_metadata,
    };
    crate::io::write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<MaskedDataset> {
    let examples: Vec<MaskedExample> = crate::io::read_jsonl(path)?;
    let manifest: DatasetManifest = crate::io::read_json(&manifest_path(path))?;
    let stats = MaskStats::from_examples(&examples);
    if stats != manifest.stats {
        return Err(Error::Domain(format!(
            "{}: manifest stats {:?} disagree with file contents {:?}",
            path.display(),
            manifest.stats,
            stats
        )));
    }
    Ok(MaskedDataset {
        examples,
        stats,
        provenance: manifest.provenance,
    })
}

/// Index from record id to example.
pub fn by_id(dataset: &MaskedDataset) -> HashMap<&str, &MaskedExample> {
    dataset
        .examples
        .iter()
        .map(|e| (e.record_id.as_str(), e))
        .collect()
}
