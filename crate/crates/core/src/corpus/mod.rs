//! Canonical QA records, dataset ingestion, and answer normalization.
//!
//! Two on-disk formats are understood:
//!
//! * `canonical-jsonl`: one JSON object per line with `id`, `question`,
//!   `answers` and an optional `split`.
//! * `tsv-pairs`: `question<TAB>answer1|answer2|...`, ids assigned as
//!   `<split>-<line>`.

mod normalize;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use normalize::{
    exact_match, is_punctuation, normalize, NormalizationProfile, Normalizer, ENGLISH_STOPWORDS,
    STOPWORD_LIST_ID,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    CanonicalJsonl,
    TsvPairs,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "tsv-pairs" => Ok(CorpusFormat::TsvPairs),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// One question with its admissible answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub split: Split,
}

impl QaRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        let record = Self {
            id: id.into(),
            question: question.into(),
            gold_answers,
            split,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| Error::InvalidRecord {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        if self.gold_answers.is_empty() {
            return Err(invalid("empty gold-answer list"));
        }
        if self.gold_answers.iter().any(|a| a.trim().is_empty()) {
            return Err(invalid("blank gold answer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub records: Vec<QaRecord>,
    pub normalization_profile: NormalizationProfile,
}

impl Corpus {
    pub fn new(name: impl Into<String>, profile: NormalizationProfile) -> Self {
        Self {
            name: name.into(),
            records: Vec::new(),
            normalization_profile: profile,
        }
    }

    /// Builds a corpus from records, enforcing record invariants and id uniqueness.
    pub fn from_records(
        name: impl Into<String>,
        records: Vec<QaRecord>,
        profile: NormalizationProfile,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            records,
            normalization_profile: profile,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, QaRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &str) -> Option<&QaRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Map from record id to its position in ingestion order.
    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Writes the corpus in canonical line-delimited form.
    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        crate::io::write_atomic(path, &buf)
    }
}

#[derive(Deserialize)]
struct CanonicalLine {
    id: Option<String>,
    question: String,
    answers: Vec<String>,
    split: Option<Split>,
}

/// Reads a corpus file. Records keep file order; blank lines are skipped.
/// `split` applies to every record that does not carry its own split tag.
pub fn ingest(
    path: &Path,
    format: CorpusFormat,
    split: Split,
    profile: NormalizationProfile,
) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record = match format {
            CorpusFormat::CanonicalJsonl => {
                let parsed: CanonicalLine =
                    serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
                QaRecord {
                    id: parsed
                        .id
                        .unwrap_or_else(|| format!("{split}-{line_no}")),
                    question: parsed.question,
                    gold_answers: parsed.answers,
                    split: parsed.split.unwrap_or(split),
                }
            }
            CorpusFormat::TsvPairs => {
                let mut fields = line.split('\t');
                let (Some(question), Some(answers), None) =
                    (fields.next(), fields.next(), fields.next())
                else {
                    return Err(malformed(
                        "expected exactly two tab-separated fields".to_string(),
                    ));
                };
                QaRecord {
                    id: format!("{split}-{line_no}"),
                    question: question.trim().to_string(),
                    gold_answers: answers
                        .split('|')
                        .map(str::trim)
                        .filter(|a| !a.is_empty())
                        .map(str::to_string)
                        .collect(),
                    split,
                }
            }
        };
        if record.question.trim().is_empty() {
            return Err(malformed("empty question".to_string()));
        }
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }

    Ok(Corpus {
        name,
        records,
        normalization_profile: profile,
    })
}

/// Streams a corpus as canonical JSON lines into `out`.
pub fn write_canonical_to<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_canonical_line() {
        let f = write_tmp(r#"{"id":"q1","question":"capital of France?","answers":["Paris"]}"#);
        let c = ingest(
            f.path(),
            CorpusFormat::CanonicalJsonl,
            Split::Dev,
            NormalizationProfile::english(),
        )
        .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.records[0].id, "q1");
        assert_eq!(c.records[0].split, Split::Dev);
        assert_eq!(c.records[0].gold_answers, vec!["Paris"]);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write_tmp("");
        let c = ingest(
            f.path(),
            CorpusFormat::CanonicalJsonl,
            Split::Train,
            NormalizationProfile::english(),
        )
        .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn malformed_second_line_is_reported() {
        let f = write_tmp(concat!(
            r#"{"id":"a","question":"q1?","answers":["x"]}"#,
            "\n",
            r#"{"id":"b","question":"q2?","answers":"#,
            "\n",
            r#"{"id":"c","question":"q3?","answers":["z"]}"#,
            "\n"
        ));
        let err = ingest(
            f.path(),
            CorpusFormat::CanonicalJsonl,
            Split::Train,
            NormalizationProfile::english(),
        )
        .unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_answer_list_names_record() {
        let f = write_tmp(r#"{"id":"q7","question":"who?","answers":[]}"#);
        let err = ingest(
            f.path(),
            CorpusFormat::CanonicalJsonl,
            Split::Train,
            NormalizationProfile::english(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { ref id, .. } if id == "q7"), "{err}");
    }

    #[test]
    fn tsv_assigns_sequential_ids() {
        let f = write_tmp("capital of France?\tParis\nlargest planet?\tJupiter | jupiter\n");
        let c = ingest(
            f.path(),
            CorpusFormat::TsvPairs,
            Split::Test,
            NormalizationProfile::english(),
        )
        .unwrap();
        let ids: Vec<_> = c.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["test-1", "test-2"]);
        assert_eq!(c.records[1].gold_answers, vec!["Jupiter", "jupiter"]);
    }

    #[test]
    fn tsv_without_tab_is_malformed() {
        let f = write_tmp("ok?\tyes\nno tab here\n");
        let err = ingest(
            f.path(),
            CorpusFormat::TsvPairs,
            Split::Test,
            NormalizationProfile::english(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp(concat!(
            r#"{"id":"a","question":"q?","answers":["x"]}"#,
            "\n",
            r#"{"id":"a","question":"r?","answers":["y"]}"#
        ));
        let err = ingest(
            f.path(),
            CorpusFormat::CanonicalJsonl,
            Split::Train,
            NormalizationProfile::english(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "a"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ingest(
            Path::new("/nonexistent/corpus.jsonl"),
            CorpusFormat::CanonicalJsonl,
            Split::Train,
            NormalizationProfile::english(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.jsonl"));
    }

    fn arb_record() -> impl Strategy<Value = (String, Vec<String>, Split)> {
        (
            "[a-zA-Z0-9 ?\"\\\\é,]{0,20}[a-z]",
            proptest::collection::vec("[a-zA-Z |\t\"]{0,8}[A-Z]", 1..4),
            prop_oneof![Just(Split::Train), Just(Split::Dev), Just(Split::Test)],
        )
    }

    proptest! {
        #[test]
        fn canonical_round_trip(rows in proptest::collection::vec(arb_record(), 0..12)) {
            let records: Vec<QaRecord> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (q, a, s))| QaRecord::new(format!("r{i}"), q, a, s).unwrap())
                .collect();
            let corpus = Corpus::from_records("rt", records, NormalizationProfile::english()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            corpus.write_canonical(&path).unwrap();
            let back = ingest(&path, CorpusFormat::CanonicalJsonl, Split::Train, NormalizationProfile::english()).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }
}
