//! Dataset schema: questions, their sampled responses, and the line-delimited
//! JSON file format they are stored in.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled answer to a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub text: String,
    /// Which prompt produced the response; 0 is the original question,
    /// `i > 0` the `i`-th rephrasing.
    #[serde(default)]
    pub prompt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    /// Natural-log probability of the generated token sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprob_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default)]
    pub is_primary: bool,
}

impl ResponseRecord {
    pub fn new(text: impl Into<String>) -> Self {
        ResponseRecord {
            text: text.into(),
            prompt_index: 0,
            embedding: None,
            token_logprob_sum: None,
            token_count: None,
            label: None,
            is_primary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub rephrasings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    pub responses: Vec<ResponseRecord>,
}

impl QuestionRecord {
    pub fn primary_index(&self) -> Option<usize> {
        self.responses.iter().position(|r| r.is_primary)
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.responses.iter().map(|r| r.label).collect()
    }
}

/// One violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub question_id: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "question {}: {}: {}", self.question_id, self.field, self.message)
    }
}

/// How strictly the one-primary-per-question rule is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryPolicy {
    /// Exactly one response per question must be primary.
    ExactlyOne,
    /// Zero primaries is accepted (graph construction assigns a default);
    /// more than one is still an error.
    AllowUnassigned,
}

/// Checks every record invariant with the strict primary rule.
pub fn validate_dataset(records: &[QuestionRecord]) -> Vec<ValidationError> {
    validate_dataset_with(records, PrimaryPolicy::ExactlyOne)
}

pub fn validate_dataset_with(
    records: &[QuestionRecord],
    policy: PrimaryPolicy,
) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut dataset_dim: Option<(usize, String)> = None;

    for record in records {
        let mut err = |field: String, message: String| {
            errors.push(ValidationError {
                question_id: record.id.clone(),
                field,
                message,
            })
        };

        if !seen_ids.insert(record.id.as_str()) {
            err("id".into(), "duplicate question id".into());
        }
        if record.responses.len() < 2 {
            err(
                "responses".into(),
                format!("need at least 2 responses, found {}", record.responses.len()),
            );
        }

        let primaries = record.responses.iter().filter(|r| r.is_primary).count();
        match (primaries, policy) {
            (1, _) | (0, PrimaryPolicy::AllowUnassigned) => {}
            (count, _) => err(
                "responses[].is_primary".into(),
                format!("expected exactly one primary response, found {count}"),
            ),
        }

        let prompt_count = 1 + record.rephrasings.len();
        for (i, response) in record.responses.iter().enumerate() {
            let path = |name: &str| format!("responses[{i}].{name}");
            if response.prompt_index >= prompt_count {
                err(
                    path("prompt_index"),
                    format!(
                        "prompt_index {} out of range for {} prompt(s)",
                        response.prompt_index, prompt_count
                    ),
                );
            }
            if response.token_logprob_sum.is_some() && response.token_count.is_none() {
                err(path("token_count"), "required when token_logprob_sum is present".into());
            }
            if response.token_count == Some(0) {
                err(path("token_count"), "must be at least 1".into());
            }
            if let Some(lp) = response.token_logprob_sum {
                if !lp.is_finite() {
                    err(path("token_logprob_sum"), "must be finite".into());
                }
            }
            if let Some(label) = response.label {
                if label > 1 {
                    err(path("label"), format!("label must be 0 or 1, found {label}"));
                }
            }
            if let Some(embedding) = &response.embedding {
                if embedding.iter().any(|v| !v.is_finite()) {
                    err(path("embedding"), "embedding has non-finite entries".into());
                }
                match &dataset_dim {
                    None => dataset_dim = Some((embedding.len(), record.id.clone())),
                    Some((dim, first_id)) if *dim != embedding.len() => err(
                        path("embedding"),
                        format!(
                            "embedding dimension {} differs from dimension {} first seen in question {}",
                            embedding.len(),
                            dim,
                            first_id
                        ),
                    ),
                    Some(_) => {}
                }
            }
        }
    }
    errors
}

/// Reads a line-delimited JSON dataset. Blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file), path)
}

pub(crate) fn read_dataset_from(reader: impl BufRead, path: &Path) -> Result<Vec<QuestionRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_dataset(records: &[QuestionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("cannot serialize question {}: {e}", record.id)))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> QuestionRecord {
        let mut a = ResponseRecord::new("Paris");
        a.is_primary = true;
        QuestionRecord {
            id: "q1".into(),
            question: "Capital of France?".into(),
            rephrasings: vec![],
            reference_answer: Some("Paris".into()),
            responses: vec![a, ResponseRecord::new("Lyon")],
        }
    }

    #[test]
    fn minimal_record_is_valid() {
        assert!(validate_dataset(&[minimal()]).is_empty());
    }

    #[test]
    fn two_primaries_is_one_error_naming_the_question() {
        let mut r = minimal();
        r.responses[1].is_primary = true;
        let errs = validate_dataset(&[r]);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].question_id, "q1");
    }

    #[test]
    fn missing_primary_depends_on_policy() {
        let mut r = minimal();
        r.responses[0].is_primary = false;
        assert_eq!(validate_dataset(std::slice::from_ref(&r)).len(), 1);
        assert!(validate_dataset_with(&[r], PrimaryPolicy::AllowUnassigned).is_empty());
    }

    #[test]
    fn mixed_embedding_dimensions_are_reported() {
        let mut r = minimal();
        r.responses[0].embedding = Some(vec![0.1; 384]);
        r.responses[1].embedding = Some(vec![0.1; 768]);
        let errs = validate_dataset(&[r]);
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("dimension"), "{}", errs[0]);
        assert_eq!(errs[0].field, "responses[1].embedding");
    }

    #[test]
    fn logprob_requires_token_count_and_prompt_index_is_bounded() {
        let mut r = minimal();
        r.responses[0].token_logprob_sum = Some(-1.0);
        r.responses[1].prompt_index = 1;
        let errs = validate_dataset(&[r]);
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["responses[0].token_count", "responses[1].prompt_index"]);
    }

    #[test]
    fn single_response_and_bad_label_are_rejected() {
        let mut r = minimal();
        r.responses.truncate(1);
        r.responses[0].label = Some(2);
        assert_eq!(validate_dataset(&[r]).len(), 2);
    }

    #[test]
    fn truncated_line_reports_its_line_number() {
        let good = serde_json::to_string(&minimal()).unwrap();
        let text = format!("{good}\n{}\n", &good[..good.len() / 2]);
        let err = read_dataset_from(text.as_bytes(), Path::new("d.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_required_field_is_named() {
        let text = r#"{"id":"q","responses":[]}"#;
        let err = read_dataset_from(text.as_bytes(), Path::new("d.jsonl")).unwrap_err();
        assert!(err.to_string().contains("question"), "{err}");
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(read_dataset_from(&b""[..], Path::new("e.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn optional_fields_are_omitted_not_null() {
        let line = serde_json::to_string(&minimal()).unwrap();
        assert!(!line.contains("null"));
        assert!(!line.contains("embedding"));
    }
}
