//! Correctness labels for sampled responses: ROUGE-L against the reference
//! answer, an external LLM judge, or a manual label file.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::ingest::{post_json, RetryPolicy};

pub const JUDGE_API_KEY_ENV: &str = "JUDGE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMethod {
    Rouge,
    LlmJudge,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelerConfig {
    pub method: LabelMethod,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub judge_endpoint: Option<String>,
    /// Replace labels that are already present.
    #[serde(default)]
    pub overwrite: bool,
}

fn default_tau() -> f64 {
    0.3
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            method: LabelMethod::Rouge,
            tau: default_tau(),
            judge_endpoint: None,
            overwrite: false,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.method == LabelMethod::LlmJudge && self.judge_endpoint.is_none() {
            return Err(Error::Config("llm_judge labeling requires judge_endpoint".into()));
        }
        Ok(())
    }
}

/// Lowercases, splits on Unicode whitespace, and trims non-alphanumeric
/// characters from both ends of each token. Tokens left empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced ROUGE-L F-measure between two token sequences.
pub fn rouge_l_f1<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Domain("rouge-l needs non-empty token lists".into()));
    }
    let lcs = lcs_length(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// ROUGE-L F1 between raw texts; an answer with no tokens scores 0.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<f64> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Ok(0.0);
    }
    rouge_l_f1(&c, &r)
}

/// Labels every response 1 iff its ROUGE-L F1 against the reference is at least `tau`.
pub fn label_by_rouge(mut record: QuestionRecord, tau: f64, overwrite: bool) -> Result<QuestionRecord> {
    let reference = record.reference_answer.as_deref().ok_or_else(|| {
        Error::Data(format!("question {}: reference_answer missing", record.id))
    })?;
    let reference_tokens = tokenize(reference);
    if reference_tokens.is_empty() {
        return Err(Error::Data(format!(
            "question {}: reference_answer has no tokens",
            record.id
        )));
    }
    for response in &mut record.responses {
        if response.label.is_some() && !overwrite {
            continue;
        }
        let tokens = tokenize(&response.text);
        let score = if tokens.is_empty() {
            0.0
        } else {
            rouge_l_f1(&tokens, &reference_tokens)?
        };
        response.label = Some(u8::from(score >= tau));
    }
    Ok(record)
}

pub const REPHRASE_PROMPT_TEMPLATE: &str = "You are a helpful assistant. I have a question that \
I would like to see it rephrased in multiple ways. Please take the original question and generate \
several rephrased versions while maintaining the same meaning, and the question can only have one \
direct answer. Here is the original question: {question}. Please provide four distinct rephrases \
of the question.";

pub const LABEL_PROMPT_TEMPLATE: &str = "You will be provided with a question, a reference answer, \
and a student\u{2019}s answer. Please evaluate the student\u{2019}s answer based on the reference answer \
and provide your score for the student\u{2019}s answer in the format: \u{201c}Score: \u{201d}. Assign a \
score of 0 for incorrect and 1 for correct. For example, \u{201c}Score: 0\u{201d} or \u{201c}Score: 1\u{201d}. \
Do not include any additional information.\nQuestion: {question}\nStudent answer: {response}\n\
Reference answer: {reference}\nNow, please enter your score. Score:";

pub fn rephrase_prompt(question: &str) -> String {
    REPHRASE_PROMPT_TEMPLATE.replace("{question}", question)
}

pub fn label_prompt(question: &str, response: &str, reference: &str) -> String {
    // substitute the response last so braces inside answers are left alone
    LABEL_PROMPT_TEMPLATE
        .replace("{question}", question)
        .replace("{reference}", reference)
        .replace("{response}", response)
}

/// Extracts the label from a judge reply: the literal `Score:` followed by 0 or 1.
pub fn parse_judge_score(reply: &str) -> Option<u8> {
    reply.match_indices("Score:").find_map(|(i, m)| {
        let mut rest = reply[i + m.len()..].trim_start().chars();
        let digit = match rest.next()? {
            '0' => 0,
            '1' => 1,
            _ => return None,
        };
        match rest.next() {
            Some(c) if c.is_ascii_digit() => None,
            _ => Some(digit),
        }
    })
}

pub trait JudgeClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct JudgeReply {
    text: String,
}

#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: String,
    pub token: Option<String>,
    pub retry: RetryPolicy,
}

impl HttpJudge {
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        HttpJudge {
            endpoint: endpoint.into(),
            token: std::env::var(JUDGE_API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
        }
    }
}

impl JudgeClient for HttpJudge {
    fn complete(&self, prompt: &str) -> Result<String> {
        let reply: JudgeReply = post_json(
            &self.endpoint,
            self.token.as_deref(),
            &JudgeRequest { prompt },
            &self.retry,
        )?;
        Ok(reply.text)
    }
}

/// A response the judge could not label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledResponse {
    pub question_id: String,
    pub response_index: usize,
    pub last_reply: String,
}

pub const JUDGE_REASKS: usize = 2;

/// Labels responses by asking the judge; unparsable replies are re-asked
/// up to [`JUDGE_REASKS`] times and then left unlabeled.
pub fn label_by_llm_judge(
    mut record: QuestionRecord,
    judge: &dyn JudgeClient,
    overwrite: bool,
) -> Result<(QuestionRecord, Vec<UnlabeledResponse>)> {
    let reference = record
        .reference_answer
        .clone()
        .ok_or_else(|| Error::Data(format!("question {}: reference_answer missing", record.id)))?;
    let mut unlabeled = Vec::new();
    for (i, response) in record.responses.iter_mut().enumerate() {
        if response.label.is_some() && !overwrite {
            continue;
        }
        let prompt = label_prompt(&record.question, &response.text, &reference);
        let mut last_reply = String::new();
        let mut label = None;
        for _ in 0..=JUDGE_REASKS {
            last_reply = judge.complete(&prompt)?;
            label = parse_judge_score(&last_reply);
            if label.is_some() {
                break;
            }
        }
        match label {
            Some(l) => response.label = Some(l),
            None => {
                response.label = None;
                unlabeled.push(UnlabeledResponse {
                    question_id: record.id.clone(),
                    response_index: i,
                    last_reply,
                });
            }
        }
    }
    Ok((record, unlabeled))
}

#[derive(Debug, Clone, Deserialize)]
struct ManualLabelRow {
    question_id: String,
    response_index: usize,
    label: u8,
}

/// Applies a `question_id,response_index,label` CSV; manual labels always win.
pub fn ingest_manual_labels(
    mut records: Vec<QuestionRecord>,
    label_file: impl AsRef<Path>,
) -> Result<Vec<QuestionRecord>> {
    let path = label_file.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let by_id: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();

    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, row) in reader.deserialize::<ManualLabelRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let known = by_id
            .get(&row.question_id)
            .is_some_and(|&q| row.response_index < records[q].responses.len());
        if !known || row.label > 1 {
            bad.push(format!(
                "line {line}: ({}, {}, {})",
                row.question_id, row.response_index, row.label
            ));
        } else {
            rows.push(row);
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!(
            "manual label file {} has rows with unknown question/response or invalid label: {}",
            path.display(),
            bad.join("; ")
        )));
    }
    for row in rows {
        records[by_id[&row.question_id]].responses[row.response_index].label = Some(row.label);
    }
    Ok(records)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ResponseRecord;
    use std::cell::RefCell;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_lowercases_and_trims_punctuation() {
        assert_eq!(tokenize("  The CAT, sat... \"there\"!\t"), vec!["the", "cat", "sat", "there"]);
        assert_eq!(tokenize("U.S. don't"), vec!["u.s", "don't"]);
        assert!(tokenize(" -- ").is_empty());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l_f1(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        let f = rouge_l_f1(&toks("the cat"), &toks("the cat sat")).unwrap();
        assert_eq!(f, 0.8);
        assert!(rouge_l_f1::<String>(&[], &toks("x")).is_err());
    }

    fn record(reference: Option<&str>, texts: &[&str]) -> QuestionRecord {
        QuestionRecord {
            id: "q7".into(),
            question: "What sat?".into(),
            rephrasings: vec![],
            reference_answer: reference.map(String::from),
            responses: texts.iter().map(|t| ResponseRecord::new(*t)).collect(),
        }
    }

    #[test]
    fn rouge_labels_follow_tau() {
        let r = record(Some("the cat sat"), &["the cat sat", "dog", "the cat"]);
        let low = label_by_rouge(r.clone(), 0.3, false).unwrap();
        assert_eq!(low.labels(), Some(vec![1, 0, 1]));
        let high = label_by_rouge(r, 0.9, false).unwrap();
        assert_eq!(high.labels(), Some(vec![1, 0, 0]));
    }

    #[test]
    fn rouge_labels_keep_existing_unless_overwriting() {
        let mut r = record(Some("the cat sat"), &["the cat sat", "dog"]);
        r.responses[1].label = Some(1);
        assert_eq!(label_by_rouge(r.clone(), 0.3, false).unwrap().labels(), Some(vec![1, 1]));
        assert_eq!(label_by_rouge(r, 0.3, true).unwrap().labels(), Some(vec![1, 0]));
    }

    #[test]
    fn missing_reference_names_the_question() {
        let err = label_by_rouge(record(None, &["a", "b"]), 0.3, false).unwrap_err();
        assert!(err.to_string().contains("q7"));
    }

    #[test]
    fn judge_score_parsing_is_strict() {
        assert_eq!(parse_judge_score("Score: 1"), Some(1));
        assert_eq!(parse_judge_score("Score: 0"), Some(0));
        assert_eq!(parse_judge_score("Score:1\n"), Some(1));
        assert_eq!(parse_judge_score("I think it is correct"), None);
        assert_eq!(parse_judge_score("Score: 10"), None);
        assert_eq!(parse_judge_score("score: 1"), None);
        assert_eq!(parse_judge_score("1"), None);
    }

    #[test]
    fn label_prompt_substitutes_all_fields() {
        let p = label_prompt("Q?", "R {x}", "A");
        assert!(p.contains("Question: Q?\nStudent answer: R {x}\nReference answer: A\n"));
        assert!(p.ends_with("Score:"));
        assert!(rephrase_prompt("Who?").contains("original question: Who?."));
    }

    struct Scripted {
        replies: RefCell<Vec<&'static str>>,
        prompts: RefCell<Vec<String>>,
    }

    impl JudgeClient for Scripted {
        fn complete(&self, prompt: &str) -> Result<String> {
            self.prompts.borrow_mut().push(prompt.to_string());
            Ok(self.replies.borrow_mut().remove(0).to_string())
        }
    }

    #[test]
    fn judge_reasks_then_gives_up() {
        let judge = Scripted {
            replies: RefCell::new(vec![
                "Score: 1",
                "hmm",
                "Score: 0",
                "I think it is correct",
                "still no",
                "nope",
            ]),
            prompts: RefCell::new(vec![]),
        };
        let r = record(Some("Paris"), &["Paris", "Lyon", "Nice"]);
        let (out, unlabeled) = label_by_llm_judge(r, &judge, false).unwrap();
        let labels: Vec<_> = out.responses.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![Some(1), Some(0), None]);
        assert_eq!(unlabeled.len(), 1);
        assert_eq!(unlabeled[0].response_index, 2);
        assert_eq!(judge.prompts.borrow().len(), 6);
    }
}
