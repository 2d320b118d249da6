//! LLM-backed data synthesis: Multi-VQA prompt construction, completion
//! parsing and validation, answer-to-question prompts, and a blocking
//! chat-completion client with retries and an audit log.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("multi-image questions need at least 2 captions, got {0}")]
    TooFewImages(usize),
    #[error("reference answer is empty")]
    EmptyAnswer,
    #[error("expected {expected} QA pairs, found {found}")]
    CountMismatch { found: usize, expected: usize },
    #[error("line {0}: answer before any question")]
    OrphanAnswer(usize),
    #[error("line {0}: question has no answer")]
    UnansweredQuestion(usize),
    #[error("line {0}: empty question or answer")]
    EmptyField(usize),
    #[error("API error: status {0}")]
    ApiError(u16),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response body: {0}")]
    BadResponse(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("audit log: {0}")]
    Audit(String),
}

/// Number of QA pairs the Multi-VQA prompt asks for.
pub const MULTIVQA_PAIRS: usize = 10;

pub const MULTIVQA_TEMPLATE: &str = "Please generate 10 independent QA pairs. Each question shall involve at least 2 images to answer. \
Try to cover different ability like reasoning, planning, common sense understanding, etc. \
Be creative with your questions and **make sure the answers require integration of information from multiple images**. \
Use \"image i\" to refer to the i-th image in your questions.

Output format:
Question: First question?
Answer: The answer to the first question.
Question: Second question?
Answer: The answer to the second question.
...";

/// Caption block (`image {i}: {caption}` per line), a blank line, then the
/// fixed template.
pub fn build_multivqa_prompt(captions: &[String]) -> Result<String, SynthError> {
    if captions.len() < 2 {
        return Err(SynthError::TooFewImages(captions.len()));
    }
    let mut prompt = String::new();
    for (i, caption) in captions.iter().enumerate() {
        prompt.push_str(&format!("image {}: {}\n", i + 1, caption));
    }
    prompt.push('\n');
    prompt.push_str(MULTIVQA_TEMPLATE);
    Ok(prompt)
}

pub fn build_question_for_answer_prompt(reference_answer: &str) -> Result<String, SynthError> {
    if reference_answer.trim().is_empty() {
        return Err(SynthError::EmptyAnswer);
    }
    Ok(format!(
        "Given the following answer describing the differences between two bird images, \
write one natural question a user could have asked. Answer: {reference_answer}. Output only the question."
    ))
}

/// Pulls the question out of a completion for the answer-to-question
/// prompt: the first non-empty line, without a leading `Question:` label or
/// surrounding quotes.
pub fn extract_single_question(response: &str) -> Option<String> {
    let line = response.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = strip_label(line, "question").map_or(line, str::trim);
    let line = line.trim_matches(|c| c == '"' || c == '\'' || c == '*').trim();
    (!line.is_empty()).then(|| line.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    /// 1-based image numbers mentioned as `image <n>` in the question.
    pub referenced_images: BTreeSet<usize>,
}

static IMAGE_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bimage\s*(\d+)").expect("valid regex"));

pub fn referenced_images(text: &str) -> BTreeSet<usize> {
    IMAGE_REF
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

/// Strips a `label:` prefix (case-insensitive, optionally wrapped in `**`).
fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let line = line.trim_start().trim_start_matches("**");
    let head = line.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = line[label.len()..].trim_start_matches("**");
    let rest = rest.strip_prefix(':')?;
    Some(rest.strip_prefix("**").unwrap_or(rest))
}

struct Pending {
    question: String,
    answer: Option<String>,
    line: usize,
}

impl Pending {
    fn finish(self) -> Result<QaPair, SynthError> {
        let answer = self
            .answer
            .ok_or(SynthError::UnansweredQuestion(self.line))?;
        let question = self.question.trim().to_string();
        let answer = answer.trim().to_string();
        if question.is_empty() || answer.is_empty() {
            return Err(SynthError::EmptyField(self.line));
        }
        Ok(QaPair {
            referenced_images: referenced_images(&question),
            question,
            answer,
        })
    }
}

/// Parses `Question:` / `Answer:` blocks without checking how many there are.
/// Lines before the first question are ignored; other unlabeled lines extend
/// whichever field is open.
pub fn parse_qa_pairs_any(response: &str) -> Result<Vec<QaPair>, SynthError> {
    let mut pairs = Vec::new();
    let mut current: Option<Pending> = None;
    for (n, line) in response.lines().enumerate() {
        let line_no = n + 1;
        if let Some(rest) = strip_label(line, "question") {
            if let Some(done) = current.take() {
                pairs.push(done.finish()?);
            }
            current = Some(Pending {
                question: rest.to_string(),
                answer: None,
                line: line_no,
            });
        } else if let Some(rest) = strip_label(line, "answer") {
            match current.as_mut() {
                None => return Err(SynthError::OrphanAnswer(line_no)),
                Some(p) => match p.answer.as_mut() {
                    None => p.answer = Some(rest.to_string()),
                    Some(a) => {
                        a.push('\n');
                        a.push_str(rest);
                    }
                },
            }
        } else if let Some(p) = current.as_mut() {
            let field = p.answer.as_mut().unwrap_or(&mut p.question);
            field.push('\n');
            field.push_str(line);
        }
    }
    if let Some(done) = current {
        pairs.push(done.finish()?);
    }
    Ok(pairs)
}

pub fn parse_qa_pairs(response: &str, expected: usize) -> Result<Vec<QaPair>, SynthError> {
    let pairs = parse_qa_pairs_any(response)?;
    if pairs.len() != expected {
        return Err(SynthError::CountMismatch {
            found: pairs.len(),
            expected,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedPair {
    pub pair: QaPair,
    pub reason: String,
}

/// Splits pairs into those that reference at least two valid images and
/// those that do not.
pub fn validate_multivqa(pairs: Vec<QaPair>, n_images: usize) -> (Vec<QaPair>, Vec<RejectedPair>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for pair in pairs {
        let reason = if let Some(bad) = pair
            .referenced_images
            .iter()
            .find(|&&i| i == 0 || i > n_images)
        {
            Some(format!("references image {bad} of {n_images}"))
        } else if pair.referenced_images.len() < 2 {
            Some(format!(
                "references {} image(s), need at least 2",
                pair.referenced_images.len()
            ))
        } else {
            None
        };
        match reason {
            Some(reason) => rejected.push(RejectedPair { pair, reason }),
            None => accepted.push(pair),
        }
    }
    (accepted, rejected)
}

// ---------------------------------------------------------------------------
// Client

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRequest {
    pub id: String,
    pub captions: Vec<String>,
    pub prompt: String,
    pub model_name: String,
    pub max_retries: u32,
    pub timeout: Duration,
}

impl SynthRequest {
    pub fn multivqa(
        id: impl Into<String>,
        captions: Vec<String>,
        settings: &SynthSettings,
    ) -> Result<Self, SynthError> {
        let prompt = build_multivqa_prompt(&captions)?;
        Ok(SynthRequest {
            id: id.into(),
            captions,
            prompt,
            model_name: settings.model.clone(),
            max_retries: settings.max_retries,
            timeout: Duration::from_secs_f64(settings.timeout_secs),
        })
    }

    pub fn freeform(id: impl Into<String>, prompt: String, settings: &SynthSettings) -> Self {
        SynthRequest {
            id: id.into(),
            captions: Vec::new(),
            prompt,
            model_name: settings.model.clone(),
            max_retries: settings.max_retries,
            timeout: Duration::from_secs_f64(settings.timeout_secs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            model: "gpt-4".into(),
            temperature: 0.7,
            max_retries: 3,
            timeout_secs: 60.0,
            backoff_base_ms: 1000,
            max_in_flight: 4,
        }
    }
}

/// Append-only JSONL log of every attempt.
pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    fn record(&self, entry: serde_json::Value) -> Result<(), SynthError> {
        let mut out = self.out.lock().expect("audit log lock");
        writeln!(out, "{entry}")
            .and_then(|_| out.flush())
            .map_err(|e| SynthError::Audit(e.to_string()))
    }
}

pub struct SynthClient {
    api_base: String,
    api_key: String,
    temperature: f64,
    backoff_base: Duration,
    max_in_flight: usize,
    audit: Option<AuditLog>,
}

enum Attempt {
    Done(String),
    Retry(SynthError),
    Fatal(SynthError),
}

impl SynthClient {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>, settings: &SynthSettings) -> Self {
        SynthClient {
            api_base: api_base.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            temperature: settings.temperature,
            backoff_base: Duration::from_millis(settings.backoff_base_ms),
            max_in_flight: settings.max_in_flight.max(1),
            audit: None,
        }
    }

    /// Reads `SYNTH_API_BASE` and `SYNTH_API_KEY`.
    pub fn from_env(settings: &SynthSettings) -> Result<Self, SynthError> {
        let base =
            std::env::var("SYNTH_API_BASE").map_err(|_| SynthError::MissingEnv("SYNTH_API_BASE"))?;
        let key =
            std::env::var("SYNTH_API_KEY").map_err(|_| SynthError::MissingEnv("SYNTH_API_KEY"))?;
        Ok(SynthClient::new(base, key, settings))
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    fn attempt(&self, req: &SynthRequest, attempt: u32) -> Attempt {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(req.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = json!({
            "model": req.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": self.temperature,
        });
        let url = format!("{}/chat/completions", self.api_base);
        let result = agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);

        let (status, text, outcome) = match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                let outcome = if status == 200 {
                    match completion_text(&text) {
                        Some(content) => Attempt::Done(content),
                        None => Attempt::Fatal(SynthError::BadResponse(truncate(&text, 200))),
                    }
                } else if status == 429 || status >= 500 {
                    Attempt::Retry(SynthError::ApiError(status))
                } else {
                    Attempt::Fatal(SynthError::ApiError(status))
                };
                (Some(status), text, outcome)
            }
            Err(ureq::Error::Timeout(_)) => (None, String::new(), Attempt::Retry(SynthError::Timeout)),
            Err(e) => (
                None,
                String::new(),
                Attempt::Retry(SynthError::Transport(e.to_string())),
            ),
        };
        if let Some(audit) = &self.audit {
            let error = match &outcome {
                Attempt::Done(_) => None,
                Attempt::Retry(e) | Attempt::Fatal(e) => Some(e.to_string()),
            };
            if let Err(e) = audit.record(json!({
                "id": req.id,
                "attempt": attempt,
                "request": body,
                "status": status,
                "response": text,
                "error": error,
            })) {
                return Attempt::Fatal(e);
            }
        }
        outcome
    }

    /// Sends one chat-completion request, retrying 429/5xx/transport failures
    /// with exponential backoff (`backoff_base * 2^attempt`). Makes at most
    /// `max_retries + 1` attempts.
    pub fn call_llm(&self, req: &SynthRequest) -> Result<String, SynthError> {
        let mut attempt = 0;
        loop {
            match self.attempt(req, attempt) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempt >= req.max_retries {
                        return Err(e);
                    }
                    tracing::warn!(id = %req.id, attempt, error = %e, "retrying synthesis request");
                    std::thread::sleep(self.backoff_base.saturating_mul(1 << attempt.min(16)));
                    attempt += 1;
                }
            }
        }
    }

    /// Runs requests with at most `max_in_flight` concurrent calls. Results
    /// come back in input order.
    pub fn call_many(&self, reqs: &[SynthRequest]) -> Vec<Result<String, SynthError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<String, SynthError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.max_in_flight.min(reqs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= reqs.len() {
                        break;
                    }
                    let result = self.call_llm(&reqs[i]);
                    *slots[i].lock().expect("result slot") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("result slot").expect("every request ran"))
            .collect()
    }
}

fn completion_text(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((at, _)) => format!("{}...", &s[..at]),
        None => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ten_pairs() -> String {
        (1..=10)
            .map(|i| {
                format!(
                    "Question: How does the object in image {} differ from image {}?\nAnswer: Answer number {i}.\n",
                    i % 3 + 1,
                    i % 3 + 2
                )
            })
            .collect()
    }

    #[test]
    fn prompt_layout() {
        let caps = vec!["a red car".to_string(), "a blue bike".to_string()];
        let p = build_multivqa_prompt(&caps).unwrap();
        assert!(p.starts_with("image 1: a red car\nimage 2: a blue bike\n\n"));
        assert!(p.contains("Please generate 10 independent QA pairs"));
        assert!(p.ends_with(MULTIVQA_TEMPLATE));
        assert_eq!(p, build_multivqa_prompt(&caps).unwrap());
        assert_eq!(
            build_multivqa_prompt(&caps[..1]),
            Err(SynthError::TooFewImages(1))
        );
    }

    #[test]
    fn question_prompt() {
        let p = build_question_for_answer_prompt("The left bird has a longer beak.").unwrap();
        assert!(p.contains("The left bird has a longer beak."));
        assert_eq!(p, build_question_for_answer_prompt("The left bird has a longer beak.").unwrap());
        assert_eq!(build_question_for_answer_prompt(""), Err(SynthError::EmptyAnswer));
        assert_eq!(
            extract_single_question("\n  Question: \"What differs?\"\nextra"),
            Some("What differs?".into())
        );
    }

    #[test]
    fn parses_ten_pairs() {
        let pairs = parse_qa_pairs(&ten_pairs(), 10).unwrap();
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs[0].answer, "Answer number 1.");
        assert!(pairs.iter().all(|p| p.referenced_images.len() == 2));
    }

    #[test]
    fn orphan_and_count_errors() {
        assert_eq!(parse_qa_pairs("Answer: x", 1), Err(SynthError::OrphanAnswer(1)));
        assert_eq!(
            parse_qa_pairs(&ten_pairs(), 9),
            Err(SynthError::CountMismatch { found: 10, expected: 9 })
        );
        assert_eq!(
            parse_qa_pairs_any("Question: a?\nQuestion: b?\nAnswer: c"),
            Err(SynthError::UnansweredQuestion(1))
        );
    }

    #[test]
    fn multiline_answers_and_preamble() {
        let text = "Sure! Here are the pairs.\n\n**Question:** Which is taller, image 1 or Image 2?\n**Answer:** The tower in image 1,\nby far.\n\nQuestion: Compare image 2 and image 3.\nAnswer: Similar.";
        let pairs = parse_qa_pairs(text, 2).unwrap();
        assert_eq!(pairs[0].question, "Which is taller, image 1 or Image 2?");
        assert_eq!(pairs[0].answer, "The tower in image 1,\nby far.");
        assert_eq!(pairs[0].referenced_images, BTreeSet::from([1, 2]));
    }

    #[test]
    fn single_image_pairs_rejected() {
        let text = "Question: What is in image 1?\nAnswer: A cat.\nQuestion: Is image 1 brighter than image 2?\nAnswer: Yes.\nQuestion: Is image 9 bigger than image 1?\nAnswer: No.";
        let pairs = parse_qa_pairs(text, 3).unwrap();
        assert_eq!(pairs[0].referenced_images.len(), 1);
        let (ok, bad) = validate_multivqa(pairs, 3);
        assert_eq!(ok.len(), 1);
        assert_eq!(bad.len(), 2);
        assert!(bad[1].reason.contains("image 9"));
    }

    #[test]
    fn huge_image_numbers_do_not_panic() {
        let refs = referenced_images("image 99999999999999999999999999 and image 2");
        assert_eq!(refs, BTreeSet::from([2]));
    }

    proptest! {
        #[test]
        fn parser_total(text in "\\PC{0,300}") {
            let _ = parse_qa_pairs(&text, 10);
        }

        #[test]
        fn parser_total_on_labelled_noise(
            lines in proptest::collection::vec(
                prop_oneof!["Question: \\PC{0,20}", "Answer: \\PC{0,20}", "\\PC{0,20}", "\\*\\*Answer\\*\\*:"],
                0..30)
        ) {
            let _ = parse_qa_pairs(&lines.join("\n"), 10);
        }
    }
}
