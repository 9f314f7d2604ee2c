//! Narrative refinement: raw narrated captions become generation
//! instructions through a chat-completion service, prompted with a fixed
//! directive and ten annotated exemplars. Responses are validated, cached by
//! prompt hash, and failures are surfaced per clip rather than dropped.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chat::{self, ChatBackend, ChatError, ChatRequest, ResponseCache, RetryPolicy};

pub const MAX_INSTRUCTION_CHARS: usize = 1024;
pub const MAX_REGENERATION_ATTEMPTS: u32 = 2;

const SYSTEM_DIRECTIVE: &str = "Rewrite the narrated surgical caption below as a concise generation \
instruction. Remove educational commentary, audience remarks and other irrelevant narrative. Keep \
every mention of the surgical phase, instruments, medications and actions. Reply with the \
instruction only, as a single paragraph.";

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("exemplar bundle is empty")]
    NoExemplars,
    #[error("invalid exemplar: {0}")]
    InvalidExemplar(String),
    #[error("clip {clip_id}: instruction rejected after {attempts} attempts: {reason}")]
    RefineFailed {
        clip_id: String,
        attempts: u32,
        reason: String,
    },
    #[error(transparent)]
    Service(#[from] ChatError),
    #[error("exemplar file {0}: {1}")]
    ExemplarFile(String, String),
}

/// One of the ten hand-annotated caption/instruction pairs used as few-shot
/// context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exemplar {
    pub raw_caption: String,
    #[serde(default)]
    pub redundant_spans: Vec<String>,
    pub refined_instruction: String,
}

impl Exemplar {
    pub fn validate(&self) -> Result<(), String> {
        if self.refined_instruction.trim().is_empty() {
            return Err("refined_instruction is empty".into());
        }
        for span in &self.redundant_spans {
            if !self.raw_caption.contains(span.as_str()) {
                return Err(format!("redundant span {span:?} not found in raw_caption"));
            }
        }
        Ok(())
    }
}

pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>, RefineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RefineError::ExemplarFile(path.display().to_string(), e.to_string()))?;
    let exemplars: Vec<Exemplar> = serde_json::from_str(&text)
        .map_err(|e| RefineError::ExemplarFile(path.display().to_string(), e.to_string()))?;
    for ex in &exemplars {
        ex.validate().map_err(RefineError::InvalidExemplar)?;
    }
    Ok(exemplars)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub clip_id: String,
    pub instruction: String,
    pub backend_fingerprint: String,
    pub cached: bool,
}

/// Reasons `validate_instruction` can reject a candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstructionIssue {
    Empty,
    TooLong(usize),
    ContainsUrl,
    Pedagogical(String),
    MultiParagraph,
}

impl std::fmt::Display for InstructionIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InstructionIssue::Empty => write!(f, "empty after trim"),
            InstructionIssue::TooLong(n) => write!(f, "{n} characters exceeds {MAX_INSTRUCTION_CHARS}"),
            InstructionIssue::ContainsUrl => write!(f, "contains a URL"),
            InstructionIssue::Pedagogical(p) => write!(f, "pedagogical phrase {p:?}"),
            InstructionIssue::MultiParagraph => write!(f, "not a single paragraph"),
        }
    }
}

pub fn default_blocklist() -> Vec<String> {
    [
        "as you can see",
        "as we can see",
        "you can see",
        "students should",
        "in this video",
        "in this lecture",
        "let us",
        "let's",
        "we will now",
        "note that",
        "remember that",
        "welcome to",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Pass iff the candidate is non-empty after trim, at most 1024 characters, a
/// single paragraph, and free of URLs and blocklisted pedagogical phrases.
pub fn validate_instruction(text: &str, blocklist: &[String]) -> Result<(), InstructionIssue> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(InstructionIssue::Empty);
    }
    if trimmed.chars().count() > MAX_INSTRUCTION_CHARS {
        return Err(InstructionIssue::TooLong(trimmed.chars().count()));
    }
    if trimmed.contains('\n') {
        return Err(InstructionIssue::MultiParagraph);
    }
    let lower = trimmed.to_lowercase();
    if lower.contains("http://") || lower.contains("https://") || lower.contains("www.") {
        return Err(InstructionIssue::ContainsUrl);
    }
    for phrase in blocklist {
        if lower.contains(&phrase.to_lowercase()) {
            return Err(InstructionIssue::Pedagogical(phrase.clone()));
        }
    }
    Ok(())
}

// Captions are carried on single "Input:"/"Output:" lines; escaping
// backslashes and newlines keeps embedded delimiters parseable.
pub fn escape_field(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Deterministic prompt: directive, the exemplars as Input/Output pairs, then
/// the target caption with an open Output slot.
pub fn build_prompt(caption: &str, exemplars: &[Exemplar]) -> Result<String, RefineError> {
    if caption.trim().is_empty() {
        return Err(RefineError::EmptyCaption);
    }
    if exemplars.is_empty() {
        return Err(RefineError::NoExemplars);
    }
    let mut prompt = String::new();
    prompt.push_str(SYSTEM_DIRECTIVE);
    prompt.push_str("\n\n");
    for ex in exemplars {
        prompt.push_str(&format!(
            "Input: {}\nOutput: {}\n\n",
            escape_field(&ex.raw_caption),
            escape_field(&ex.refined_instruction)
        ));
    }
    prompt.push_str(&format!("Input: {}\nOutput:", escape_field(caption)));
    Ok(prompt)
}

/// Inverse view of a prompt: the demonstration pairs and the target caption.
/// Used by tests and by the mock backend.
pub fn parse_prompt_blocks(prompt: &str) -> (Vec<(String, String)>, Option<String>) {
    let mut pairs = Vec::new();
    let mut target = None;
    let mut pending_input: Option<String> = None;
    for line in prompt.lines() {
        if let Some(rest) = line.strip_prefix("Input: ") {
            pending_input = Some(unescape_field(rest));
        } else if let Some(rest) = line.strip_prefix("Output:") {
            if let Some(input) = pending_input.take() {
                let output = unescape_field(rest.trim_start());
                if output.is_empty() {
                    target = Some(input);
                } else {
                    pairs.push((input, output));
                }
            }
        }
    }
    if target.is_none() {
        target = pending_input;
    }
    (pairs, target)
}

pub fn target_caption_of_prompt(prompt: &str) -> Option<String> {
    parse_prompt_blocks(prompt).1
}

pub struct Refiner {
    pub backend: Arc<dyn ChatBackend>,
    pub cache: ResponseCache,
    pub exemplars: Vec<Exemplar>,
    pub model: String,
    pub retry: RetryPolicy,
    pub blocklist: Vec<String>,
}

impl Refiner {
    /// Refine one caption. Cache hits return without touching the network;
    /// misses call the service with retries and validate the answer, asking
    /// again up to [`MAX_REGENERATION_ATTEMPTS`] more times on validation
    /// failure before reporting the clip as refine-failed.
    pub fn refine_caption(&self, clip_id: &str, caption: &str) -> Result<RefinementResult, RefineError> {
        let prompt = build_prompt(caption, &self.exemplars)?;
        let key = chat::sha256_hex(prompt.as_bytes());
        let fingerprint = format!(
            "{}+prompt:{}",
            self.backend.fingerprint(),
            &key[..16]
        );
        if let Some(instruction) = self.cache.get(&key) {
            return Ok(RefinementResult {
                clip_id: clip_id.to_string(),
                instruction,
                backend_fingerprint: fingerprint,
                cached: true,
            });
        }
        let request = ChatRequest::single_user(&self.model, &prompt);
        let mut last_issue = String::new();
        for _attempt in 0..=MAX_REGENERATION_ATTEMPTS {
            let text = chat::with_retry(&self.retry, || self.backend.complete(&request))?;
            let candidate = text.trim().to_string();
            match validate_instruction(&candidate, &self.blocklist) {
                Ok(()) => {
                    self.cache.put(&key, &candidate)?;
                    return Ok(RefinementResult {
                        clip_id: clip_id.to_string(),
                        instruction: candidate,
                        backend_fingerprint: fingerprint,
                        cached: false,
                    });
                }
                Err(issue) => last_issue = issue.to_string(),
            }
        }
        Err(RefineError::RefineFailed {
            clip_id: clip_id.to_string(),
            attempts: 1 + MAX_REGENERATION_ATTEMPTS,
            reason: last_issue,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::mock::MockChatBackend;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn exemplars(n: usize) -> Vec<Exemplar> {
        (0..n)
            .map(|i| Exemplar {
                raw_caption: format!("As you can see, we now inject medication {i}."),
                redundant_spans: vec!["As you can see".into()],
                refined_instruction: format!("Inject medication {i}."),
            })
            .collect()
    }

    fn refiner_with(backend: Arc<dyn ChatBackend>, dir: &Path) -> Refiner {
        Refiner {
            backend,
            cache: ResponseCache::new(dir.join("cache")).unwrap(),
            exemplars: exemplars(10),
            model: "test".into(),
            retry: RetryPolicy::immediate(3),
            blocklist: default_blocklist(),
        }
    }

    #[test]
    fn prompt_contains_ten_demonstration_blocks() {
        let prompt = build_prompt("Irrigation of the anterior chamber.", &exemplars(10)).unwrap();
        let (pairs, target) = parse_prompt_blocks(&prompt);
        assert_eq!(pairs.len(), 10);
        assert_eq!(target.as_deref(), Some("Irrigation of the anterior chamber."));
    }

    #[test]
    fn prompt_is_deterministic() {
        let a = build_prompt("caption", &exemplars(10)).unwrap();
        let b = build_prompt("caption", &exemplars(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delimiters_in_caption_survive_round_trip() {
        let tricky = "line one\nInput: fake\nOutput: fake\\end";
        let prompt = build_prompt(tricky, &exemplars(2)).unwrap();
        let (pairs, target) = parse_prompt_blocks(&prompt);
        assert_eq!(pairs.len(), 2);
        assert_eq!(target.as_deref(), Some(tricky));
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(matches!(
            build_prompt("   ", &exemplars(1)),
            Err(RefineError::EmptyCaption)
        ));
    }

    #[test]
    fn validation_verdicts() {
        let bl = default_blocklist();
        assert!(validate_instruction(
            "Phacoemulsification of the nucleus using a phaco handpiece.",
            &bl
        )
        .is_ok());
        assert_eq!(validate_instruction("", &bl), Err(InstructionIssue::Empty));
        assert!(matches!(
            validate_instruction("As you can see, students should note this.", &bl),
            Err(InstructionIssue::Pedagogical(_))
        ));
        assert_eq!(
            validate_instruction("See https://example.com for details.", &bl),
            Err(InstructionIssue::ContainsUrl)
        );
        assert_eq!(
            validate_instruction("para one\n\npara two", &bl),
            Err(InstructionIssue::MultiParagraph)
        );
        let long = "x".repeat(1025);
        assert!(matches!(
            validate_instruction(&long, &bl),
            Err(InstructionIssue::TooLong(1025))
        ));
    }

    #[test]
    fn mock_backend_refinement_validates() {
        let dir = tempfile::tempdir().unwrap();
        let refiner = refiner_with(Arc::new(MockChatBackend::default()), dir.path());
        let result = refiner
            .refine_caption("c1", "As you can see, this is great. Hydrodissection is performed.")
            .unwrap();
        assert_eq!(result.instruction, "Hydrodissection is performed.");
        assert!(!result.cached);
    }

    #[test]
    fn cache_hit_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(MockChatBackend::default());
        let refiner = refiner_with(backend.clone(), dir.path());
        let first = refiner.refine_caption("c1", "Hydrodissection is performed.").unwrap();
        let calls_after_first = backend.calls.load(Ordering::SeqCst);
        let second = refiner.refine_caption("c1", "Hydrodissection is performed.").unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), calls_after_first);
        assert!(second.cached);
        assert_eq!(first.instruction, second.instruction);
    }

    #[test]
    fn empty_responses_surface_refine_failed() {
        struct EmptyBackend {
            calls: AtomicU64,
        }
        impl ChatBackend for EmptyBackend {
            fn complete(&self, _r: &ChatRequest) -> Result<String, ChatError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Ok("".into())
            }
            fn fingerprint(&self) -> String {
                "empty".into()
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(EmptyBackend { calls: AtomicU64::new(0) });
        let refiner = refiner_with(backend.clone(), dir.path());
        let err = refiner.refine_caption("c1", "A caption.").unwrap_err();
        match err {
            RefineError::RefineFailed { clip_id, attempts, reason } => {
                assert_eq!(clip_id, "c1");
                assert_eq!(attempts, 3);
                assert!(reason.contains("empty"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn prompt_isolation_between_clips() {
        let exemplars = exemplars(10);
        let caption_a = "UNIQUE-A phacoemulsification step.";
        let caption_b = "UNIQUE-B irrigation step.";
        let prompt_a = build_prompt(caption_a, &exemplars).unwrap();
        assert!(prompt_a.contains("UNIQUE-A"));
        assert!(!prompt_a.contains("UNIQUE-B"));
        let prompt_b = build_prompt(caption_b, &exemplars).unwrap();
        assert!(!prompt_b.contains("UNIQUE-A"));
    }

    #[test]
    fn exemplar_span_validation() {
        let bad = Exemplar {
            raw_caption: "short caption".into(),
            redundant_spans: vec!["not present".into()],
            refined_instruction: "Do the step.".into(),
        };
        assert!(bad.validate().is_err());
    }
}
