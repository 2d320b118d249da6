//! Interleaved text-image serialization and image-token budget arithmetic.
//!
//! Each image slot renders as `(image {i}: <Image><image></Image>)` by
//! default: the slot number makes the image order explicit and the
//! begin/end delimiters mark where image patches are spliced in. Messages are
//! prefixed with a role header and joined with `\n`.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, Role, Segment};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InterleaveError {
    #[error("invalid format: {0}")]
    InvalidFormat(String),
    #[error("malformed image slot at bytes {}..{}", .0.start, .0.end)]
    MalformedSlot(Range<usize>),
    #[error("patch size {patch} does not divide resolution {resolution}")]
    NonDivisible { resolution: u64, patch: u64 },
    #[error("invalid token budget: {0}")]
    InvalidBudget(String),
}

/// Characters that mark a delimiter as markup rather than prose.
const MARKUP_CHARS: &[char] = &['<', '>', '[', ']', '|', '{', '}'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterleaveFormat {
    pub boi: String,
    pub eoi: String,
    /// Holes: `{i}` (slot number), `{image}` (placeholder), `{boi}`, `{eoi}`.
    pub slot_template: String,
    pub image_placeholder: String,
    pub user_header: String,
    pub assistant_header: String,
}

impl Default for InterleaveFormat {
    fn default() -> Self {
        InterleaveFormat {
            boi: "<Image>".into(),
            eoi: "</Image>".into(),
            slot_template: "(image {i}: {boi}{image}{eoi})".into(),
            image_placeholder: "<image>".into(),
            user_header: "USER:".into(),
            assistant_header: "ASSISTANT:".into(),
        }
    }
}

impl InterleaveFormat {
    pub fn validate(&self) -> Result<(), InterleaveError> {
        let bad = |m: String| Err(InterleaveError::InvalidFormat(m));
        for (name, tok) in [("boi", &self.boi), ("eoi", &self.eoi)] {
            if tok.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if !tok.contains(MARKUP_CHARS) {
                return bad(format!(
                    "{name} {tok:?} must contain a markup character (one of {MARKUP_CHARS:?})"
                ));
            }
        }
        if self.boi == self.eoi {
            return bad("boi and eoi must differ".into());
        }
        if self.image_placeholder.is_empty() {
            return bad("image_placeholder is empty".into());
        }
        for hole in ["{i}", "{image}"] {
            let n = self.slot_template.matches(hole).count();
            if n != 1 {
                return bad(format!(
                    "slot_template must contain {hole} exactly once, found {n}"
                ));
            }
        }
        for hole in ["{boi}", "{eoi}"] {
            if self.slot_template.matches(hole).count() > 1 {
                return bad(format!("slot_template repeats {hole}"));
            }
        }
        Ok(())
    }

    /// Returns the first delimiter that occurs inside `text`, if any. Text
    /// containing a delimiter would not survive a serialize/parse round trip.
    pub fn reserved_in<'a>(&'a self, text: &str) -> Option<&'a str> {
        [&self.boi, &self.eoi]
            .into_iter()
            .find(|tok| text.contains(tok.as_str()))
            .map(String::as_str)
    }

    pub fn render_slot(&self, index: usize) -> String {
        self.slot_template
            .replace("{boi}", &self.boi)
            .replace("{eoi}", &self.eoi)
            .replace("{image}", &self.image_placeholder)
            .replace("{i}", &index.to_string())
    }

    fn header(&self, role: Role) -> &str {
        match role {
            Role::User => &self.user_header,
            Role::Assistant => &self.assistant_header,
        }
    }

    /// Regex matching one rendered slot, with the slot number in group 1.
    fn slot_regex(&self) -> Regex {
        let filled = self
            .slot_template
            .replace("{boi}", "\u{0}B")
            .replace("{eoi}", "\u{0}E")
            .replace("{image}", "\u{0}P")
            .replace("{i}", "\u{0}I");
        let mut pattern = String::new();
        let mut parts = filled.split('\u{0}');
        pattern.push_str(&regex::escape(parts.next().unwrap_or("")));
        for part in parts {
            let (tag, rest) = part.split_at(1);
            match tag {
                "B" => pattern.push_str(&regex::escape(&self.boi)),
                "E" => pattern.push_str(&regex::escape(&self.eoi)),
                "P" => pattern.push_str(&regex::escape(&self.image_placeholder)),
                _ => pattern.push_str(r"(\d+)"),
            }
            pattern.push_str(&regex::escape(rest));
        }
        let mut cache = SLOT_REGEXES.lock().expect("slot regex cache");
        cache
            .entry(pattern)
            .or_insert_with_key(|p| Regex::new(p).expect("escaped slot pattern compiles"))
            .clone()
    }
}

static SLOT_REGEXES: LazyLock<Mutex<HashMap<String, Regex>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// One image slot found in serialized text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpan {
    pub index: usize,
    pub span: Range<usize>,
}

/// Renders an instance in the interleaved format. Deterministic.
pub fn serialize(instance: &Instance, fmt: &InterleaveFormat) -> String {
    let mut out = String::new();
    for (n, msg) in instance.messages().iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str(fmt.header(msg.role()));
        out.push(' ');
        for seg in msg.segments() {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Image(i) => out.push_str(&fmt.render_slot(*i)),
            }
        }
    }
    out
}

/// Locates every rendered slot in `text`.
///
/// Slots are returned in text order; their numbers are not required to be
/// increasing. Unbalanced delimiters, delimiters outside a full slot, and
/// slot number 0 are reported as [`InterleaveError::MalformedSlot`].
pub fn parse(text: &str, fmt: &InterleaveFormat) -> Result<Vec<SlotSpan>, InterleaveError> {
    let slots: Vec<(SlotSpan, Range<usize>)> = fmt
        .slot_regex()
        .captures_iter(text)
        .map(|caps| {
            let whole = caps.get(0).expect("group 0");
            let digits = caps.get(1).expect("slot number group");
            let index = digits.as_str().parse::<usize>().unwrap_or(0);
            (
                SlotSpan {
                    index,
                    span: whole.range(),
                },
                digits.range(),
            )
        })
        .collect();
    for (slot, digits) in &slots {
        if slot.index == 0 {
            return Err(InterleaveError::MalformedSlot(digits.clone()));
        }
    }

    // Delimiter balance: BOI and EOI must strictly alternate and every pair
    // must sit inside a recognized slot.
    let mut open: Option<usize> = None;
    let mut pos = 0;
    let bytes = text.as_bytes();
    while pos < bytes.len() {
        let rest = &text[pos..];
        // Longer delimiter first so that one being a prefix of the other
        // does not misclassify.
        let (first, second, first_is_eoi) = if fmt.eoi.len() >= fmt.boi.len() {
            (&fmt.eoi, &fmt.boi, true)
        } else {
            (&fmt.boi, &fmt.eoi, false)
        };
        let hit = if rest.starts_with(first.as_str()) {
            Some((first_is_eoi, first.len()))
        } else if rest.starts_with(second.as_str()) {
            Some((!first_is_eoi, second.len()))
        } else {
            None
        };
        match hit {
            Some((is_eoi, len)) => {
                match (is_eoi, open) {
                    (false, None) => open = Some(pos),
                    (false, Some(start)) => {
                        return Err(InterleaveError::MalformedSlot(start..pos + len))
                    }
                    (true, None) => return Err(InterleaveError::MalformedSlot(pos..pos + len)),
                    (true, Some(start)) => {
                        let end = pos + len;
                        let inside = slots
                            .iter()
                            .any(|(s, _)| s.span.start <= start && end <= s.span.end);
                        if !inside {
                            return Err(InterleaveError::MalformedSlot(start..end));
                        }
                        open = None;
                    }
                }
                pos += len;
            }
            None => {
                pos += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    if let Some(start) = open {
        return Err(InterleaveError::MalformedSlot(start..text.len()));
    }
    Ok(slots.into_iter().map(|(s, _)| s).collect())
}

/// Tokens one image occupies when a `resolution`-pixel square image is cut
/// into `patch`-pixel square patches.
pub fn tokens_per_image(resolution: u64, patch: u64) -> Result<u64, InterleaveError> {
    if patch == 0 || resolution == 0 || !resolution.is_multiple_of(patch) {
        return Err(InterleaveError::NonDivisible { resolution, patch });
    }
    let side = resolution / patch;
    Ok(side * side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBudget {
    pub context_len: u64,
    pub tokens_per_image: u64,
    #[serde(default)]
    pub reserved_text: u64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget {
            context_len: 8192,
            tokens_per_image: 576,
            reserved_text: 0,
        }
    }
}

impl TokenBudget {
    pub fn new(
        context_len: u64,
        tokens_per_image: u64,
        reserved_text: u64,
    ) -> Result<Self, InterleaveError> {
        let budget = TokenBudget {
            context_len,
            tokens_per_image,
            reserved_text,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<(), InterleaveError> {
        if self.context_len == 0 || self.tokens_per_image == 0 {
            return Err(InterleaveError::InvalidBudget(
                "context_len and tokens_per_image must be positive".into(),
            ));
        }
        if self.tokens_per_image > self.context_len {
            return Err(InterleaveError::InvalidBudget(format!(
                "tokens_per_image {} exceeds context_len {}",
                self.tokens_per_image, self.context_len
            )));
        }
        Ok(())
    }
}

/// Largest image count whose tokens fit next to the reserved text budget.
pub fn max_images(budget: &TokenBudget) -> u64 {
    budget.context_len.saturating_sub(budget.reserved_text) / budget.tokens_per_image
}

/// Token counter plugged in from outside. Implementations must return 0 for
/// the empty string.
pub trait Tokenizer: Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts each maximal alphanumeric run as one token and every other
/// non-whitespace character as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    count += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    count += 1;
                }
            }
        }
        count
    }
}

impl<F: Fn(&str) -> usize + Sync> Tokenizer for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenCount {
    pub text_tokens: u64,
    pub total_tokens: u64,
}

/// Text tokens are counted over the fully serialized instance, so role
/// headers, slot frames and delimiters are included.
pub fn count_tokens(
    instance: &Instance,
    fmt: &InterleaveFormat,
    tok: &dyn Tokenizer,
    tokens_per_image: u64,
) -> TokenCount {
    let text_tokens = tok.count(&serialize(instance, fmt)) as u64;
    TokenCount {
        text_tokens,
        total_tokens: text_tokens + instance.images().len() as u64 * tokens_per_image,
    }
}
