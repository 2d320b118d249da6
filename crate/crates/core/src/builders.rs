//! Seeded subset builders and curation heuristics.
//!
//! * [`merge_items`] packs several single-image conversations into one
//!   multi-image item, prefixing every question with a denotation of its
//!   image ("For the second image, ...") and shuffling the QA pairs.
//! * [`build_contrast_caption`] turns a captioned image pool into
//!   caption-matching and caption-writing questions over groups of images.
//! * [`to_multiple_choice`] / [`convert_to_mcq`] rewrite label-style answers
//!   as lettered options.
//! * [`sample_frames`] / [`subsample_frames`] pick evenly spaced video frames.
//! * [`place_placeholders`] moves all image slots to the start or end of the
//!   first question.
//!
//! Every random choice is drawn from an RNG keyed by the global seed and the
//! output item id (see [`crate::seed`]), so outputs do not depend on the
//! order in which items are built.

use std::collections::{HashMap, HashSet};
use std::sync::{LazyLock, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageSource, Instance, Message, ModelError, Role, Segment, Skill};
use crate::seed::{derive_u64, item_rng};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("source {0:?} does not have exactly one image")]
    SourceNotSingleImage(String),
    #[error("invalid builder config: {0}")]
    InvalidConfig(String),
    #[error("instance {0:?} has a question with no text")]
    EmptyQuestion(String),
    #[error("image pool has {have} entries, need at least {need}")]
    InsufficientPool { have: usize, need: usize },
    #[error("pool image {0:?} has no caption")]
    MissingCaption(String),
    #[error("item {0:?}: could not sample a group with distinct captions")]
    DuplicateCaption(String),
    #[error("duplicate option {0:?}")]
    DuplicateOption(String),
    #[error("multiple choice needs 2..=26 options, got {0}")]
    OptionCount(usize),
    #[error("answer index {index} out of range for {len} options")]
    AnswerOutOfRange { index: usize, len: usize },
    #[error("cannot sample {sample} frames from {total}")]
    SampleExceedsTotal { total: usize, sample: usize },
    #[error("instance {0:?}: a message would be left empty")]
    EmptyMessage(String),
    #[error("denotation style {style:?} cannot describe image {index} of {count}")]
    StyleNotApplicable {
        style: String,
        index: usize,
        count: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn msg_err(id: &str) -> impl Fn(String) -> BuildError + '_ {
    move |rule| {
        BuildError::Model(ModelError::InvariantViolation {
            id: id.to_string(),
            rule,
        })
    }
}

// ---------------------------------------------------------------------------
// Placeholder placement

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    BeginFirstQuestion,
    EndFirstQuestion,
    RandomPerItem,
}

impl Placement {
    fn at_begin(self, rng: &mut impl Rng) -> bool {
        match self {
            Placement::BeginFirstQuestion => true,
            Placement::EndFirstQuestion => false,
            Placement::RandomPerItem => rng.random_bool(0.5),
        }
    }
}

/// Strips every slot and re-inserts slots `1..=n_images`, in order, at the
/// start or end of the first message.
fn relocate_slots(
    id: &str,
    messages: &[Message],
    n_images: usize,
    at_begin: bool,
) -> Result<Vec<Message>, BuildError> {
    let mut out = Vec::with_capacity(messages.len());
    for (pos, msg) in messages.iter().enumerate() {
        let mut segments: Vec<Segment> = msg
            .segments()
            .iter()
            .filter(|s| matches!(s, Segment::Text(_)))
            .cloned()
            .collect();
        if pos == 0 {
            let slots = (1..=n_images).map(Segment::Image);
            segments = if at_begin {
                slots.chain(segments).collect()
            } else {
                segments.into_iter().chain(slots).collect()
            };
        }
        if segments.is_empty() {
            return Err(BuildError::EmptyMessage(id.to_string()));
        }
        out.push(Message::new(msg.role(), segments).map_err(msg_err(id))?);
    }
    Ok(out)
}

/// Moves all image slots to the start or end of the first user message,
/// keeping image order. `RandomPerItem` flips a coin keyed by `(seed, id)`.
pub fn place_placeholders(
    instance: &Instance,
    position: Placement,
    seed: u64,
) -> Result<Instance, BuildError> {
    let mut rng = item_rng(seed, instance.id());
    let at_begin = position.at_begin(&mut rng);
    let messages = relocate_slots(
        instance.id(),
        instance.messages(),
        instance.images().len(),
        at_begin,
    )?;
    Ok(Instance::new(
        instance.id(),
        instance.source(),
        instance.skill(),
        instance.images().to_vec(),
        messages,
    )?)
}

// ---------------------------------------------------------------------------
// Denotations

const ORDINALS: [&str; 20] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth", "seventeenth",
    "eighteenth", "nineteenth", "twentieth",
];

pub fn ordinal(n: usize) -> String {
    if (1..=ORDINALS.len()).contains(&n) {
        return ORDINALS[n - 1].to_string();
    }
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn parse_ordinal(s: &str) -> Option<usize> {
    if let Some(pos) = ORDINALS.iter().position(|o| *o == s) {
        return Some(pos + 1);
    }
    let digits = s.trim_end_matches(|c: char| c.is_ascii_alphabetic());
    let n: usize = digits.parse().ok()?;
    (ordinal(n) == s).then_some(n)
}

/// The default denotation styles. `{leftright}` styles only apply to
/// two-image items.
pub fn default_styles() -> Vec<String> {
    vec![
        "For the {ordinal} image, ".to_string(),
        "In image {i}, ".to_string(),
        "For the {leftright} image, ".to_string(),
    ]
}

/// A style template. Templates without a `{question}` hole are prefixes.
fn normalized(style: &str) -> String {
    if style.contains("{question}") {
        style.to_string()
    } else {
        format!("{style}{{question}}")
    }
}

fn style_applies(style: &str, index: usize, count: usize) -> bool {
    !style.contains("{leftright}") || (count == 2 && (1..=2).contains(&index))
}

/// Renders `style` around `question` for image `index` of `count`.
///
/// When the question follows other template text, an ASCII capital that
/// starts a lowercase word ("What") is lowercased; [`strip_denotation`]
/// reverses this.
pub fn inject_denotation(
    question: &str,
    index: usize,
    count: usize,
    style: &str,
) -> Result<String, BuildError> {
    if question.is_empty() {
        return Err(BuildError::EmptyQuestion(String::new()));
    }
    if index == 0 || index > count || !style_applies(style, index, count) {
        return Err(BuildError::StyleNotApplicable {
            style: style.to_string(),
            index,
            count,
        });
    }
    let template = normalized(style);
    let mut q = question.to_string();
    if !template.starts_with("{question}") {
        let mut chars = question.chars();
        if let (Some(first), Some(second)) = (chars.next(), chars.next()) {
            if first.is_ascii_uppercase() && second.is_lowercase() {
                q = format!("{}{}", first.to_ascii_lowercase(), &question[1..]);
            }
        }
    }
    let leftright = if index == 1 { "left" } else { "right" };
    Ok(template
        .replace("{ordinal}", &ordinal(index))
        .replace("{leftright}", leftright)
        .replace("{i}", &index.to_string())
        .replace("{question}", &q))
}

static STYLE_REGEXES: LazyLock<Mutex<HashMap<String, Regex>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Compiled matcher for a normalized style, cached per template.
fn style_regex(template: &str) -> Regex {
    let mut cache = STYLE_REGEXES.lock().expect("style regex cache");
    cache
        .entry(template.to_string())
        .or_insert_with(|| compile_style(template))
        .clone()
}

fn compile_style(template: &str) -> Regex {
    let mut pattern = String::from("(?s)^");
    let mut rest = template;
    let holes = [
        ("{question}", "(?P<question>.+)"),
        ("{ordinal}", r"(?P<ordinal>[a-z]+|\d+(?:st|nd|rd|th))"),
        ("{leftright}", "(?P<leftright>left|right)"),
        ("{i}", r"(?P<index>\d+)"),
    ];
    while !rest.is_empty() {
        let next = holes
            .iter()
            .filter_map(|(hole, pat)| rest.find(hole).map(|at| (at, *hole, *pat)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, hole, pat)) => {
                pattern.push_str(&regex::escape(&rest[..at]));
                pattern.push_str(pat);
                rest = &rest[at + hole.len()..];
            }
            None => {
                pattern.push_str(&regex::escape(rest));
                rest = "";
            }
        }
    }
    pattern.push('$');
    Regex::new(&pattern).expect("escaped denotation pattern compiles")
}

/// Inverse of [`inject_denotation`] for one style: returns the original
/// question and the denoted image index, or `None` if `text` does not match.
pub fn strip_denotation(text: &str, style: &str, count: usize) -> Option<(String, usize)> {
    let template = normalized(style);
    let caps = style_regex(&template).captures(text)?;
    let index = if let Some(m) = caps.name("index") {
        m.as_str().parse().ok()?
    } else if let Some(m) = caps.name("ordinal") {
        parse_ordinal(m.as_str())?
    } else {
        let m = caps.name("leftright")?;
        if m.as_str() == "left" {
            1
        } else {
            2
        }
    };
    if index == 0 || index > count || !style_applies(style, index, count) {
        return None;
    }
    let mut question = caps.name("question")?.as_str().to_string();
    if !template.starts_with("{question}") {
        if let Some(first) = question.chars().next().filter(char::is_ascii_lowercase) {
            question.replace_range(..1, &first.to_ascii_uppercase().to_string());
        }
    }
    Some((question, index))
}

/// Tries each style in order.
pub fn strip_any(text: &str, styles: &[String], count: usize) -> Option<(String, usize)> {
    styles
        .iter()
        .find_map(|style| strip_denotation(text, style, count))
}

// ---------------------------------------------------------------------------
// Merging single-image conversations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub denotation_styles: Vec<String>,
    pub placeholder_position: Placement,
    /// Set from the pipeline's global seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub id_prefix: String,
    pub source: String,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            k_min: 2,
            k_max: 4,
            denotation_styles: default_styles(),
            placeholder_position: Placement::RandomPerItem,
            seed: 0,
            id_prefix: "merge".into(),
            source: "llava-665k-multi".into(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), BuildError> {
        if self.k_min < 2 || self.k_min > self.k_max {
            return Err(BuildError::InvalidConfig(format!(
                "need 2 <= k_min <= k_max, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        if self.denotation_styles.is_empty() {
            return Err(BuildError::InvalidConfig("denotation_styles is empty".into()));
        }
        if self.k_max > 2 && self.denotation_styles.iter().all(|s| s.contains("{leftright}")) {
            return Err(BuildError::InvalidConfig(
                "every denotation style uses {leftright}, which only fits two images".into(),
            ));
        }
        for style in &self.denotation_styles {
            let holes = ["{ordinal}", "{i}", "{leftright}"];
            if holes.iter().filter(|h| style.contains(*h)).count() != 1 {
                return Err(BuildError::InvalidConfig(format!(
                    "style {style:?} must reference the image exactly one way"
                )));
            }
            if style.matches("{question}").count() > 1 {
                return Err(BuildError::InvalidConfig(format!(
                    "style {style:?} repeats {{question}}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub instances: Vec<Instance>,
    /// Sources left over after the last full group.
    pub dropped: usize,
}

/// Splits `n` shuffled positions into groups of `k_min..=k_max`. A tail
/// shorter than `k_min` is returned separately.
fn partition(n: usize, cfg: &MergeConfig) -> (Vec<Vec<usize>>, usize) {
    let mut rng = item_rng(cfg.seed, &format!("{}/partition", cfg.id_prefix));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut groups = Vec::new();
    let mut pos = 0;
    while pos < n {
        let remaining = n - pos;
        if remaining < cfg.k_min {
            return (groups, remaining);
        }
        let k = rng.random_range(cfg.k_min..=cfg.k_max).min(remaining);
        groups.push(order[pos..pos + k].to_vec());
        pos += k;
    }
    (groups, 0)
}

pub fn merge_items(sources: &[Instance], cfg: &MergeConfig) -> Result<MergeOutput, BuildError> {
    cfg.validate()?;
    if let Some(bad) = sources.iter().find(|s| s.images().len() != 1) {
        return Err(BuildError::SourceNotSingleImage(bad.id().to_string()));
    }
    let (groups, dropped) = partition(sources.len(), cfg);
    let instances = groups
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            let group: Vec<&Instance> = members.iter().map(|&m| &sources[m]).collect();
            merge_group(&format!("{}-{g:06}", cfg.id_prefix), &group, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MergeOutput { instances, dropped })
}

fn merge_group(id: &str, group: &[&Instance], cfg: &MergeConfig) -> Result<Instance, BuildError> {
    let mut rng = item_rng(cfg.seed, id);
    let k = group.len();
    let mut pairs = Vec::new();
    for (j, src) in group.iter().enumerate() {
        let index = j + 1;
        let eligible: Vec<&String> = cfg
            .denotation_styles
            .iter()
            .filter(|s| style_applies(s, index, k))
            .collect();
        for (q, a) in src.qa_pairs() {
            let question = q.text().trim().to_string();
            if question.is_empty() {
                return Err(BuildError::EmptyQuestion(src.id().to_string()));
            }
            let style = eligible.choose(&mut rng).expect("validated: some style fits");
            pairs.push((inject_denotation(&question, index, k, style)?, a.text()));
        }
    }
    pairs.shuffle(&mut rng);
    let mut messages = Vec::with_capacity(pairs.len() * 2);
    for (q, a) in pairs {
        messages.push(Message::user(vec![Segment::Text(q)]).map_err(msg_err(id))?);
        messages.push(Message::assistant(a).map_err(msg_err(id))?);
    }
    let at_begin = cfg.placeholder_position.at_begin(&mut rng);
    let messages = relocate_slots(id, &messages, k, at_begin)?;
    let images = group.iter().map(|s| s.images()[0].clone()).collect();
    Ok(Instance::new(id, &cfg.source, Skill::Coref, images, messages)?)
}

// ---------------------------------------------------------------------------
// Multiple choice

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    question: String,
    options: Vec<String>,
    answer_index: usize,
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

impl McqItem {
    pub fn new(
        question: impl Into<String>,
        options: Vec<String>,
        answer_index: usize,
    ) -> Result<Self, BuildError> {
        if !(2..=26).contains(&options.len()) {
            return Err(BuildError::OptionCount(options.len()));
        }
        if answer_index >= options.len() {
            return Err(BuildError::AnswerOutOfRange {
                index: answer_index,
                len: options.len(),
            });
        }
        let mut seen = HashSet::new();
        for opt in &options {
            if !seen.insert(opt.as_str()) {
                return Err(BuildError::DuplicateOption(opt.clone()));
            }
        }
        Ok(McqItem {
            question: question.into(),
            options,
            answer_index,
        })
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn answer_index(&self) -> usize {
        self.answer_index
    }

    pub fn correct(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn letters(&self) -> Vec<char> {
        (0..self.options.len()).map(option_letter).collect()
    }

    /// `\nOptions:\n(A) ...\n(B) ...`
    pub fn options_block(&self) -> String {
        let mut out = String::from("\nOptions:");
        for (i, opt) in self.options.iter().enumerate() {
            out.push_str(&format!("\n({}) {}", option_letter(i), opt));
        }
        out
    }

    pub fn render(&self) -> String {
        format!("{}{}", self.question, self.options_block())
    }

    /// `(X) <text>`
    pub fn gold_answer(&self) -> String {
        format!("({}) {}", option_letter(self.answer_index), self.correct())
    }
}

/// Shuffles `correct` among `distractors` with a seeded RNG.
pub fn to_multiple_choice(
    question: &str,
    correct: &str,
    distractors: &[String],
    seed: u64,
) -> Result<McqItem, BuildError> {
    if distractors.is_empty() {
        return Err(BuildError::OptionCount(1));
    }
    if distractors.iter().any(|d| d == correct) {
        return Err(BuildError::DuplicateOption(correct.to_string()));
    }
    let mut options: Vec<String> = std::iter::once(correct.to_string())
        .chain(distractors.iter().cloned())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    options.shuffle(&mut rng);
    let answer_index = options
        .iter()
        .position(|o| o == correct)
        .expect("correct option present");
    McqItem::new(question, options, answer_index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McqConversion {
    pub instance: Instance,
    pub converted_pairs: usize,
}

/// Rewrites every QA pair whose answer is one of `labels` as a lettered
/// multiple-choice question: the options block is appended to the question
/// and the answer becomes `(X) <label>`. Other pairs are left alone.
pub fn convert_to_mcq(
    instance: &Instance,
    labels: &[String],
    seed: u64,
) -> Result<McqConversion, BuildError> {
    let id = instance.id();
    let mut messages = Vec::with_capacity(instance.messages().len());
    let mut converted = 0;
    for (turn, (q, a)) in instance.qa_pairs().enumerate() {
        let answer = a.text();
        let answer = answer.trim();
        if !labels.iter().any(|l| l == answer) {
            messages.push(q.clone());
            messages.push(a.clone());
            continue;
        }
        let distractors: Vec<String> = labels.iter().filter(|l| *l != answer).cloned().collect();
        let item_seed = derive_u64(seed, &format!("{id}/{turn}"));
        let mcq = to_multiple_choice(q.text().trim(), answer, &distractors, item_seed)?;
        let mut segments = q.segments().to_vec();
        segments.push(Segment::Text(mcq.options_block()));
        messages.push(Message::new(Role::User, segments).map_err(msg_err(id))?);
        messages.push(Message::assistant(mcq.gold_answer()).map_err(msg_err(id))?);
        converted += 1;
    }
    let instance = Instance::new(
        id,
        instance.source(),
        instance.skill(),
        instance.images().to_vec(),
        messages,
    )?;
    Ok(McqConversion {
        instance,
        converted_pairs: converted,
    })
}

// ---------------------------------------------------------------------------
// Contrast captions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastCaptionConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Upper bound enforced on `n_max`.
    pub max_group: usize,
    /// Probability that a turn asks which image matches a caption (as
    /// opposed to asking for a caption).
    pub task_mix: f64,
    pub qa_min: usize,
    pub qa_max: usize,
    pub n_items: usize,
    pub placeholder_position: Placement,
    #[serde(skip)]
    pub seed: u64,
    pub id_prefix: String,
    pub source: String,
}

impl Default for ContrastCaptionConfig {
    fn default() -> Self {
        ContrastCaptionConfig {
            n_min: 2,
            n_max: 8,
            max_group: 8,
            task_mix: 0.5,
            qa_min: 1,
            qa_max: 4,
            n_items: 1000,
            placeholder_position: Placement::RandomPerItem,
            seed: 0,
            id_prefix: "contrast".into(),
            source: "contrast-caption".into(),
        }
    }
}

impl ContrastCaptionConfig {
    pub fn validate(&self) -> Result<(), BuildError> {
        if !(2 <= self.n_min && self.n_min <= self.n_max && self.n_max <= self.max_group) {
            return Err(BuildError::InvalidConfig(format!(
                "need 2 <= n_min <= n_max <= {}, got n_min={} n_max={}",
                self.max_group, self.n_min, self.n_max
            )));
        }
        if self.max_group > 26 {
            return Err(BuildError::InvalidConfig(
                "max_group cannot exceed 26 lettered options".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.task_mix) {
            return Err(BuildError::InvalidConfig("task_mix must lie in [0, 1]".into()));
        }
        if self.qa_min == 0 || self.qa_min > self.qa_max {
            return Err(BuildError::InvalidConfig(
                "need 1 <= qa_min <= qa_max".into(),
            ));
        }
        Ok(())
    }
}

const CAPTION_RETRIES: usize = 16;

pub fn caption_match_question(caption: &str) -> String {
    format!("Which image matches the following caption?\n\"{caption}\"")
}

pub fn caption_write_question(index: usize) -> String {
    format!("Write a caption for image {index}.")
}

pub fn build_contrast_caption(
    pool: &[ImageSource],
    cfg: &ContrastCaptionConfig,
) -> Result<Vec<Instance>, BuildError> {
    cfg.validate()?;
    if let Some(img) = pool
        .iter()
        .find(|img| img.caption().is_none_or(|c| c.trim().is_empty()))
    {
        return Err(BuildError::MissingCaption(img.locator().to_string()));
    }
    if pool.len() < cfg.n_min {
        return Err(BuildError::InsufficientPool {
            have: pool.len(),
            need: cfg.n_min,
        });
    }
    (0..cfg.n_items)
        .into_par_iter()
        .map(|t| contrast_item(&format!("{}-{t:06}", cfg.id_prefix), pool, cfg))
        .collect()
}

fn contrast_item(
    id: &str,
    pool: &[ImageSource],
    cfg: &ContrastCaptionConfig,
) -> Result<Instance, BuildError> {
    let mut rng = item_rng(cfg.seed, id);
    let n = rng.random_range(cfg.n_min..=cfg.n_max).min(pool.len());
    let mut picked = None;
    for _ in 0..CAPTION_RETRIES {
        let idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        let distinct: HashSet<&str> = idx.iter().filter_map(|&i| pool[i].caption()).collect();
        if distinct.len() == n {
            picked = Some(idx);
            break;
        }
    }
    let picked = picked.ok_or_else(|| BuildError::DuplicateCaption(id.to_string()))?;
    let images: Vec<ImageSource> = picked.iter().map(|&i| pool[i].clone()).collect();
    let caption = |j: usize| images[j - 1].caption().expect("pool captions checked");

    let turns = rng.random_range(cfg.qa_min..=cfg.qa_max);
    let mut messages = Vec::with_capacity(turns * 2);
    for _ in 0..turns {
        let target = rng.random_range(1..=n);
        let (question, answer) = if rng.random_bool(cfg.task_mix) {
            let options = (1..=n).map(|i| format!("image {i}")).collect();
            let mcq = McqItem::new(caption_match_question(caption(target)), options, target - 1)?;
            (mcq.render(), mcq.gold_answer())
        } else {
            (caption_write_question(target), caption(target).to_string())
        };
        messages.push(Message::user(vec![Segment::Text(question)]).map_err(msg_err(id))?);
        messages.push(Message::assistant(answer).map_err(msg_err(id))?);
    }
    let at_begin = cfg.placeholder_position.at_begin(&mut rng);
    let messages = relocate_slots(id, &messages, n, at_begin)?;
    Ok(Instance::new(id, &cfg.source, Skill::Reason, images, messages)?)
}

// ---------------------------------------------------------------------------
// Frames

/// `indices[i] = floor(i * n_total / n_sample)`.
pub fn sample_frames(n_total: usize, n_sample: usize) -> Result<Vec<usize>, BuildError> {
    if n_sample == 0 || n_sample > n_total {
        return Err(BuildError::SampleExceedsTotal {
            total: n_total,
            sample: n_sample,
        });
    }
    Ok((0..n_sample)
        .map(|i| ((i as u128 * n_total as u128) / n_sample as u128) as usize)
        .collect())
}

/// Keeps `n_sample` evenly spaced images of `instance`, dropping the slots of
/// the others and renumbering the rest.
pub fn subsample_frames(instance: &Instance, n_sample: usize) -> Result<Instance, BuildError> {
    let id = instance.id();
    let keep = sample_frames(instance.images().len(), n_sample)?;
    let mut renumber = vec![None; instance.images().len()];
    for (new, &old) in keep.iter().enumerate() {
        renumber[old] = Some(new + 1);
    }
    let mut messages = Vec::with_capacity(instance.messages().len());
    for msg in instance.messages() {
        let segments: Vec<Segment> = msg
            .segments()
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(Segment::Text(t.clone())),
                Segment::Image(i) => renumber[i - 1].map(Segment::Image),
            })
            .collect();
        if segments.is_empty() {
            return Err(BuildError::EmptyMessage(id.to_string()));
        }
        messages.push(Message::new(msg.role(), segments).map_err(msg_err(id))?);
    }
    let images = keep.iter().map(|&i| instance.images()[i].clone()).collect();
    Ok(Instance::new(
        id,
        instance.source(),
        instance.skill(),
        images,
        messages,
    )?)
}
