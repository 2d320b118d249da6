//! Benchmark harness: input preparation for the "merge" (one horizontally
//! concatenated image) and "sequence" (images in order) strategies, answer
//! extraction, scoring and the uniform-guess baseline.
//!
//! Model inference happens elsewhere. `prepare` writes a requests file and
//! `score` reads predictions back by id.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interleave::{serialize, InterleaveFormat};
use crate::model::{self, ImageSource, Instance, Message, ModelError, Segment};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no images to merge")]
    EmptyImageList,
    #[error("cannot decode image {locator:?}: {reason}")]
    DecodeError { locator: String, reason: String },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("record {0:?} has no prediction")]
    MissingPrediction(String),
    #[error("no records to score")]
    EmptyRecords,
    #[error("record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate prediction for {0:?}")]
    DuplicatePrediction(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuestionType {
    Mcq { options: Vec<String>, gold_index: usize },
    Short { gold: Vec<String> },
}

impl QuestionType {
    fn validate(&self) -> Result<(), String> {
        match self {
            QuestionType::Mcq {
                options,
                gold_index,
            } => {
                if !(2..=26).contains(&options.len()) {
                    return Err(format!("need 2..=26 options, got {}", options.len()));
                }
                if *gold_index >= options.len() {
                    return Err(format!(
                        "gold_index {gold_index} out of range for {} options",
                        options.len()
                    ));
                }
                if options.iter().any(|o| o.trim().is_empty()) {
                    return Err("empty option text".into());
                }
                let distinct: BTreeSet<&String> = options.iter().collect();
                if distinct.len() != options.len() {
                    return Err("duplicate options".into());
                }
            }
            QuestionType::Short { gold } => {
                if gold.is_empty() {
                    return Err("short answer has no gold strings".into());
                }
            }
        }
        Ok(())
    }

    fn kind(&self) -> &'static str {
        match self {
            QuestionType::Mcq { .. } => "mcq",
            QuestionType::Short { .. } => "short",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    instance: Instance,
    qtype: QuestionType,
    prediction: Option<String>,
    verdict: Option<Verdict>,
}

impl EvalRecord {
    pub fn new(instance: Instance, qtype: QuestionType) -> Result<Self, EvalError> {
        qtype.validate().map_err(|reason| EvalError::InvalidRecord {
            id: instance.id().to_string(),
            reason,
        })?;
        Ok(EvalRecord {
            instance,
            qtype,
            prediction: None,
            verdict: None,
        })
    }

    /// Attaches a prediction and judges it.
    pub fn with_prediction(mut self, prediction: impl Into<String>) -> Self {
        let prediction = prediction.into();
        self.verdict = Some(judge(&self.qtype, &prediction));
        self.prediction = Some(prediction);
        self
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn id(&self) -> &str {
        self.instance.id()
    }

    pub fn qtype(&self) -> &QuestionType {
        &self.qtype
    }

    pub fn prediction(&self) -> Option<&str> {
        self.prediction.as_deref()
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.verdict
    }
}

/// Reads a benchmark file: core instance records with an added `qtype` key.
pub fn read_benchmark(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let qtype = value
            .as_object_mut()
            .and_then(|o| o.remove("qtype"))
            .ok_or_else(|| EvalError::MalformedLine {
                line: line_no,
                reason: "missing \"qtype\"".into(),
            })?;
        let qtype: QuestionType =
            serde_json::from_value(qtype).map_err(|e| EvalError::MalformedLine {
                line: line_no,
                reason: format!("qtype: {e}"),
            })?;
        let instance = model::from_value(value, line_no)?;
        records.push(EvalRecord::new(instance, qtype)?);
    }
    Ok(records)
}

pub fn benchmark_line(record: &EvalRecord) -> String {
    let mut value = model::to_value(&record.instance);
    value["qtype"] = serde_json::to_value(&record.qtype).expect("qtype serializes");
    value.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub id: String,
    pub prediction: String,
}

pub fn read_predictions(path: &Path) -> Result<HashMap<String, String>, EvalError> {
    let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedLine {
                line: n + 1,
                reason: e.to_string(),
            })?;
        if out.insert(p.id.clone(), p.prediction).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLine {
    pub id: String,
    pub prompt: String,
    pub images: Vec<String>,
}

// ---------------------------------------------------------------------------
// Rasters

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    /// `pixels` is packed RGB, row-major.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, EvalError> {
        if width == 0 || height == 0 {
            return Err(EvalError::InvalidRaster(format!("{width}x{height}")));
        }
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(EvalError::InvalidRaster(format!(
                "{} bytes for {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, EvalError> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * width as usize * height as usize)
            .collect();
        RasterImage::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let decode_err = |reason: String| EvalError::DecodeError {
            locator: path.display().to_string(),
            reason,
        };
        let img = image::open(path).map_err(|e| decode_err(e.to_string()))?;
        Ok(RasterImage::from(img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), EvalError> {
        self.to_rgb()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| EvalError::DecodeError {
                locator: path.display().to_string(),
                reason: e.to_string(),
            })
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("dimensions checked at construction")
    }
}

impl From<RgbImage> for RasterImage {
    fn from(img: RgbImage) -> Self {
        RasterImage {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        }
    }
}

/// `round_half_even(width * target_height / height)`, at least 1.
pub fn scaled_width(width: u32, height: u32, target_height: u32) -> u32 {
    let num = width as u64 * target_height as u64;
    let den = height as u64;
    let (q, r) = (num / den, num % den);
    let rounded = match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    };
    rounded.max(1) as u32
}

/// Scales every image to the smallest input height (keeping aspect ratio,
/// widths rounded half-to-even) and concatenates them left to right. Images
/// already at that height are copied unchanged, so one image comes back
/// as is.
pub fn merge_horizontal(images: &[RasterImage]) -> Result<RasterImage, EvalError> {
    let height = images
        .iter()
        .map(RasterImage::height)
        .min()
        .ok_or(EvalError::EmptyImageList)?;
    if images.len() == 1 {
        return Ok(images[0].clone());
    }
    let scaled: Vec<RgbImage> = images
        .iter()
        .map(|img| {
            let rgb = img.to_rgb();
            if img.height == height {
                rgb
            } else {
                let w = scaled_width(img.width, img.height, height);
                image::imageops::resize(&rgb, w, height, FilterType::Triangle)
            }
        })
        .collect();
    let width: u32 = scaled.iter().map(RgbImage::width).sum();
    let mut canvas = RgbImage::new(width, height);
    let mut x = 0;
    for part in &scaled {
        image::imageops::replace(&mut canvas, part, x as i64, 0);
        x += part.width();
    }
    Ok(canvas.into())
}

// ---------------------------------------------------------------------------
// Input preparation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InputStrategy {
    Merge,
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub prompt: String,
    pub images: Vec<RasterImage>,
}

/// Resolves locators relative to `base` and decodes them.
pub fn file_loader(base: PathBuf) -> impl Fn(&ImageSource) -> Result<RasterImage, EvalError> {
    move |src: &ImageSource| RasterImage::load(&resolve_locator(&base, src.locator()))
}

pub fn resolve_locator(base: &Path, locator: &str) -> PathBuf {
    let p = Path::new(locator);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Rewrites the conversation so the first slot becomes slot 1 and every
/// other slot disappears.
pub fn single_slot_instance(instance: &Instance) -> Result<Instance, EvalError> {
    let id = instance.id();
    let mut placed = false;
    let mut messages = Vec::with_capacity(instance.messages().len());
    for msg in instance.messages() {
        let mut segments = Vec::with_capacity(msg.segments().len());
        for seg in msg.segments() {
            match seg {
                Segment::Text(t) => segments.push(Segment::Text(t.clone())),
                Segment::Image(_) if !placed => {
                    segments.push(Segment::Image(1));
                    placed = true;
                }
                Segment::Image(_) => {}
            }
        }
        let msg = Message::new(msg.role(), segments).map_err(|reason| EvalError::InvalidRecord {
            id: id.to_string(),
            reason,
        })?;
        messages.push(msg);
    }
    let merged = ImageSource::from_locator(format!("{id}#merged")).expect("non-empty locator");
    Ok(Instance::new(
        id,
        instance.source(),
        instance.skill(),
        vec![merged],
        messages,
    )?)
}

pub fn prepare_input(
    instance: &Instance,
    strategy: InputStrategy,
    fmt: &InterleaveFormat,
    load: &dyn Fn(&ImageSource) -> Result<RasterImage, EvalError>,
) -> Result<PreparedInput, EvalError> {
    let rasters = instance
        .images()
        .iter()
        .map(load)
        .collect::<Result<Vec<_>, _>>()?;
    match strategy {
        InputStrategy::Sequence => Ok(PreparedInput {
            prompt: serialize(instance, fmt),
            images: rasters,
        }),
        InputStrategy::Merge => Ok(PreparedInput {
            prompt: serialize(&single_slot_instance(instance)?, fmt),
            images: vec![merge_horizontal(&rasters)?],
        }),
    }
}

// ---------------------------------------------------------------------------
// Answer extraction and scoring

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Option(usize),
    Unparsed,
}

static WHOLE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(?([A-Z])\)?[.:]?$").expect("valid regex"));
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(?([A-Z])[).:](?:\s|$)").expect("valid regex"));
static PAREN_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(([A-Z])\)").expect("valid regex"));
static ANSWER_IS_LETTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:\b(?:answer(?:\s+is)?|option))\s*[:\-]?\s*\(?([A-Z])\)?(?:[^A-Za-z0-9]|$)")
        .expect("valid regex")
});

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Maps a free-form prediction onto an option index.
///
/// 1. Explicit option letters: the whole reply ("B", "(B)"), a leading
///    "B." / "B)", any "(B)", or "answer is B". One distinct letter wins;
///    conflicting letters give `Unparsed`.
/// 2. Otherwise, exactly one option text contained in the reply
///    (case-insensitive; an option contained in another matched option is
///    ignored).
/// 3. Otherwise `Unparsed`.
pub fn extract_mcq_answer(prediction: &str, options: &[String]) -> Extraction {
    let text = prediction.trim();
    let n = options.len();
    let mut letters = BTreeSet::new();
    let mut add = |caps: Option<regex::Captures>| {
        if let Some(c) = caps {
            let idx = (c[1].as_bytes()[0] - b'A') as usize;
            if idx < n {
                letters.insert(idx);
            }
        }
    };
    add(WHOLE_LETTER.captures(text));
    add(LEADING_LETTER.captures(text));
    for c in PAREN_LETTER.captures_iter(text) {
        add(Some(c));
    }
    for c in ANSWER_IS_LETTER.captures_iter(text) {
        add(Some(c));
    }
    match letters.len() {
        1 => return Extraction::Option(*letters.first().expect("one letter")),
        0 => {}
        _ => return Extraction::Unparsed,
    }

    let haystack = normalize(text);
    let hits: Vec<(usize, String)> = options
        .iter()
        .enumerate()
        .map(|(i, o)| (i, normalize(o)))
        .filter(|(_, o)| !o.is_empty() && haystack.contains(o.as_str()))
        .collect();
    let maximal: Vec<usize> = hits
        .iter()
        .filter(|(i, o)| {
            !hits
                .iter()
                .any(|(j, other)| j != i && other.len() > o.len() && other.contains(o.as_str()))
        })
        .map(|(i, _)| *i)
        .collect();
    match maximal.as_slice() {
        [only] => Extraction::Option(*only),
        _ => Extraction::Unparsed,
    }
}

/// Multiple choice: extracted index against gold. Short answer:
/// case-insensitive, whitespace-normalized exact match against any gold
/// string.
pub fn judge(qtype: &QuestionType, prediction: &str) -> Verdict {
    match qtype {
        QuestionType::Mcq {
            options,
            gold_index,
        } => match extract_mcq_answer(prediction, options) {
            Extraction::Option(i) if i == *gold_index => Verdict::Correct,
            Extraction::Option(_) => Verdict::Incorrect,
            Extraction::Unparsed => Verdict::Unparsed,
        },
        QuestionType::Short { gold } => {
            let pred = normalize(prediction);
            if gold.iter().any(|g| normalize(g) == pred) {
                Verdict::Correct
            } else {
                Verdict::Incorrect
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: u64,
    pub correct: u64,
    pub unparsed: u64,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, verdict: Verdict) {
        self.total += 1;
        match verdict {
            Verdict::Correct => self.correct += 1,
            Verdict::Unparsed => self.unparsed += 1,
            Verdict::Incorrect => {}
        }
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: Tally,
    pub by_type: std::collections::BTreeMap<String, Tally>,
}

/// Accuracy over records; unparsed predictions count as incorrect.
pub fn score(records: &[EvalRecord]) -> Result<AccuracyReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let empty = Tally {
        total: 0,
        correct: 0,
        unparsed: 0,
        accuracy: 0.0,
    };
    let mut overall = empty;
    let mut by_type = std::collections::BTreeMap::new();
    for rec in records {
        let verdict = rec
            .verdict
            .ok_or_else(|| EvalError::MissingPrediction(rec.id().to_string()))?;
        overall.add(verdict);
        by_type
            .entry(rec.qtype.kind().to_string())
            .or_insert(empty)
            .add(verdict);
    }
    Ok(AccuracyReport { overall, by_type })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Mean of `1 / options` over records; short answers contribute 0.
    pub analytic: f64,
    pub monte_carlo: f64,
    pub trials: u64,
    /// Binomial standard error of the Monte Carlo estimate.
    pub std_error: f64,
}

/// Expected accuracy of uniform guessing, with a Monte Carlo check that
/// draws a random record and a random option per trial.
pub fn random_baseline(records: &[EvalRecord], trials: u64, seed: u64) -> Result<Baseline, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let chance = |q: &QuestionType| match q {
        QuestionType::Mcq { options, .. } => 1.0 / options.len() as f64,
        QuestionType::Short { .. } => 0.0,
    };
    let analytic = records.iter().map(|r| chance(&r.qtype)).sum::<f64>() / records.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let rec = &records[rng.random_range(0..records.len())];
        if let QuestionType::Mcq {
            options,
            gold_index,
        } = &rec.qtype
        {
            if rng.random_range(0..options.len()) == *gold_index {
                hits += 1;
            }
        }
    }
    let monte_carlo = if trials == 0 {
        analytic
    } else {
        hits as f64 / trials as f64
    };
    let std_error = if trials == 0 {
        0.0
    } else {
        (analytic * (1.0 - analytic) / trials as f64).sqrt()
    };
    Ok(Baseline {
        analytic,
        monte_carlo,
        trials,
        std_error,
    })
}
