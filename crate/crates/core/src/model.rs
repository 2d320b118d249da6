//! Data model for interleaved multi-image instruction data and its JSONL
//! persistence format.
//!
//! An [`Instance`] owns an ordered image list and a user/assistant
//! conversation. Images are referenced inline by 1-based [`Segment::Image`]
//! slots, and every image must be referenced exactly once. All constructors
//! validate, so a value of these types is always well-formed.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("instance {id:?}: invariant violated: {rule}")]
    InvariantViolation { id: String, rule: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ModelError {
    fn violation(id: &str, rule: impl Into<String>) -> Self {
        ModelError::InvariantViolation {
            id: id.to_string(),
            rule: rule.into(),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Skill {
    Coref,
    Compare,
    Reason,
    Temporal,
    SingleImage,
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Skill::Coref => "Coref",
            Skill::Compare => "Compare",
            Skill::Reason => "Reason",
            Skill::Temporal => "Temporal",
            Skill::SingleImage => "SingleImage",
        };
        f.write_str(s)
    }
}

/// One piece of message content: literal text or a reference to an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Text(String),
    /// 1-based index into [`Instance::images`].
    Image(usize),
}

impl Segment {
    pub fn text(s: impl Into<String>) -> Self {
        Segment::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(t),
            Segment::Image(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    role: Role,
    segments: Vec<Segment>,
}

impl Message {
    /// Builds a message, rejecting empty segment lists, empty text segments,
    /// zero slot indices, and image slots in assistant turns.
    pub fn new(role: Role, segments: Vec<Segment>) -> Result<Self, String> {
        if segments.is_empty() {
            return Err("message has no segments".into());
        }
        for seg in &segments {
            match seg {
                Segment::Text(t) if t.is_empty() => {
                    return Err("empty text segment".into());
                }
                Segment::Image(_) if role == Role::Assistant => {
                    return Err("assistant message contains an image slot".into());
                }
                Segment::Image(0) => return Err("image slot index 0 (slots are 1-based)".into()),
                _ => {}
            }
        }
        Ok(Message { role, segments })
    }

    pub fn user(segments: Vec<Segment>) -> Result<Self, String> {
        Message::new(Role::User, segments)
    }

    pub fn assistant(text: impl Into<String>) -> Result<Self, String> {
        Message::new(Role::Assistant, vec![Segment::Text(text.into())])
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Concatenation of all text segments.
    pub fn text(&self) -> String {
        self.segments.iter().filter_map(Segment::as_text).collect()
    }

    pub fn image_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(i) => Some(*i),
            Segment::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageSource {
    locator: String,
    caption: Option<String>,
    pixel_dims: Option<(u32, u32)>,
}

impl ImageSource {
    pub fn new(
        locator: impl Into<String>,
        caption: Option<String>,
        pixel_dims: Option<(u32, u32)>,
    ) -> Result<Self, String> {
        let locator = locator.into();
        if locator.is_empty() {
            return Err("image locator is empty".into());
        }
        Ok(ImageSource {
            locator,
            caption,
            pixel_dims,
        })
    }

    pub fn from_locator(locator: impl Into<String>) -> Result<Self, String> {
        ImageSource::new(locator, None, None)
    }

    pub fn locator(&self) -> &str {
        &self.locator
    }

    pub fn caption(&self) -> Option<&str> {
        self.caption.as_deref()
    }

    pub fn pixel_dims(&self) -> Option<(u32, u32)> {
        self.pixel_dims
    }
}

/// One dataset item.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    id: String,
    source: String,
    skill: Skill,
    images: Vec<ImageSource>,
    messages: Vec<Message>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        skill: Skill,
        images: Vec<ImageSource>,
        messages: Vec<Message>,
    ) -> Result<Self, ModelError> {
        let inst = Instance {
            id: id.into(),
            source: source.into(),
            skill,
            images,
            messages,
        };
        inst.check()?;
        Ok(inst)
    }

    fn check(&self) -> Result<(), ModelError> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(ModelError::violation(id, "id is empty"));
        }
        if self.images.is_empty() {
            return Err(ModelError::violation(id, "instance has no images"));
        }
        if self.messages.len() < 2 || !self.messages.len().is_multiple_of(2) {
            return Err(ModelError::violation(
                id,
                format!(
                    "conversation must hold an even number (>= 2) of messages, got {}",
                    self.messages.len()
                ),
            ));
        }
        for (pos, msg) in self.messages.iter().enumerate() {
            let expected = if pos % 2 == 0 { Role::User } else { Role::Assistant };
            if msg.role != expected {
                return Err(ModelError::violation(
                    id,
                    format!("message {pos} should be {expected:?}, got {:?}", msg.role),
                ));
            }
        }
        let n = self.images.len();
        let mut seen = vec![0usize; n];
        for slot in self.messages.iter().flat_map(Message::image_slots) {
            if slot == 0 || slot > n {
                return Err(ModelError::violation(
                    id,
                    format!("image slot {slot} out of range 1..={n}"),
                ));
            }
            seen[slot - 1] += 1;
        }
        if let Some(pos) = seen.iter().position(|&c| c != 1) {
            return Err(ModelError::violation(
                id,
                format!(
                    "image {} referenced {} times, expected exactly once",
                    pos + 1,
                    seen[pos]
                ),
            ));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn skill(&self) -> Skill {
        self.skill
    }

    pub fn images(&self) -> &[ImageSource] {
        &self.images
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Iterates (question, answer) message pairs.
    pub fn qa_pairs(&self) -> impl Iterator<Item = (&Message, &Message)> {
        self.messages.chunks_exact(2).map(|p| (&p[0], &p[1]))
    }

    /// Image slot indices in conversation order.
    pub fn slot_order(&self) -> Vec<usize> {
        self.messages.iter().flat_map(Message::image_slots).collect()
    }

    pub fn into_parts(self) -> (String, String, Skill, Vec<ImageSource>, Vec<Message>) {
        (self.id, self.source, self.skill, self.images, self.messages)
    }
}

// ---------------------------------------------------------------------------
// JSONL wire format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireInstance {
    id: String,
    source: String,
    skill: Skill,
    images: Vec<WireImage>,
    conversation: Vec<WireMessage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireImage {
    locator: String,
    caption: Option<String>,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    role: Role,
    segments: Vec<WireSegment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireText {
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSlot {
    image: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireSegment {
    Text(WireText),
    Image(WireSlot),
}

impl From<&Instance> for WireInstance {
    fn from(inst: &Instance) -> Self {
        WireInstance {
            id: inst.id.clone(),
            source: inst.source.clone(),
            skill: inst.skill,
            images: inst
                .images
                .iter()
                .map(|img| WireImage {
                    locator: img.locator.clone(),
                    caption: img.caption.clone(),
                    width: img.pixel_dims.map(|d| d.0),
                    height: img.pixel_dims.map(|d| d.1),
                })
                .collect(),
            conversation: inst
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role,
                    segments: m
                        .segments
                        .iter()
                        .map(|s| match s {
                            Segment::Text(t) => WireSegment::Text(WireText { text: t.clone() }),
                            Segment::Image(i) => WireSegment::Image(WireSlot { image: *i }),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl WireInstance {
    fn into_instance(self) -> Result<Instance, ModelError> {
        let id = self.id;
        let mut images = Vec::with_capacity(self.images.len());
        for img in self.images {
            let dims = match (img.width, img.height) {
                (Some(w), Some(h)) => Some((w, h)),
                (None, None) => None,
                _ => {
                    return Err(ModelError::violation(
                        &id,
                        "width and height must both be set or both be null",
                    ))
                }
            };
            images.push(
                ImageSource::new(img.locator, img.caption, dims)
                    .map_err(|rule| ModelError::violation(&id, rule))?,
            );
        }
        let mut messages = Vec::with_capacity(self.conversation.len());
        for msg in self.conversation {
            let segments = msg
                .segments
                .into_iter()
                .map(|s| match s {
                    WireSegment::Text(t) => Segment::Text(t.text),
                    WireSegment::Image(s) => Segment::Image(s.image),
                })
                .collect();
            messages.push(
                Message::new(msg.role, segments).map_err(|rule| ModelError::violation(&id, rule))?,
            );
        }
        Instance::new(id, self.source, self.skill, images, messages)
    }
}

/// Parses one JSONL line into a validated instance. `line_no` is 1-based and
/// only used for error reporting.
pub fn parse_line(line: &str, line_no: usize) -> Result<Instance, ModelError> {
    let wire: WireInstance =
        serde_json::from_str(line).map_err(|e| ModelError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
    wire.into_instance()
}

/// Parses an already-decoded JSON value (used when a record carries extra
/// keys that a caller strips first).
pub fn from_value(value: serde_json::Value, line_no: usize) -> Result<Instance, ModelError> {
    let wire: WireInstance =
        serde_json::from_value(value).map_err(|e| ModelError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
    wire.into_instance()
}

/// Reads a pool of images, one image object per line (the same keys as an
/// entry of an instance's `images` list).
pub fn read_image_pool(path: &Path) -> Result<Vec<ImageSource>, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut pool = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ModelError::MalformedLine {
            line: n + 1,
            reason,
        };
        let wire: WireImage = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let dims = match (wire.width, wire.height) {
            (Some(w), Some(h)) => Some((w, h)),
            (None, None) => None,
            _ => return Err(malformed("width and height must both be set or both be null".into())),
        };
        pool.push(ImageSource::new(wire.locator, wire.caption, dims).map_err(malformed)?);
    }
    Ok(pool)
}

pub fn image_line(img: &ImageSource) -> String {
    serde_json::to_string(&WireImage {
        locator: img.locator.clone(),
        caption: img.caption.clone(),
        width: img.pixel_dims.map(|d| d.0),
        height: img.pixel_dims.map(|d| d.1),
    })
    .expect("wire image always serializes")
}

/// Renders an instance as a single JSON line (no trailing newline).
pub fn to_line(inst: &Instance) -> String {
    serde_json::to_string(&WireInstance::from(inst)).expect("wire instance always serializes")
}

pub fn to_value(inst: &Instance) -> serde_json::Value {
    serde_json::to_value(WireInstance::from(inst)).expect("wire instance always serializes")
}

/// Streaming reader yielding one instance per non-blank line.
pub struct JsonlReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    path: PathBuf,
}

impl JsonlReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
        Ok(JsonlReader::new(BufReader::new(file), path))
    }
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, path: &Path) -> Self {
        JsonlReader {
            lines: reader.lines(),
            line_no: 0,
            path: path.to_path_buf(),
        }
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Instance, ModelError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(ModelError::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_line(&line, self.line_no));
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Instance>, ModelError> {
    JsonlReader::open(path)?.collect()
}

pub struct JsonlWriter<W: Write> {
    out: W,
    path: PathBuf,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, ModelError> {
        let file = File::create(path).map_err(|e| ModelError::io(path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn write(&mut self, inst: &Instance) -> Result<(), ModelError> {
        writeln!(self.out, "{}", to_line(inst)).map_err(|e| ModelError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), ModelError> {
        self.out.flush().map_err(|e| ModelError::io(&self.path, e))
    }
}

pub fn write_jsonl(instances: &[Instance], path: &Path) -> Result<(), ModelError> {
    let mut writer = JsonlWriter::create(path)?;
    for inst in instances {
        writer.write(inst)?;
    }
    writer.finish()
}
