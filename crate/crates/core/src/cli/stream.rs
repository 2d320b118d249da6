//! Chunked line streaming: lines are read in fixed-size chunks, processed in
//! parallel, and written back in input order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde_json::json;

use crate::model::{parse_line, Instance, ModelError};

pub const CHUNK: usize = 2048;

/// What happened to one input item.
pub enum Outcome {
    Emit(String),
    Reject { id: Option<String>, reason: String },
}

impl Outcome {
    pub fn reject(id: &str, reason: impl ToString) -> Self {
        Outcome::Reject {
            id: Some(id.to_string()),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Counters {
    pub items_in: u64,
    pub items_out: u64,
    pub dropped: u64,
    pub quarantined: u64,
}

impl Counters {
    pub fn log(&self, command: &str) {
        tracing::info!(
            command,
            items_in = self.items_in,
            items_out = self.items_out,
            dropped = self.dropped,
            quarantined = self.quarantined,
            "done"
        );
    }

    pub fn record(&self, manifest: &mut super::ManifestBuilder) {
        manifest
            .count("items_in", self.items_in)
            .count("items_out", self.items_out)
            .count("dropped", self.dropped)
            .count("quarantined", self.quarantined);
    }
}

/// Rejected items, written lazily to `<output>.quarantine.jsonl`.
pub struct Quarantine {
    path: PathBuf,
    out: Option<BufWriter<File>>,
}

impl Quarantine {
    pub fn for_output(output: &Path) -> Self {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".quarantine.jsonl");
        let path = output.with_file_name(name);
        // A stale file from an earlier run would otherwise be mistaken for
        // this run's rejects.
        let _ = std::fs::remove_file(&path);
        Quarantine { path, out: None }
    }

    pub fn record(&mut self, line: Option<usize>, id: Option<&str>, reason: &str) -> anyhow::Result<()> {
        tracing::warn!(line, id, reason, "quarantined");
        if self.out.is_none() {
            let file = File::create(&self.path)
                .with_context(|| format!("creating {}", self.path.display()))?;
            self.out = Some(BufWriter::new(file));
        }
        let out = self.out.as_mut().expect("just opened");
        writeln!(out, "{}", json!({"line": line, "id": id, "reason": reason}))?;
        Ok(())
    }

    /// Flushes and returns the file path if anything was written.
    pub fn finish(self) -> anyhow::Result<Option<PathBuf>> {
        match self.out {
            Some(mut out) => {
                out.flush()?;
                Ok(Some(self.path))
            }
            None => Ok(None),
        }
    }
}

/// Reads non-blank lines in chunks of `CHUNK`, tagged with 1-based line
/// numbers.
pub fn for_each_chunk(
    input: &Path,
    mut f: impl FnMut(Vec<(usize, String)>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let file = File::open(input).map_err(|e| ModelError::io(input, e))?;
    let mut chunk = Vec::with_capacity(CHUNK);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        chunk.push((n + 1, line));
        if chunk.len() == CHUNK {
            f(std::mem::take(&mut chunk))?;
        }
    }
    if !chunk.is_empty() {
        f(chunk)?;
    }
    Ok(())
}

pub fn model_error_id(e: &ModelError) -> Option<String> {
    match e {
        ModelError::InvariantViolation { id, .. } => Some(id.clone()),
        _ => None,
    }
}

/// Parses every line of `input`, applies `f` to each valid instance in
/// parallel, and writes emitted lines to `output` in input order. Lines that
/// fail to parse and items `f` rejects go to the quarantine file.
pub fn map_instances<F>(
    input: &Path,
    output: &Path,
    quarantine: &mut Quarantine,
    f: F,
) -> anyhow::Result<Counters>
where
    F: Fn(Instance) -> Outcome + Sync,
{
    super::ensure_parent(output)?;
    let file = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let mut out = BufWriter::new(file);
    let mut counters = Counters::default();
    for_each_chunk(input, |chunk| {
        let results: Vec<(usize, Outcome)> = chunk
            .into_par_iter()
            .map(|(line_no, line)| {
                let outcome = match parse_line(&line, line_no) {
                    Ok(inst) => f(inst),
                    Err(e) => Outcome::Reject {
                        id: model_error_id(&e),
                        reason: e.to_string(),
                    },
                };
                (line_no, outcome)
            })
            .collect();
        for (line_no, outcome) in results {
            counters.items_in += 1;
            match outcome {
                Outcome::Emit(text) => {
                    writeln!(out, "{text}")?;
                    counters.items_out += 1;
                }
                Outcome::Reject { id, reason } => {
                    quarantine.record(Some(line_no), id.as_deref(), &reason)?;
                    counters.quarantined += 1;
                }
            }
        }
        Ok(())
    })?;
    out.flush()?;
    Ok(counters)
}
