//! Subset statistics: instance count, images per item, turns, and average
//! text / text+image token lengths.
//!
//! "Turns" counts messages (user and assistant) per instance. Text lengths
//! come from [`count_tokens`], which tokenizes the serialized instance, so
//! role headers and slot delimiters are part of the text length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interleave::{count_tokens, InterleaveFormat, Tokenizer};
use crate::model::Instance;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("cannot compute statistics of an empty collection")]
    EmptyCollection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub n_instances: u64,
    pub avg_images: f64,
    pub max_images: u64,
    pub avg_turns: f64,
    pub len_text: f64,
    pub len_total: f64,
}

/// Running sums; merging two accumulators is exact.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StatsAccumulator {
    n: u64,
    images: u64,
    max_images: u64,
    turns: u64,
    text_tokens: u64,
    total_tokens: u64,
}

impl StatsAccumulator {
    pub fn push(
        &mut self,
        instance: &Instance,
        fmt: &InterleaveFormat,
        tok: &dyn Tokenizer,
        tokens_per_image: u64,
    ) {
        let counts = count_tokens(instance, fmt, tok, tokens_per_image);
        let images = instance.images().len() as u64;
        self.n += 1;
        self.images += images;
        self.max_images = self.max_images.max(images);
        self.turns += instance.messages().len() as u64;
        self.text_tokens += counts.text_tokens;
        self.total_tokens += counts.total_tokens;
    }

    pub fn merge(mut self, other: StatsAccumulator) -> Self {
        self.n += other.n;
        self.images += other.images;
        self.max_images = self.max_images.max(other.max_images);
        self.turns += other.turns;
        self.text_tokens += other.text_tokens;
        self.total_tokens += other.total_tokens;
        self
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self) -> Result<SubsetStats, StatsError> {
        if self.n == 0 {
            return Err(StatsError::EmptyCollection);
        }
        let n = self.n as f64;
        Ok(SubsetStats {
            n_instances: self.n,
            avg_images: self.images as f64 / n,
            max_images: self.max_images,
            avg_turns: self.turns as f64 / n,
            len_text: self.text_tokens as f64 / n,
            len_total: self.total_tokens as f64 / n,
        })
    }
}

/// Parallel per-instance counting; the integer sums make the result
/// independent of reduction order.
pub fn accumulate(
    instances: &[Instance],
    fmt: &InterleaveFormat,
    tok: &dyn Tokenizer,
    tokens_per_image: u64,
) -> StatsAccumulator {
    instances
        .par_iter()
        .fold(StatsAccumulator::default, |mut acc, inst| {
            acc.push(inst, fmt, tok, tokens_per_image);
            acc
        })
        .reduce(StatsAccumulator::default, StatsAccumulator::merge)
}

pub fn compute_stats(
    instances: &[Instance],
    fmt: &InterleaveFormat,
    tok: &dyn Tokenizer,
    tokens_per_image: u64,
) -> Result<SubsetStats, StatsError> {
    accumulate(instances, fmt, tok, tokens_per_image).finish()
}

/// Combines per-subset rows into one, weighting averages by instance count.
pub fn aggregate(rows: &[SubsetStats]) -> Result<SubsetStats, StatsError> {
    let n: u64 = rows.iter().map(|r| r.n_instances).sum();
    if rows.is_empty() || n == 0 {
        return Err(StatsError::EmptyCollection);
    }
    let weighted = |f: fn(&SubsetStats) -> f64| {
        rows.iter().map(|r| f(r) * r.n_instances as f64).sum::<f64>() / n as f64
    };
    Ok(SubsetStats {
        n_instances: n,
        avg_images: weighted(|r| r.avg_images),
        max_images: rows.iter().map(|r| r.max_images).max().unwrap_or(0),
        avg_turns: weighted(|r| r.avg_turns),
        len_text: weighted(|r| r.len_text),
        len_total: weighted(|r| r.len_total),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStats {
    pub name: String,
    #[serde(flatten)]
    pub stats: SubsetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub tokens_per_image: u64,
    pub subsets: Vec<NamedStats>,
    pub total: SubsetStats,
}

impl StatsReport {
    pub fn new(tokens_per_image: u64, subsets: Vec<NamedStats>) -> Result<Self, StatsError> {
        let rows: Vec<SubsetStats> = subsets.iter().map(|s| s.stats).collect();
        Ok(StatsReport {
            tokens_per_image,
            total: aggregate(&rows)?,
            subsets,
        })
    }

    /// Aligned text table, one row per subset plus a total row.
    pub fn render_table(&self) -> String {
        let header = [
            "Subset", "# Instance", "# Avg-I", "# Max-I", "# Turns", "Length^T", "Length^T+I",
        ];
        let row = |name: &str, s: &SubsetStats| {
            vec![
                name.to_string(),
                s.n_instances.to_string(),
                format!("{:.1}", s.avg_images),
                s.max_images.to_string(),
                format!("{:.1}", s.avg_turns),
                format!("{:.0}", s.len_text),
                format!("{:.0}", s.len_total),
            ]
        };
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        rows.extend(self.subsets.iter().map(|s| row(&s.name, &s.stats)));
        rows.push(row("Total", &self.total));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            if i == 1 || i == rows.len() - 1 {
                let rule: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
        }
        out
    }
}
