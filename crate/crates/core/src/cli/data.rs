use anyhow::Context;
use rayon::prelude::*;
use serde_json::json;

use super::stream::{for_each_chunk, map_instances, Outcome, Quarantine};
use super::{finish_manifest, CmdResult, Ctx, Failure, IoArgs, StatsArgs, ValidateArgs};
use crate::interleave::{serialize as render, SimpleTokenizer};
use crate::model::{parse_line, Instance, ModelError, Segment};
use crate::stats::{accumulate, NamedStats, StatsAccumulator, StatsReport};

pub(super) fn stats(ctx: &Ctx, args: &StatsArgs) -> CmdResult {
    let inputs = if args.input.is_empty() {
        vec![ctx.input(&None)?]
    } else {
        args.input.clone()
    };
    let out_dir = ctx.output(&args.output)?;
    let fmt = &ctx.cfg.format;
    let tpi = ctx.cfg.budget.tokens_per_image;
    let tok = SimpleTokenizer;

    let mut subsets = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let mut acc = StatsAccumulator::default();
        for_each_chunk(input, |chunk| {
            let instances = chunk
                .into_par_iter()
                .map(|(n, line)| parse_line(&line, n))
                .collect::<Result<Vec<Instance>, ModelError>>()
                .with_context(|| format!("reading {}", input.display()))?;
            acc = acc.merge(accumulate(&instances, fmt, &tok, tpi));
            Ok(())
        })?;
        let name = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| input.display().to_string());
        let stats = acc
            .finish()
            .with_context(|| format!("{} has no instances", input.display()))?;
        subsets.push(NamedStats { name, stats });
    }
    let report = StatsReport::new(tpi, subsets)?;
    print!("{}", report.render_table());

    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("stats.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&path, text)?;

    let mut manifest = ctx.manifest("stats");
    for input in &inputs {
        manifest.input(input);
    }
    manifest
        .output(&path)
        .count("items_in", report.total.n_instances)
        .count("subsets", report.subsets.len() as u64);
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn serialize(ctx: &Ctx, io: &IoArgs) -> CmdResult {
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let fmt = &ctx.cfg.format;
    let mut quarantine = Quarantine::for_output(&output);
    let counters = map_instances(&input, &output, &mut quarantine, |inst| {
        Outcome::Emit(json!({"id": inst.id(), "text": render(&inst, fmt)}).to_string())
    })?;
    counters.log("serialize");

    let mut manifest = ctx.manifest("serialize");
    manifest.input(&input).output(&output);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    finish_manifest(&manifest)?;
    Ok(0)
}

/// Text segments containing a delimiter; parsing alone does not catch these.
fn delimiter_collisions(inst: &Instance, fmt: &crate::interleave::InterleaveFormat) -> Vec<String> {
    let mut found = Vec::new();
    for (m, msg) in inst.messages().iter().enumerate() {
        for seg in msg.segments() {
            if let Segment::Text(t) = seg {
                if let Some(tok) = fmt.reserved_in(t) {
                    found.push(format!(
                        "instance {:?}: message {} text contains reserved delimiter {tok:?}",
                        inst.id(),
                        m + 1
                    ));
                }
            }
        }
    }
    found
}

/// Violations echoed to stderr; the rest are only counted.
const MAX_REPORTED: u64 = 100;

pub(super) fn validate(ctx: &Ctx, args: &ValidateArgs) -> CmdResult {
    let input = ctx.input(&args.input)?;
    let fmt = &ctx.cfg.format;
    let mut violations = 0u64;
    let mut items = 0u64;
    for_each_chunk(&input, |chunk| {
        items += chunk.len() as u64;
        let reports: Vec<Vec<String>> = chunk
            .into_par_iter()
            .map(|(n, line)| match parse_line(&line, n) {
                Ok(inst) => delimiter_collisions(&inst, fmt)
                    .into_iter()
                    .map(|v| format!("line {n}: {v}"))
                    .collect(),
                Err(e @ ModelError::InvariantViolation { .. }) => vec![format!("line {n}: {e}")],
                Err(e) => vec![e.to_string()],
            })
            .collect();
        for line in reports.into_iter().flatten() {
            if violations < MAX_REPORTED {
                eprintln!("{line}");
            }
            violations += 1;
        }
        Ok(())
    })
    .map_err(Failure::Data)?;
    if violations > MAX_REPORTED {
        eprintln!("... {} more not shown", violations - MAX_REPORTED);
    }
    tracing::info!(items_in = items, violations, "validate done");
    println!("{violations} violations");
    Ok(if violations == 0 { 0 } else { 1 })
}
