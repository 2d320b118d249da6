use std::sync::atomic::{AtomicU64, Ordering};

use super::stream::{for_each_chunk, map_instances, model_error_id, Counters, Outcome, Quarantine};
use super::{ensure_parent, finish_manifest, CmdResult, Ctx, IoArgs};
use crate::builders::{build_contrast_caption, convert_to_mcq, merge_items, subsample_frames};
use crate::model::{parse_line, read_image_pool, to_line, write_jsonl};

pub(super) fn merge(ctx: &Ctx, io: &IoArgs) -> CmdResult {
    ctx.seed("build merge")?;
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let mut quarantine = Quarantine::for_output(&output);
    let mut counters = Counters::default();

    // Grouping is a global shuffle, so sources are held in memory.
    let mut sources = Vec::new();
    for_each_chunk(&input, |chunk| {
        for (line_no, line) in chunk {
            counters.items_in += 1;
            match parse_line(&line, line_no) {
                Ok(inst) if inst.images().len() == 1 => sources.push(inst),
                Ok(inst) => {
                    counters.quarantined += 1;
                    quarantine.record(
                        Some(line_no),
                        Some(inst.id()),
                        &format!("merge sources need exactly 1 image, found {}", inst.images().len()),
                    )?;
                }
                Err(e) => {
                    counters.quarantined += 1;
                    quarantine.record(Some(line_no), model_error_id(&e).as_deref(), &e.to_string())?;
                }
            }
        }
        Ok(())
    })?;

    let merged = merge_items(&sources, &ctx.cfg.merge)?;
    ensure_parent(&output)?;
    write_jsonl(&merged.instances, &output)?;
    counters.items_out = merged.instances.len() as u64;
    counters.dropped = merged.dropped as u64;
    counters.log("build merge");

    let mut manifest = ctx.manifest("build merge");
    manifest.input(&input).output(&output);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn contrast(ctx: &Ctx, io: &IoArgs) -> CmdResult {
    ctx.seed("build contrast")?;
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let pool = read_image_pool(&input)?;
    let items = build_contrast_caption(&pool, &ctx.cfg.contrast)?;
    ensure_parent(&output)?;
    write_jsonl(&items, &output)?;
    let counters = Counters {
        items_in: pool.len() as u64,
        items_out: items.len() as u64,
        ..Counters::default()
    };
    counters.log("build contrast");

    let mut manifest = ctx.manifest("build contrast");
    manifest.input(&input).output(&output);
    counters.record(&mut manifest);
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn mcq(ctx: &Ctx, io: &IoArgs) -> CmdResult {
    let seed = ctx.seed("build mcq")?;
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let labels = &ctx.cfg.mcq.labels;
    if labels.len() < 2 {
        return Err(super::Failure::Usage("mcq needs at least two labels".into()));
    }
    let converted = AtomicU64::new(0);
    let mut quarantine = Quarantine::for_output(&output);
    let counters = map_instances(&input, &output, &mut quarantine, |inst| {
        match convert_to_mcq(&inst, labels, seed) {
            Ok(c) => {
                converted.fetch_add(c.converted_pairs as u64, Ordering::Relaxed);
                Outcome::Emit(to_line(&c.instance))
            }
            Err(e) => Outcome::reject(inst.id(), e),
        }
    })?;
    counters.log("build mcq");

    let mut manifest = ctx.manifest("build mcq");
    manifest.input(&input).output(&output);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    manifest.count("pairs_converted", converted.into_inner());
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn frames(ctx: &Ctx, io: &IoArgs, n_frames: usize) -> CmdResult {
    if n_frames == 0 {
        return Err(super::Failure::Usage("--frames must be at least 1".into()));
    }
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let mut quarantine = Quarantine::for_output(&output);
    let counters = map_instances(&input, &output, &mut quarantine, |inst| {
        if inst.images().len() <= n_frames {
            return Outcome::Emit(to_line(&inst));
        }
        match subsample_frames(&inst, n_frames) {
            Ok(out) => Outcome::Emit(to_line(&out)),
            Err(e) => Outcome::reject(inst.id(), e),
        }
    })?;
    counters.log("build frames");

    let mut manifest = ctx.manifest("build frames");
    manifest.input(&input).output(&output);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    finish_manifest(&manifest)?;
    Ok(0)
}
