use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::Rng;
use serde_json::json;

use super::stream::{for_each_chunk, model_error_id, Counters, Quarantine};
use super::{ensure_parent, finish_manifest, CmdResult, Ctx, Failure, IoArgs};
use crate::builders::place_placeholders;
use crate::model::{
    parse_line, read_image_pool, to_line, ImageSource, Instance, Message, Role, Segment, Skill,
};
use crate::seed::item_rng;
use crate::synth::{
    build_question_for_answer_prompt, extract_single_question, parse_qa_pairs_any,
    validate_multivqa, AuditLog, QaPair, SynthClient, SynthRequest, MULTIVQA_PAIRS,
};

/// Requests sent per `call_many` batch.
const BATCH: usize = 64;

fn audit_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".audit.jsonl");
    output.with_file_name(name)
}

fn client(ctx: &Ctx, output: &Path) -> Result<(SynthClient, PathBuf), Failure> {
    let client = SynthClient::from_env(&ctx.cfg.synth)?;
    let audit = audit_path(output);
    let log = AuditLog::create(&audit).with_context(|| format!("opening {}", audit.display()))?;
    Ok((client.with_audit(log), audit))
}

struct Planned {
    id: String,
    images: Vec<ImageSource>,
    request: SynthRequest,
}

fn plan_multivqa(ctx: &Ctx, pool: &[ImageSource], seed: u64) -> Result<Vec<Planned>, Failure> {
    let s = &ctx.cfg.multivqa;
    if s.images_min < 2 || s.images_min > s.images_max {
        return Err(Failure::Usage(format!(
            "multivqa needs 2 <= images_min <= images_max, got {}..{}",
            s.images_min, s.images_max
        )));
    }
    if pool.len() < s.images_min {
        return Err(Failure::Data(anyhow::anyhow!(
            "image pool has {} captioned images, need at least {}",
            pool.len(),
            s.images_min
        )));
    }
    (0..s.n_items)
        .map(|t| {
            let id = format!("{}-{t:06}", s.id_prefix);
            let mut rng = item_rng(seed, &id);
            let n = rng.random_range(s.images_min..=s.images_max).min(pool.len());
            let images: Vec<ImageSource> = rand::seq::index::sample(&mut rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            let captions = images
                .iter()
                .map(|img| img.caption().unwrap_or_default().to_string())
                .collect();
            let request = SynthRequest::multivqa(&id, captions, &ctx.cfg.synth)?;
            Ok(Planned {
                id,
                images,
                request,
            })
        })
        .collect()
}

fn multivqa_instance(
    ctx: &Ctx,
    seed: u64,
    plan: &Planned,
    pairs: &[QaPair],
) -> anyhow::Result<Instance> {
    let mut messages = Vec::with_capacity(pairs.len() * 2);
    for (k, pair) in pairs.iter().enumerate() {
        let mut segments: Vec<Segment> = Vec::new();
        if k == 0 {
            segments.extend((1..=plan.images.len()).map(Segment::Image));
        }
        segments.push(Segment::text(pair.question.clone()));
        messages.push(Message::user(segments).map_err(anyhow::Error::msg)?);
        messages.push(Message::assistant(pair.answer.clone()).map_err(anyhow::Error::msg)?);
    }
    let inst = Instance::new(
        &plan.id,
        &ctx.cfg.multivqa.source,
        Skill::Reason,
        plan.images.clone(),
        messages,
    )?;
    Ok(place_placeholders(
        &inst,
        ctx.cfg.multivqa.placeholder_position,
        seed,
    )?)
}

pub(super) fn multivqa(ctx: &Ctx, io: &IoArgs, dry_run: bool) -> CmdResult {
    let seed = ctx.seed("synth multivqa")?;
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let pool: Vec<ImageSource> = read_image_pool(&input)?
        .into_iter()
        .filter(|img| img.caption().is_some_and(|c| !c.trim().is_empty()))
        .collect();
    let plans = plan_multivqa(ctx, &pool, seed)?;
    ensure_parent(&output)?;
    let mut out = BufWriter::new(File::create(&output)?);
    let mut manifest = ctx.manifest("synth multivqa");
    manifest.input(&input).output(&output);

    if dry_run {
        for p in &plans {
            let locators: Vec<&str> = p.images.iter().map(|i| i.locator()).collect();
            writeln!(
                out,
                "{}",
                json!({"id": p.id, "model": p.request.model_name, "prompt": p.request.prompt, "images": locators})
            )?;
        }
        out.flush()?;
        manifest.count("requests", plans.len() as u64);
        finish_manifest(&manifest)?;
        return Ok(0);
    }

    let (client, audit) = client(ctx, &output)?;
    let mut quarantine = Quarantine::for_output(&output);
    let mut counters = Counters::default();
    let mut pairs_rejected = 0u64;
    for batch in plans.chunks(BATCH) {
        let reqs: Vec<SynthRequest> = batch.iter().map(|p| p.request.clone()).collect();
        for (plan, result) in batch.iter().zip(client.call_many(&reqs)) {
            counters.items_in += 1;
            let parsed = result
                .map_err(anyhow::Error::from)
                .and_then(|text| Ok(parse_qa_pairs_any(&text)?));
            let pairs = match parsed {
                Ok(p) => p,
                Err(e) => {
                    counters.quarantined += 1;
                    quarantine.record(None, Some(&plan.id), &e.to_string())?;
                    continue;
                }
            };
            if pairs.len() != MULTIVQA_PAIRS {
                tracing::warn!(id = %plan.id, found = pairs.len(), expected = MULTIVQA_PAIRS, "pair count");
            }
            let (accepted, rejected) = validate_multivqa(pairs, plan.images.len());
            for r in &rejected {
                pairs_rejected += 1;
                quarantine.record(
                    None,
                    Some(&plan.id),
                    &format!("{}: {:?}", r.reason, r.pair.question),
                )?;
            }
            if accepted.is_empty() {
                counters.dropped += 1;
                continue;
            }
            match multivqa_instance(ctx, seed, plan, &accepted) {
                Ok(inst) => {
                    writeln!(out, "{}", to_line(&inst))?;
                    counters.items_out += 1;
                }
                Err(e) => {
                    counters.quarantined += 1;
                    quarantine.record(None, Some(&plan.id), &format!("{e:#}"))?;
                }
            }
        }
    }
    out.flush()?;
    counters.log("synth multivqa");
    drop(client);
    manifest.output(&audit);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    manifest.count("pairs_rejected", pairs_rejected);
    finish_manifest(&manifest)?;
    Ok(0)
}

/// Keeps the image slots of `msg` where they were and swaps its text for
/// `question`.
fn replace_question(msg: &Message, question: &str) -> Result<Message, String> {
    let slots: Vec<Segment> = msg
        .segments()
        .iter()
        .filter(|s| matches!(s, Segment::Image(_)))
        .cloned()
        .collect();
    let slots_first = matches!(msg.segments().first(), Some(Segment::Image(_)));
    let text = Segment::text(question);
    let segments = if slots_first {
        slots.into_iter().chain([text]).collect()
    } else {
        [text].into_iter().chain(slots).collect()
    };
    Message::new(Role::User, segments)
}

fn with_first_question(inst: &Instance, question: &str) -> anyhow::Result<Instance> {
    let mut messages = inst.messages().to_vec();
    messages[0] = replace_question(&messages[0], question).map_err(anyhow::Error::msg)?;
    Ok(Instance::new(
        inst.id(),
        inst.source(),
        inst.skill(),
        inst.images().to_vec(),
        messages,
    )?)
}

pub(super) fn b2w_question(ctx: &Ctx, io: &IoArgs) -> CmdResult {
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    ensure_parent(&output)?;
    let (client, audit) = client(ctx, &output)?;
    let mut out = BufWriter::new(File::create(&output)?);
    let mut quarantine = Quarantine::for_output(&output);
    let mut counters = Counters::default();

    for_each_chunk(&input, |chunk| {
        let mut ready = Vec::new();
        for (line_no, line) in chunk {
            counters.items_in += 1;
            let inst = match parse_line(&line, line_no) {
                Ok(inst) => inst,
                Err(e) => {
                    counters.quarantined += 1;
                    quarantine.record(Some(line_no), model_error_id(&e).as_deref(), &e.to_string())?;
                    continue;
                }
            };
            let answer = inst.messages()[1].text();
            match build_question_for_answer_prompt(&answer) {
                Ok(prompt) => {
                    let req = SynthRequest::freeform(inst.id(), prompt, &ctx.cfg.synth);
                    ready.push((line_no, inst, req));
                }
                Err(e) => {
                    counters.quarantined += 1;
                    quarantine.record(Some(line_no), Some(inst.id()), &e.to_string())?;
                }
            }
        }
        for batch in ready.chunks(BATCH) {
            let reqs: Vec<SynthRequest> = batch.iter().map(|(_, _, r)| r.clone()).collect();
            for ((line_no, inst, _), result) in batch.iter().zip(client.call_many(&reqs)) {
                let rewritten = result
                    .map_err(anyhow::Error::from)
                    .and_then(|text| {
                        extract_single_question(&text)
                            .ok_or_else(|| anyhow::anyhow!("no question in completion"))
                    })
                    .and_then(|q| with_first_question(inst, &q));
                match rewritten {
                    Ok(new) => {
                        writeln!(out, "{}", to_line(&new))?;
                        counters.items_out += 1;
                    }
                    Err(e) => {
                        counters.quarantined += 1;
                        quarantine.record(Some(*line_no), Some(inst.id()), &format!("{e:#}"))?;
                    }
                }
            }
        }
        Ok(())
    })?;
    out.flush()?;
    drop(client);
    counters.log("synth b2w-question");

    let mut manifest = ctx.manifest("synth b2w-question");
    manifest.input(&input).output(&output).output(&audit);
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    counters.record(&mut manifest);
    finish_manifest(&manifest)?;
    Ok(0)
}
