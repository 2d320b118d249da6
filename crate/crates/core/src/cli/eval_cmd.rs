use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::stream::Quarantine;
use super::{ensure_parent, finish_manifest, CmdResult, Ctx, IoArgs};
use crate::eval::{
    file_loader, prepare_input, random_baseline, read_benchmark, read_predictions,
    resolve_locator, score as score_records, EvalError, InputStrategy, RequestLine,
};
use crate::interleave::serialize;

fn images_dir(output: &Path) -> PathBuf {
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    output.with_file_name(format!("{stem}_images"))
}

pub(super) fn prepare(
    ctx: &Ctx,
    io: &IoArgs,
    strategy: InputStrategy,
    image_root: Option<&Path>,
) -> CmdResult {
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let root = match image_root {
        Some(r) => r.to_path_buf(),
        None => input.parent().unwrap_or(Path::new("")).to_path_buf(),
    };
    let records = read_benchmark(&input)?;
    ensure_parent(&output)?;
    let fmt = &ctx.cfg.format;
    let dir = images_dir(&output);
    let dir_name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
    if strategy == InputStrategy::Merge {
        std::fs::create_dir_all(&dir)?;
    }

    let load = file_loader(root.clone());
    let results: Vec<Result<(RequestLine, Option<PathBuf>), EvalError>> = records
        .par_iter()
        .enumerate()
        .map(|(row, rec)| {
            let inst = rec.instance();
            match strategy {
                InputStrategy::Sequence => Ok((
                    RequestLine {
                        id: inst.id().to_string(),
                        prompt: serialize(inst, fmt),
                        images: inst
                            .images()
                            .iter()
                            .map(|img| resolve_locator(&root, img.locator()).display().to_string())
                            .collect(),
                    },
                    None,
                )),
                InputStrategy::Merge => {
                    let prepared = prepare_input(inst, strategy, fmt, &load)?;
                    let file = format!("{row:06}.png");
                    let path = dir.join(&file);
                    prepared.images[0].save_png(&path)?;
                    Ok((
                        RequestLine {
                            id: inst.id().to_string(),
                            prompt: prepared.prompt,
                            images: vec![format!("{dir_name}/{file}")],
                        },
                        Some(path),
                    ))
                }
            }
        })
        .collect();

    let mut out = BufWriter::new(File::create(&output)?);
    let mut quarantine = Quarantine::for_output(&output);
    let mut written = Vec::new();
    let (mut ok, mut bad) = (0u64, 0u64);
    for (rec, result) in records.iter().zip(results) {
        match result {
            Ok((line, png)) => {
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
                written.extend(png);
                ok += 1;
            }
            Err(e) => {
                bad += 1;
                quarantine.record(None, Some(rec.id()), &e.to_string())?;
            }
        }
    }
    out.flush()?;
    tracing::info!(items_in = records.len(), items_out = ok, quarantined = bad, "eval prepare done");

    let mut manifest = ctx.manifest("eval prepare");
    manifest.input(&input).output(&output);
    for png in &written {
        manifest.output(png);
    }
    if let Some(q) = quarantine.finish()? {
        manifest.output(&q);
    }
    manifest
        .count("items_in", records.len() as u64)
        .count("items_out", ok)
        .count("quarantined", bad);
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn score(ctx: &Ctx, io: &IoArgs, predictions: &Path) -> CmdResult {
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let preds = read_predictions(predictions)?;
    let records = read_benchmark(&input)?
        .into_iter()
        .map(|rec| match preds.get(rec.id()) {
            Some(p) => Ok(rec.clone().with_prediction(p.as_str())),
            None => Err(EvalError::MissingPrediction(rec.id().to_string())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = score_records(&records)?;
    println!(
        "accuracy {:.4} ({}/{}, {} unparsed)",
        report.overall.accuracy, report.overall.correct, report.overall.total, report.overall.unparsed
    );

    ensure_parent(&output)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&output, text)?;
    let verdicts = {
        let stem = output.file_stem().unwrap_or_default().to_string_lossy();
        output.with_file_name(format!("{stem}.verdicts.jsonl"))
    };
    let mut out = BufWriter::new(File::create(&verdicts)?);
    for rec in &records {
        writeln!(out, "{}", json!({"id": rec.id(), "verdict": rec.verdict()}))?;
    }
    out.flush()?;

    let mut manifest = ctx.manifest("eval score");
    manifest
        .input(&input)
        .input(predictions)
        .output(&output)
        .output(&verdicts)
        .count("items_in", records.len() as u64)
        .count("correct", report.overall.correct)
        .count("unparsed", report.overall.unparsed);
    finish_manifest(&manifest)?;
    Ok(0)
}

pub(super) fn baseline(ctx: &Ctx, io: &IoArgs, trials: u64) -> CmdResult {
    let seed = ctx.seed("eval baseline")?;
    let input = ctx.input(&io.input)?;
    let output = ctx.output(&io.output)?;
    let records = read_benchmark(&input)?;
    let b = random_baseline(&records, trials, seed)?;
    println!(
        "random baseline {:.4} (monte carlo {:.4} over {} trials, se {:.4})",
        b.analytic, b.monte_carlo, b.trials, b.std_error
    );
    ensure_parent(&output)?;
    let mut text = serde_json::to_string_pretty(&b)?;
    text.push('\n');
    std::fs::write(&output, text)?;

    let mut manifest = ctx.manifest("eval baseline");
    manifest
        .input(&input)
        .output(&output)
        .count("items_in", records.len() as u64)
        .count("trials", trials);
    finish_manifest(&manifest)?;
    Ok(0)
}
