//! Acceptance suite. Runs without the libtest harness so each criterion
//! prints exactly one `[PASS]`/`[FAIL]` line; the process exits non-zero if
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{completion, image, single_image, MockServer};
use mitkit::builders::{
    default_styles, merge_items, sample_frames, strip_any, to_multiple_choice, MergeConfig,
};
use mitkit::eval::{
    extract_mcq_answer, merge_horizontal, random_baseline, EvalRecord, Extraction, QuestionType,
    RasterImage,
};
use mitkit::interleave::{
    count_tokens, max_images, parse, serialize, tokens_per_image, InterleaveFormat,
    SimpleTokenizer, TokenBudget,
};
use mitkit::model::{to_line, write_jsonl, Instance, Message, Role, Segment, Skill};
use mitkit::synth::{
    parse_qa_pairs, parse_qa_pairs_any, validate_multivqa, SynthClient, SynthError, SynthRequest,
    SynthSettings,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. Token budget

fn budget_exactness() -> Check {
    let tpi = tokens_per_image(336, 14).map_err(|e| e.to_string())?;
    ensure(tpi == 576, || format!("tokens_per_image(336,14) = {tpi}"))?;
    let a = max_images(&TokenBudget::new(8192, 576, 0).map_err(|e| e.to_string())?);
    ensure(a == 14, || format!("max_images(8192,576,0) = {a}"))?;
    let b = max_images(&TokenBudget::new(8192, 64, 0).map_err(|e| e.to_string())?);
    ensure(b == 128, || format!("max_images(8192,64,0) = {b}"))?;
    Ok("576 / 14 / 128".into())
}

// ---------------------------------------------------------------------------
// 2. Statistics table consistency

struct Row {
    name: &'static str,
    avg_images: f64,
    len_text: f64,
    len_total: f64,
}

const ROWS: [Row; 14] = [
    Row { name: "LLaVA-665k-multi", avg_images: 2.0, len_text: 558.0, len_total: 1710.0 },
    Row { name: "LRV-multi", avg_images: 3.5, len_text: 2234.0, len_total: 4251.0 },
    Row { name: "CoInstruct", avg_images: 2.7, len_text: 314.0, len_total: 1620.0 },
    Row { name: "Dreamsim", avg_images: 3.0, len_text: 103.0, len_total: 1831.0 },
    Row { name: "Spot-the-Diff", avg_images: 2.0, len_text: 121.0, len_total: 1273.0 },
    Row { name: "Birds-to-Words", avg_images: 2.0, len_text: 101.0, len_total: 1253.0 },
    Row { name: "NLVR2", avg_images: 2.0, len_text: 105.0, len_total: 1257.0 },
    Row { name: "IconQA", avg_images: 2.4, len_text: 71.0, len_total: 1454.0 },
    Row { name: "Contrast-Caption", avg_images: 3.8, len_text: 871.0, len_total: 3067.0 },
    Row { name: "ImageCoDe", avg_images: 10.0, len_text: 126.0, len_total: 5886.0 },
    Row { name: "Multi-VQA", avg_images: 4.0, len_text: 1102.0, len_total: 3417.0 },
    Row { name: "VIST", avg_images: 20.3, len_text: 530.0, len_total: 12238.0 },
    Row { name: "NExT-QA", avg_images: 8.0, len_text: 572.0, len_total: 5180.0 },
    Row { name: "STAR", avg_images: 8.0, len_text: 961.0, len_total: 5569.0 },
];

const ROW_TOLERANCE: f64 = 20.0;

fn random_text(rng: &mut ChaCha8Rng) -> Segment {
    let words = ["left", "image", "bird", "3", "(x)", "how", "many?", "é", "a,b", "\"q\""];
    let k = rng.random_range(1..6);
    Segment::text(
        (0..k)
            .map(|_| *words.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" "),
    )
}

fn random_instance(rng: &mut ChaCha8Rng, id: &str, max_images: usize) -> Instance {
    let n = rng.random_range(1..=max_images);
    let turns = rng.random_range(1..=4usize);
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(rng);
    let mut per_turn: Vec<Vec<usize>> = vec![Vec::new(); turns];
    for slot in order {
        per_turn[rng.random_range(0..turns)].push(slot);
    }
    let mut messages = Vec::new();
    for slots in per_turn {
        let mut segs: Vec<Segment> = slots.into_iter().map(Segment::Image).collect();
        segs.push(random_text(rng));
        segs.shuffle(rng);
        messages.push(Message::user(segs).unwrap());
        messages.push(Message::new(Role::Assistant, vec![random_text(rng)]).unwrap());
    }
    Instance::new(
        id,
        "acceptance",
        Skill::Compare,
        (0..n).map(|i| image(format!("{id}/{i}"))).collect(),
        messages,
    )
    .unwrap()
}

fn table_consistency() -> Check {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for row in &ROWS {
        let predicted = row.len_text + 576.0 * row.avg_images;
        let diff = row.len_total - predicted;
        worst = worst.max(diff.abs());
        if diff.abs() > ROW_TOLERANCE {
            failures.push(format!("{} off by {diff:+.1}", row.name));
        }
    }

    let fmt = InterleaveFormat::default();
    let tok = SimpleTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..10_000 {
        let inst = random_instance(&mut rng, &format!("f{k}"), 20);
        let c = count_tokens(&inst, &fmt, &tok, 576);
        if c.total_tokens - c.text_tokens != 576 * inst.images().len() as u64 {
            return Err(format!("linear law broken on fixture {k}"));
        }
    }
    if failures.is_empty() {
        Ok(format!("14 rows within {ROW_TOLERANCE} (max {worst:.1}); linear law on 10000 fixtures"))
    } else {
        Err(format!(
            "{}/14 rows outside {ROW_TOLERANCE}: {}; linear law holds on 10000 fixtures",
            failures.len(),
            failures.join(", ")
        ))
    }
}

// ---------------------------------------------------------------------------
// 3. Round trip

fn round_trip() -> Check {
    let fmt = InterleaveFormat::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_seen = 0;
    for k in 0..1000 {
        let inst = random_instance(&mut rng, &format!("r{k}"), 50);
        max_seen = max_seen.max(inst.images().len());
        let slots: Vec<usize> = parse(&serialize(&inst, &fmt), &fmt)
            .map_err(|e| format!("fixture {k}: {e}"))?
            .into_iter()
            .map(|s| s.index)
            .collect();
        ensure(slots == inst.slot_order(), || format!("fixture {k}: slots differ"))?;
    }
    Ok(format!("1000 fixtures, up to {max_seen} images"))
}

// ---------------------------------------------------------------------------
// 4. Merge conservation

fn merge_conservation() -> Check {
    let sources: Vec<Instance> = (0..1000)
        .map(|i| single_image(&format!("src{i:04}"), 1 + i % 4))
        .collect();
    let by_locator: HashMap<&str, &Instance> = sources
        .iter()
        .map(|s| (s.images()[0].locator(), s))
        .collect();
    let cfg = MergeConfig {
        seed: 11,
        ..MergeConfig::default()
    };
    let styles = default_styles();
    let out = merge_items(&sources, &cfg).map_err(|e| e.to_string())?;

    let mut used = 0;
    let mut seen = std::collections::HashSet::new();
    for m in &out.instances {
        let k = m.images().len();
        ensure((cfg.k_min..=cfg.k_max).contains(&k), || {
            format!("{} has {k} images", m.id())
        })?;
        used += k;
        let mut expected: BTreeMap<(String, String), usize> = BTreeMap::new();
        for img in m.images() {
            ensure(seen.insert(img.locator().to_string()), || {
                format!("{} reused", img.locator())
            })?;
            let src = by_locator
                .get(img.locator())
                .ok_or_else(|| format!("unknown image {}", img.locator()))?;
            for (q, a) in src.qa_pairs() {
                *expected.entry((q.text(), a.text())).or_default() += 1;
            }
        }
        let mut got: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (q, a) in m.qa_pairs() {
            let (orig, index) = strip_any(&q.text(), &styles, k)
                .ok_or_else(|| format!("{}: no denotation in {:?}", m.id(), q.text()))?;
            let src = by_locator[m.images()[index - 1].locator()];
            ensure(src.qa_pairs().any(|(sq, _)| sq.text() == orig), || {
                format!("{}: denotation points at the wrong image", m.id())
            })?;
            *got.entry((orig, a.text())).or_default() += 1;
        }
        ensure(got == expected, || format!("{}: QA multiset differs", m.id()))?;
    }
    ensure(used + out.dropped == sources.len(), || {
        format!("{used} used + {} dropped != {}", out.dropped, sources.len())
    })?;

    let again = merge_items(&sources, &cfg).map_err(|e| e.to_string())?;
    let bytes = |o: &[Instance]| o.iter().map(to_line).collect::<Vec<_>>().join("\n");
    ensure(bytes(&out.instances) == bytes(&again.instances), || {
        "second run differs".into()
    })?;
    Ok(format!(
        "{} groups from 1000 items, {} dropped, deterministic",
        out.instances.len(),
        out.dropped
    ))
}

// ---------------------------------------------------------------------------
// 5. Multiple choice

fn mcq_conversion_and_extraction() -> Check {
    let pool: Vec<String> = (0..30).map(|i| format!("option text {i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..1000u64 {
        let n = rng.random_range(2..=8);
        let picked: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
        let item = to_multiple_choice("Which one?", &picked[0], &picked[1..], k)
            .map_err(|e| e.to_string())?;
        ensure(item.options()[item.answer_index()] == picked[0], || {
            format!("conversion {k}: answer index points elsewhere")
        })?;
        let mut a = item.options().to_vec();
        let mut b = picked.clone();
        a.sort();
        b.sort();
        ensure(a == b, || format!("conversion {k}: options changed"))?;
    }

    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mcq_predictions.jsonl"),
    )
    .map_err(|e| e.to_string())?;
    let (mut oracle, mut scored, mut n) = (0, 0, 0);
    let mut disagreements = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let options: Vec<String> = serde_json::from_value(v["options"].clone()).unwrap();
        let gold = v["gold_index"].as_u64().unwrap() as usize;
        let label = v["label"].as_u64().map(|l| l as usize);
        let got = match extract_mcq_answer(v["prediction"].as_str().unwrap(), &options) {
            Extraction::Option(i) => Some(i),
            Extraction::Unparsed => None,
        };
        n += 1;
        oracle += usize::from(label == Some(gold));
        scored += usize::from(got == Some(gold));
        if got != label {
            disagreements.push(v["id"].as_str().unwrap().to_string());
        }
    }
    ensure(n == 100, || format!("fixture has {n} records"))?;
    ensure(scored == oracle, || {
        format!("accuracy {scored}/100 vs oracle {oracle}/100")
    })?;
    ensure(disagreements.is_empty(), || {
        format!("per-record mismatches: {}", disagreements.join(", "))
    })?;
    Ok(format!("1000 conversions; fixture accuracy {scored}/100 = oracle"))
}

// ---------------------------------------------------------------------------
// 6. Random baseline

fn homogeneous(n_options: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<EvalRecord> {
    (0..count)
        .map(|k| {
            let inst = Instance::new(
                format!("b{k}"),
                "bench",
                Skill::Reason,
                vec![image("x.png"), image("y.png")],
                vec![
                    Message::user(vec![Segment::Image(1), Segment::Image(2), Segment::text("?")])
                        .unwrap(),
                    Message::assistant("a").unwrap(),
                ],
            )
            .unwrap();
            let qtype = QuestionType::Mcq {
                options: (0..n_options).map(|o| format!("o{o}")).collect(),
                gold_index: rng.random_range(0..n_options),
            };
            EvalRecord::new(inst, qtype).unwrap()
        })
        .collect()
}

fn baseline() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut notes = Vec::new();
    for (n, expected) in [(4usize, 0.25), (2, 0.5)] {
        let recs = homogeneous(n, 200, &mut rng);
        let b = random_baseline(&recs, 100_000, 99).map_err(|e| e.to_string())?;
        ensure(b.analytic == expected, || format!("{n}-option analytic {}", b.analytic))?;
        let sigma = (expected * (1.0 - expected) / 100_000.0).sqrt();
        ensure((b.monte_carlo - expected).abs() <= 3.0 * sigma, || {
            format!("{n}-option monte carlo {} outside 3 sigma", b.monte_carlo)
        })?;
        notes.push(format!("{n}-opt {:.4}", b.monte_carlo));
    }
    // A 48.93% random score on a two-option benchmark is 1.07 points under
    // the analytic 50%; a single uniform-guess run over a few thousand
    // questions can land there.
    notes.push("2-opt reference 48.93 vs 50.00".into());
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------
// 7. Merge geometry

/// Independent rounding oracle: width × target / height, ties to even.
fn expected_width(w: u32, h: u32, target: u32) -> u32 {
    let num = w as u64 * target as u64;
    let den = h as u64;
    let (q, r) = (num / den, num % den);
    let q = if 2 * r > den || (2 * r == den && q % 2 == 1) {
        q + 1
    } else {
        q
    };
    q.max(1) as u32
}

fn geometry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..300 {
        let n = rng.random_range(1..=5);
        let dims: Vec<(u32, u32)> = (0..n)
            .map(|_| (rng.random_range(1..=120), rng.random_range(1..=120)))
            .collect();
        let images: Vec<RasterImage> = dims
            .iter()
            .map(|&(w, h)| RasterImage::filled(w, h, [rng.random(), rng.random(), rng.random()]).unwrap())
            .collect();
        let merged = merge_horizontal(&images).map_err(|e| e.to_string())?;
        let min_h = dims.iter().map(|d| d.1).min().unwrap();
        let width: u32 = dims.iter().map(|&(w, h)| expected_width(w, h, min_h)).sum();
        ensure(merged.height() == min_h && merged.width() == width, || {
            format!(
                "case {k}: {dims:?} -> {}x{}, expected {width}x{min_h}",
                merged.width(),
                merged.height()
            )
        })?;
    }
    for k in 0..50 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let img = RasterImage::new(w, h, pixels).unwrap();
        let merged = merge_horizontal(std::slice::from_ref(&img)).map_err(|e| e.to_string())?;
        ensure(merged == img, || format!("identity case {k} not pixel-exact"))?;
    }
    Ok("300 random lists, 50 identity cases".into())
}

// ---------------------------------------------------------------------------
// 8. Synthesis parser and retries

fn fuzz_input(rng: &mut ChaCha8Rng) -> String {
    let pieces = [
        "Question:", "Answer:", "question :", "ANSWER:", "Q:", "A:", "image ", "Image", "1", "2",
        "99999999999999999999", "\n", "\n\n", " ", "...", "**", "1.", "é", "\u{200b}", ":", "?",
        "image0", "images 3", "\r\n", "\t",
    ];
    let k = rng.random_range(0..40);
    (0..k).map(|_| *pieces.choose(rng).unwrap()).collect()
}

fn synth_parser() -> Check {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let response =
        std::fs::read_to_string(dir.join("multivqa_response.txt")).map_err(|e| e.to_string())?;
    let pairs = parse_qa_pairs(&response, 10).map_err(|e| e.to_string())?;
    ensure(pairs.len() == 10, || format!("parsed {} pairs", pairs.len()))?;
    let (accepted, rejected) = validate_multivqa(pairs, 3);
    ensure(accepted.len() == 10 && rejected.is_empty(), || {
        format!("{} accepted, {} rejected", accepted.len(), rejected.len())
    })?;

    let mixed = "Question: What is in image 2?\nAnswer: A kite.\n\
                 Question: How do image 1 and image 2 differ?\nAnswer: One is indoors.\n";
    let (accepted, rejected) = validate_multivqa(parse_qa_pairs_any(mixed).map_err(|e| e.to_string())?, 3);
    ensure(accepted.len() == 1 && rejected.len() == 1, || {
        "single-image pair not rejected".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..10_000 {
        let input = fuzz_input(&mut rng);
        let res = catch_unwind(|| {
            if let Ok(p) = parse_qa_pairs_any(&input) {
                let _ = validate_multivqa(p, 3);
            }
            let _ = parse_qa_pairs(&input, 10);
        });
        ensure(res.is_ok(), || format!("panic on fuzz case {k}: {input:?}"))?;
    }

    let settings = SynthSettings {
        max_retries: 2,
        backoff_base_ms: 1,
        timeout_secs: 5.0,
        ..SynthSettings::default()
    };
    let caps: Vec<String> = std::fs::read_to_string(dir.join("multivqa_captions.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(String::from)
        .collect();
    let req = SynthRequest::multivqa("mock", caps, &settings).map_err(|e| e.to_string())?;

    let failing = MockServer::start(vec![(503, "{}".into())]);
    let client = SynthClient::new(&failing.base, "k", &settings);
    ensure(client.call_llm(&req) == Err(SynthError::ApiError(503)), || {
        "expected final 503".into()
    })?;
    ensure(failing.hits() == 3, || format!("{} attempts, expected 3", failing.hits()))?;

    let flaky = MockServer::start(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, completion(&response)),
    ]);
    let client = SynthClient::new(&flaky.base, "k", &settings);
    let text = client.call_llm(&req).map_err(|e| e.to_string())?;
    ensure(text == response && flaky.hits() == 3, || {
        format!("recovery after 2 retries failed ({} hits)", flaky.hits())
    })?;
    Ok("10/10 pairs, single-image rejected, 10000 fuzz cases, 3 attempts at max_retries=2".into())
}

// ---------------------------------------------------------------------------
// 9. Frames

fn frames() -> Check {
    let got = sample_frames(16, 8).map_err(|e| e.to_string())?;
    ensure(got == vec![0, 2, 4, 6, 8, 10, 12, 14], || format!("(16,8) -> {got:?}"))?;
    for n in 1..=64 {
        ensure(
            sample_frames(n, n).map_err(|e| e.to_string())? == (0..n).collect::<Vec<_>>(),
            || format!("({n},{n}) not identity"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let total = rng.random_range(1..=5000);
        let n = rng.random_range(1..=total);
        let idx = sample_frames(total, n).map_err(|e| e.to_string())?;
        ensure(idx.len() == n && idx.windows(2).all(|w| w[0] < w[1]) && idx[n - 1] < total, || {
            format!("({total},{n}) not strictly increasing in range")
        })?;
    }
    Ok("(16,8), identity, 1000 random cases".into())
}

// ---------------------------------------------------------------------------
// 10. End-to-end reproducibility

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mitkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn manifest_hashes(stdout: &str) -> Vec<String> {
    stdout
        .lines()
        .filter_map(|l| l.split("sha256=").nth(1))
        .map(str::to_string)
        .collect()
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    let items: Vec<Instance> = (0..5000)
        .map(|i| single_image(&format!("c{i:05}"), 1 + i % 3))
        .collect();
    write_jsonl(&items, &corpus).map_err(|e| e.to_string())?;
    let cfg = dir.path().join("pipeline.toml");
    std::fs::write(&cfg, "global_seed = 2024\n[merge]\nk_min = 2\nk_max = 4\n")
        .map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let mut runs = Vec::new();
    for run in ["run1", "run2"] {
        let out = dir.path().join(run);
        let merged = out.join("merged.jsonl");
        let mut hashes = Vec::new();
        let c = s(&cfg);
        hashes.extend(manifest_hashes(&run_cli(&[
            "--config", &c, "build", "merge", "-i", &s(&corpus), "-o", &s(&merged),
        ])?));
        hashes.extend(manifest_hashes(&run_cli(&[
            "--config", &c, "stats", "-i", &s(&merged), "-o", &s(&out),
        ])?));
        hashes.extend(manifest_hashes(&run_cli(&[
            "--config", &c, "serialize", "-i", &s(&merged), "-o", &s(&out.join("prompts.jsonl")),
        ])?));
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&out).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            files.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).map_err(|e| e.to_string())?,
            );
        }
        runs.push((hashes, files));
    }
    ensure(runs[0].0.len() == 3, || format!("{} manifests reported", runs[0].0.len()))?;
    ensure(runs[0].0 == runs[1].0, || "manifest hashes differ".into())?;
    ensure(runs[0].1.keys().eq(runs[1].1.keys()), || "artifact sets differ".into())?;
    for (name, bytes) in &runs[0].1 {
        ensure(runs[1].1[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical over 5000 items", runs[0].1.len()))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "token budget exactness", limit: Duration::from_secs(1), run: budget_exactness },
        Criterion { id: 2, name: "statistics table consistency", limit: Duration::from_secs(5), run: table_consistency },
        Criterion { id: 3, name: "interleave round trip", limit: Duration::from_secs(5), run: round_trip },
        Criterion { id: 4, name: "merge conservation", limit: Duration::from_secs(10), run: merge_conservation },
        Criterion { id: 5, name: "mcq conversion and extraction", limit: Duration::from_secs(5), run: mcq_conversion_and_extraction },
        Criterion { id: 6, name: "random baseline", limit: Duration::from_secs(10), run: baseline },
        Criterion { id: 7, name: "merge-image geometry", limit: Duration::from_secs(10), run: geometry },
        Criterion { id: 8, name: "synthesis parser and retries", limit: Duration::from_secs(30), run: synth_parser },
        Criterion { id: 9, name: "frame sampling", limit: Duration::from_secs(1), run: frames },
        Criterion { id: 10, name: "end-to-end reproducibility", limit: Duration::from_secs(60), run: end_to_end },
    ];
    // Fuzzing deliberately feeds bad input; keep panic output readable.
    std::panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, limit {:?}", c.limit))
            }
        });
        match result {
            Ok(detail) => println!(
                "[PASS] criterion {}: {} ({detail}; {elapsed:.2?})",
                c.id, c.name
            ),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {}: {} ({why}; {elapsed:.2?})", c.id, c.name);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
