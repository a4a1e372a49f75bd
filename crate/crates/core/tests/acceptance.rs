//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dc2::backend::{
    cache_key, BackendError, CallCounter, ChatBackend, ChatRequest, ChatResponse, MockBackend, Recorder, SharedBackend,
};
use dc2::combine::{filter_objects, VisualMemory};
use dc2::conquer::ModelSettings;
use dc2::divide::{build_patch_tree, cluster_patches, DivideParams, PatchImage};
use dc2::eval::{
    cyclic_permutations, evaluate, load_dataset, mg, miou, ml, rotated_position, sample_accuracy, sweep_theta,
    uncertainty, BenchmarkSample, Category, Dc2Runner, EvalOptions, EvalReport, McPrompt, PlainRunner, Runner,
    RunnerError, RunnerReply,
};
use dc2::geometry::{iou, nms, split_region, Region, ScoredRegion};
use dc2::inference::{Pipeline, PipelineParams};
use dc2::prompts::PromptSet;
use dc2::raster::{crop, downsample_to_fit, load_image, Raster};
use dc2::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- criterion 1

fn random_box(rng: &mut ChaCha8Rng, side: u32) -> Region {
    let x = rng.gen_range(0..side);
    let y = rng.gen_range(0..side);
    let w = rng.gen_range(1..=side - x);
    let h = rng.gen_range(1..=side - y);
    Region::new(x, y, w, h).unwrap()
}

fn pixel_iou(a: &Region, b: &Region, side: u32) -> (u64, u64) {
    let (mut inter, mut union) = (0u64, 0u64);
    let inside = |r: &Region, x: u32, y: u32| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    for y in 0..side {
        for x in 0..side {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    (inter, union)
}

fn geometry_suite() -> Outcome {
    let start = Instant::now();
    for w in 2..=64u32 {
        for h in 2..=64u32 {
            let parent = Region::new(7, 11, w, h).unwrap();
            let quads = split_region(parent).map_err(|e| e.to_string())?;
            let area: u64 = quads.iter().map(Region::area).sum();
            check(area == parent.area(), || format!("{parent}: quadrant areas sum to {area}"))?;
            for y in parent.y..parent.y + h {
                for x in parent.x..parent.x + w {
                    let covering =
                        quads.iter().filter(|q| x >= q.x && x < q.x + q.w && y >= q.y && y < q.y + q.h).count();
                    check(covering == 1, || format!("{parent}: pixel ({x},{y}) covered {covering} times"))?;
                }
            }
        }
    }

    let mut r = rng(1);
    for _ in 0..200 {
        let (a, b) = (random_box(&mut r, 40), random_box(&mut r, 40));
        let (inter, union) = pixel_iou(&a, &b, 40);
        let expected = inter as f64 / union as f64;
        check(iou(&a, &b) == expected, || format!("iou({a},{b}) = {} but pixels give {expected}", iou(&a, &b)))?;
    }

    for case in 0..500u64 {
        let n = r.gen_range(1..=30);
        let thr = [0.3, 0.5, 0.7][case as usize % 3];
        let cands: Vec<ScoredRegion> =
            (0..n).map(|i| ScoredRegion::new(random_box(&mut r, 100), r.gen_range(0..5), i)).collect();
        let kept = nms(&cands, thr);
        check(nms(&kept, thr) == kept, || format!("case {case}: NMS not idempotent"))?;
        for (i, a) in kept.iter().enumerate() {
            check(cands.contains(a), || format!("case {case}: kept box not among candidates"))?;
            for b in &kept[i + 1..] {
                check(iou(&a.region, &b.region) < thr, || format!("case {case}: kept pair above threshold"))?;
            }
        }
        for c in cands.iter().filter(|c| !kept.contains(c)) {
            let explained = kept.iter().any(|k| k.priority_cmp(c).is_lt() && iou(&k.region, &c.region) >= thr);
            check(explained, || format!("case {case}: {c:?} dropped without a stronger overlap"))?;
        }
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("3969 splits, 200 IoU pairs, 500 NMS sets in {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

fn oracle_distance(u: &[f64], v: &[f64]) -> f64 {
    if u.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()) {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (nu * nv)).clamp(f64::EPSILON, 2.0)
}

/// Average linkage with Lance-Williams distance updates.
fn oracle_clusters(features: &[Vec<f64>], theta: f64) -> BTreeSet<Vec<usize>> {
    let mut clusters: Vec<(Vec<usize>, usize)> = (0..features.len()).map(|i| (vec![i], 1)).collect();
    let mut d: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            d.insert((i, j), oracle_distance(&features[i], &features[j]));
        }
    }
    // cluster ids are their smallest original member
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    loop {
        let ids: Vec<usize> = clusters.iter().map(|c| c.0[0]).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in ids.iter().enumerate() {
            for &b in &ids[x + 1..] {
                let dist = d[&key(a, b)];
                if best.map_or(true, |(bd, _, _)| dist < bd) {
                    best = Some((dist, a, b));
                }
            }
        }
        let Some((dist, a, b)) = best else { break };
        if dist > theta {
            break;
        }
        let ia = clusters.iter().position(|c| c.0[0] == a).unwrap();
        let ib = clusters.iter().position(|c| c.0[0] == b).unwrap();
        let (na, nb) = (clusters[ia].1 as f64, clusters[ib].1 as f64);
        for &k in ids.iter().filter(|&&k| k != a && k != b) {
            let updated = (na * d[&key(k, a)] + nb * d[&key(k, b)]) / (na + nb);
            d.insert(key(k, a), updated);
        }
        let (members, n) = clusters.remove(ib);
        clusters[ia].0.extend(members);
        clusters[ia].0.sort_unstable();
        clusters[ia].1 += n;
    }
    clusters.into_iter().map(|c| c.0).collect()
}

fn corpus() -> Vec<Vec<Vec<f64>>> {
    let mut r = rng(2);
    (0..100)
        .map(|case| {
            let dim = 3 + case % 6;
            let mut quad: Vec<Vec<f64>> =
                (0..4).map(|_| (0..dim).map(|_| r.gen_range(0..4) as f64 / 3.0).collect()).collect();
            // continuous cases, some with exact duplicates
            if case % 3 == 0 {
                quad = (0..4).map(|_| (0..dim).map(|_| r.gen::<f64>()).collect()).collect();
                if case % 2 == 0 {
                    quad[3] = quad[r.gen_range(0..3)].clone();
                }
            }
            quad
        })
        .collect()
}

fn random_image(r: &mut ChaCha8Rng) -> Raster {
    let base: Vec<[u8; 3]> = (0..3).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let noise: u8 = r.gen_range(1..60);
    let cells: Vec<[u8; 3]> = (0..64)
        .map(|_| {
            let b = base[r.gen_range(0..base.len())];
            b.map(|c| c.saturating_add(r.gen_range(0..noise)))
        })
        .collect();
    Raster::from_fn(512, 512, |x, y| image::Rgb(cells[(y / 64 * 8 + x / 64) as usize]))
}

fn clustering_suite() -> Outcome {
    let start = Instant::now();
    let corpus = corpus();
    let mut r = rng(3);
    for (c, quad) in corpus.iter().enumerate() {
        let zero = cluster_patches(quad, 0.0).map_err(|e| e.to_string())?;
        for cluster in &zero.clusters {
            check(cluster.iter().all(|&m| quad[m] == quad[cluster[0]]), || {
                format!("case {c}: θ=0 merged distinct features")
            })?;
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if quad[i] == quad[j] {
                    check(zero.clusters.iter().any(|cl| cl.contains(&i) && cl.contains(&j)), || {
                        format!("case {c}: identical features {i},{j} left apart at θ=0")
                    })?;
                }
            }
        }
        check(cluster_patches(quad, 2.0).unwrap().len() == 1, || format!("case {c}: θ=2 left several clusters"))?;
        for theta in [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0] {
            let got: BTreeSet<Vec<usize>> = cluster_patches(quad, theta).unwrap().clusters.into_iter().collect();
            let want = oracle_clusters(quad, theta);
            check(got == want, || format!("case {c} θ={theta}: {got:?} vs reference {want:?}"))?;
        }
    }
    for _ in 0..100 {
        let quad: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        check(cluster_patches(&quad, 2.0).unwrap().len() == 1, || "θ=2 left several clusters".into())?;
    }

    let images: Vec<Raster> = (0..20).map(|_| random_image(&mut r)).collect();
    let thetas = [0.0, 0.05, 0.1, 0.2, 0.3, 2.0];
    let counts: Vec<Vec<usize>> = images
        .par_iter()
        .map(|img| {
            thetas
                .iter()
                .map(|&theta| {
                    let params = DivideParams { patch_size: 64, theta, max_depth: 4 };
                    build_patch_tree(PatchImage::root(img.clone()).unwrap(), &params).unwrap().node_count()
                })
                .collect()
        })
        .collect();
    for (i, c) in counts.iter().enumerate() {
        check(c.windows(2).all(|w| w[1] <= w[0]), || format!("image {i}: node counts {c:?} over θ {thetas:?}"))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("100-case reference match, 20 images monotone, {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 3

const NAMES: [&str; 10] = ["car", "bus", "tree", "dog", "cat", "sign", "kite", "road", "sky", "fire hydrant"];

fn random_names(r: &mut ChaCha8Rng, pool: usize) -> BTreeSet<String> {
    NAMES[..pool].iter().filter(|_| r.gen_bool(0.4)).map(|s| s.to_string()).collect()
}

fn replay(seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let mut memory = VisualMemory::new("replay", 1024, 1024);
    for event in 0..200 {
        let names = random_names(&mut r, 5);
        let regions: Vec<Region> = (0..r.gen_range(1..=3))
            .map(|_| {
                let (w, h) = (64 * r.gen_range(1..=8), 64 * r.gen_range(1..=8));
                Region::new(64 * r.gen_range(0..=(1024 - w) / 64), 64 * r.gen_range(0..=(1024 - h) / 64), w, h).unwrap()
            })
            .collect();
        memory.store(&names, &regions, r.gen_range(0..5)).map_err(|e| e.to_string())?;
        let records = memory.records();
        for (i, a) in records.iter().enumerate() {
            for b in records[i + 1..].iter().filter(|b| b.name == a.name) {
                check(iou(&a.region, &b.region) < 0.5, || format!("event {event}: {} overlaps itself", a.name))?;
            }
        }
        check(memory.satisfies_nms(), || format!("event {event}: memory reports NMS violation"))?;
    }
    memory.to_json().map_err(|e| e.to_string())
}

fn memory_suite() -> Outcome {
    let mut r = rng(4);
    for case in 0..1000 {
        let (a, b) = (random_names(&mut r, 10), random_names(&mut r, 10));
        let mut expected = BTreeSet::new();
        for x in &a {
            if b.iter().any(|y| y == x) {
                expected.insert(x.clone());
            }
        }
        check(filter_objects(&a, &b) == expected, || format!("case {case}: filter differs from intersection"))?;
    }
    let first = replay(5)?;
    let second = replay(5)?;
    check(first == second, || "replays differ".into())?;
    Ok("1000 filter cases, 200-event replay, byte-identical rerun".into())
}

// ---------------------------------------------------------------- criterion 4

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn prompt_suite() -> Outcome {
    let p = PromptSet::default();
    check(p.leaf_prompt() == golden("leaf.txt"), || format!("leaf prompt {:?}", p.leaf_prompt()))?;

    let captions = vec!["A red car.".to_string(), "A tree".to_string()];
    let non_leaf = golden("non_leaf.txt").replace("{Text Descriptions of Image Patches}", "1. A red car.\n2. A tree");
    check(p.non_leaf_prompt(&captions) == non_leaf, || format!("non-leaf prompt {:?}", p.non_leaf_prompt(&captions)))?;

    let caption = "A dog sits under a tree.";
    let extraction = golden("extraction.txt").replace("{Text Description}", caption);
    let ours = format!("# System message\n{}\n{}", p.extraction_system, p.extraction_user_prompt(caption));
    check(ours == extraction, || format!("extraction prompt {ours:?}"))?;
    check(ours.contains(r#"Output: {"object_list": ["bus","car","truck","person"]}"#), || {
        "few-shot example output missing".into()
    })?;

    let question = "What is the color of the umbrella?";
    let inference = golden("inference.txt").replace("[question]", question);
    check(p.inference_prompt(question) == inference, || {
        format!("inference prompt {:?}", p.inference_prompt(question))
    })?;
    Ok("leaf, non-leaf, extraction and inference prompts match".into())
}

// ---------------------------------------------------------------- criterion 5

struct Scripted {
    replies: Vec<&'static str>,
    next: Mutex<usize>,
}

impl Runner for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }
    fn needs_image(&self) -> bool {
        false
    }
    fn answer(&self, _: &BenchmarkSample, _: Option<&Raster>, _: &McPrompt) -> Result<RunnerReply, RunnerError> {
        let mut i = self.next.lock().unwrap();
        *i += 1;
        Ok(RunnerReply { text: self.replies[*i - 1].to_string(), ..Default::default() })
    }
}

fn mc_sample(options: &[&str], answer: &str) -> BenchmarkSample {
    BenchmarkSample {
        id: "t".into(),
        image: "unused.png".into(),
        question: "Which one?".into(),
        options: options.iter().map(|s| s.to_string()).collect(),
        answer: answer.into(),
        category: Category::Attribute,
        target_objects: None,
        target_bbox: None,
    }
}

fn eval_math_suite() -> Outcome {
    for n in 2..=5usize {
        let options: Vec<usize> = (0..n).collect();
        let rotations = cyclic_permutations(&options).map_err(|e| e.to_string())?;
        check(rotations.len() == n, || format!("N={n}: {} rotations", rotations.len()))?;
        for gold in 0..n {
            let mut positions: Vec<usize> =
                rotations.iter().map(|r| r.iter().position(|&o| o == gold).unwrap()).collect();
            for (r, &p) in positions.iter().enumerate() {
                check(p == rotated_position(gold, r, n), || format!("N={n}: gold {gold} misplaced in rotation {r}"))?;
            }
            positions.sort_unstable();
            check(positions == (0..n).collect::<Vec<_>>(), || format!("N={n}: gold {gold} positions {positions:?}"))?;
        }
    }

    let colors = ["red", "green", "blue", "gray"];
    // gold "C" sits at C, D, A, B across the four rotations
    let transcripts: Vec<(BenchmarkSample, Vec<&'static str>, f64)> = vec![
        (mc_sample(&colors, "C"), vec!["C", "D", "A", "B"], 1.0),
        (mc_sample(&colors, "C"), vec!["C", "C", "C", "C"], 0.25),
        (mc_sample(&colors, "C"), vec!["The answer is (C).", "(D)", "A", "unclear"], 0.75),
        (mc_sample(&colors, "C"), vec!["blue", "blue", "blue", "blue"], 1.0),
        (mc_sample(&colors, "C"), vec!["unclear"; 4], 0.0),
        (mc_sample(&colors, "C"), vec!["a", "b", "c", "d"], 0.0),
        (mc_sample(&colors, "C"), vec!["(c)", "(d)", "(a)", "(b)"], 1.0),
        (mc_sample(&colors, "C"), vec!["A", "A", "A", "A"], 0.25),
        (mc_sample(&colors, "C"), vec!["red or blue", "D", "A", "B"], 0.75),
        (mc_sample(&["yes", "no"], "B"), vec!["B", "B"], 0.5),
        (mc_sample(&["x1", "y1", "z1"], "A"), vec!["A", "B", "A"], 2.0 / 3.0),
        (mc_sample(&["cat", "dog", "cow", "pig", "hen"], "E"), vec!["E", "It is a hen", "B", "Maybe C?", "E"], 0.8),
    ];
    for (i, (sample, replies, want)) in transcripts.into_iter().enumerate() {
        let runner = Scripted { replies, next: Mutex::new(0) };
        let got = sample_accuracy(&sample, None, &runner).accuracy;
        check(got == want, || format!("transcript {}: ACC {got}, expected {want}", i + 1))?;
    }

    check(mg(50.0, 30.0) == 20.0 && mg(30.0, 30.0) == 0.0 && mg(30.0, 50.0) == -20.0, || "mg".into())?;
    check(ml(40.0, 30.0) == 10.0 && ml(30.0, 40.0) == 0.0 && ml(30.0, 30.0) == 0.0, || "ml".into())?;

    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-12);
    check(close(uncertainty(&[0.0, 0.0, 0.0]), 0.0), || "uncertainty of certain tokens".into())?;
    check(close(uncertainty(&[0.5f64.ln()]), 0.5), || "uncertainty of ln 0.5".into())?;
    check(close(uncertainty(&[0.9f64.ln(), 0.9f64.ln()]), 0.1), || "uncertainty of two ln 0.9".into())?;
    check(uncertainty(&[]).is_none(), || "uncertainty of nothing".into())?;

    let mut r = rng(6);
    for case in 0..100 {
        let (a, b) = (random_box(&mut r, 40), random_box(&mut r, 40));
        let (inter, union) = pixel_iou(&a, &b, 40);
        let got = miou(&[a], &b);
        check((got - inter as f64 / union as f64).abs() <= 1e-9, || format!("mIoU case {case}: {got}"))?;
    }
    check(miou(&[], &Region::new(0, 0, 5, 5).unwrap()) == 0.0, || "mIoU without predictions".into())?;
    Ok("rotations N=2..5, 12 transcripts, closed forms, 100 mIoU pairs".into())
}

// ---------------------------------------------------------------- criterion 6

/// Records every (request key, reply) pair, for comparing runs.
struct Transcript {
    inner: SharedBackend,
    log: Mutex<Vec<(String, String)>>,
}

impl ChatBackend for Transcript {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.chat(request)?;
        self.log.lock().unwrap().push((cache_key(request), resp.text.clone()));
        Ok(resp)
    }
}

fn mock_pipeline(backend: SharedBackend, params: PipelineParams) -> Pipeline {
    Pipeline::new(backend, PromptSet::default(), ModelSettings::default(), params)
}

fn strip_timing(report: &EvalReport) -> String {
    let mut v = serde_json::to_value(report).unwrap();
    v["throughput_spm"] = serde_json::Value::Null;
    v["elapsed_secs"] = serde_json::Value::Null;
    format!("{v}\n{:?}", report.rows)
}

fn end_to_end_suite() -> Outcome {
    let start = Instant::now();
    let cases = synth::hr_suite(2024, 30);
    let mock = Arc::new(MockBackend::new(&synth::scenes(&cases)).map_err(|e| e.to_string())?);

    // the cue must be invisible after downsampling and visible in its leaf,
    // and no sibling patches may merge
    let params = PipelineParams::default();
    cases.par_iter().try_for_each(|case| -> Result<(), String> {
        let img = case.render();
        let target = &case.scene.objects[0];
        let small = downsample_to_fit(&img, params.divide.patch_size);
        check(mock.detect(&small).is_empty(), || format!("{}: objects visible at 336", case.sample.id))?;
        let cell = Region::new(target.region.x / 336 * 336, target.region.y / 336 * 336, 336, 336).unwrap();
        let seen = mock.detect(&crop(&img, &cell));
        check(seen.iter().any(|o| o.name == target.name), || {
            format!("{}: target invisible in its leaf", case.sample.id)
        })?;
        let tree = build_patch_tree(PatchImage::root(img).unwrap(), &params.divide).unwrap();
        check(tree.node_count() == 85, || format!("{}: {} nodes, expected 85", case.sample.id, tree.node_count()))
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = synth::write_suite(&cases, dir.path()).map_err(|e| e.to_string())?;
    let entries = load_dataset(&dataset).map_err(|e| e.to_string())?;
    check(load_image(&dir.path().join("images/hr-000.png")).is_ok(), || "suite images unreadable".into())?;
    let options = EvalOptions { concurrency: 8 };

    let mut runs = Vec::new();
    let mut transcripts = Vec::new();
    for _ in 0..3 {
        let backend = Arc::new(Transcript { inner: mock.clone(), log: Mutex::new(Vec::new()) });
        let runner = Dc2Runner::new(mock_pipeline(backend.clone(), params));
        runs.push(evaluate(&entries, &runner, options, serde_json::json!({})));
        let mut log = backend.log.lock().unwrap().clone();
        log.sort();
        transcripts.push(log);
    }
    let dc2 = &runs[0];
    let baseline =
        evaluate(&entries, &PlainRunner::baseline(mock_pipeline(mock.clone(), params)), options, serde_json::json!({}));

    let summary = format!(
        "DC2 ACC {:.3}, baseline ACC {:.3}, Recall@2 {:.3}, mIoU {:.3}",
        dc2.overall_acc,
        baseline.overall_acc,
        dc2.recall_at_2.unwrap_or(0.0),
        dc2.miou.unwrap_or(0.0)
    );
    check(dc2.failed == 0 && baseline.failed == 0, || format!("failed samples; {summary}"))?;
    check(dc2.overall_acc >= 0.90, || format!("DC2 ACC below 0.90; {summary}"))?;
    check(baseline.overall_acc <= 0.40, || format!("baseline ACC above 0.40; {summary}"))?;
    check(dc2.recall_at_2.unwrap_or(0.0) >= 0.90, || format!("Recall@2 below 0.90; {summary}"))?;
    check(dc2.miou.unwrap_or(0.0) >= 0.5, || format!("mIoU below 0.5; {summary}"))?;
    check(runs.iter().all(|r| strip_timing(r) == strip_timing(dc2)), || "reports differ across runs".into())?;
    check(transcripts.iter().all(|t| *t == transcripts[0]), || "backend transcripts differ across runs".into())?;
    Ok(format!("{summary}, 3 identical runs, {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 7

fn throughput_suite() -> Outcome {
    let start = Instant::now();
    let cases = synth::quadrant_suite(7, 8);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let entries =
        load_dataset(&synth::write_suite(&cases, dir.path()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let scenes = synth::scenes(&cases);
    let build = |theta: f64| -> (Box<dyn Runner>, Arc<CallCounter>) {
        let mock: SharedBackend = Arc::new(MockBackend::new(&scenes).unwrap().with_latency(Duration::from_millis(20)));
        let counter = Arc::new(CallCounter::new(mock));
        let mut params = PipelineParams::default();
        params.divide.theta = theta;
        let pipeline = mock_pipeline(counter.clone(), params).with_parallel(false);
        (Box::new(Dc2Runner::new(pipeline)), counter)
    };
    let points = sweep_theta(&entries, &[0.1, 0.2, 0.3], EvalOptions { concurrency: 1 }, &build);
    let table = points
        .iter()
        .map(|p| format!("θ={} {:.1}/min {} calls", p.theta, p.throughput, p.backend_calls))
        .collect::<Vec<_>>()
        .join("; ");
    check(points.windows(2).all(|w| w[1].throughput >= w[0].throughput), || format!("throughput decreased: {table}"))?;
    check(points.windows(2).all(|w| w[1].backend_calls <= w[0].backend_calls), || format!("calls increased: {table}"))?;
    within_budget(start, Duration::from_secs(120))?;
    Ok(table)
}

// ---------------------------------------------------------------- criterion 8

fn degradation_suite() -> Outcome {
    let cases = synth::quadrant_suite(11, 10);
    let mock: SharedBackend = Arc::new(MockBackend::new(&synth::scenes(&cases)).map_err(|e| e.to_string())?);
    let params = PipelineParams { alpha: 1.01, ..PipelineParams::default() };
    for case in &cases {
        let img = case.render();
        let prompt = McPrompt { question: case.sample.question.clone(), options: case.sample.options.clone() };

        let dc2_rec = Arc::new(Recorder::new(mock.clone()));
        let dc2 = Dc2Runner::new(mock_pipeline(dc2_rec.clone(), params));
        let reply = dc2.answer(&case.sample, Some(&img), &prompt)?;
        check(reply.hits.as_ref().is_some_and(Vec::is_empty), || format!("{}: hits above α", case.sample.id))?;

        let base_rec = Arc::new(Recorder::new(mock.clone()));
        PlainRunner::baseline(mock_pipeline(base_rec.clone(), params)).answer(&case.sample, Some(&img), &prompt)?;
        check(base_rec.requests().len() == 1, || "baseline made more than one call".into())?;

        let a = serde_json::to_vec(&dc2_rec.last().unwrap()).unwrap();
        let b = serde_json::to_vec(&base_rec.last().unwrap()).unwrap();
        check(a == b, || format!("{}: final request differs from baseline", case.sample.id))?;
    }
    Ok("10 fixtures byte-identical".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("geometry", geometry_suite),
        ("clustering", clustering_suite),
        ("filter/memory", memory_suite),
        ("prompt golden files", prompt_suite),
        ("evaluation math", eval_math_suite),
        ("mock end-to-end", end_to_end_suite),
        ("throughput directionality", throughput_suite),
        ("degradation", degradation_suite),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail})", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL ({reason})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
