//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Each check is measured against an independent oracle.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kvqa_core::clustering::{kmeans_points, kmeans_points_traced, DemoSampler};
use kvqa_core::evaluation::{fleiss_kappa, vqa_soft_accuracy, EvalReport};
use kvqa_core::prompting::{manual_demonstrations, render_kgen_prompt, render_qa_prompt, QA_INSTRUCTION};
use kvqa_core::qa::normalize_answer;
use kvqa_core::KMeansParams;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{build, kvqa, Fixture};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Mean over every leave-one-out subset of min(1, matches / 3). Sums the
/// integer numerators and divides once.
fn soft_accuracy_oracle(pred: &str, truth: &[String]) -> f64 {
    let n = truth.len();
    if n == 1 {
        let m = (truth[0] == pred) as u64;
        return m.min(3) as f64 / 3.0;
    }
    let mut numerator = 0u64;
    for left_out in 0..n {
        let matches = truth
            .iter()
            .enumerate()
            .filter(|&(j, t)| j != left_out && t == pred)
            .count() as u64;
        numerator += matches.min(3);
    }
    numerator as f64 / (3 * n) as f64
}

fn soft_accuracy() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vocab = ["dog", "cat", "bear", "red", "2", "yes"];
    for case in 0..1000 {
        let n = if case % 4 == 0 { rng.gen_range(1..=12) } else { 10 };
        let truth: Vec<String> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
        let pred = vocab[rng.gen_range(0..vocab.len())];
        let got = vqa_soft_accuracy(pred, &truth).map_err(|e| e.to_string())?;
        let want = soft_accuracy_oracle(pred, &truth);
        ensure(got == want, || format!("case {case}: {got} != {want} for {pred:?} in {truth:?}"))?;
    }
    let three: Vec<String> = ["a", "a", "a"].iter().chain(&["b"; 7]).map(|s| s.to_string()).collect();
    let one: Vec<String> = ["a"].iter().chain(&["b"; 9]).map(|s| s.to_string()).collect();
    let a3 = vqa_soft_accuracy("a", &three).unwrap();
    let a1 = vqa_soft_accuracy("a", &one).unwrap();
    ensure(a3 == 0.9, || format!("3-of-10 gave {a3}"))?;
    ensure(a1 == 0.3, || format!("1-of-10 gave {a1}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 cases exact, 0.9 / 0.3, {elapsed:.2?}"))
}

fn prompt_golden() -> Result<String, String> {
    let golden = include_str!("golden/kgen_manual_prompt.txt");
    let prompt = render_kgen_prompt(
        manual_demonstrations(),
        "a black bear walking through a grassy field. a bear standing in the grass near trees.",
        "Which national park in California is famous for this animal?",
    )
    .map_err(|e| e.to_string())?;
    ensure(prompt.text == golden, || "initial-generation prompt differs from golden file".into())?;
    ensure(prompt.text.contains("Monsanto is a multinational agrochemical"), || "spot text missing".into())?;
    let qa = render_qa_prompt::<&str>(&[], "a dog on a couch.", "What breed is this?", QA_INSTRUCTION)
        .map_err(|e| e.to_string())?;
    ensure(!qa.text.contains("Knowledge:"), || "empty-knowledge QA prompt has a Knowledge line".into())?;
    ensure(
        QA_INSTRUCTION == "Generate answers with as fewer words as possible.",
        || format!("instruction is {QA_INSTRUCTION:?}"),
    )?;
    Ok(format!("{} bytes byte-equal", golden.len()))
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans() -> Result<String, String> {
    let points: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
    let params = KMeansParams { k: 2, seed: 3, restarts: 4, max_iters: 100 };
    let model = kmeans_points(&points, &params).map_err(|e| e.to_string())?;
    let a = &model.assignments;
    ensure(a[0] == a[1] && a[2] == a[3] && a[0] != a[2], || format!("partition {a:?}"))?;
    ensure(model.inertia == 1.0, || format!("inertia {}", model.inertia))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect();
    let params = KMeansParams { k: 8, seed: 9, restarts: 5, max_iters: 300 };
    let mut trace: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let model = kmeans_points_traced(&cloud, &params, &mut |r, _, inertia| trace.entry(r).or_default().push(inertia))
        .map_err(|e| e.to_string())?;
    for (restart, series) in &trace {
        for w in series.windows(2) {
            ensure(w[1] <= w[0], || format!("restart {restart}: inertia rose {} -> {}", w[0], w[1]))?;
        }
    }
    // fixed point: every point is nearest its own centroid and each centroid
    // is the mean of its members
    for (i, p) in cloud.iter().enumerate() {
        let own = squared(p, &model.centroids[model.assignments[i]]);
        for c in &model.centroids {
            ensure(own <= squared(p, c), || format!("point {i} is closer to another centroid"))?;
        }
    }
    for (c, members) in model.members().iter().enumerate() {
        for (d, &coord) in model.centroids[c].iter().enumerate() {
            let mean = members.iter().map(|&i| cloud[i][d]).sum::<f64>() / members.len() as f64;
            ensure((mean - coord).abs() < 1e-9, || format!("centroid {c} is not its mean"))?;
        }
    }
    let again = kmeans_points(&cloud, &params).map_err(|e| e.to_string())?;
    let bits = |m: &kvqa_core::ClusterModel| -> Vec<u64> {
        m.centroids.iter().flatten().map(|x| x.to_bits()).chain([m.inertia.to_bits()]).collect()
    };
    ensure(again.assignments == model.assignments && bits(&again) == bits(&model), || "reruns differ".into())?;
    Ok(format!("toy inertia 1.0; {} traced restarts monotone; reruns bit-identical", trace.len()))
}

fn sampling() -> Result<String, String> {
    let sizes = [3usize, 5, 8, 4, 10, 6, 7, 9];
    let mut points = Vec::new();
    for (c, &size) in sizes.iter().enumerate() {
        for m in 0..size {
            points.push(vec![100.0 * c as f64 + m as f64 * 0.01, (c * c) as f64]);
        }
    }
    let model = kmeans_points(&points, &KMeansParams { k: 8, seed: 1, restarts: 10, max_iters: 300 })
        .map_err(|e| e.to_string())?;
    let members = model.members();
    ensure(members.iter().all(|m| !m.is_empty()), || "empty cluster in fixture".into())?;
    let sampler = DemoSampler::new(&model, &vec![true; points.len()]).map_err(|e| e.to_string())?;
    let target = 4;
    let own = model.assignments[target];
    let draws = 10_000u64;
    let mut counts = vec![0u64; points.len()];
    for d in 0..draws {
        let picks = sampler.draw(target, 77, 3, d).map_err(|e| e.to_string())?;
        ensure(picks.len() == 7, || format!("draw {d} returned {} demos", picks.len()))?;
        let clusters: BTreeSet<usize> = picks.iter().map(|&i| model.assignments[i]).collect();
        ensure(clusters.len() == 7 && !clusters.contains(&own), || format!("draw {d} clusters {clusters:?}"))?;
        for i in picks {
            counts[i] += 1;
        }
    }
    let mut worst = 0.0f64;
    for (c, group) in members.iter().enumerate() {
        if c == own {
            ensure(group.iter().all(|&i| counts[i] == 0), || "target cluster was sampled".into())?;
            continue;
        }
        let p = 1.0 / group.len() as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &i in group {
            let z = (counts[i] as f64 - draws as f64 * p).abs() / sigma;
            worst = worst.max(z);
            ensure(z <= 5.0, || format!("member {i} of cluster {c}: {} draws, z = {z:.2}", counts[i]))?;
        }
    }
    Ok(format!("10000 draws, max |z| = {worst:.2}"))
}

fn end_to_end() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = Fixture { instances: 50, t_statements: 10, flips: vec![], grid: vec![5] };
    let ws = build(dir.path(), &fixture);
    let start = Instant::now();
    let predictions = ws.work_dir.join("predictions_n5.jsonl");
    let steps: [&[&str]; 6] = [
        &["ingest"],
        &["gen-initial"],
        &["cluster"],
        &["diversify"],
        &["answer"],
        &["evaluate", "--predictions", predictions.to_str().unwrap()],
    ];
    let files = ["knowledge.jsonl", "predictions_n5.jsonl", "report_n5.json"];
    let run_all = || -> Result<(usize, Vec<Vec<u8>>), String> {
        let mut calls = 0;
        for args in steps {
            calls += kvqa(&ws, args).map_err(|e| format!("{args:?}: {e}"))?.backend_calls;
        }
        let bytes = files
            .iter()
            .map(|f| fs::read(ws.work_dir.join(f)).map_err(|e| format!("{f}: {e}")))
            .collect::<Result<_, _>>()?;
        Ok((calls, bytes))
    };
    let (first_calls, first) = run_all()?;
    ensure(first_calls > 0, || "first run made no backend calls".into())?;

    // second run: outputs removed, transcript emptied, only the caches remain
    for f in files {
        fs::remove_file(ws.work_dir.join(f)).map_err(|e| e.to_string())?;
    }
    fs::write(&ws.transcript, "").map_err(|e| e.to_string())?;
    let (second_calls, second) = run_all()?;
    ensure(second_calls == 0, || format!("second run made {second_calls} backend calls"))?;
    for (f, (a, b)) in files.iter().zip(first.iter().zip(&second)) {
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{first_calls} calls then 0; 3 files byte-identical; {elapsed:.2?}"))
}

fn flips() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rigged = vec![2u64, 9, 13, 22, 31, 40, 47];
    let fixture = Fixture { instances: 50, t_statements: 10, flips: rigged.clone(), grid: vec![0, 5] };
    let ws = build(dir.path(), &fixture);
    for args in [&["gen-initial"][..], &["cluster"], &["diversify"]] {
        kvqa(&ws, args).map_err(|e| e.to_string())?;
    }
    for n in ["0", "5"] {
        kvqa(&ws, &["answer", "--num-knowledge", n]).map_err(|e| e.to_string())?;
        let preds = ws.work_dir.join(format!("predictions_n{n}.jsonl"));
        kvqa(&ws, &["evaluate", "--predictions", preds.to_str().unwrap()]).map_err(|e| e.to_string())?;
    }
    let a = ws.work_dir.join("report_n0.json");
    let b = ws.work_dir.join("report_n5.json");
    kvqa(&ws, &["flips", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--n", "40"])
        .map_err(|e| e.to_string())?;
    let list: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.work_dir.join("flips.json")).unwrap()).unwrap();
    let got: Vec<u64> = serde_json::from_value(list["question_ids"].clone()).unwrap();
    ensure(got == rigged, || format!("flips {got:?}, rigged {rigged:?}"))?;
    Ok(format!("{} of 50 recovered exactly", got.len()))
}

/// Textbook Fleiss kappa from expanded per-rater labels and ordered pairs.
fn kappa_oracle(table: &[Vec<u64>]) -> f64 {
    let categories = table[0].len();
    let mut pair_agree = 0.0;
    let mut label_totals = vec![0u64; categories];
    let mut all_labels = 0u64;
    for row in table {
        let labels: Vec<usize> = row.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k as usize)).collect();
        let n = labels.len();
        let mut agree = 0u64;
        for a in 0..n {
            for b in 0..n {
                if a != b && labels[a] == labels[b] {
                    agree += 1;
                }
            }
        }
        pair_agree += agree as f64 / (n * (n - 1)) as f64;
        for l in labels {
            label_totals[l] += 1;
            all_labels += 1;
        }
    }
    let p_bar = pair_agree / table.len() as f64;
    let p_e: f64 = label_totals.iter().map(|&t| (t as f64 / all_labels as f64).powi(2)).sum();
    (p_bar - p_e) / (1.0 - p_e)
}

fn kappa() -> Result<String, String> {
    // raters' binary labels per item: (1,1) (0,0) (1,0) (1,1)
    let worked = vec![vec![0, 2], vec![2, 0], vec![1, 1], vec![0, 2]];
    let k = fleiss_kappa(&worked, 2).map_err(|e| e.to_string())?;
    ensure((k - 7.0 / 15.0).abs() <= 1e-12, || format!("worked example gave {k}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut compared = 0;
    while compared < 500 {
        let items = rng.gen_range(2..=25);
        let categories = rng.gen_range(2..=4);
        let raters = rng.gen_range(2..=6u64);
        let table: Vec<Vec<u64>> = (0..items)
            .map(|_| {
                let mut row = vec![0u64; categories];
                for _ in 0..raters {
                    row[rng.gen_range(0..categories)] += 1;
                }
                row
            })
            .collect();
        if table.iter().flat_map(|r| r.iter().enumerate()).filter(|(_, &c)| c > 0).map(|(j, _)| j).collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        let got = fleiss_kappa(&table, raters).map_err(|e| e.to_string())?;
        let want = kappa_oracle(&table);
        ensure((got - want).abs() <= 1e-12, || format!("table {compared}: {got} vs {want}"))?;
        compared += 1;
    }
    let unanimous = vec![vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3], vec![3, 0, 0]];
    let u = fleiss_kappa(&unanimous, 3).map_err(|e| e.to_string())?;
    ensure(u == 1.0, || format!("unanimous gave {u}"))?;
    Ok(format!("7/15 within 1e-12; {compared} random tables match; unanimous 1.0"))
}

fn normalization() -> Result<String, String> {
    ensure(normalize_answer("A Dog.") == "dog", || format!("{:?}", normalize_answer("A Dog.")))?;
    ensure(normalize_answer("two") == "2", || format!("{:?}", normalize_answer("two")))?;
    let pieces = ["a", "an", "the", "A", "The", "two", "Ten", "1,000", "dog", ".", ",", " ", "  ", "x.", "3", "Zero", "..."];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let len = rng.gen_range(0..8);
        let s: String = (0..len)
            .map(|_| {
                let p = *pieces.choose(&mut rng).unwrap();
                if rng.gen_bool(0.5) { format!("{p} ") } else { p.to_string() }
            })
            .collect();
        let once = normalize_answer(&s);
        let twice = normalize_answer(&once);
        ensure(once == twice, || format!("{s:?} -> {once:?} -> {twice:?}"))?;
    }
    Ok("examples hold; idempotent on 1000 strings".into())
}

fn sweep() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = Fixture { instances: 16, t_statements: 20, flips: vec![], grid: vec![0, 5, 10, 20] };
    let ws = build(dir.path(), &fixture);
    for args in [&["gen-initial"][..], &["cluster"], &["diversify"]] {
        kvqa(&ws, args).map_err(|e| e.to_string())?;
    }
    let outcome = kvqa(&ws, &["sweep-knowledge"]).map_err(|e| e.to_string())?;
    let mut accuracies = Vec::new();
    for n in [0, 5, 10, 20] {
        let path = ws.work_dir.join(format!("report_n{n}.json"));
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| format!("{n}: {e}"))?)
            .map_err(|e| e.to_string())?;
        ensure(report.num_questions == 16, || format!("N={n} report covers {}", report.num_questions))?;
        accuracies.push(report.mean_soft_accuracy);
    }
    let summary = outcome.summary.as_array().map(Vec::len).unwrap_or(0);
    ensure(summary == 4, || format!("sweep summary has {summary} entries"))?;
    Ok(format!("reports for N = 0, 5, 10, 20 (mean accuracy {accuracies:.3?})"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 9] = [
        ("soft-accuracy oracle", soft_accuracy),
        ("prompt golden files", prompt_golden),
        ("k-means", kmeans),
        ("demonstration sampling", sampling),
        ("end-to-end determinism", end_to_end),
        ("flip-case selection", flips),
        ("fleiss kappa", kappa),
        ("normalization", normalization),
        ("knowledge-count sweep", sweep),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
