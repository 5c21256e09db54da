//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Training criteria drive the
//! `ulsdram` binary exactly as a user would.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use uls_dram::autodiff::{check_op, GradCheckConfig, OpKind};
use uls_dram::crf::{brute_force_oracle, log_partition, path_score, viterbi_decode, TagSchema, TagSequence, O};
use uls_dram::data::{EncodedRecord, Image, Record, Span, Split, Vocabulary};
use uls_dram::metrics::{pair_accuracy, extract_pairs, PairSet};
use uls_dram::par::AttributeCatalog;
use uls_dram::pipeline::{loss_grad_check, prediction_budget, Model, ModelDims, ModelVariant};
use uls_dram::Tensor;

// 1. gradients
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOLERANCE: f64 = 1e-4;
const SHAPES_PER_OP: u64 = 50;
// 2. CRF oracle
const CRF_INSTANCES: u64 = 1000;
const CRF_MAX_LEN: usize = 5;
const CRF_MAX_LABELS: usize = 4;
const LOG_Z_TOLERANCE: f64 = 1e-8;
// 3. worked accuracy example, exact
const WORKED_EXAMPLE_ACCURACY: f64 = 0.5;
// 5. end-to-end learning
const E2E_SEED: u64 = 7;
const E2E_RECORDS: usize = 2000;
const E2E_MAX_EPOCHS: usize = 20;
const E2E_MIN_TAG_F1: f64 = 0.90;
const E2E_MIN_CLS_F1: f64 = 0.95;
const E2E_MAX_SECONDS: f64 = 600.0;
// 6. ablation trends
const TREND_SEEDS: [u64; 3] = [7, 8, 9];
const TREND_MIN_DELTA: f64 = 0.0;
// 7. policies
const POLICY_MIN_TAG_F1: f64 = 0.80;
// 9. threshold sweep
const SWEEP_GRID: [&str; 4] = ["0.3", "0.4", "0.5", "0.6"];

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: &'static str, passed: bool, detail: String) -> Outcome {
    println!("[{}] criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn runs_root() -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        fs::remove_dir_all(&root).unwrap();
    }
    fs::create_dir_all(&root).unwrap();
    root
}

fn ulsdram(args: &[&str], out: &Path) -> Result<(), String> {
    let output = Command::new(env!("CARGO_BIN_EXE_ulsdram"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if output.status.success() {
        Ok(())
    } else {
        Err(format!("ulsdram {} failed: {}", args.join(" "), String::from_utf8_lossy(&output.stderr).trim()))
    }
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    Ok(lines
        .map(|l| header.iter().zip(l.split(',')).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect())
}

fn number(row: &BTreeMap<String, String>, column: &str) -> f64 {
    row.get(column).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn criterion_gradients() -> Outcome {
    let config = GradCheckConfig { step: GRAD_STEP, tolerance: GRAD_REL_TOLERANCE, max_entries_per_param: None };
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for kind in OpKind::ALL {
        for seed in 0..SHAPES_PER_OP {
            match check_op(kind, seed, config) {
                Ok(case) => {
                    worst = worst.max(case.report.max_rel_error());
                    if !case.report.passed() {
                        failures.push(format!("{kind:?}/{seed}"));
                    }
                }
                Err(e) => failures.push(format!("{kind:?}/{seed}: {e}")),
            }
        }
    }
    let (model, batch) = toy_batch();
    let loss = loss_grad_check(&model, &batch, 1.0, config);
    let loss_worst = loss.as_ref().map_or(f64::INFINITY, |r| r.max_rel_error());
    let loss_ok = loss.as_ref().is_ok_and(|r| r.passed());
    let passed = failures.is_empty() && loss_ok;
    verdict(
        "1",
        passed,
        format!(
            "{} ops x {SHAPES_PER_OP} shapes, worst rel err {worst:.2e}; full loss on 4-token 2-attribute toy worst {loss_worst:.2e} (tol {GRAD_REL_TOLERANCE:e}){}",
            OpKind::ALL.len(),
            if failures.is_empty() { String::new() } else { format!("; failing {failures:?}") }
        ),
    )
}

fn toy_batch() -> (Model, Vec<EncodedRecord>) {
    let catalog =
        AttributeCatalog::new(vec!["Color".into(), "Type".into()], vec![vec!["color".into()], vec!["type".into()]]).unwrap();
    let make = |id: &str, tokens: [&str; 4], spans: Vec<Span>, shade: f32| {
        let mut attributes: Vec<String> = spans.iter().map(|s| s.attribute.clone()).collect();
        attributes.sort();
        attributes.dedup();
        Record {
            id: id.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            image: Image { height: 28, width: 28, pixels: (0..28 * 28 * 3).map(|i| ((i % 5) as f32 * 0.2 + shade).fract()).collect() },
            spans,
            split: Split::Train,
            attributes,
            noise_seed: None,
        }
    };
    let span = |a: &str, s, e| Span { attribute: a.into(), start: s, end: e };
    let records = [
        make("a", ["blue", "jeans", "in", "stock"], vec![span("Color", 0, 0), span("Type", 1, 1)], 0.1),
        make("b", ["a", "navy", "blue", "coat"], vec![span("Color", 1, 2), span("Type", 3, 3)], 0.6),
    ];
    let vocab = Vocabulary::build(records.iter().flat_map(|r| r.tokens.iter().map(String::as_str)).chain(["color", "type"]));
    let dims = ModelDims { dim: 4, layers: 1, heads: 2, hidden: 3, conv_channels: (2, 2), attention_dim: 3, ..ModelDims::default() };
    let model = Model::new(ModelVariant::preset("full").unwrap(), dims, catalog, vocab, 0.5, 1).unwrap();
    let batch = records.iter().map(|r| model.encode_record(r).unwrap()).collect();
    (model, batch)
}

fn criterion_crf_oracle() -> Outcome {
    use rand::{Rng, SeedableRng};
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for seed in 0..CRF_INSTANCES {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(1..=CRF_MAX_LEN);
        let labels = rng.gen_range(1..=CRF_MAX_LABELS);
        let mut draw = |r: usize, c: usize| Tensor::from_rows(r, c, (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let e = draw(len, labels);
        let t = draw(labels + 2, labels + 2);
        let oracle = brute_force_oracle(&e, &t).unwrap();
        let gap = (log_partition(&e, &t).unwrap() - oracle.log_z).abs();
        worst = worst.max(gap);
        let best = viterbi_decode(&e, &t).unwrap();
        let achieved = path_score(&e, &t, &best.labels).unwrap();
        if gap >= LOG_Z_TOLERANCE || best.score != oracle.best_score || achieved != oracle.best_score {
            bad.push(seed);
        }
    }
    verdict(
        "2",
        bad.is_empty(),
        format!("{CRF_INSTANCES} instances S<={CRF_MAX_LEN} L<={CRF_MAX_LABELS}: worst |logZ gap| {worst:.2e} (tol {LOG_Z_TOLERANCE:e}), Viterbi exact mismatches {}", bad.len()),
    )
}

fn criterion_worked_example() -> Outcome {
    const TOKENS: [&str; 5] = ["blue", "jeans", "match", "blue", "spirits"];
    let schema = TagSchema::Joint { attributes: 2 };
    let pairs = |tags: &str| -> PairSet {
        let labels = tags
            .split_whitespace()
            .map(|t| match t {
                "O" => O,
                "B-Color" => schema.begin(0),
                "I-Color" => schema.inside(0),
                "B-Type" => schema.begin(1),
                _ => schema.inside(1),
            })
            .collect();
        extract_pairs(&[TagSequence { attribute: None, labels, score: 0.0 }], schema, &TOKENS).pairs
    };
    let gold: PairSet = [(0, ["blue".to_string()].into_iter().collect())].into_iter().collect();
    let correct = |tags: &str| pair_accuracy(&[pairs(tags)], &[gold.clone()]).unwrap().accuracy == 1.0;
    let cases = [
        ("(1)", "B-Color O O B-Color O", true),
        ("(1)", "B-Color O O O O", true),
        ("(2)", "B-Color O O O B-Color", false),
        ("(3)", "O O O O O", false),
        ("(3)", "O O O B-Color I-Color", false),
        ("(4)", "B-Color B-Type O B-Color O", true),
    ];
    let mismatched: Vec<&str> = cases.iter().filter(|(_, t, want)| correct(t) != *want).map(|(n, _, _)| *n).collect();
    let four = ["B-Color O O B-Color O", "B-Color O O O B-Color", "O O O O O", "B-Color B-Type O B-Color O"];
    let preds: Vec<PairSet> = four.iter().map(|t| pairs(t)).collect();
    let acc = pair_accuracy(&preds, &vec![gold; 4]).unwrap();
    let passed = mismatched.is_empty() && acc.accuracy == WORKED_EXAMPLE_ACCURACY && (acc.correct, acc.total) == (2, 4);
    verdict(
        "3",
        passed,
        format!("six tag strings judged as annotated (mismatches {mismatched:?}); accuracy over (1)-(4) = {}/{} = {}", acc.correct, acc.total, acc.accuracy),
    )
}

fn criterion_budget() -> Outcome {
    let cases = [((26, 10, 2), (530, 86)), ((2000, 20, 3), (80020, 2180)), ((1, 1, 1), (3, 4))];
    let mut got = Vec::new();
    let mut passed = true;
    for ((c, s, m), want) in cases {
        let b = prediction_budget(c, s, m).unwrap();
        passed &= (b.t_o, b.t_m) == want;
        got.push(format!("({c},{s},{m})->({},{})", b.t_o, b.t_m));
    }
    verdict("4", passed, got.join(" "))
}

fn write_config(path: &Path, body: &str) -> String {
    fs::write(path, body).unwrap();
    path.to_str().unwrap().to_string()
}

/// Runs the three policies at the reference seed; supplies criteria 5, 7 and 9.
fn policy_run(root: &Path) -> Result<PathBuf, String> {
    let out = root.join("policies");
    let cfg = write_config(
        &root.join("policies.toml"),
        &format!(
            "seed = {E2E_SEED}\n[corpus]\nrecords = {E2E_RECORDS}\n[train]\nepochs = {E2E_MAX_EPOCHS}\nlearning_rates = \"desk\"\n\
             [ablation]\nvariants = [\"tir+par-proto\", \"tir+par-dynet\", \"tir+par-bert\"]\n"
        ),
    );
    ulsdram(&["ablate", "--config", &cfg], &out)?;
    Ok(out)
}

fn criterion_end_to_end(policies: &Result<PathBuf, String>) -> Outcome {
    let result = (|| -> Result<(f64, f64, f64), String> {
        let dir = policies.as_ref().map_err(Clone::clone)?;
        let rows = read_csv(&dir.join("ablation.csv"))?;
        let row = rows.iter().find(|r| r["variant"] == "tir+par-proto").ok_or("no prototype row")?;
        let timings = read_csv(&dir.join("timings.csv"))?;
        let t = timings.iter().find(|r| r["cell"] == format!("seed-{E2E_SEED}/tir+par-proto")).ok_or("no timing")?;
        Ok((number(row, "tag_f1"), number(row, "cls_f1"), number(t, "seconds")))
    })();
    match result {
        Ok((tag, cls, secs)) => verdict(
            "5",
            tag >= E2E_MIN_TAG_F1 && cls >= E2E_MIN_CLS_F1 && secs <= E2E_MAX_SECONDS,
            format!(
                "full variant, seed {E2E_SEED}, {E2E_RECORDS} records, {E2E_MAX_EPOCHS} epochs: test TAG-F1 {tag:.4} (>= {E2E_MIN_TAG_F1}), CLS-F1 {cls:.4} (>= {E2E_MIN_CLS_F1}), {secs:.0}s (<= {E2E_MAX_SECONDS}s)"
            ),
        ),
        Err(e) => verdict("5", false, e),
    }
}

fn criterion_trends(root: &Path) -> Outcome {
    let result = (|| -> Result<(bool, String), String> {
        let out = root.join("trends");
        let seeds: Vec<String> = TREND_SEEDS.iter().map(u64::to_string).collect();
        let cfg = write_config(
            &root.join("trends.toml"),
            &format!(
                "seed = {E2E_SEED}\n[corpus]\nrecords = {E2E_RECORDS}\n[train]\nepochs = {E2E_MAX_EPOCHS}\n\
                 [ablation]\nvariants = [\"vanilla\", \"tir\", \"tir+par-proto\", \"fixed\"]\nseeds = [{}]\n",
                seeds.join(", ")
            ),
        );
        ulsdram(&["ablate", "--config", &cfg], &out)?;
        let summary = read_csv(&out.join("ablation_summary.csv"))?;
        let get = |variant: &str, column: &str| {
            summary.iter().find(|r| r["variant"] == variant).map_or(f64::NAN, |r| number(r, column))
        };
        let par = get("tir+par-proto", "precision") - get("tir", "precision");
        let tir = get("tir", "tag_f1") - get("vanilla", "tag_f1");
        let uls = get("tir+par-proto", "tag_f1") - get("fixed", "tag_f1");
        let passed = par > TREND_MIN_DELTA && tir > TREND_MIN_DELTA && uls > TREND_MIN_DELTA;
        Ok((
            passed,
            format!(
                "means over seeds {TREND_SEEDS:?}: (a) PAR precision delta {par:+.4}, (b) TIR TAG-F1 delta {tir:+.4}, (c) ULS-Fixed TAG-F1 delta {uls:+.4} (each must exceed {TREND_MIN_DELTA})"
            ),
        ))
    })();
    match result {
        Ok((passed, detail)) => verdict("6", passed, detail),
        Err(e) => verdict("6", false, e),
    }
}

fn criterion_policies(policies: &Result<PathBuf, String>) -> Outcome {
    let result = (|| -> Result<Vec<(String, f64)>, String> {
        let dir = policies.as_ref().map_err(Clone::clone)?;
        Ok(read_csv(&dir.join("ablation.csv"))?.iter().map(|r| (r["variant"].clone(), number(r, "tag_f1"))).collect())
    })();
    match result {
        Ok(rows) => {
            let complete = rows.len() == 3;
            let passed = complete && rows.iter().all(|(_, f)| *f >= POLICY_MIN_TAG_F1);
            let listed: Vec<String> = rows.iter().map(|(v, f)| format!("{v} {f:.4}")).collect();
            verdict("7", passed, format!("TAG-F1 per policy: {} (each >= {POLICY_MIN_TAG_F1})", listed.join(", ")))
        }
        Err(e) => verdict("7", false, e),
    }
}

fn criterion_determinism(root: &Path) -> Outcome {
    let result = (|| -> Result<(Vec<String>, f64), String> {
        let cfg = write_config(
            &root.join("determinism.toml"),
            "seed = 11\n[corpus]\nrecords = 300\n[dims]\ndim = 24\nhidden = 24\nattention_dim = 24\nlayers = 1\nheads = 2\n\
             conv_channels = [4, 8]\n[train]\nepochs = 12\nbatch_size = 4\nprecision = \"double\"\n",
        );
        let mut differing = Vec::new();
        let (a, b) = (root.join("det-a"), root.join("det-b"));
        for dir in [&a, &b] {
            ulsdram(&["train", "--config", &cfg], dir)?;
            ulsdram(&["eval", "--config", &cfg], dir)?;
        }
        for file in ["checkpoint.bin", "epochs.csv", "report.json", "report.csv", "manifest.json"] {
            let x = fs::read(a.join(file)).map_err(|e| e.to_string())?;
            let y = fs::read(b.join(file)).map_err(|e| e.to_string())?;
            if x != y {
                differing.push(file.to_string());
            }
        }
        let report = read_csv(&a.join("report.csv"))?;
        Ok((differing, report.first().map_or(f64::NAN, |r| number(r, "tag_f1"))))
    })();
    match result {
        Ok((differing, tag_f1)) => verdict(
            "8",
            differing.is_empty(),
            format!("two train+eval runs with one (config hash, seed), test TAG-F1 {tag_f1:.4}: differing artifacts {differing:?}"),
        ),
        Err(e) => verdict("8", false, e),
    }
}

fn criterion_sweep(root: &Path, policies: &Result<PathBuf, String>) -> Outcome {
    let result = (|| -> Result<(bool, String), String> {
        let dir = policies.as_ref().map_err(Clone::clone)?;
        let checkpoint = dir.join(format!("seed-{E2E_SEED}/tir+par-proto/checkpoint.bin"));
        let cfg = write_config(&root.join("sweep.toml"), &format!("seed = {E2E_SEED}\n[corpus]\nrecords = {E2E_RECORDS}\n"));
        let out = root.join("sweep");
        let grid = SWEEP_GRID.join(",");
        ulsdram(&["sweep-thr", "--config", &cfg, "--checkpoint", checkpoint.to_str().unwrap(), "--thr-grid", &grid], &out)?;
        let table = read_csv(&out.join("sweep.csv"))?;
        let thresholds: Vec<&str> = table.iter().map(|r| r["threshold"].as_str()).collect();
        let complete = thresholds == SWEEP_GRID && table.iter().all(|r| number(r, "tag_f1").is_finite());
        let mut sizes: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
        for r in read_csv(&out.join("sweep_selected.csv"))? {
            let size = r["selected_count"].parse::<usize>().map_err(|e| e.to_string())?;
            sizes.entry(r["id"].clone()).or_default().push((number(&r, "threshold"), size));
        }
        let violations = sizes
            .values()
            .filter(|v| {
                let mut v = (*v).clone();
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                v.len() != SWEEP_GRID.len() || v.windows(2).any(|w| w[1].1 > w[0].1)
            })
            .count();
        Ok((
            complete && violations == 0 && !sizes.is_empty(),
            format!("thresholds {thresholds:?} all present: {complete}; {} records, monotonicity violations {violations}", sizes.len()),
        ))
    })();
    match result {
        Ok((passed, detail)) => verdict("9", passed, detail),
        Err(e) => verdict("9", false, e),
    }
}

fn main() {
    let started = Instant::now();
    let root = runs_root();
    let mut outcomes = vec![criterion_gradients(), criterion_crf_oracle(), criterion_worked_example(), criterion_budget()];
    let policies = policy_run(&root);
    outcomes.push(criterion_end_to_end(&policies));
    outcomes.push(criterion_trends(&root));
    outcomes.push(criterion_policies(&policies));
    outcomes.push(criterion_determinism(&root));
    outcomes.push(criterion_sweep(&root, &policies));
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s; artifacts under {}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed().as_secs_f64(),
        root.display()
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("criterion {} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
