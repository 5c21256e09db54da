use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use uls_dram::data::{generate_corpus, read_jsonl, write_jsonl, Corpus, EncodedRecord, ImageEncoding, Split};
use uls_dram::metrics::{MetricsReport, Provenance};
use uls_dram::pipeline::{
    evaluate, fit, load_checkpoint, save_checkpoint, training_vocabulary, EpochLog, Model, ModelVariant, TrainState,
};
use uls_dram::Tensor;

use crate::config::RunConfig;
use crate::failure::Failure;

const CHECKPOINT: &str = "checkpoint.bin";

/// Writes through a sibling temporary file so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn parse_split(name: &str) -> Result<Split, Failure> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(Failure::Config(format!("unknown split {name:?}; expected train, valid or test"))),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, Failure> {
    let spec = &cfg.corpus.spec;
    match &cfg.corpus.path {
        Some(path) => {
            let records = read_jsonl(path, spec)?;
            let attributes = spec.attributes.iter().map(|a| a.name.clone()).collect();
            Ok(Corpus { attributes, records })
        }
        None => Ok(generate_corpus(spec, cfg.corpus.records, cfg.corpus_seed())?),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    artifacts: Vec<String>,
    completed: Vec<String>,
    pending: Vec<String>,
    failed: Option<serde_json::Value>,
}

impl<'a> Manifest<'a> {
    fn new(command: &'a str, cfg: &RunConfig) -> Self {
        Manifest {
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            artifacts: Vec::new(),
            completed: Vec::new(),
            pending: Vec::new(),
            failed: None,
        }
    }

    fn save(&self, out: &Path) -> Result<(), Failure> {
        write_json(&out.join("manifest.json"), self)
    }
}

pub fn generate(cfg: &RunConfig, out: &Path, embed_images: bool) -> Result<(), Failure> {
    let corpus = load_corpus(cfg)?;
    let encoding = if embed_images { ImageEncoding::Embedded } else { ImageEncoding::Reference };
    write_jsonl(&out.join("corpus.jsonl"), &corpus.records, encoding)?;
    let mut m = Manifest::new("generate", cfg);
    m.artifacts.push("corpus.jsonl".into());
    m.save(out)?;
    log::info!("wrote {} records to {}", corpus.records.len(), out.join("corpus.jsonl").display());
    Ok(())
}

/// Trains `cfg.variant` with `cfg.seed` and writes the checkpoint and the
/// per-epoch log into `dir`.
fn train_into(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<Model, Failure> {
    fs::create_dir_all(dir)?;
    let catalog = cfg.corpus.spec.catalog()?;
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    if train.is_empty() {
        return Err(Failure::Data("the corpus has no training records".into()));
    }
    let vocab = training_vocabulary(&train, &catalog);
    let variant = ModelVariant::preset(&cfg.variant)?;
    let mut model = Model::new(variant, cfg.dims.clone(), catalog, vocab, cfg.threshold, cfg.seed)?;
    let encoded = train.iter().map(|r| model.encode_record(r)).collect::<Result<Vec<EncodedRecord>, _>>()?;
    let options = cfg.train_options();
    let hash = cfg.hash();
    let mut state = TrainState::new(&model, &options, hash.clone());
    let mut csv = format!("config_hash,seed,variant,{}\n", EpochLog::CSV_HEADER);
    log::info!("training {} (seed {}) on {} records", cfg.variant, cfg.seed, encoded.len());
    fit(&mut model, &mut state, &encoded, &valid, &options, |log, _, _| {
        let _ = writeln!(csv, "{hash},{},{},{}", cfg.seed, cfg.variant, log.csv_row());
        Ok(())
    })?;
    write_atomic(&dir.join("epochs.csv"), csv.as_bytes())?;
    save_checkpoint(&dir.join(CHECKPOINT), &model, &state)?;
    Ok(model)
}

fn provenance(cfg: &RunConfig, variant: &str, split: &str) -> Provenance {
    Provenance { config_hash: cfg.hash(), seed: cfg.seed, variant: variant.into(), split: split.into() }
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), Failure> {
    let mut json = report.to_json()?;
    json.push('\n');
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    write_atomic(&dir.join("report.csv"), csv.as_bytes())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let corpus = load_corpus(cfg)?;
    train_into(cfg, &corpus, out)?;
    let mut m = Manifest::new("train", cfg);
    m.artifacts = vec![CHECKPOINT.into(), "epochs.csv".into()];
    m.save(out)
}

fn open_checkpoint(out: &Path, checkpoint: Option<PathBuf>) -> Result<Model, Failure> {
    let path = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT));
    if !path.exists() {
        return Err(Failure::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(&path)?.0)
}

fn variant_name(model: &Model, cfg: &RunConfig) -> String {
    match ModelVariant::preset(&cfg.variant) {
        Ok(v) if v == model.variant => cfg.variant.clone(),
        _ => model.variant.to_string(),
    }
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>, split: &str) -> Result<(), Failure> {
    let which = parse_split(split)?;
    let model = open_checkpoint(out, checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let records = corpus.split(which);
    let (report, _) = evaluate(&model, &records, provenance(cfg, &variant_name(&model, cfg), split))?;
    write_report(out, &report)?;
    println!("{}", report.csv_row());
    let mut m = Manifest::new("eval", cfg);
    m.artifacts = vec!["report.json".into(), "report.csv".into()];
    m.save(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let seeds = if cfg.ablation.seeds.is_empty() { vec![cfg.seed] } else { cfg.ablation.seeds.clone() };
    let split = cfg.ablation.split.clone();
    let which = parse_split(&split)?;
    let cells: Vec<(u64, String)> =
        seeds.iter().flat_map(|&s| cfg.ablation.variants.iter().map(move |v| (s, v.clone()))).collect();
    let mut manifest = Manifest::new("ablate", cfg);
    manifest.pending = cells.iter().map(|(s, v)| format!("seed-{s}/{v}")).collect();
    manifest.save(out)?;
    let mut rows = String::new();
    // wall-clock seconds per cell; kept apart from the reproducible artifacts
    let mut timings = String::from("cell,seconds\n");
    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut corpus: Option<(u64, Corpus)> = None;
    for (seed, variant) in &cells {
        let cell = format!("seed-{seed}/{variant}");
        let mut cell_cfg = cfg.clone();
        cell_cfg.seed = *seed;
        cell_cfg.variant = variant.clone();
        let started = Instant::now();
        let result = (|| {
            let corpus_seed = cell_cfg.corpus_seed();
            if corpus.as_ref().is_none_or(|(s, _)| *s != corpus_seed) {
                corpus = Some((corpus_seed, load_corpus(&cell_cfg)?));
            }
            let data = &corpus.as_ref().expect("loaded").1;
            let dir = out.join(&cell);
            let model = train_into(&cell_cfg, data, &dir)?;
            let (report, _) = evaluate(&model, &data.split(which), provenance(&cell_cfg, variant, &split))?;
            write_report(&dir, &report)?;
            Ok::<_, Failure>(report)
        })();
        match result {
            Ok(report) => {
                log::info!("{cell}: tag-f1 {:.4} cls-f1 {:.4}", report.tag_f1, report.cls_f1);
                rows.push_str(&report.csv_row());
                rows.push('\n');
                let _ = writeln!(timings, "{cell},{:.3}", started.elapsed().as_secs_f64());
                write_atomic(&out.join("timings.csv"), timings.as_bytes())?;
                write_atomic(&out.join("ablation.csv"), format!("{}\n{rows}", MetricsReport::CSV_HEADER).as_bytes())?;
                reports.push(report);
                manifest.pending.retain(|c| *c != cell);
                manifest.completed.push(cell);
                manifest.artifacts = vec!["ablation.csv".into()];
                manifest.save(out)?;
            }
            Err(f) => {
                manifest.failed = Some(serde_json::json!({ "cell": cell, "error": f.category(), "message": f.to_string() }));
                manifest.save(out)?;
                return Err(f);
            }
        }
    }
    let mut summary = String::from("variant,seeds,precision,recall,tag_f1,cls_f1,accuracy\n");
    for variant in &cfg.ablation.variants {
        let rs: Vec<&MetricsReport> = reports.iter().filter(|r| &r.provenance.variant == variant).collect();
        let accuracy = if rs.iter().all(|r| r.accuracy.is_some()) {
            format!("{:.6}", mean(rs.iter().map(|r| r.accuracy.unwrap_or(0.0))))
        } else {
            String::new()
        };
        let _ = writeln!(
            summary,
            "{variant},{},{:.6},{:.6},{:.6},{:.6},{accuracy}",
            rs.len(),
            mean(rs.iter().map(|r| r.precision)),
            mean(rs.iter().map(|r| r.recall)),
            mean(rs.iter().map(|r| r.tag_f1)),
            mean(rs.iter().map(|r| r.cls_f1)),
        );
    }
    write_atomic(&out.join("ablation_summary.csv"), summary.as_bytes())?;
    manifest.artifacts.push("ablation_summary.csv".into());
    manifest.save(out)
}

pub fn sweep_thr(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let corpus = load_corpus(cfg)?;
    let mut model = match checkpoint {
        Some(path) => open_checkpoint(out, Some(path))?,
        None => train_into(cfg, &corpus, out)?,
    };
    let split = cfg.sweep.split.clone();
    let records = corpus.split(parse_split(&split)?);
    let name = variant_name(&model, cfg);
    let names = model.catalog.names().to_vec();
    let mut manifest = Manifest::new("sweep-thr", cfg);
    manifest.pending = cfg.sweep.thresholds.iter().map(|t| format!("thr-{t}")).collect();
    let mut table = format!("threshold,{}\n", MetricsReport::CSV_HEADER);
    let mut selected = String::from("config_hash,seed,threshold,id,selected_count,selected\n");
    let hash = cfg.hash();
    for &t in &cfg.sweep.thresholds {
        model.threshold = t;
        let (report, outcomes) = evaluate(&model, &records, provenance(cfg, &name, &split))?;
        let _ = writeln!(table, "{t},{}", report.csv_row());
        for o in &outcomes {
            let chosen: Vec<&str> = o.prediction.selected.iter().map(|&a| names[a].as_str()).collect();
            let _ = writeln!(selected, "{hash},{},{t},{},{},{}", cfg.seed, o.id, chosen.len(), chosen.join(";"));
        }
        write_atomic(&out.join("sweep.csv"), table.as_bytes())?;
        write_atomic(&out.join("sweep_selected.csv"), selected.as_bytes())?;
        let cell = format!("thr-{t}");
        manifest.pending.retain(|c| *c != cell);
        manifest.completed.push(cell);
        manifest.artifacts = vec!["sweep.csv".into(), "sweep_selected.csv".into()];
        manifest.save(out)?;
    }
    Ok(())
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.data()[r * t.cols()..(r + 1) * t.cols()].iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn export_attention(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let model = open_checkpoint(out, checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let records = corpus.split(parse_split(&cfg.attention.split)?);
    let dir = out.join("attention");
    fs::create_dir_all(&dir)?;
    let mut index = String::from("id,map,rows,cols,tokens\n");
    let mut manifest = Manifest::new("export-attention", cfg);
    for record in records.iter().take(cfg.attention.records) {
        let prediction = model.predict(&model.encode_record(record)?)?;
        let Some(maps) = prediction.maps else {
            return Err(Failure::Config(format!("variant {} has no fusion attention to export", model.variant)));
        };
        let mut write = |kind: &str, t: &Tensor| -> Result<(), Failure> {
            let file = format!("{}_{kind}.csv", record.id);
            write_atomic(&dir.join(&file), matrix_csv(t).as_bytes())?;
            let _ = writeln!(index, "{},{kind},{},{},{}", record.id, t.rows(), t.cols(), record.tokens.join(" "));
            manifest.artifacts.push(format!("attention/{file}"));
            Ok(())
        };
        write("self", &maps.self_map)?;
        if let Some(cross) = &maps.cross_map {
            write("cross", cross)?;
        }
    }
    write_atomic(&dir.join("index.csv"), index.as_bytes())?;
    manifest.artifacts.push("attention/index.csv".into());
    manifest.save(out)
}
