use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use log::info;
use ngtype_core::calibrate::{collect_calibration_pairs, fit_isotonic, reliability_table, CalibrationMap, Threshold};
use ngtype_core::corpus::{load_corpus, AnnotatedFunction, Bitness, Corpus, SignatureLibrary, Split, TypeLibrary};
use ngtype_core::engine::{Engine, FunctionRef, Prediction};
use ngtype_core::lexer::tokenize;
use ngtype_core::metrics::{build_eval_records, coverage_risk_csv, evaluate};
use ngtype_core::ngramdb::{build_ensemble, DatabaseEnsemble, DbStats, Vocabulary};
use ngtype_core::signatures::{
    aggregate_by_address, build_signature_database, callee_truth, infer_call_sites, triage_report,
    CallSitePrediction, FunctionPrediction,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{InputError, RunConfig};

pub fn manifest_name(vocabulary: Vocabulary, bitness: Bitness) -> String {
    format!("{vocabulary}-{}.json", bitness.bits())
}

fn load_libraries(cfg: &RunConfig) -> Result<(TypeLibrary, SignatureLibrary)> {
    let types = TypeLibrary::load(cfg.require(&cfg.types, "types")?)?;
    let signatures = match &cfg.signatures {
        Some(p) => SignatureLibrary::load(p)?,
        None => SignatureLibrary::new(),
    };
    Ok((types, signatures))
}

fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.require(&cfg.corpus, "corpus")?;
    let (types, signatures) = load_libraries(cfg)?;
    let corpus = load_corpus(path, types, signatures)?;
    info!("loaded {} functions from {}", corpus.functions.len(), path.display());
    Ok(corpus)
}

fn selected<'c>(cfg: &RunConfig, corpus: &'c Corpus) -> Vec<&'c AnnotatedFunction> {
    corpus
        .functions
        .iter()
        .filter(|f| cfg.split.is_none_or(|s| f.split == s))
        .collect()
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("starting worker pool")
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(item);
    }
    Ok(out)
}

fn print_stats(label: &str, stats: &[DbStats]) {
    println!("{label}");
    println!(
        "  {:>4} {:>10} {:>7} {:>10} {:>11} {:>12} {:>12}",
        "n", "keys", "labels", "pairs", "labels/key", "disk_bytes", "resident"
    );
    for s in stats {
        println!(
            "  {:>4} {:>10} {:>7} {:>10} {:>11.3} {:>12} {:>12}",
            s.n, s.key_count, s.label_count, s.pair_count, s.mean_labels_per_key, s.on_disk_bytes, s.resident_bytes
        );
    }
    let disk: u64 = stats.iter().map(|s| s.on_disk_bytes).sum();
    let resident: u64 = stats.iter().map(|s| s.resident_bytes).sum();
    println!("  total: {disk} bytes on disk, {resident} bytes resident");
}

fn model_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.require(&cfg.model_dir, "model-dir")
}

fn train_vocabulary(cfg: &RunConfig, vocabulary: Vocabulary) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let dir = model_dir(cfg)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for o in ngtype_core::corpus::validate_splits(&corpus).overlaps {
        if o.shared > 0 {
            eprintln!(
                "warning: {} and {} share {} normalized function bodies (overlap {:.3})",
                o.a, o.b, o.shared, o.overlap
            );
        }
    }
    let bitnesses = corpus.bitnesses(Split::Train);
    if bitnesses.is_empty() {
        return Err(InputError("the train split is empty".into()).into());
    }
    let pool = pool(cfg)?;
    for bitness in bitnesses {
        let (ensemble, report) = pool.install(|| match vocabulary {
            Vocabulary::Types => build_ensemble(&corpus, &cfg.portfolio, bitness, vocabulary, cfg.threads),
            Vocabulary::Signatures => build_signature_database(&corpus, &cfg.portfolio, bitness, cfg.threads),
        })?;
        let manifest = dir.join(manifest_name(vocabulary, bitness));
        ensemble.save(&manifest)?;
        let saved = DatabaseEnsemble::open(&manifest, false)?;
        let stats: Vec<DbStats> = saved.databases().iter().map(|d| d.stats()).collect();
        print_stats(
            &format!(
                "{} ({} functions, {} sites, {} cross-vocabulary annotations skipped)",
                manifest.display(),
                report.functions,
                report.sites,
                report.skipped_cross_vocabulary
            ),
            &stats,
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    train_vocabulary(cfg, Vocabulary::Types)
}

pub fn fn_train(cfg: &RunConfig) -> Result<()> {
    train_vocabulary(cfg, Vocabulary::Signatures)
}

fn manifest_paths(cfg: &RunConfig, vocabulary: Vocabulary) -> Result<Vec<PathBuf>> {
    if !cfg.manifests.is_empty() {
        return Ok(cfg.manifests.clone());
    }
    let Some(dir) = &cfg.model_dir else {
        return Err(InputError("missing `--manifest` or `--model-dir`".into()).into());
    };
    let found: Vec<PathBuf> = [Bitness::B32, Bitness::B64]
        .into_iter()
        .map(|b| dir.join(manifest_name(vocabulary, b)))
        .filter(|p| p.exists())
        .collect();
    if found.is_empty() {
        return Err(InputError(format!("no {vocabulary} manifests in {}", dir.display())).into());
    }
    Ok(found)
}

fn open_ensembles(cfg: &RunConfig, vocabulary: Vocabulary) -> Result<Vec<DatabaseEnsemble>> {
    let start = Instant::now();
    let ensembles = manifest_paths(cfg, vocabulary)?
        .iter()
        .map(|p| DatabaseEnsemble::open(p, false).with_context(|| format!("opening {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    info!("opened {} ensembles in {:.1?}", ensembles.len(), start.elapsed());
    Ok(ensembles)
}

fn load_calibration(cfg: &RunConfig) -> Result<Option<CalibrationMap>> {
    cfg.calibration
        .as_deref()
        .map(|p| CalibrationMap::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn engines<'a>(
    cfg: &RunConfig,
    ensembles: &'a [DatabaseEnsemble],
    corpus: &'a Corpus,
    calibration: Option<&'a CalibrationMap>,
) -> Result<Vec<Engine<'a>>> {
    ensembles
        .iter()
        .map(|e| {
            Ok(Engine::new(e, cfg.scoring.clone())?
                .with_types(&corpus.types)
                .with_threshold(cfg.tau)
                .with_calibration(calibration))
        })
        .collect()
}

/// Engine matching the function's bitness; otherwise the first one, which
/// reports the mismatch.
fn engine_for<'e, 'a>(engines: &'e [Engine<'a>], f: &AnnotatedFunction) -> &'e Engine<'a> {
    engines
        .iter()
        .find(|e| e.ensemble().bitness() == f.bitness)
        .unwrap_or(&engines[0])
}

pub struct Throughput {
    pub functions: usize,
    pub wall: Duration,
    pub median_ms: f64,
    pub mean_ms: f64,
}

impl Throughput {
    fn new(mut times: Vec<Duration>, wall: Duration) -> Self {
        times.sort_unstable();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let n = times.len();
        let median_ms = match n {
            0 => 0.0,
            _ if n % 2 == 1 => ms(times[n / 2]),
            _ => (ms(times[n / 2 - 1]) + ms(times[n / 2])) / 2.0,
        };
        let mean_ms = if n == 0 { 0.0 } else { times.iter().map(|&d| ms(d)).sum::<f64>() / n as f64 };
        Throughput { functions: n, wall, median_ms, mean_ms }
    }

    fn report(&self) {
        let rate = self.functions as f64 / self.wall.as_secs_f64().max(1e-9);
        eprintln!(
            "throughput: {} functions in {:.3}s, {:.1} functions/s, median {:.4} ms/function, mean {:.4} ms/function",
            self.functions,
            self.wall.as_secs_f64(),
            rate,
            self.median_ms,
            self.mean_ms
        );
    }
}

/// Runs `job` over every function on the pool, keeping input order.
fn run_timed<T: Send>(
    cfg: &RunConfig,
    functions: &[&AnnotatedFunction],
    job: impl Fn(&AnnotatedFunction) -> Result<T> + Sync,
) -> Result<(Vec<T>, Throughput)> {
    let pool = pool(cfg)?;
    let start = Instant::now();
    let results: Vec<(Result<T>, Duration)> = pool.install(|| {
        functions
            .par_iter()
            .map(|f| {
                let t = Instant::now();
                let r = job(f);
                (r, t.elapsed())
            })
            .collect()
    });
    let wall = start.elapsed();
    let mut out = Vec::with_capacity(results.len());
    let mut times = Vec::with_capacity(results.len());
    for ((r, d), f) in results.into_iter().zip(functions) {
        out.push(r.with_context(|| format!("function {} {:#x}", f.binary_id, f.address))?);
        times.push(d);
    }
    Ok((out, Throughput::new(times, wall)))
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let ensembles = open_ensembles(cfg, Vocabulary::Types)?;
    let calibration = load_calibration(cfg)?;
    let engines = engines(cfg, &ensembles, &corpus, calibration.as_ref())?;
    let functions = selected(cfg, &corpus);
    let (per_function, throughput) = run_timed(cfg, &functions, |f| {
        Ok(engine_for(&engines, f).infer_function(FunctionRef::from(f))?)
    })?;
    let predictions: Vec<Prediction> = per_function.into_iter().flatten().collect();
    let mut out = writer(cfg.output.as_deref())?;
    write_jsonl(&mut *out, &predictions)?;
    out.flush()?;
    let kept = predictions.iter().filter(|p| !p.abstained).count();
    eprintln!("predictions: {} identifiers, {} kept at tau {}", predictions.len(), kept, cfg.tau);
    throughput.report();
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, bins: usize) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let predictions: Vec<Prediction> = read_jsonl(cfg.require(&cfg.predictions, "predictions")?)?;
    let (pairs, collected) = collect_calibration_pairs(&predictions, &corpus);
    if pairs.is_empty() {
        return Err(InputError(format!(
            "no calibration pairs: {} abstained, {} without ground truth",
            collected.abstained, collected.skipped
        ))
        .into());
    }
    let map = fit_isotonic(&pairs)?;
    let out = cfg
        .output
        .as_deref()
        .or(cfg.calibration.as_deref())
        .ok_or_else(|| InputError("missing `--output` for the calibration map".into()))?;
    map.save(out)?;
    println!(
        "calibration map: {} breakpoints from {} pairs ({} abstained, {} without ground truth) -> {}",
        map.breakpoints().len(),
        collected.pairs,
        collected.abstained,
        collected.skipped,
        out.display()
    );
    println!("  {:>11} {:>7} {:>10} {:>9} {:>11}", "bin", "pairs", "mean_score", "accuracy", "calibrated");
    for b in reliability_table(&pairs, bins) {
        println!(
            "  {:.2}-{:.2} {:>7} {:>10.4} {:>9.4} {:>11.4}",
            b.lower,
            b.upper,
            b.count,
            b.mean_score,
            b.accuracy,
            map.apply(b.mean_score)
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

pub fn eval(cfg: &RunConfig, grid: &[Threshold], format: ReportFormat, curve_csv: Option<&Path>) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let predictions: Vec<Prediction> = read_jsonl(cfg.require(&cfg.predictions, "predictions")?)?;
    let (records, join) = build_eval_records(&predictions, &corpus);
    eprintln!(
        "joined {} records ({} unannotated, {} unknown functions, {} missing predictions)",
        join.records, join.unannotated, join.unknown_function, join.missing_predictions
    );
    let report = evaluate(&records, grid)?;
    let mut out = writer(cfg.output.as_deref())?;
    match format {
        ReportFormat::Text => out.write_all(report.to_text().as_bytes())?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &report)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    if let Some(path) = curve_csv {
        std::fs::write(path, coverage_risk_csv(&report.coverage_risk))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn fn_infer(cfg: &RunConfig, sites_path: Option<&Path>) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let ensembles = open_ensembles(cfg, Vocabulary::Signatures)?;
    let calibration = load_calibration(cfg)?;
    let engines = engines(cfg, &ensembles, &corpus, calibration.as_ref())?;
    let functions = selected(cfg, &corpus);
    let (per_function, throughput) =
        run_timed(cfg, &functions, |f| Ok(infer_call_sites(engine_for(&engines, f), f)?))?;
    let sites: Vec<CallSitePrediction> = per_function.into_iter().flatten().collect();
    if let Some(p) = sites_path {
        let mut w = writer(Some(p))?;
        write_jsonl(&mut *w, &sites)?;
        w.flush()?;
    }
    let aggregated = aggregate_by_address(&sites, cfg.tau);
    let mut out = writer(cfg.output.as_deref())?;
    write_jsonl(&mut *out, &aggregated)?;
    out.flush()?;
    eprintln!("call sites: {}, callees with a signature: {}", sites.len(), aggregated.len());
    throughput.report();
    Ok(())
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

pub fn fn_triage(cfg: &RunConfig, prefix: &str) -> Result<()> {
    let predictions: Vec<FunctionPrediction> = read_jsonl(cfg.require(&cfg.predictions, "predictions")?)?;
    let truth = match &cfg.corpus {
        Some(_) => {
            let corpus = open_corpus(cfg)?;
            Some(callee_truth(&corpus, cfg.split.unwrap_or(Split::Test)))
        }
        None => None,
    };
    let report = triage_report(&predictions, prefix, truth.as_ref());
    let mut out = writer(cfg.output.as_deref())?;
    writeln!(out, "{} callees predicted with prefix `{}`", report.listed.len(), report.prefix)?;
    writeln!(out, "  {:<16} {:<20} {:<28} {:>9} {:>9}", "binary", "callee", "signature", "weight", "sites")?;
    for p in &report.listed {
        writeln!(
            out,
            "  {:<16} {:<20} {:<28} {:>9.3} {:>4}/{:<4}",
            p.binary_id,
            p.callee.to_string(),
            p.signature,
            p.weight,
            p.contexts,
            p.sites
        )?;
    }
    if let Some(m) = &report.metrics {
        writeln!(
            out,
            "tp {} fp {} fn {} ground truth {}: precision {} recall {} f1 {}",
            m.true_positives,
            m.false_positives,
            m.false_negatives,
            m.ground_truth,
            fmt_ratio(m.precision),
            fmt_ratio(m.recall),
            fmt_ratio(m.f1)
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn db_stats(cfg: &RunConfig, manifests: &[PathBuf]) -> Result<()> {
    let paths: Vec<PathBuf> = if !manifests.is_empty() {
        manifests.to_vec()
    } else {
        let mut all = Vec::new();
        for v in [Vocabulary::Types, Vocabulary::Signatures] {
            if let Ok(found) = manifest_paths(cfg, v) {
                all.extend(found);
            }
        }
        if all.is_empty() {
            return Err(InputError("no manifests given".into()).into());
        }
        all
    };
    for p in paths {
        let ens = DatabaseEnsemble::open(&p, true).with_context(|| format!("opening {}", p.display()))?;
        let stats: Vec<DbStats> = ens.databases().iter().map(|d| d.stats()).collect();
        print_stats(
            &format!(
                "{} ({} vocabulary, {}-bit, {} labels)",
                p.display(),
                ens.vocabulary(),
                ens.bitness().bits(),
                ens.labels().len()
            ),
            &stats,
        );
    }
    Ok(())
}

pub fn tokenize_cmd(input: Option<&Path>, debug: bool) -> Result<()> {
    let mut source = String::new();
    match input {
        Some(p) => {
            source = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        }
        None => {
            io::stdin().read_to_string(&mut source)?;
        }
    }
    let stream = tokenize(&source);
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    if debug {
        for t in stream.tokens() {
            writeln!(out, "{}\t{}", t.text, serde_json::to_value(t.class)?.as_str().unwrap_or_default())?;
        }
    } else {
        writeln!(out, "{}", stream.joined())?;
    }
    out.flush()?;
    Ok(())
}
