//! Implementations of the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use hmmrf_core::corpus::{
    carve_holdout, encode, filter_small_classes, generate_planted_corpus, load_corpus,
    split_corpus, write_dropped_csv, CorpusSplit, LabeledSequence, OpcodeVocabulary,
    PlantedCorpusConfig,
};
use hmmrf_core::eval::{
    evaluate, grid_search, sweep_report, write_results_csv, write_sweep_csv, EvaluationReport,
    GridParams, GridSpec, PipelineKind, SWEEP_AXES,
};
use hmmrf_core::forest::ForestConfig;
use hmmrf_core::hmm::TrainingConfig;
use hmmrf_core::pipeline::{train_pipeline, train_raw_baseline, TrainedModel};

use crate::manifest::{corpus_fingerprint, now_rfc3339, RunManifest};
use crate::{ClassifyArgs, EvalArgs, GenCorpusArgs, GridArgs, TrainArgs};

/// `model.json -> model.report.json`, keeping bare stems working too.
fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn output_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn print_report_summary(report: &EvaluationReport) {
    println!("held-out accuracy:    {:.4}", report.accuracy);
    println!("held-out weighted F1: {:.4}", report.weighted_f1);
    println!("per-class:");
    for metrics in &report.per_class {
        println!(
            "  {:<16} precision {:.4}  recall {:.4}  f1 {:.4}  support {}",
            metrics.family, metrics.precision, metrics.recall, metrics.f1, metrics.support
        );
    }
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

pub fn gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let started = now_rfc3339();
    let config = PlantedCorpusConfig {
        n_families: args.families,
        n_states: args.states,
        n_symbols: args.symbols,
        samples_per_family: args.samples,
        length_range: (args.len.0, args.len.1),
        separation: args.separation,
        seed: args.seed,
    };
    let summary = generate_planted_corpus(&config, &args.out)?;
    let fingerprint = corpus_fingerprint(&args.out)?;
    RunManifest::new(
        "gen-corpus",
        json!({
            "config": config,
            "out": args.out,
        }),
        args.seed,
        Some(fingerprint.clone()),
        started,
    )
    .write(&args.out.join("manifest.json"))?;

    println!(
        "generated {} families x {} samples = {} sequences, {} total opcodes",
        summary.families.len(),
        args.samples,
        summary.total_samples,
        summary.total_symbols
    );
    println!("ground truth: {}", summary.ground_truth_path.display());
    println!("corpus fingerprint: {fingerprint}");
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_split(
    corpus: &Path,
    min_class_samples: usize,
    test_fraction: f64,
    l: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    let loaded = load_corpus(corpus)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let sequences = filter_small_classes(loaded.sequences, min_class_samples)?;
    Ok(split_corpus(&sequences, test_fraction, l, seed)?)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let started = now_rfc3339();
    let kind: PipelineKind = match args.baseline.as_str() {
        "raw" | "raw-rf" => PipelineKind::RawRf,
        "hmm-rf" => PipelineKind::HmmRf,
        other => bail!("unknown --baseline {other:?} (expected hmm-rf or raw)"),
    };
    let split = load_split(
        &args.corpus,
        args.min_class_samples,
        args.test_fraction,
        args.l,
        args.seed,
    )?;
    let out_dir = output_dir(&args.out);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let dropped_path = out_dir.join("dropped.csv");
    write_dropped_csv(&dropped_path, &split.dropped)?;

    let hmm_config = TrainingConfig {
        n_states: args.states,
        min_iterations: args.min_iters,
        epsilon: args.epsilon,
        max_iterations: args.max_iters,
        seed: args.seed,
        init_jitter: args.jitter,
    };
    let forest_config = ForestConfig {
        n_estimators: args.trees,
        criterion: args.criterion,
        max_features: args.max_features,
        bootstrap: args.bootstrap,
        max_depth: None,
        min_samples_split: 2,
        seed: args.seed,
    };
    let model = match kind {
        PipelineKind::HmmRf => TrainedModel::HmmRf(train_pipeline(
            &split,
            &hmm_config,
            &forest_config,
            args.l,
            args.max_train_symbols,
        )?),
        PipelineKind::RawRf => {
            TrainedModel::RawRf(train_raw_baseline(&split, &forest_config, args.l)?)
        }
    };
    let report = evaluate(model.as_classifier(), &split.test)?;

    fs::write(&args.out, model.to_json_string()?)
        .with_context(|| format!("writing model {}", args.out.display()))?;
    let report_path = sibling(&args.out, "report.json");
    fs::write(&report_path, report.to_json_string()?)
        .with_context(|| format!("writing report {}", report_path.display()))?;
    RunManifest::new(
        "train",
        json!({
            "corpus": args.corpus,
            "baseline": args.baseline,
            "L": args.l,
            "states": args.states,
            "trees": args.trees,
            "criterion": args.criterion.to_string(),
            "max_features": args.max_features.to_string(),
            "epsilon": args.epsilon,
            "min_iters": args.min_iters,
            "max_iters": args.max_iters,
            "jitter": args.jitter,
            "test_fraction": args.test_fraction,
            "min_class_samples": args.min_class_samples,
            "max_train_symbols": args.max_train_symbols,
            "bootstrap": args.bootstrap,
            "out": args.out,
        }),
        args.seed,
        Some(corpus_fingerprint(&args.corpus)?),
        started,
    )
    .write(&sibling(&args.out, "manifest.json"))?;

    let families = model.as_classifier().families().len();
    println!(
        "corpus: {} families, {} train / {} test samples, {} dropped",
        families,
        split.train.len(),
        split.test.len(),
        split.dropped.len()
    );
    print_report_summary(&report);
    println!(
        "wrote {}, {}, {}, {}",
        args.out.display(),
        report_path.display(),
        sibling(&args.out, "manifest.json").display(),
        dropped_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

pub fn grid(args: GridArgs) -> Result<()> {
    let started = now_rfc3339();
    let Some(&l_max) = args.l.iter().max() else {
        bail!("--L needs at least one value");
    };
    let loaded = load_corpus(&args.corpus)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let mut sequences = filter_small_classes(loaded.sequences, args.min_class_samples)?;
    let holdout_raw = if args.holdout_fraction > 0.0 {
        let (kept, holdout) = carve_holdout(&sequences, args.holdout_fraction, args.seed)?;
        sequences = kept;
        Some(holdout)
    } else {
        None
    };
    // One split for every cell: drop against the largest L so each cell sees
    // the identical sample set.
    let split = split_corpus(&sequences, args.test_fraction, l_max, args.seed)?;
    let grid_spec = GridSpec {
        l_values: args.l.clone(),
        n_estimators: args.trees.clone(),
        criteria: args.criterion.clone(),
        max_features: args.max_features.clone(),
    };
    let params = GridParams {
        kind: args.kind,
        hmm_config: TrainingConfig {
            n_states: args.states,
            min_iterations: args.min_iters,
            epsilon: args.epsilon,
            max_iterations: args.max_iters,
            seed: args.seed,
            init_jitter: args.jitter,
        },
        max_train_symbols: args.max_train_symbols,
        bootstrap: args.bootstrap,
        seed: args.seed,
        cache: !args.no_cache,
    };
    let cell_count = grid_spec.cells()?.len();
    println!(
        "grid: {cell_count} cells over {} samples ({} train / {} test), {} dropped",
        split.train.len() + split.test.len(),
        split.train.len(),
        split.test.len(),
        split.dropped.len()
    );
    let output = grid_search(&split, &grid_spec, &params)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating output directory {}", args.out_dir.display()))?;
    write_results_csv(&args.out_dir.join("results.csv"), &output.results)?;
    for axis in SWEEP_AXES {
        let rows = sweep_report(&output.results, axis)?;
        write_sweep_csv(&args.out_dir.join(format!("sweep_{axis}.csv")), &rows)?;
    }
    fs::write(
        args.out_dir.join("best_model.json"),
        output.best_model.to_json_string()?,
    )?;
    fs::write(
        args.out_dir.join("best_report.json"),
        output.best_report.to_json_string()?,
    )?;

    // With a third split carved out, the selected model is re-scored on data
    // the search never saw.
    let holdout_report = match &holdout_raw {
        Some(raw) => {
            let classifier = output.best_model.as_classifier();
            let l_best = classifier.truncation_length();
            let vocabulary = classifier.vocabulary();
            let mut holdout = Vec::new();
            let mut skipped = 0usize;
            for seq in raw {
                if seq.mnemonics.len() < l_best {
                    skipped += 1;
                    continue;
                }
                let (symbols, unseen) = encode(vocabulary, &seq.mnemonics);
                holdout.push(LabeledSequence {
                    sample_id: seq.sample_id.clone(),
                    family: seq.family.clone(),
                    symbols,
                    unseen,
                });
            }
            if skipped > 0 {
                eprintln!("holdout: skipped {skipped} samples shorter than L = {l_best}");
            }
            if holdout.is_empty() {
                bail!("the carved holdout has no sample of at least {l_best} opcodes");
            }
            let report = evaluate(classifier, &holdout)?;
            fs::write(
                args.out_dir.join("holdout_report.json"),
                report.to_json_string()?,
            )?;
            Some(report)
        }
        None => None,
    };

    RunManifest::new(
        "grid",
        json!({
            "corpus": args.corpus,
            "kind": match args.kind { PipelineKind::HmmRf => "hmm-rf", PipelineKind::RawRf => "raw-rf" },
            "L": args.l,
            "trees": args.trees,
            "criterion": args.criterion.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
            "max_features": args.max_features.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            "states": args.states,
            "epsilon": args.epsilon,
            "min_iters": args.min_iters,
            "max_iters": args.max_iters,
            "jitter": args.jitter,
            "test_fraction": args.test_fraction,
            "holdout_fraction": args.holdout_fraction,
            "min_class_samples": args.min_class_samples,
            "max_train_symbols": args.max_train_symbols,
            "bootstrap": args.bootstrap,
            "cache": !args.no_cache,
            "out_dir": args.out_dir,
        }),
        args.seed,
        Some(corpus_fingerprint(&args.corpus)?),
        started,
    )
    .write(&args.out_dir.join("manifest.json"))?;

    for failure in &output.failures {
        eprintln!(
            "cell failed: L={} trees={} {} {}: {}",
            failure.cell.l,
            failure.cell.n_estimators,
            failure.cell.criterion,
            failure.cell.max_features,
            failure.message
        );
    }
    let best = output.best();
    println!(
        "{} cells evaluated, {} failed",
        output.results.len(),
        output.failures.len()
    );
    println!(
        "best cell: L={} trees={} criterion={} max_features={} accuracy {:.4} weighted F1 {:.4}",
        best.cell.l,
        best.cell.n_estimators,
        best.cell.criterion,
        best.cell.max_features,
        best.accuracy,
        best.weighted_f1
    );
    match &holdout_report {
        Some(report) => println!(
            "holdout accuracy {:.4} weighted F1 {:.4} (untouched by selection)",
            report.accuracy, report.weighted_f1
        ),
        None => println!(
            "note: the best cell is scored on the split that selected it (optimistic); \
             pass --holdout-fraction to carve an untouched final split"
        ),
    }
    println!("results written under {}", args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

fn read_mnemonics(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mnemonics: Vec<String> = text
        .lines()
        .map(OpcodeVocabulary::normalize)
        .filter(|m| !m.is_empty())
        .collect();
    if mnemonics.is_empty() {
        bail!("{} holds no opcodes", path.display());
    }
    Ok(mnemonics)
}

pub fn classify(args: ClassifyArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let model = TrainedModel::from_json_str(&text)?;
    let classifier = model.as_classifier();

    let mut failures = 0usize;
    for file in &args.files {
        let outcome = read_mnemonics(file).and_then(|mnemonics| {
            let (symbols, unseen) = encode(classifier.vocabulary(), &mnemonics);
            let (family, votes) = classifier.classify(&symbols)?;
            Ok((family, votes, unseen))
        });
        match outcome {
            Ok((family, votes, unseen)) => {
                if args.json {
                    println!(
                        "{}",
                        json!({
                            "file": file,
                            "family": family,
                            "votes": votes,
                            "unseen_opcodes": unseen,
                        })
                    );
                } else {
                    let votes: Vec<String> = votes.iter().map(|v| v.to_string()).collect();
                    println!("{}\t{}\t{}", file.display(), family, votes.join(","));
                }
            }
            Err(error) => {
                failures += 1;
                if args.json {
                    println!("{}", json!({ "file": file, "error": format!("{error:#}") }));
                } else {
                    println!("{}\terror\t{error:#}", file.display());
                }
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} files failed", args.files.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(args: EvalArgs) -> Result<()> {
    let started = now_rfc3339();
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let model = TrainedModel::from_json_str(&text)?;
    let classifier = model.as_classifier();
    let l = classifier.truncation_length();

    let loaded = load_corpus(&args.corpus)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let mut test = Vec::new();
    let mut skipped = 0usize;
    for seq in &loaded.sequences {
        if seq.mnemonics.len() < l {
            skipped += 1;
            eprintln!(
                "skipping {}: {} opcodes < L = {l}",
                seq.sample_id,
                seq.mnemonics.len()
            );
            continue;
        }
        let (symbols, unseen) = encode(classifier.vocabulary(), &seq.mnemonics);
        test.push(LabeledSequence {
            sample_id: seq.sample_id.clone(),
            family: seq.family.clone(),
            symbols,
            unseen,
        });
    }
    if test.is_empty() {
        bail!("no sample in {} is at least {l} opcodes long", args.corpus.display());
    }
    let report = evaluate(classifier, &test)?;

    fs::write(&args.out, report.to_json_string()?)
        .with_context(|| format!("writing report {}", args.out.display()))?;
    RunManifest::new(
        "eval",
        json!({
            "model": args.model,
            "corpus": args.corpus,
            "out": args.out,
            "skipped_short": skipped,
        }),
        0,
        Some(corpus_fingerprint(&args.corpus)?),
        started,
    )
    .write(&sibling(&args.out, "manifest.json"))?;

    println!(
        "evaluated {} samples ({} skipped as shorter than L = {l})",
        test.len(),
        skipped
    );
    print_report_summary(&report);
    println!("report written to {}", args.out.display());
    Ok(())
}
