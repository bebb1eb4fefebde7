//! Experiment driver. Every subcommand reads one sectioned TOML config;
//! any `--section.key=value` argument overrides the file before resolution.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence,
//! 5 gradient check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mml_core::config::{self, Metric, RunConfig};
use mml_core::datagen::{gen_longtail, load_dataset, make_ident_protocol, make_pairs, save_dataset, Dataset, Split};
use mml_core::error::{MmlError, Result};
use mml_core::evalkit::{
    cmc, compare_histograms, nearest_centre_histogram, roc, sweep, verification_accuracy,
    vr_at_far, EvalReport, Histogram, SweepEvalOptions,
};
use mml_core::numeric::{l2_normalize_rows, sq_dist, Matrix};
use mml_core::trainer::{
    gradcheck, write_trace_csv, Checkpoint, GradCheckOptions, Scheme, TrainConfig, Trainer,
};

const EXIT_CONFIG: i32 = 2;
const EXIT_DATA: i32 = 3;
const EXIT_DIVERGENCE: i32 = 4;
const EXIT_GRADCHECK: i32 = 5;

#[derive(Parser)]
#[command(name = "mml", version, about = "margin-regularized embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a long-tailed synthetic dataset from the [data] section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per [model]/[train]; writes a checkpoint and a trace CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV path; defaults to <out>.trace.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the heldout split per [eval].
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Second checkpoint; emits a histogram-delta CSV against it.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train/evaluate a grid of margin or beta values per [sweep].
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Fault-injection hook: corrupt one analytic gradient entry.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// Pull `--section.key=value` arguments out of argv before clap sees them.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<String>) {
    let sections = ["data.", "model.", "train.", "eval.", "sweep."];
    let mut args = Vec::new();
    let mut overrides = Vec::new();
    for arg in argv {
        let is_override = arg
            .strip_prefix("--")
            .filter(|rest| {
                let key = rest.split('=').next().unwrap_or("");
                rest.contains('=') && sections.iter().any(|s| key.starts_with(s))
            })
            .is_some();
        if is_override {
            overrides.push(arg[2..].to_string());
        } else {
            args.push(arg);
        }
    }
    (args, overrides)
}

fn exit_code(err: &MmlError) -> i32 {
    match err {
        MmlError::Config(_)
        | MmlError::InvalidArgument(_)
        | MmlError::DimensionMismatch(_)
        | MmlError::IncompatibleCheckpoint(_) => EXIT_CONFIG,
        MmlError::Data(_)
        | MmlError::MalformedRecord { .. }
        | MmlError::LabelOutOfRange { .. }
        | MmlError::ZeroNormRow { .. }
        | MmlError::Io(_) => EXIT_DATA,
        MmlError::Divergence { .. } | MmlError::NonFinite(_) => EXIT_DIVERGENCE,
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<i32> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, overrides, &out),
        Command::Train {
            config,
            data,
            out,
            trace,
        } => cmd_train(&config, overrides, &data, &out, trace.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            data,
            out_dir,
            compare,
        } => cmd_eval(&config, overrides, &checkpoint, &data, &out_dir, compare.as_deref()),
        Command::Sweep {
            config,
            data,
            out_dir,
        } => cmd_sweep(&config, overrides, &data, &out_dir),
        Command::Gradcheck {
            config,
            data,
            samples,
            epsilon,
            tolerance,
            corrupt,
        } => cmd_gradcheck(
            &config,
            overrides,
            &data,
            GradCheckOptions {
                samples,
                epsilon,
                tolerance,
                corrupt_analytic: corrupt,
            },
        ),
    }
}

fn write_meta(path: &Path, config: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "config": config.echo_json(),
        "details": extra,
    });
    std::fs::write(path, format!("{:#}\n", meta))?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", path.display()))
}

fn cmd_gen_data(config_path: &Path, overrides: &[String], out: &Path) -> Result<i32> {
    let config = config::load(config_path, overrides)?;
    let spec = config.data()?;
    let dataset = gen_longtail(spec)?;
    save_dataset(&dataset, out)?;

    let counts = dataset.per_class_counts();
    write_meta(
        &sidecar(out, ".meta.json"),
        &config,
        serde_json::json!({
            "num_samples": dataset.len(),
            "per_class_counts": counts,
        }),
    )?;
    println!(
        "wrote {} samples, {} classes to {}",
        dataset.len(),
        dataset.num_classes(),
        out.display()
    );
    println!(
        "head class: {} samples, tail class: {} samples",
        counts.first().copied().unwrap_or(0),
        counts.last().copied().unwrap_or(0)
    );
    println!("per-class counts: {counts:?}");
    Ok(0)
}

fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    data_path: &Path,
    out: &Path,
    trace_path: Option<&Path>,
) -> Result<i32> {
    let config = config::load(config_path, overrides)?;
    let train_config = config.train()?.clone();
    let dataset = load_dataset(data_path)?;

    let mut trainer = Trainer::new(train_config, &dataset)?;
    let mut trace = Vec::new();
    if let Err(e) = trainer.run(&mut trace) {
        if matches!(e, MmlError::Divergence { .. } | MmlError::NonFinite(_)) {
            let snap = sidecar(out, ".diverged.json");
            trainer.checkpoint().save(&snap)?;
            eprintln!("diagnostic snapshot: {}", snap.display());
        }
        return Err(e);
    }

    let checkpoint = trainer.checkpoint();
    checkpoint.save(out)?;
    let trace_path = trace_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sidecar(out, ".trace.csv"));
    write_trace_csv(&trace_path, &trace)?;
    write_meta(
        &sidecar(&trace_path, ".meta.json"),
        &config,
        serde_json::json!({ "iterations": checkpoint.iteration }),
    )?;

    if let Some(last) = trace.last() {
        println!(
            "final: iter={} loss_total={} loss_softmax={} loss_centre={} loss_mml={}",
            last.iter, last.loss_total, last.loss_softmax, last.loss_centre, last.loss_mml
        );
    }
    println!("checkpoint: {}", out.display());
    println!("trace: {}", trace_path.display());
    Ok(0)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

struct Embedded {
    embeddings: Matrix,
}

fn embed_checkpoint(checkpoint: &Checkpoint, dataset: &Dataset, metric: Metric) -> Result<Embedded> {
    let params = checkpoint.embedder_params()?;
    let mut embeddings = params.forward(&dataset.inputs)?;
    if metric == Metric::Cosine {
        l2_normalize_rows(&mut embeddings)?;
    }
    Ok(Embedded { embeddings })
}

fn heldout_histogram(
    dataset: &Dataset,
    embedded: &Embedded,
    bins: usize,
    range: (f64, f64),
) -> Result<Histogram> {
    let idx = dataset.indices_of(Split::Heldout);
    let mut features = Matrix::zeros(idx.len(), embedded.embeddings.cols());
    let mut labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        features.row_mut(r).copy_from_slice(embedded.embeddings.row(i));
        labels.push(dataset.labels[i]);
    }
    nearest_centre_histogram(&features, &labels, bins, range)
}

fn cmd_eval(
    config_path: &Path,
    overrides: &[String],
    checkpoint_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    compare: Option<&Path>,
) -> Result<i32> {
    let config = config::load(config_path, overrides)?;
    let ev = config.eval.clone();
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let dataset = load_dataset(data_path)?;
    std::fs::create_dir_all(out_dir)?;

    let embedded = embed_checkpoint(&checkpoint, &dataset, ev.metric)?;
    let mut report = EvalReport::empty();
    report.config_echo = config.echo_json();

    // Verification + ROC over heldout pairs.
    if ev.num_pos > 0 && ev.num_neg > 0 {
        let pairs = make_pairs(&dataset, Split::Heldout, ev.num_pos, ev.num_neg, ev.pair_seed)?;
        let dim = embedded.embeddings.cols();
        let n = pairs.pairs.len();
        let mut a = Matrix::zeros(n, dim);
        let mut b = Matrix::zeros(n, dim);
        let mut flags = Vec::with_capacity(n);
        let mut pos_scores = Vec::new();
        let mut neg_scores = Vec::new();
        for (r, &(i, j, same)) in pairs.pairs.iter().enumerate() {
            a.row_mut(r).copy_from_slice(embedded.embeddings.row(i));
            b.row_mut(r).copy_from_slice(embedded.embeddings.row(j));
            flags.push(same);
            let d = sq_dist(embedded.embeddings.row(i), embedded.embeddings.row(j));
            if same {
                pos_scores.push(d);
            } else {
                neg_scores.push(d);
            }
        }
        let (accuracy, threshold) = verification_accuracy(&a, &b, &flags, ev.folds)?;
        report.verification_accuracy = Some(accuracy);
        report.verification_threshold = Some(threshold);

        let curve = roc(&pos_scores, &neg_scores)?;
        let mut vr = BTreeMap::new();
        for &level in &ev.far_levels {
            vr.insert(format!("{level}"), vr_at_far(&curve, level)?);
        }
        write_csv(
            &out_dir.join("roc.csv"),
            "far,tar",
            curve.points.iter().map(|(f, t)| format!("{f},{t}")),
        )?;
        report.roc = Some(curve);
        report.vr_at_far = vr;
        println!("verification_accuracy={accuracy}");
    }

    if ev.cmc_probe_ids > 0 {
        let protocol =
            make_ident_protocol(&dataset, ev.cmc_probe_ids, ev.cmc_distractors, ev.protocol_seed)?;
        let curve = cmc(&protocol, &embedded.embeddings)?;
        write_csv(
            &out_dir.join("cmc.csv"),
            "rank,rate",
            curve
                .rank_rates
                .iter()
                .enumerate()
                .map(|(r, rate)| format!("{},{rate}", r + 1)),
        )?;
        println!("rank1={}", curve.rank_rates[0]);
        report.cmc = Some(curve);
    }

    if let Some(range) = ev.hist_range {
        let hist = heldout_histogram(&dataset, &embedded, ev.hist_bins, range)?;
        write_csv(
            &out_dir.join("hist.csv"),
            "bin_lo,bin_hi,count",
            hist.counts
                .iter()
                .enumerate()
                .map(|(b, c)| format!("{},{},{c}", hist.bin_edges[b], hist.bin_edges[b + 1])),
        )?;
        if let Some(other_path) = compare {
            let other = Checkpoint::load(other_path)?;
            let other_embedded = embed_checkpoint(&other, &dataset, ev.metric)?;
            let other_hist = heldout_histogram(&dataset, &other_embedded, ev.hist_bins, range)?;
            let deltas = compare_histograms(&hist, &other_hist)?;
            write_csv(
                &out_dir.join("hist_delta.csv"),
                "bin_lo,bin_hi,count,delta",
                deltas.iter().enumerate().map(|(b, d)| {
                    format!(
                        "{},{},{},{d}",
                        hist.bin_edges[b],
                        hist.bin_edges[b + 1],
                        other_hist.counts[b]
                    )
                }),
            )?;
        }
        report.histogram = Some(hist);
    }

    let report_path = out_dir.join("report.json");
    std::fs::write(
        &report_path,
        format!("{:#}\n", serde_json::to_value(&report).unwrap()),
    )?;
    println!("report: {}", report_path.display());
    Ok(0)
}

fn cmd_sweep(
    config_path: &Path,
    overrides: &[String],
    data_path: &Path,
    out_dir: &Path,
) -> Result<i32> {
    let config = config::load(config_path, overrides)?;
    let section = config.sweep()?.clone();
    let base: TrainConfig = config.train()?.clone();
    let dataset = load_dataset(data_path)?;
    std::fs::create_dir_all(out_dir)?;

    let eval_opts = SweepEvalOptions {
        folds: config.eval.folds,
        num_pos: config.eval.num_pos,
        num_neg: config.eval.num_neg,
        pair_seed: config.eval.pair_seed,
    };
    let table = sweep(
        &base,
        section.parameter,
        &section.values,
        &section.seeds,
        &dataset,
        &eval_opts,
    )?;

    let param_name = match section.parameter {
        mml_core::evalkit::SweepParameter::Margin => "margin",
        mml_core::evalkit::SweepParameter::Beta => "beta",
    };
    write_csv(
        &out_dir.join("sweep.csv"),
        "parameter,value,seed,accuracy,error",
        table.cells.iter().map(|c| {
            format!(
                "{param_name},{},{},{},{}",
                c.value,
                c.seed,
                c.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                c.error.clone().unwrap_or_default()
            )
        }),
    )?;
    write_csv(
        &out_dir.join("means.csv"),
        "value,mean_accuracy",
        table.value_means.iter().map(|(v, m)| format!("{v},{m}")),
    )?;
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    for cell in &table.cells {
        let cell_path = cells_dir.join(format!("{param_name}_{}_seed_{}.json", cell.value, cell.seed));
        let body = serde_json::json!({
            "config": config.echo_json(),
            "cell": cell,
        });
        std::fs::write(&cell_path, format!("{:#}\n", body))?;
    }
    write_meta(
        &sidecar(&out_dir.join("sweep.csv"), ".meta.json"),
        &config,
        serde_json::json!({ "cells": table.cells.len() }),
    )?;

    let failures = table.cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "sweep complete: {} cells, {failures} failed; table: {}",
        table.cells.len(),
        out_dir.join("sweep.csv").display()
    );
    if failures == table.cells.len() {
        eprintln!("error: every sweep cell failed");
        return Ok(EXIT_DIVERGENCE);
    }
    Ok(0)
}

fn cmd_gradcheck(
    config_path: &Path,
    overrides: &[String],
    data_path: &Path,
    opts: GradCheckOptions,
) -> Result<i32> {
    let config = config::load(config_path, overrides)?;
    let base = config.train()?.clone();
    let dataset = load_dataset(data_path)?;

    // One check per active loss component (coefficients of the others
    // zeroed), then the composed objective as configured.
    let mut variants: Vec<(&str, TrainConfig)> = Vec::new();
    let mut softmax_only = base.clone();
    softmax_only.scheme = Scheme::I;
    variants.push(("softmax", softmax_only));
    if base.scheme.uses_centres() {
        let mut centre = base.clone();
        centre.scheme = Scheme::II;
        variants.push(("centre", centre));
    }
    if base.scheme.uses_mml() {
        variants.push(("mml+composed", base.clone()));
    } else if base.scheme.uses_centres() {
        variants.push(("composed", base.clone()));
    }

    let mut worst = 0.0f64;
    let mut failed = false;
    for (name, train_config) in &variants {
        let report = gradcheck(train_config, &dataset, &opts)?;
        println!(
            "{name}: max_rel_err={} over {} samples (tolerance {})",
            report.max_rel_err, report.samples, report.tolerance
        );
        worst = worst.max(report.max_rel_err);
        if !report.passed() {
            failed = true;
            for f in report.failures.iter().take(5) {
                eprintln!(
                    "  coordinate {}: analytic={} numeric={} rel_err={}",
                    f.coordinate, f.analytic, f.numeric, f.rel_err
                );
            }
        }
    }
    if failed {
        eprintln!("error: gradient check failed (worst rel err {worst})");
        return Ok(EXIT_GRADCHECK);
    }
    println!("gradient check passed (worst rel err {worst})");
    Ok(0)
}
