use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fsnids::artifact::{write_atomic, DirLock};
use fsnids::config::{Profile, RunConfig, RunSettings};
use fsnids::evaluator::render_table;
use fsnids::flowset::TokenizedDataset;
use fsnids::pipeline::{self, IngestSummary, TrainedModel};
use fsnids::synthgen::{generate_corpus, shift_domain};
use fsnids::trainer::{load_checkpoint, save_checkpoint, LossTrace};
use fsnids::Error;

#[derive(Parser, Debug)]
#[command(name = "fsnids", version, about = "Flow-sequence intrusion detection")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Derive every seed from the base seed alone (default true).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Output artifact path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse CIDDS CSV files into a discretized flow cache.
    Ingest {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Skip malformed rows instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Pretrain the encoder on the benign flows of a cache.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on labeled flows.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on a cache and write a metrics report.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also train the single-flow baseline on this cache and report it
        /// to `<out>-baseline.json`.
        #[arg(long)]
        baseline_train: Option<PathBuf>,
    },
    /// Per-flow labels and malicious probabilities for a CSV file.
    Predict {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic CIDDS-schema corpus and its ground-truth sidecar.
    Synth {
        /// Apply the configured domain shift before writing.
        #[arg(long)]
        shift: bool,
        #[arg(long)]
        flows: Option<usize>,
        /// Extra flows generated after the first `flows` and written to
        /// `<out>-test.csv`, together with a domain-shifted copy
        /// `<out>-test-shifted.csv`.
        #[arg(long, default_value_t = 0)]
        test_flows: usize,
        #[arg(long)]
        ambiguous: Option<f64>,
    },
    /// Check schedule and data plumbing on a prefix of the input.
    DryRun {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.deterministic {
        cfg.deterministic = d;
    }
    Ok(cfg)
}

fn lock_parent(path: &Path) -> Result<DirLock> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(DirLock::acquire(&dir)?)
}

fn load_flowset(path: &Path, settings: &RunSettings, role: &str) -> Result<TokenizedDataset> {
    let data = TokenizedDataset::load(path).with_context(|| format!("{role} flow cache {}", path.display()))?;
    data.check_vocabulary(&settings.vocab)?;
    Ok(data)
}

/// `dir/name.csv` -> `dir/name-<tag>.csv`
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map_or(String::new(), |e| format!(".{}", e.to_string_lossy()));
    path.with_file_name(format!("{stem}-{tag}{ext}"))
}

fn trace_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("trace.tsv")
}

fn save_model(model: &TrainedModel, settings: &RunSettings, path: &Path) -> Result<()> {
    save_checkpoint(&model.params, &model.manifest, &settings.vocab, path)?;
    let mut trace = Vec::new();
    model.trace.write_to(&mut trace)?;
    write_atomic(&trace_path(path), &trace)?;
    Ok(())
}

fn load_model(path: &Path, settings: &RunSettings, role: &str) -> Result<TrainedModel> {
    let (params, manifest, _) =
        load_checkpoint(path, Some(&settings.vocab)).with_context(|| format!("{role} checkpoint {}", path.display()))?;
    let trace = match std::fs::read(trace_path(path)) {
        Ok(bytes) => LossTrace::read_from(bytes.as_slice())?,
        Err(_) => LossTrace::default(),
    };
    Ok(TrainedModel { params, manifest, trace })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let settings = cfg.resolve()?;
    let paths = &settings.paths;
    match &cli.command {
        Command::Ingest { inputs, lenient } => {
            let out = cli.out.clone().unwrap_or_else(|| {
                let stem = inputs[0].file_stem().map_or("flows".into(), |s| s.to_string_lossy().into_owned());
                paths.cache.join(format!("{stem}.flowset"))
            });
            let data = pipeline::read_csvs(inputs, !lenient)?;
            let summary = IngestSummary::from_dataset(&data);
            let tokens = TokenizedDataset::from_dataset(&settings.vocab, &data, &pipeline::source_name(inputs))?;
            let _lock = lock_parent(&out)?;
            write_atomic(&pipeline::flowset_vocab_path(&out), settings.vocab.manifest().as_bytes())?;
            tokens.save(&out)?;
            print!("{}", summary.render());
            println!("wrote {} ({} flows, digest {})", out.display(), tokens.len(), tokens.digest());
        }
        Command::Pretrain { data } => {
            let data_path = data.clone().unwrap_or_else(|| paths.cache.join("train.flowset"));
            let out = cli.out.clone().unwrap_or_else(|| paths.checkpoints.join("pretrained.ckpt"));
            let data = load_flowset(&data_path, &settings, "pretraining")?;
            let _lock = lock_parent(&out)?;
            let model = pipeline::pretrain(&settings, &data)?;
            save_model(&model, &settings, &out)?;
            println!(
                "pretrained {} iterations, final MLM loss {:.5}; wrote {}",
                model.trace.records.len(),
                model.trace.records.last().map_or(f64::NAN, |r| r.loss),
                out.display()
            );
        }
        Command::Finetune { data, from } => {
            let data_path = data.clone().unwrap_or_else(|| paths.cache.join("train.flowset"));
            let from = from.clone().unwrap_or_else(|| paths.checkpoints.join("pretrained.ckpt"));
            let out = cli.out.clone().unwrap_or_else(|| paths.checkpoints.join("finetuned.ckpt"));
            let pretrained = load_model(&from, &settings, "pretrained")?;
            let data = load_flowset(&data_path, &settings, "fine-tuning")?;
            let _lock = lock_parent(&out)?;
            let model = pipeline::finetune(&settings, pretrained, &data)?;
            save_model(&model, &settings, &out)?;
            for s in &model.manifest.stages {
                println!("{:<13} {:>5} iterations  final loss {:.5}", s.name, s.iterations, s.final_loss.unwrap_or(f64::NAN));
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            data,
            checkpoint,
            baseline_train,
        } => {
            let data_path = data.clone().unwrap_or_else(|| paths.cache.join("test.flowset"));
            let ckpt = checkpoint.clone().unwrap_or_else(|| paths.checkpoints.join("finetuned.ckpt"));
            let out = cli.out.clone().unwrap_or_else(|| paths.reports.join("metrics.json"));
            let model = load_model(&ckpt, &settings, "fine-tuned")?;
            let data = load_flowset(&data_path, &settings, "evaluation")?;
            let id = format!(
                "{} ({})",
                ckpt.file_name().unwrap_or_default().to_string_lossy(),
                pipeline::file_digest(&ckpt)?
            );
            let ev = pipeline::evaluate(&settings, &model.params, &settings.vocab, &data, &id)?;
            let baseline = match baseline_train {
                Some(p) => Some(pipeline::baseline_report(
                    &settings.vocab,
                    &load_flowset(p, &settings, "baseline training")?,
                    &data,
                )?),
                None => None,
            };
            let _lock = lock_parent(&out)?;
            write_atomic(&out, ev.report.to_json().as_bytes())?;
            let mut rows = vec![("sequence model", &ev.report.metrics)];
            if let Some(b) = &baseline {
                write_atomic(&sibling(&out, "baseline"), b.to_json().as_bytes())?;
                rows.push(("single-flow baseline", &b.metrics));
            }
            print!("{}", render_table(&format!("Test on {}", data.source), &rows));
            println!("wrote {}", out.display());
        }
        Command::Predict { input, checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| paths.checkpoints.join("finetuned.ckpt"));
            let (params, _, vocab) =
                load_checkpoint(&ckpt, None).with_context(|| format!("fine-tuned checkpoint {}", ckpt.display()))?;
            let data = pipeline::read_csvs(std::slice::from_ref(input), true)?;
            let p = pipeline::predict_records(&params, &vocab, &data, settings.test_seq_len)?;
            let text = pipeline::render_predictions(&p);
            match &cli.out {
                Some(out) => {
                    let _lock = lock_parent(out)?;
                    write_atomic(out, text.as_bytes())?;
                }
                None => print!("{text}"),
            }
        }
        Command::Synth {
            shift,
            flows,
            test_flows,
            ambiguous,
        } => {
            let mut synth = settings.synth.clone();
            if let Some(n) = flows {
                synth.total_flows = *n;
            }
            if let Some(a) = ambiguous {
                synth.ambiguous_fraction = *a;
            }
            let train_flows = synth.total_flows;
            synth.total_flows += test_flows;
            let out = cli.out.clone().unwrap_or_else(|| paths.data.join("synth.csv"));
            let mut corpus = generate_corpus(&synth)?;
            if *shift {
                let (shifted, stats) = shift_domain(&corpus, &synth.domain)?;
                println!("shifted: {} flows changed bins, {} values clamped", stats.flows_rebinned, stats.clamped);
                corpus = shifted;
            }
            let mut outputs = vec![(out.clone(), corpus.slice(0..train_flows))];
            if *test_flows > 0 {
                let test = corpus.slice(train_flows..synth.total_flows);
                let (shifted, _) = shift_domain(&test, &synth.domain)?;
                outputs.push((sibling(&out, "test"), test));
                outputs.push((sibling(&out, "test-shifted"), shifted));
            }
            let _lock = lock_parent(&out)?;
            for (path, part) in &outputs {
                part.write(path)?;
                let (benign, malicious) = part.dataset.label_counts();
                println!(
                    "wrote {} ({} flows: {benign} benign, {malicious} malicious, {} ambiguous, {} bursts)",
                    path.display(),
                    part.dataset.len(),
                    part.stats.ambiguous_flows,
                    part.stats.bursts
                );
            }
        }
        Command::DryRun { inputs, fraction } => {
            let data = pipeline::read_csvs(inputs, false)?;
            let report = pipeline::dry_run(&settings, &data, *fraction)?;
            print!("{}", report.render());
            println!("dry run ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::MissingArtifact(p)) = e.downcast_ref::<Error>() {
                eprintln!("missing prerequisite: {}", p.display());
            }
            ExitCode::FAILURE
        }
    }
}
