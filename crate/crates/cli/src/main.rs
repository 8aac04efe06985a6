use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use diffumin::data::{generate, generate_to_file, load_with_schema};
use diffumin::harness::{
    ablate, content_hash, dataset_hash, dump_embeddings, evaluate, grad_check, parse_variants,
    rela_impr, split_holdout, train, RunConfig, RunManifest, GRAD_CHECK_TOLERANCE,
};
use diffumin::model::{Model, ModelConfig};
use diffumin::{Error, Result};

const SEED_ENV: &str = "DIFFUMIN_SEED";

#[derive(Parser)]
#[command(name = "diffumin", version, about = "Multi-interest CTR modelling over long behavior sequences")]
struct Cli {
    /// Overrides every seed in the configuration (takes precedence over DIFFUMIN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train for one epoch and write a checkpoint plus manifest.
    Train {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score a dataset with a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline_auc: Option<f64>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Write a run manifest here.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train and score each variant on a held-out split.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "Full,A,B,C,D,E")]
        variants: String,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group.
    GradCheck {
        config: PathBuf,
        /// Variants to check; defaults to the configured one.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 2)]
        examples: usize,
        #[arg(long, default_value_t = 64)]
        max_entries: usize,
    },
    /// Write per-example channels and interests as JSONL.
    DumpEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let seed = seed_override(cli.seed)?;
    match cli.command {
        Command::GenData { config, output } => {
            let cfg = read_config(&config, seed)?;
            let n = generate_to_file(&cfg.data, &output)?;
            let bytes = std::fs::read(&output).map_err(io_err(&output))?;
            print_json(&json!({
                "examples": n,
                "seed": cfg.data.seed,
                "dataset_hash": content_hash(&bytes),
            }));
        }
        Command::Train { config, data, output } => {
            let started = Instant::now();
            let cfg = read_config(&config, seed)?;
            let schema = cfg.data.schema();
            let examples = load_with_schema(&data, &schema)?;
            let outcome = train(&cfg.model, &schema, &examples, &cfg.train)?;
            outcome.model.save(&output)?;
            let ckpt = std::fs::read(&output).map_err(io_err(&output))?;
            let last = outcome.losses.last().map(|l| l.total);
            let mut metrics = BTreeMap::new();
            metrics.insert("steps".into(), json!(outcome.losses.len()));
            metrics.insert("final_loss".into(), json!(last));
            let manifest = RunManifest {
                command: "train".into(),
                config: serde_json::to_value(&cfg).expect("config serializes"),
                seed: cfg.train.seed,
                dataset_hash: dataset_hash(&examples),
                examples: examples.len(),
                metrics,
                wall_time_secs: started.elapsed().as_secs_f64(),
                checkpoint_hash: Some(content_hash(&ckpt)),
                losses: outcome.losses,
            };
            manifest.write(&manifest_path(&output))?;
            print_json(&json!({
                "steps": manifest.metrics["steps"],
                "final_loss": last,
                "checkpoint_hash": manifest.checkpoint_hash,
                "manifest": manifest_path(&output),
            }));
        }
        Command::Eval {
            checkpoint,
            data,
            baseline_auc,
            batch_size,
            manifest,
        } => {
            let started = Instant::now();
            let model = Model::load(&checkpoint)?;
            let examples = load_with_schema(&data, &model.schema)?;
            let eval_seed = seed.unwrap_or(1);
            let ev = evaluate(&model, &examples, eval_seed, batch_size)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("auc".to_string(), json!(ev.auc));
            if let Some(base) = baseline_auc {
                metrics.insert("rela_impr".into(), json!(rela_impr(ev.auc, base)?));
                metrics.insert("baseline_auc".into(), json!(base));
            }
            metrics.insert("diffusion_loss_calls".into(), json!(ev.calls.loss));
            metrics.insert("diffusion_sample_calls".into(), json!(ev.calls.sample));
            if let Some(path) = manifest {
                let ckpt = std::fs::read(&checkpoint).map_err(io_err(&checkpoint))?;
                RunManifest {
                    command: "eval".into(),
                    config: serde_json::to_value(&model.config).expect("config serializes"),
                    seed: eval_seed,
                    dataset_hash: dataset_hash(&examples),
                    examples: examples.len(),
                    metrics: metrics.clone(),
                    wall_time_secs: started.elapsed().as_secs_f64(),
                    checkpoint_hash: Some(content_hash(&ckpt)),
                    losses: Vec::new(),
                }
                .write(&path)?;
            }
            print_json(&serde_json::to_value(&metrics).expect("metrics serialize"));
        }
        Command::Ablate {
            config,
            data,
            variants,
            json: json_out,
        } => {
            let cfg = read_config(&config, seed)?;
            let variants = parse_variants(&variants)?;
            let schema = cfg.data.schema();
            let examples = load_with_schema(&data, &schema)?;
            let report = if variants.is_empty() {
                Default::default()
            } else {
                let (train_set, test_set) = split_holdout(&examples, cfg.train.test_size)?;
                ablate(&cfg.model, &schema, train_set, test_set, &cfg.train, &variants)?
            };
            print!("{}", report.to_table());
            if let Some(path) = json_out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
            }
        }
        Command::GradCheck {
            config,
            variants,
            examples,
            max_entries,
        } => {
            let mut cfg = read_config(&config, seed)?;
            cfg.data.users = examples;
            let batch = generate(&cfg.data)?;
            let variants = match variants {
                Some(list) => parse_variants(&list)?,
                None => vec![cfg.model.variant],
            };
            let mut worst: f64 = 0.0;
            for v in variants {
                let mc = ModelConfig {
                    variant: v,
                    ..cfg.model.clone()
                };
                let report = grad_check(&mc, &cfg.data.schema(), &batch, cfg.train.seed, max_entries)?;
                let err = report.max_relative_error();
                worst = worst.max(err);
                println!(
                    "{:<5} {} max_rel_err={err:.3e} groups={}",
                    v.tag(),
                    if report.passed() { "PASS" } else { "FAIL" },
                    report.groups.len()
                );
            }
            if worst >= GRAD_CHECK_TOLERANCE {
                return Err(Error::Numerical(format!(
                    "gradient check relative error {worst:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}"
                )));
            }
        }
        Command::DumpEmbeddings {
            checkpoint,
            data,
            output,
            batch_size,
        } => {
            let model = Model::load(&checkpoint)?;
            let examples = load_with_schema(&data, &model.schema)?;
            let file = File::create(&output).map_err(io_err(&output))?;
            let mut w = BufWriter::new(file);
            let n = dump_embeddings(&model, &examples, seed.unwrap_or(1), batch_size, &mut w)?;
            std::io::Write::flush(&mut w).map_err(io_err(&output))?;
            print_json(&json!({ "examples": n, "output": output }));
        }
    }
    Ok(())
}
