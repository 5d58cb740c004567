//! `stosa` command line: dataset preparation, training, evaluation,
//! comparison, recommendation, exports and gradient checking.
//!
//! Every subcommand is deterministic under a fixed seed and fixed inputs.
//! Failures print a machine-readable JSON object on stderr and exit nonzero.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use stosa_core::{
    build_sequences, checkpoint, compare_reports, evaluate, export, k_core_filter,
    k_core_filter_iterative, parse_interactions, top_n, training, BucketAxis, BucketSpec,
    CoreError, EvalSplit, ModelParams, NormMode, RunConfig, SequenceDataset, Variant,
};

#[derive(Parser)]
#[command(name = "stosa", version, about = "Sequential recommender with stochastic embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Stosa,
    DotBaseline,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Stosa => Variant::Stosa,
            VariantArg::DotBaseline => Variant::DotBaseline,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormModeArg {
    Softmax,
    Ratio,
}

impl From<NormModeArg> for NormMode {
    fn from(v: NormModeArg) -> NormMode {
        match v {
            NormModeArg::Softmax => NormMode::Softmax,
            NormModeArg::Ratio => NormMode::Ratio,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KCoreModeArg {
    UserOnly,
    UserItemIterative,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WhatArg {
    Attention,
    Embeddings,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

/// Flag overrides applied on top of the config file; flags win.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    norm_mode: Option<NormModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Rank the full vocabulary instead of excluding seen items.
    #[arg(long)]
    rank_all: bool,
    /// Acknowledge hyperparameters outside the standard search ranges.
    #[arg(long)]
    allow_nonstandard: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.variant {
            cfg.variant = v.into();
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.norm_mode {
            cfg.norm_mode = v.into();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if self.rank_all {
            cfg.exclude_seen = false;
        }
        if self.allow_nonstandard {
            cfg.allow_nonstandard = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw TSV interaction log into a split manifest plus stats.
    Prepare {
        /// TSV file: user<TAB>item<TAB>timestamp per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Minimum interactions per user.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = KCoreModeArg::UserOnly)]
        kcore_mode: KCoreModeArg,
    },
    /// Train a model on a prepared manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Flat TOML config file; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint with full ranking.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Comma-separated cutoffs, e.g. 1,5.
        #[arg(long)]
        ns: Option<String>,
        #[arg(long, value_enum)]
        bucket_axis: Option<BucketAxisArg>,
        /// Comma-separated bucket edges; defaults to empirical quartiles.
        #[arg(long)]
        bucket_edges: Option<String>,
        #[arg(long)]
        rank_all: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write per-user ranks as CSV.
        #[arg(long)]
        ranks_csv: Option<PathBuf>,
    },
    /// Train and evaluate two configs side by side on the same manifest.
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, value_enum)]
        bucket_axis: Option<BucketAxisArg>,
        #[arg(long)]
        bucket_edges: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-N next items for a user, one JSON line per item.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Keep already-seen items in the candidate set.
        #[arg(long)]
        include_seen: bool,
    },
    /// Export attention weights or item embeddings as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: WhatArg,
        /// Required for attention export.
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Verify analytic gradients against central finite differences on a
    /// small model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = VariantArg::Stosa)]
        variant: VariantArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BucketAxisArg {
    SequenceLength,
    ItemPopularity,
}

impl From<BucketAxisArg> for BucketAxis {
    fn from(v: BucketAxisArg) -> BucketAxis {
        match v {
            BucketAxisArg::SequenceLength => BucketAxis::SequenceLength,
            BucketAxisArg::ItemPopularity => BucketAxis::ItemPopularity,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    json!({"error": e.to_string(), "kind": "usage"})
                );
                std::process::exit(2);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", json!({"error": e.to_string(), "kind": e.kind()}));
        std::process::exit(1);
    }
}

fn load_manifest(path: &Path) -> Result<SequenceDataset, CoreError> {
    let file = fs::File::open(path)?;
    SequenceDataset::read_manifest(BufReader::new(file))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CoreError> {
    match path {
        Some(p) => RunConfig::from_toml_str(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn parse_ns(s: &str) -> Result<Vec<usize>, CoreError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::Config(format!("bad cutoff `{t}`")))
        })
        .collect()
}

fn bucket_spec(
    dataset: &SequenceDataset,
    axis: Option<BucketAxisArg>,
    edges: Option<&str>,
) -> Result<Option<BucketSpec>, CoreError> {
    let Some(axis) = axis else { return Ok(None) };
    let axis: BucketAxis = axis.into();
    let edges = match edges {
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| CoreError::Config(format!("bad bucket edge `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            // inferred default: empirical quartiles of the axis values
            let values: Vec<usize> = match axis {
                BucketAxis::SequenceLength => (1..=dataset.num_users())
                    .map(|u| dataset.train_portion(u).len())
                    .collect(),
                BucketAxis::ItemPopularity => {
                    let pop = dataset.train_popularity();
                    (1..=dataset.num_items())
                        .map(|i| pop[i])
                        .filter(|&p| p >= 1)
                        .collect()
                }
            };
            stosa_core::data::quartile_edges(&values)
        }
    };
    let spec = BucketSpec { axis, edges };
    spec.validate()?;
    Ok(Some(spec))
}

fn train_and_eval(
    dataset: &SequenceDataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    bucket: Option<&BucketSpec>,
) -> Result<(ModelParams, training::TrainOutcome, stosa_core::RankingReport), CoreError> {
    use std::io::Write;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let outcome = training::train(dataset, cfg, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
        eprintln!("{line}");
    })?;
    let report = evaluate(&outcome.model, dataset, EvalSplit::Test, bucket)?;
    let model = outcome.model.clone();
    Ok((model, outcome, report))
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Prepare {
            input,
            out_dir,
            k,
            kcore_mode,
        } => {
            let file = fs::File::open(&input)?;
            let parsed = parse_interactions(BufReader::new(file))?;
            for (line, reason) in &parsed.malformed {
                eprintln!(
                    "{}",
                    json!({"warning": "malformed line", "line": line, "reason": reason})
                );
            }
            let filtered = match kcore_mode {
                KCoreModeArg::UserOnly => k_core_filter(&parsed.interactions, k),
                KCoreModeArg::UserItemIterative => {
                    k_core_filter_iterative(&parsed.interactions, k)
                }
            };
            let report = build_sequences(&filtered)?;
            let dataset = report.dataset;
            if dataset.num_users() == 0 {
                eprintln!(
                    "{}",
                    json!({"warning": "no users survive filtering; manifest is empty"})
                );
            }
            fs::create_dir_all(&out_dir)?;
            let manifest_path = out_dir.join("manifest.tsv");
            let mut buf = Vec::new();
            dataset.write_manifest(&mut buf)?;
            fs::write(&manifest_path, buf)?;
            let stats = dataset.stats();
            let stats_json = json!({
                "users": stats.users,
                "items": stats.items,
                "interactions": stats.interactions,
                "density": stats.density,
                "avg_interactions_per_user": stats.avg_interactions_per_user,
                "malformed_lines": parsed.malformed.len(),
                "rejected_short_users": report.rejected_users,
            });
            fs::write(
                out_dir.join("stats.json"),
                serde_json::to_string_pretty(&stats_json).expect("stats serialize"),
            )?;
            println!(
                "{}",
                json!({"manifest": manifest_path, "stats": stats_json})
            );
            Ok(())
        }
        Command::Train {
            manifest,
            out_dir,
            config,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            overrides.apply(&mut cfg);
            cfg.manifest = Some(manifest.clone());
            cfg.out_dir = Some(out_dir.clone());
            cfg.validate()?;
            let dataset = load_manifest(&manifest)?;
            let (model, outcome, report) =
                train_and_eval(&dataset, &cfg, Some(&out_dir), None)?;
            let ckpt_path = out_dir.join("model.ckpt");
            checkpoint::save(&model, &ckpt_path)?;
            fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
            println!(
                "{}",
                json!({
                    "checkpoint": ckpt_path,
                    "param_count": model.param_count(),
                    "best_epoch": outcome.best_epoch,
                    "best_val_mrr": outcome.best_val_mrr,
                    "stop": outcome.stop,
                    "test": report.metrics,
                })
            );
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            manifest,
            split,
            ns,
            bucket_axis,
            bucket_edges,
            rank_all,
            report,
            ranks_csv,
        } => {
            let mut model = checkpoint::load(&ckpt)?;
            if let Some(ns) = ns.as_deref() {
                model.config.eval_ns = parse_ns(ns)?;
            }
            if rank_all {
                model.config.exclude_seen = false;
            }
            let dataset = load_manifest(&manifest)?;
            let spec = bucket_spec(&dataset, bucket_axis, bucket_edges.as_deref())?;
            let split = match split {
                SplitArg::Validation => EvalSplit::Validation,
                SplitArg::Test => EvalSplit::Test,
            };
            let result = evaluate(&model, &dataset, split, spec.as_ref())?;
            let out = serde_json::to_string_pretty(&result).expect("report serializes");
            match report {
                Some(path) => fs::write(path, out)?,
                None => println!("{out}"),
            }
            if let Some(path) = ranks_csv {
                fs::write(path, stosa_core::evaluation::ranks_to_csv(&result))?;
            }
            Ok(())
        }
        Command::Compare {
            manifest,
            config_a,
            config_b,
            bucket_axis,
            bucket_edges,
            out,
        } => {
            let dataset = load_manifest(&manifest)?;
            let spec = bucket_spec(&dataset, bucket_axis, bucket_edges.as_deref())?;
            let cfg_a = load_config(Some(&config_a))?;
            let cfg_b = load_config(Some(&config_b))?;
            let (_, outcome_a, report_a) =
                train_and_eval(&dataset, &cfg_a, None, spec.as_ref())?;
            let (_, outcome_b, report_b) =
                train_and_eval(&dataset, &cfg_b, None, spec.as_ref())?;
            let cmp = compare_reports(&report_a, &report_b);
            let payload = json!({
                "a": {"config": cfg_a, "best_epoch": outcome_a.best_epoch, "report": report_a},
                "b": {"config": cfg_b, "best_epoch": outcome_b.best_epoch, "report": report_b},
                "comparison": cmp,
            });
            let text = serde_json::to_string_pretty(&payload).expect("comparison serializes");
            match out {
                Some(path) => fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Recommend {
            checkpoint: ckpt,
            manifest,
            user,
            n,
            include_seen,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = load_manifest(&manifest)?;
            let u = dataset
                .user_id(&user)
                .ok_or_else(|| CoreError::Eval(format!("unknown user `{user}`")))?;
            let scores = stosa_core::predict_scores(&model, dataset.sequence(u))?;
            let exclude = if include_seen {
                Default::default()
            } else {
                dataset.interacted(u)
            };
            for (rank, (item, score)) in top_n(&scores, n, &exclude).iter().enumerate() {
                println!(
                    "{}",
                    json!({
                        "rank": rank + 1,
                        "item": dataset.item_name(*item),
                        "item_id": item,
                        "score": score,
                    })
                );
            }
            Ok(())
        }
        Command::Export {
            checkpoint: ckpt,
            manifest,
            what,
            user,
            out_dir,
        } => {
            let model = checkpoint::load(&ckpt)?;
            match what {
                WhatArg::Attention => {
                    let manifest = manifest.ok_or_else(|| {
                        CoreError::Config("attention export needs --manifest".into())
                    })?;
                    let user = user.ok_or_else(|| {
                        CoreError::Config("attention export needs --user".into())
                    })?;
                    let dataset = load_manifest(&manifest)?;
                    let files = export::export_attention(&model, &dataset, &user, &out_dir)?;
                    println!("{}", json!({"written": files}));
                }
                WhatArg::Embeddings => {
                    let path = out_dir.join("embeddings.csv");
                    export::export_embeddings(&model, &path)?;
                    println!("{}", json!({"written": [path]}));
                }
            }
            Ok(())
        }
        Command::Gradcheck {
            d,
            n,
            layers,
            vocab,
            lambda,
            beta,
            h,
            seed,
            variant,
        } => {
            let cfg = RunConfig {
                variant: variant.into(),
                d,
                n,
                layers,
                heads: 1,
                dropout: 0.0,
                attention_dropout: false,
                seed,
                allow_nonstandard: true,
                ..Default::default()
            };
            cfg.validate()?;
            let model = ModelParams::init(&cfg, vocab)?;
            let batch = gradcheck_batch(&model);
            let mut worst = 0.0f64;
            let mut results = Vec::new();
            for lam in [0.0, lambda] {
                let rep = training::gradient_check(&model, &batch, lam, beta, h)?;
                worst = worst.max(rep.max_rel_err);
                results.push(json!({
                    "lambda": lam,
                    "max_rel_err": rep.max_rel_err,
                    "worst_param": rep.worst_param,
                }));
            }
            println!(
                "{}",
                json!({"checks": results, "max_rel_err": worst, "pass": worst < 1e-4})
            );
            if worst >= 1e-4 {
                return Err(CoreError::Numeric(format!(
                    "gradient check failed: max relative error {worst}"
                )));
            }
            Ok(())
        }
    }
}

/// Three deterministic windows over the gradcheck vocabulary.
fn gradcheck_batch(model: &ModelParams) -> Vec<training::StepInput> {
    let vocab = model.vocab as u32;
    let seqs: Vec<Vec<u32>> = vec![
        (1..=4).map(|i| (i % vocab) + 1).collect(),
        (2..=6).map(|i| ((i * 3) % vocab) + 1).collect(),
        (0..3).map(|i| ((i * 5 + 2) % vocab) + 1).collect(),
    ];
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let window = stosa_core::make_window(s, model.config.n).expect("probe window");
            let negatives = window
                .inputs
                .iter()
                .enumerate()
                .map(|(t, _)| ((t as u32 + i as u32 * 2) % vocab) + 1)
                .collect();
            training::StepInput { window, negatives }
        })
        .collect()
}
