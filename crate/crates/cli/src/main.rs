use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use scrpo::error_pool::{Admission, ErrorPool, PoolConfig};
use scrpo::gradcheck::{gradcheck, GradcheckConfig};
use scrpo::policy::load_policy;
use scrpo::report::{comparison_table, export, load_summaries, Format, RunSummary};
use scrpo::trainer::{
    evaluate_policy, read_metrics, resume, run_ablation, train_until, RunPaths, TrainConfig, Variant,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;

/// Group-relative policy optimization with self-correction, on arithmetic.
#[derive(Parser)]
#[command(name = "scrpo", version)]
struct Cli {
    /// Root for run directories when --out is not given.
    #[arg(long, global = true, env = "SCRPO_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; the desk profile is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. --set vbf.acc_low=0.4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> scrpo::Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::desk(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints and the error pool.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this iteration, leaving the run resumable.
        #[arg(long)]
        halt_after: Option<u64>,
    },
    /// Score a saved policy on the held-out problems.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        /// Sampled attempts per problem; defaults to trainer.eval_k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the full method and its ablations with identical seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seeds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Variants, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "scrpo,no_vbf,no_mask,grpo_only")]
        variants: Vec<String>,
    },
    /// Finite-difference check of both losses; exits 3 above the threshold.
    Gradcheck {
        /// Seeds to check (repeatable).
        #[arg(long = "seed", default_values_t = vec![0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Scale the analytic gradient to simulate a broken backward pass.
        #[arg(long, default_value_t = 1.0, hide = true)]
        corrupt_scale: f64,
    },
    /// Summarize an error-pool file.
    InspectPool {
        #[arg(long)]
        pool: PathBuf,
        /// Records to print, most replayed first.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Export metrics series, or compare several runs.
    Report {
        /// Metrics files (repeatable).
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Labels for the comparison table, in the order of --metrics.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn writer(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn label_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume: again,
            halt_after,
        } => {
            let cfg = config.resolve()?;
            let out = out.unwrap_or_else(|| cli.out_root.join("train"));
            let outcome = if again {
                resume(&cfg, &out)?
            } else {
                train_until(&cfg, &out, halt_after)?
            };
            let paths = RunPaths::new(&out);
            println!("iterations: {}", outcome.iteration);
            if let Some(e) = &outcome.final_eval {
                println!("greedy accuracy: {:.4}", e.greedy_accuracy);
                println!("avg@{}: {:.4}", e.k, e.avg_at_k);
            }
            if outcome.stopped_early {
                println!("stopped early at the accuracy target");
            }
            println!("metrics: {}", paths.metrics().display());
        }
        Command::Eval { config, policy, k } => {
            let cfg = config.resolve()?;
            let params = load_policy(&policy)?;
            if *params.shape() != cfg.model.shape() {
                bail!(scrpo::Error::Config("policy shape does not match the configured model".into()));
            }
            let splits = cfg.splits()?;
            let k = k.unwrap_or(cfg.trainer.eval_k);
            let r = evaluate_policy(&params, &splits.eval, k, cfg.sampler, cfg.seed)?;
            println!("problems: {}", splits.eval.len());
            println!("greedy accuracy: {:.4}", r.greedy_accuracy);
            println!("avg@{k}: {:.4}", r.avg_at_k);
        }
        Command::Ablate {
            config,
            out,
            seeds,
            variants,
        } => {
            let cfg = config.resolve()?;
            let out = out.unwrap_or_else(|| cli.out_root.join("ablate"));
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v).ok_or_else(|| scrpo::Error::Config(format!("unknown variant {v:?}"))))
                .collect::<scrpo::Result<Vec<_>>>()?;
            let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
            for &s in &seeds {
                let mut c = cfg.clone();
                c.seed = s;
                let results = run_ablation(&c, &variants, &out.join(format!("seed-{s}")))?;
                for (i, r) in results.iter().enumerate() {
                    per_variant[i].push(r.eval_avg_at_k);
                }
            }
            let summaries: Vec<RunSummary> = variants
                .iter()
                .zip(&per_variant)
                .map(|(v, scores)| RunSummary {
                    label: v.name().to_string(),
                    iterations: cfg.trainer.iterations,
                    evals: scores.len(),
                    final_avg_at_k: scores.last().copied(),
                    mean_avg_at_k: Some(scores.iter().sum::<f64>() / scores.len().max(1) as f64),
                    final_greedy: None,
                })
                .collect();
            print!("{}", comparison_table(&summaries));
        }
        Command::Gradcheck {
            seeds,
            threshold,
            corrupt_scale,
        } => {
            let cfg = GradcheckConfig {
                threshold,
                corrupt_scale,
                ..GradcheckConfig::default()
            };
            let r = gradcheck(&seeds, &cfg)?;
            println!("parameters: {}", r.params);
            println!("probes: {}", r.probes.len());
            println!("max relative error: {:.3e}", r.max_rel_error);
            if !r.passed {
                eprintln!("gradient check failed: {:.3e} >= {threshold:e}", r.max_rel_error);
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::InspectPool { pool, top } => {
            let text = std::fs::read_to_string(&pool).with_context(|| format!("cannot read {}", pool.display()))?;
            let cap = text.lines().filter(|l| !l.trim().is_empty()).count().max(1);
            let p = ErrorPool::load(&pool, PoolConfig { capacity: cap }, Admission::NON_DEGENERATE)?;
            println!("records: {}", p.len());
            let problems: std::collections::HashSet<u64> = p.records().map(|r| r.problem_id).collect();
            println!("distinct problems: {}", problems.len());
            let consumed: u64 = p.records().map(|r| r.consumed_count).sum();
            println!("total replays: {consumed}");
            let mut recs: Vec<_> = p.records().collect();
            recs.sort_by(|a, b| b.consumed_count.cmp(&a.consumed_count).then(a.problem_id.cmp(&b.problem_id)));
            for r in recs.into_iter().take(top) {
                println!(
                    "{}\t{}\treplayed {}\tacc {:.3}\t{:?}",
                    r.problem_id, r.prompt_text, r.consumed_count, r.acc_at_capture, r.wrong_answer_text
                );
            }
        }
        Command::Report {
            metrics,
            labels,
            format,
            out,
        } => {
            let format: Format = format.parse()?;
            if !labels.is_empty() && labels.len() != metrics.len() {
                bail!(scrpo::Error::Config("give one --label per --metrics file".into()));
            }
            if metrics.len() == 1 && labels.is_empty() {
                let records = read_metrics(&metrics[0])?;
                if records.is_empty() {
                    eprintln!("warning: {} has no metrics records", metrics[0].display());
                }
                let mut w = writer(&out)?;
                export(&records, format, &mut w)?;
                w.flush()?;
            } else {
                let inputs: Vec<(String, &Path)> = metrics
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (labels.get(i).cloned().unwrap_or_else(|| label_for(p)), p.as_path()))
                    .collect();
                let (runs, warnings) = load_summaries(&inputs)?;
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                let mut w = writer(&out)?;
                write!(w, "{}", comparison_table(&runs))?;
                w.flush()?;
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<scrpo::Error>() {
        Some(scrpo::Error::Config(_))
        | Some(scrpo::Error::Parse { .. })
        | Some(scrpo::Error::Encoding { .. })
        | Some(scrpo::Error::Rejected(_)) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
