//! `fairflow` command-line driver.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use fairflow::datagen::{self, AugmentOp, DatasetBundle, Example, SPLITS};
use fairflow::encoder::Model;
use fairflow::harness::{self, PairwiseTable, RunSpec};
use fairflow::train::{self, JsonlSink, MetricsSink, RunDirs};
use fairflow::Error;

use config::{Precision, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "fairflow", version, about = "Debiasing by undecided learning on a synthetic shortcut benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset bundle.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Runs root; the run writes to `<out>/<name>/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split; prints a JSON metrics record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle directory or a single JSONL split file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "id")]
        split: String,
        /// Config whose `train.eval_views` / `train.seed` score the views.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Add-one / remove-one branch ablation.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explicit × implicit operator matrix.
    Pairwise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append augmented copies of a training split.
    Augment {
        /// Bundle directory (uses its train split) or a JSONL file.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: drop_premise, drop_hypothesis, shuffle, fractional_drop.
        #[arg(long, value_delimiter = ',', required = true)]
        ops: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label for premise-dropped inputs (default: neutral, or not-entail for 2 classes).
        #[arg(long)]
        not_entail_label: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

/// Exit 1: bad usage or config. Exit 2: failure while running.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            c.downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Config(_) | Error::Parse { .. }))
                || c.downcast_ref::<toml::de::Error>().is_some()
                || c.downcast_ref::<config::UsageError>().is_some()
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            println!("{}", serde_json::json!({"error": {"kind": "usage", "message": first}}));
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code, e) = match f {
                Failure::Usage(e) => ("config", 1, e),
                Failure::Runtime(e) => ("runtime", 2, e),
            };
            let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            println!("{}", serde_json::json!({"error": {"kind": kind, "message": message}}));
            for (i, c) in e.chain().enumerate() {
                eprintln!("{}{c}", if i == 0 { "error: " } else { "  caused by: " });
            }
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { cfg, out } => {
            let rc = load(&cfg)?;
            if cfg.dump_config {
                return dump(&rc);
            }
            let out = required(out, "--out")?;
            let bundle = datagen::generate(&rc.generator).map_err(|e| Failure::Usage(e.into()))?;
            datagen::save_bundle(&out, &bundle, &rc.generator).with_context(|| format!("writing {}", out.display()))?;
            for s in SPLITS {
                println!("{s}\t{}", bundle.split(s).map_err(anyhow::Error::from)?.len());
            }
            Ok(())
        }
        Cmd::Train { cfg, data, out } => {
            let rc = load(&cfg)?;
            if cfg.dump_config {
                return dump(&rc);
            }
            let bundle = load_data(data.or(rc.data.clone()))?;
            let out = out.or(rc.out.clone()).unwrap_or_else(|| PathBuf::from("runs")).join(&rc.name);
            cmd_train(&rc, &bundle, &out)
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            config,
        } => {
            let rc = match config {
                Some(p) => RunConfig::from_file(&p).map_err(Failure::Usage)?,
                None => RunConfig::default(),
            };
            exists(&checkpoint)?;
            exists(&data)?;
            let model = Model::<f64>::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let examples = if data.is_dir() {
                let b = datagen::load_bundle(&data)?;
                b.split(&split).map_err(|e| Failure::Usage(e.into()))?.to_vec()
            } else {
                datagen::load_split(&data)?
            };
            let t = &rc.train;
            let rec = fairflow::eval::evaluate(&model, &split, &examples, &t.eval_views, t.seed, t.eval_chunk, 0, 0.0).map_err(anyhow::Error::from)?;
            println!("{}", serde_json::to_string(&rec).map_err(anyhow::Error::from)?);
            Ok(())
        }
        Cmd::Ablate { cfg, data, out } => {
            let rc = load(&cfg)?;
            if cfg.dump_config {
                return dump(&rc);
            }
            let bundle = load_data(data.or(rc.data.clone()))?;
            let out = out.or(rc.out.clone()).unwrap_or_else(|| PathBuf::from("runs")).join(&rc.name);
            let base = spec(&rc);
            if base.train.branches.is_empty() {
                return Err(Failure::Usage(anyhow!("ablation needs at least one branch in train.branches")));
            }
            let specs = harness::ablation_specs(&base);
            let results = run_specs(&specs, &bundle)?;
            std::fs::create_dir_all(&out).map_err(anyhow::Error::from)?;
            harness::write_results_csv(&out.join("ablation.csv"), &results, &SPLITS[1..]).map_err(anyhow::Error::from)?;
            harness::write_results_jsonl(&out.join("ablation.jsonl"), &results).map_err(anyhow::Error::from)?;
            print!("{}", std::fs::read_to_string(out.join("ablation.csv")).map_err(anyhow::Error::from)?);
            Ok(())
        }
        Cmd::Pairwise { cfg, data, out } => {
            let rc = load(&cfg)?;
            if cfg.dump_config {
                return dump(&rc);
            }
            let bundle = load_data(data.or(rc.data.clone()))?;
            let out = out.or(rc.out.clone()).unwrap_or_else(|| PathBuf::from("runs")).join(&rc.name);
            let (ex, im) = rc.pairwise_ops();
            if ex.is_empty() || im.is_empty() {
                return Err(Failure::Usage(anyhow!("pairwise needs at least one explicit and one implicit operator")));
            }
            let specs = harness::pairwise_specs(&spec(&rc), &ex, &im).map_err(|e| Failure::Usage(e.into()))?;
            let results = run_specs(&specs, &bundle)?;
            let table = PairwiseTable::from_results(&results, &ex, &im, &["stress", "ood"]).map_err(anyhow::Error::from)?;
            std::fs::create_dir_all(&out).map_err(anyhow::Error::from)?;
            table.write_csv(&out.join("pairwise.csv")).map_err(anyhow::Error::from)?;
            harness::write_results_jsonl(&out.join("pairwise.jsonl"), &results).map_err(anyhow::Error::from)?;
            print!("{}", std::fs::read_to_string(out.join("pairwise.csv")).map_err(anyhow::Error::from)?);
            Ok(())
        }
        Cmd::Augment {
            data,
            ops,
            out,
            seed,
            not_entail_label,
        } => {
            exists(&data)?;
            let ops = ops
                .iter()
                .map(|s| AugmentOp::parse(s.trim()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(e.into()))?;
            let (train, binary) = if data.is_dir() {
                let meta = datagen::load_gen_meta(&data)?;
                (datagen::load_split(&data.join("train.jsonl"))?, meta.generator.binary)
            } else {
                let t = datagen::load_split(&data)?;
                let binary = t.iter().all(|e| e.y < 2);
                (t, binary)
            };
            let label = not_entail_label.unwrap_or(if binary { datagen::NOT_ENTAIL } else { datagen::NEUTRAL });
            let aug = datagen::augment(&train, &ops, Some(label), seed).map_err(anyhow::Error::from)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
            }
            datagen::save_split(&out, &aug).map_err(anyhow::Error::from)?;
            println!("{}\t{}", out.display(), aug.len());
            Ok(())
        }
    }
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::from_file(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("FAIRFLOW_SEED") {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(anyhow!(config::UsageError(format!("FAIRFLOW_SEED `{s}` is not an unsigned integer")))))?;
        rc.set_seed(seed);
    }
    rc.validate().map_err(Failure::Usage)?;
    Ok(rc)
}

fn dump(rc: &RunConfig) -> Result<(), Failure> {
    print!("{}", rc.to_toml().map_err(Failure::Runtime)?);
    Ok(())
}

fn required(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    p.ok_or_else(|| Failure::Usage(anyhow!(config::UsageError(format!("{flag} is required")))))
}

fn exists(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!(config::UsageError(format!("path {} does not exist", p.display())))))
    }
}

fn load_data(p: Option<PathBuf>) -> Result<DatasetBundle, Failure> {
    let p = required(p, "--data")?;
    exists(&p)?;
    datagen::load_bundle(&p).with_context(|| format!("loading bundle {}", p.display())).map_err(Failure::from)
}

fn spec(rc: &RunConfig) -> RunSpec {
    RunSpec {
        name: rc.name.clone(),
        encoder: rc.encoder.clone(),
        train: rc.train.clone(),
    }
}

fn evals(b: &DatasetBundle) -> Vec<(&'static str, &[Example])> {
    SPLITS[1..].iter().map(|&s| (s, b.split(s).expect("known split"))).collect()
}

fn run_specs(specs: &[RunSpec], b: &DatasetBundle) -> Result<Vec<harness::RunResult>, Failure> {
    harness::run_many(specs, &b.train, &evals(b)).map_err(|e| Failure::from(anyhow::Error::from(e)))
}

fn cmd_train(rc: &RunConfig, b: &DatasetBundle, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    std::fs::write(out.join("config.toml"), rc.to_toml().map_err(Failure::Runtime)?).map_err(anyhow::Error::from)?;
    let mut sink = JsonlSink::create(&out.join("metrics.jsonl")).map_err(anyhow::Error::from)?;
    let dirs = RunDirs { out: Some(out.to_path_buf()) };
    let ev = evals(b);
    let history = match rc.precision {
        Precision::F64 => train::train::<f64>(&rc.encoder, &rc.train, &b.train, &ev, &mut sink as &mut dyn MetricsSink, &dirs).map(|o| o.history),
        Precision::F32 => train::train::<f32>(&rc.encoder, &rc.train, &b.train, &ev, &mut sink as &mut dyn MetricsSink, &dirs).map(|o| o.history),
    }
    .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    let last = &history[history.len().saturating_sub(ev.len())..];
    let mut w = String::from("split,accuracy,f1,tv_uniform,tv_branch,ce,step\n");
    for r in last {
        w.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.split, r.accuracy, r.f1, r.tv_uniform, r.tv_branch, r.ce, r.step
        ));
        println!("{}", serde_json::to_string(r).map_err(anyhow::Error::from)?);
    }
    std::fs::write(out.join("metrics.csv"), w).map_err(anyhow::Error::from)?;
    Ok(())
}
