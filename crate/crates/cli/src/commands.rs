//! Subcommand dispatch and artifact writing.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use convformer_core::fusion::count_params;
use convformer_core::harness::{
    ablate_bridge, ablate_depth, build_pipeline, class_names, evaluate_miou, generate_dataset, run_experiment,
};
use convformer_core::pipeline::{load_checkpoint, save_checkpoint, stub_text_encoder};
use convformer_core::verify::{self, SuiteReport};

use crate::config::{self, ConfigError, RunConfig, Scope};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "convformer", version, about = "Conv-Former language-guided segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set fusion.depth=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<String>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a pipeline; writes report.json, curves.csv and checkpoint.kjtc.
    Train,
    /// Evaluate a checkpoint on the evaluation set; writes eval.json.
    Eval,
    /// Finite-difference gradient suite; exits 1 on failure.
    Gradcheck,
    /// Naive-loop oracle suite; exits 1 on failure.
    Oracle,
    /// Multiply-accumulate table at the score-map resolution; writes flops.csv and params.csv.
    Flops,
    /// Cross-attention vs inner-product vs no-fusion comparison.
    AblateBridge,
    /// mIoU and cost against stacking depth.
    AblateDepth,
    /// Write stub text embeddings as embeddings.kjte.
    ExportEmbeddings,
}

impl Command {
    fn scope(self) -> Scope {
        match self {
            Command::Train | Command::Eval | Command::AblateBridge | Command::AblateDepth => Scope::Experiment,
            Command::Flops => Scope::Cost,
            Command::ExportEmbeddings => Scope::Text,
            Command::Gradcheck | Command::Oracle => Scope::None,
        }
    }
}

/// Parses `args`, runs the subcommand and maps the outcome to an exit status:
/// 0 success, 1 failure, 2 usage or configuration error.
pub fn main_with_args<I, A>(args: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let help = config::help_text();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<ConfigError>().is_some() { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}

/// Resolves the effective config: file, then `--set`, then `--out`/`--seed`.
pub fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate(cli.command.scope())?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out, "config.effective.json", &cfg.to_json())?;
    match cli.command {
        Command::Train => train(&cfg, &out),
        Command::Eval => eval(&cfg, &out),
        Command::Gradcheck => suite("gradient", &out.join("gradcheck.json"), verify::gradcheck_suite(cfg.seed)?),
        Command::Oracle => suite("oracle", &out.join("oracle.json"), verify::oracle_suite(cfg.seed, cfg.verify.oracle_cases)?),
        Command::Flops => flops(&cfg, &out),
        Command::AblateBridge => {
            let ab = ablate_bridge(&cfg.experiment(), &cfg.ablation.seeds, cfg.threads())?;
            let csv = ab.to_csv()?;
            write(&out, "ablation_bridge.csv", &csv)?;
            write(&out, "ablation_bridge.json", &json(&ab)?)?;
            print!("{csv}");
            println!("cross_attention >= inner_product: {}", ab.cross_attention_ge_inner_product);
            Ok(())
        }
        Command::AblateDepth => {
            let ab = ablate_depth(&cfg.experiment(), &cfg.ablation.depths, &cfg.ablation.seeds, cfg.threads())?;
            let csv = ab.to_csv()?;
            write(&out, "ablation_depth.csv", &csv)?;
            write(&out, "ablation_depth.json", &json(&ab)?)?;
            print!("{csv}");
            Ok(())
        }
        Command::ExportEmbeddings => {
            let names = class_names(cfg.fusion.classes);
            let emb = stub_text_encoder::<f32>(&names, cfg.pipeline.text_channels, cfg.pipeline.text_seed)?;
            let path = out.join("embeddings.kjte");
            emb.save(&path)?;
            println!("wrote {} ({} classes x {})", path.display(), emb.classes(), emb.width());
            Ok(())
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let exp = cfg.experiment();
    let (train_set, eval_set) = exp.datasets()?;
    let (pipeline, report) = run_experiment::<f32>(&exp, cfg.seed, &train_set, &eval_set)?;
    write(out, "report.json", &report.to_json()?)?;
    write(out, "curves.csv", &report.loss_csv()?)?;
    save_checkpoint(&pipeline.store, &out.join("checkpoint.kjtc"))?;
    println!(
        "steps {}  first loss {:.4}  last loss {:.4}  mIoU {:.4}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.miou
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    class_names: Vec<String>,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
}

fn eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ckpt = cfg.eval.checkpoint.as_ref().map(PathBuf::from).unwrap_or_else(|| out.join("checkpoint.kjtc"));
    if !ckpt.is_file() {
        bail!("checkpoint {} not found", ckpt.display());
    }
    let exp = cfg.experiment();
    let mut pipeline = build_pipeline::<f32>(&exp, cfg.seed)?;
    load_checkpoint(&mut pipeline.store, &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let eval_set = generate_dataset(&exp.eval_spec())?;
    let r = evaluate_miou(&pipeline, &eval_set)?;
    let report = EvalReport {
        checkpoint: ckpt.display().to_string(),
        class_names: pipeline.text().class_names().to_vec(),
        miou: r.miou,
        per_class_iou: r.per_class_iou,
    };
    write(out, "eval.json", &json(&report)?)?;
    println!("mIoU {}", report.miou);
    Ok(())
}

fn suite(name: &str, path: &Path, report: SuiteReport) -> anyhow::Result<()> {
    std::fs::write(path, json(&report)?).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.table());
    println!("max error {:.3e}", report.max_error);
    if !report.passed {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        bail!("{name} suite failed: {}", failed.join(", "));
    }
    Ok(())
}

fn flops(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let table = cfg.experiment().macs();
    let csv = table.to_csv();
    write(out, "flops.csv", &csv)?;
    let mut params = String::from("component,params\n");
    for (name, n) in count_params(&cfg.fusion).rows() {
        params.push_str(&format!("{name},{n}\n"));
    }
    write(out, "params.csv", &params)?;
    print!("{csv}");
    Ok(())
}
