//! `wdaseg`: synthetic benchmark generation, counting pretraining, adaptation training,
//! evaluation and the ablation ladder.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use wdaseg_core::metrics::EvalReport;
use wdaseg_core::synthdata::{make_benchmark, Benchmark, BenchmarkSpec};
use wdaseg_nn::inference::{evaluate, write_report, PredictOptions};
use wdaseg_nn::pretrain::{load_g2, pretrain_counting, save_g2};
use wdaseg_nn::trainer::load_g1;
use wdaseg_nn::{AblationFlags, AblationModel, RunConfig, Trainer, G1, G2};

#[derive(Parser)]
#[command(name = "wdaseg", version, about = "Weakly supervised domain-adaptive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain synthetic benchmark.
    Synth {
        /// Benchmark spec (TOML); defaults to the built-in desk benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of target training instances that get a center point.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the counting network on the source split.
    PretrainCount {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run adaptation training, then evaluate on the target test split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        flags: FlagArgs,
        /// Continue from a checkpoint directory (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target test split.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_filter: bool,
    },
    /// Train and evaluate models I to VIII with a shared seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    bench: PathBuf,
    /// Run config (TOML with [weights] and [train]); defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Counting-network checkpoint; required when the counting term is on.
    #[arg(long)]
    g2: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FlagArgs {
    #[arg(long)]
    no_detect: bool,
    #[arg(long)]
    no_count: bool,
    #[arg(long)]
    no_pl: bool,
    #[arg(long)]
    no_cpaug: bool,
    #[arg(long)]
    no_filter: bool,
}

impl FlagArgs {
    fn apply(&self, flags: &mut AblationFlags) {
        flags.detect &= !self.no_detect;
        flags.count &= !self.no_count;
        flags.pseudo_label &= !self.no_pl;
        flags.cp_aug &= !self.no_cpaug;
        flags.filter &= !self.no_filter;
    }
}

/// Invalid command-line usage that clap cannot catch.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn core_code(e: &wdaseg_core::Error) -> u8 {
    use wdaseg_core::Error as E;
    match e {
        E::InvalidArgument(_) | E::Generation { .. } => 2,
        E::Validation(_) | E::Io { .. } | E::Format { .. } => 3,
    }
}

/// 2 configuration, 3 data, 4 numeric failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use wdaseg_nn::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) => 2,
                E::Data(inner) => core_code(inner),
                E::Validation(_) | E::Io { .. } | E::Format { .. } => 3,
                E::NonFinite { .. } => 4,
                E::Tensor(_) => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<wdaseg_core::Error>() {
            return core_code(e);
        }
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    })
}

fn load_bench(dir: &Path) -> Result<Benchmark> {
    Benchmark::load(dir).with_context(|| format!("loading benchmark {}", dir.display()))
}

fn predict_options(cfg: &RunConfig, filter: bool) -> PredictOptions {
    PredictOptions::new(filter, cfg.train.peak_threshold, cfg.weights.sigma1)
}

fn summary(report: &EvalReport) -> String {
    format!(
        "DSC {:.2} AJI {:.2} PQ {:.2} count MAE {:.2}",
        100.0 * report.dsc,
        100.0 * report.aji,
        100.0 * report.pq,
        report.mean_count_error
    )
}

fn synth(spec: Option<&Path>, out: &Path, ratio: Option<f64>, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<BenchmarkSpec>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => BenchmarkSpec::desk_default(0),
    };
    if let Some(r) = ratio {
        spec.annotation_ratio = r;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.source.validate()?;
    spec.target.validate()?;
    let bench = make_benchmark(&spec)?;
    bench.save(out)?;
    println!(
        "wrote {} source, {} target train, {} target test images to {}",
        bench.source.len(),
        bench.target_train.len(),
        bench.target_test.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(bench: &Path, out: &Path, epochs: Option<usize>, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.g2_epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let bench = load_bench(bench)?;
    let (g2, log) = pretrain_counting(&bench.source, &cfg.train, None)?;
    save_g2(&g2, out)?;
    let last = log.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "counting network saved to {} (final epoch loss {last:.4})",
        out.display()
    );
    Ok(())
}

fn counting_network(cfg: &RunConfig, path: Option<&Path>) -> Result<Option<G2>> {
    match (cfg.train.flags.count, path) {
        (true, Some(p)) => Ok(Some(load_g2(p)?)),
        (true, None) => Err(usage("the counting term is on; pass --g2 or --no-count")),
        (false, _) => Ok(None),
    }
}

/// Writes `eval/metrics.json` and `previews/*.png` under `run_dir`.
fn evaluate_run(g1: &G1, cfg: &RunConfig, bench: &Benchmark, run_dir: &Path) -> Result<EvalReport> {
    let opts = predict_options(cfg, cfg.train.flags.filter);
    let report = evaluate(g1, &bench.target_test, opts, Some(&run_dir.join("previews")))?;
    write_report(&run_dir.join("eval").join("metrics.json"), &report)?;
    Ok(report)
}

fn train_one(
    cfg: RunConfig,
    bench: &Benchmark,
    g2: Option<&G2>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<EvalReport> {
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, bench, g2)?,
        None => Trainer::new(cfg, bench, g2)?,
    }
    .with_run_dir(out)?;
    trainer.run()?;
    let cfg = trainer.config().clone();
    let state = trainer.into_state();
    evaluate_run(&state.g1, &cfg, bench, out)
}

fn train(run: &RunArgs, flags: &FlagArgs, resume: Option<&Path>) -> Result<()> {
    let mut cfg = match resume {
        Some(dir) => wdaseg_nn::TrainState::load(dir)?.1,
        None => load_config(run.config.as_deref())?,
    };
    if resume.is_none() {
        flags.apply(&mut cfg.train.flags);
        if let Some(s) = run.seed {
            cfg.train.seed = s;
        }
    }
    let bench = load_bench(&run.bench)?;
    let g2 = counting_network(&cfg, run.g2.as_deref())?;
    let report = train_one(cfg, &bench, g2.as_ref(), &run.out, resume)?;
    println!("{}", summary(&report));
    Ok(())
}

fn eval(bench: &Path, ckpt: &Path, out: &Path, no_filter: bool) -> Result<()> {
    let bench = load_bench(bench)?;
    let (g1, cfg) = load_g1(ckpt)?;
    let opts = predict_options(&cfg, cfg.train.flags.filter && !no_filter);
    let report = evaluate(&g1, &bench.target_test, opts, Some(out))?;
    write_report(&out.join("metrics.json"), &report)?;
    println!("{}", summary(&report));
    Ok(())
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

/// Markdown table with one row per model, in ladder order.
fn ablation_table(rows: &[(AblationModel, EvalReport)]) -> String {
    let mut s = String::from("| Model | Detect | Count | PL | CP-Aug | Filter | DSC | AJI | PQ |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for (m, r) in rows {
        let f = m.flags();
        s.push_str(&format!(
            "| {m} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.2} |\n",
            mark(f.detect),
            mark(f.count),
            mark(f.pseudo_label),
            mark(f.cp_aug),
            mark(f.filter),
            100.0 * r.dsc,
            100.0 * r.aji,
            100.0 * r.pq
        ));
    }
    s
}

fn ablate(run: &RunArgs) -> Result<()> {
    let mut base = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        base.train.seed = s;
    }
    let bench = load_bench(&run.bench)?;
    let g2 = match &run.g2 {
        Some(p) => load_g2(p)?,
        None => return Err(usage("ablate needs --g2 for the rows with the counting term")),
    };
    let mut rows = Vec::new();
    for model in AblationModel::ALL {
        let mut cfg = base.clone();
        cfg.train.flags = model.flags();
        let dir = run.out.join(format!("model_{model}"));
        let g2 = cfg.train.flags.count.then_some(&g2);
        let report = train_one(cfg, &bench, g2, &dir, None).with_context(|| format!("model {model}"))?;
        eprintln!("model {model}: {}", summary(&report));
        rows.push((model, report));
    }
    let table = ablation_table(&rows);
    let path = run.out.join("ablation.md");
    std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, ratio, seed } => synth(spec.as_deref(), &out, ratio, seed),
        Command::PretrainCount {
            bench,
            out,
            epochs,
            config,
            seed,
        } => pretrain(&bench, &out, epochs, config.as_deref(), seed),
        Command::Train { run, flags, resume } => train(&run, &flags, resume.as_deref()),
        Command::Eval {
            bench,
            ckpt,
            out,
            no_filter,
        } => eval(&bench, &ckpt, &out, no_filter),
        Command::Ablate { run } => ablate(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(exit_code(&err))
        }
    }
}
