//! Command-line front end.
//!
//! Settings resolve in order: schema defaults (with `UNISIAM_SEED` as the
//! seed fallback), the `--config` file, `--set key=value` overrides, then
//! dedicated flags. The resolved document is printed before any work starts.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use unisiam_core::data::{make_world, EpisodePool, Pools};
use unisiam_core::diagnostics::{singular_spectrum, Source};
use unisiam_core::fewshot::aggregate;
use unisiam_core::models::EncoderStack;
use unisiam_core::trainer::{self, LogRow, Observer, Regime, Trained};
use unisiam_core::Tensor;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::{fsds, io, parallel, report, usia};

#[derive(Parser, Debug)]
#[command(name = "unisiam", version, about = "Self-supervised few-shot learning on synthetic vector data")]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set train.lr=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed (falls back to UNISIAM_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for episode evaluation and MI sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train an encoder stack and write a checkpoint plus log CSV.
    Pretrain(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Episodic few-shot evaluation; prints `mean,ci95,episodes`.
    Eval(EvalArgs),
    /// Estimator-bias sweep on correlated Gaussians.
    MiBench(MiArgs),
    /// Singular-value spectrum of embeddings.
    Diag(DiagArgs),
    /// Write a split of the synthetic world as an FSDS file.
    GenData(GenArgs),
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    augment: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    nway: Option<u64>,
    #[arg(long)]
    kshot: Option<u64>,
    #[arg(long)]
    queries: Option<u64>,
    #[arg(long)]
    episodes: Option<u64>,
    /// Encoder checkpoint; raw inputs are probed when absent.
    #[arg(long)]
    ckpt: Option<String>,
    /// Labeled FSDS file used instead of the synthetic split.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    split: Option<String>,
    /// Permute support labels (chance-level control).
    #[arg(long)]
    shuffled: bool,
    /// Per-episode CSV.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct MiArgs {
    #[arg(long)]
    dim: Option<u64>,
    /// `start:stop:step` or a single value.
    #[arg(long)]
    rho: Option<String>,
    /// Number of consecutive seeds per rho.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    svg: Option<String>,
}

#[derive(Args, Debug)]
struct DiagArgs {
    #[arg(long)]
    ckpt: Option<String>,
    /// `backbone` or `projection`.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    svg: Option<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// `all`, `train`, `val` or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    no_labels: bool,
    #[arg(long)]
    out: Option<String>,
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

impl TrainArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "train.regime", &self.regime);
        push(out, "train.epochs", &self.epochs);
        push(out, "train.batch", &self.batch);
        push(out, "train.lr", &self.lr);
        push(out, "loss.lambda", &self.lambda);
        push(out, "train.augment", &self.augment);
        push(out, "train.out", &self.out);
    }
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        match self {
            Command::Pretrain(a) => a.overrides(&mut o),
            Command::Distill(a) => {
                o.push(("train.regime", "distill".into()));
                a.train.overrides(&mut o);
                push(&mut o, "train.teacher", &a.teacher);
                push(&mut o, "loss.alpha", &a.alpha);
            }
            Command::Eval(a) => {
                push(&mut o, "eval.nway", &a.nway);
                push(&mut o, "eval.kshot", &a.kshot);
                push(&mut o, "eval.queries", &a.queries);
                push(&mut o, "eval.episodes", &a.episodes);
                push(&mut o, "eval.ckpt", &a.ckpt);
                push(&mut o, "eval.data", &a.data);
                push(&mut o, "eval.split", &a.split);
                push(&mut o, "eval.out", &a.out);
                if a.shuffled {
                    o.push(("eval.shuffled", "true".into()));
                }
            }
            Command::MiBench(a) => {
                push(&mut o, "mi.dim", &a.dim);
                push(&mut o, "mi.rho", &a.rho);
                push(&mut o, "mi.seeds", &a.seeds);
                push(&mut o, "mi.steps", &a.steps);
                push(&mut o, "mi.batch", &a.batch);
                push(&mut o, "mi.out", &a.out);
                push(&mut o, "mi.svg", &a.svg);
            }
            Command::Diag(a) => {
                push(&mut o, "diag.ckpt", &a.ckpt);
                push(&mut o, "diag.source", &a.source);
                push(&mut o, "diag.split", &a.split);
                push(&mut o, "diag.out", &a.out);
                push(&mut o, "diag.svg", &a.svg);
            }
            Command::GenData(a) => {
                push(&mut o, "gen.split", &a.split);
                push(&mut o, "gen.out", &a.out);
                if a.no_labels {
                    o.push(("gen.labels", "false".into()));
                }
            }
        }
        o
    }
}

/// Resolve the configuration of a parsed command line.
fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::defaults()?;
    if let Some(path) = &cli.config {
        let text = String::from_utf8(io::read(path)?)
            .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for a in &cli.set {
        cfg.apply_assignment(a)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(w) = cli.workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

/// Parse `args` (program name first), run, and return the exit code.
/// Normal output goes to `out`, diagnostics to `err`.
pub fn main_with(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{}", text) } else { write!(err, "{}", text) };
            return code;
        }
    };
    match run(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            e.exit_code()
        }
    }
}

fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve(cli)?;
    let _ = write!(out, "# resolved configuration\n{}", cfg.render());
    match &cli.command {
        Command::Pretrain(_) | Command::Distill(_) => train(&cfg, out, err),
        Command::Eval(_) => eval(&cfg, out),
        Command::MiBench(_) => mi_bench(&cfg, out),
        Command::Diag(_) => diag(&cfg, out),
        Command::GenData(_) => gen_data(&cfg, out),
    }
}

fn world(cfg: &Config) -> Result<Pools> {
    Ok(make_world(&cfg.world()?, cfg.u64("world.seed"))?.1)
}

struct Progress<'a> {
    start: Instant,
    err: &'a mut dyn Write,
}

impl Observer for Progress<'_> {
    fn elapsed(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch(&mut self, r: &LogRow) {
        let rank = r.effective_rank.map(|e| format!(" rank {:.2}", e)).unwrap_or_default();
        let _ = writeln!(self.err, "epoch {} loss {:.5} lr {:.5}{}", r.epoch, r.total, r.lr, rank);
    }
}

/// Checkpoint and log paths inside the output directory.
pub fn train_outputs(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("checkpoint.usia"), dir.join("train_log.csv"))
}

fn train(cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let pools = world(cfg)?;
    let tc = cfg.train();
    let dir = cfg.path("train.out").ok_or_else(|| CliError::Config("train.out must name a directory".into()))?;
    let (ckpt, log_path) = train_outputs(&dir);
    let mut progress = Progress { start: Instant::now(), err };
    let result = if tc.regime == Regime::Distill {
        let path = cfg.path("train.teacher").ok_or_else(|| CliError::Config("distillation needs train.teacher".into()))?;
        let teacher = usia::load(&path)?.into_teacher();
        trainer::distill(&tc, &teacher, &pools.train, &mut progress)
    } else {
        trainer::pretrain(&tc, &pools.train, &mut progress)
    };
    let Trained { stack, log } = match result {
        Ok(t) => t,
        Err(aborted) => {
            report::write(&log_path, &report::train_log_csv(&aborted.log)?)?;
            return Err(aborted.into());
        }
    };
    usia::save(&stack, &ckpt)?;
    report::write(&log_path, &report::train_log_csv(&log)?)?;
    let _ = writeln!(out, "checkpoint {}", ckpt.display());
    let _ = writeln!(out, "log {}", log_path.display());
    Ok(())
}

fn eval_pool(cfg: &Config) -> Result<EpisodePool> {
    let split = cfg.split("eval.split");
    match cfg.path("eval.data") {
        Some(p) => fsds::read(&p)?.to_pool(split),
        None => Ok(world(cfg)?.get(split).clone()),
    }
}

fn eval(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let pool = eval_pool(cfg)?;
    let encoder = cfg.path("eval.ckpt").map(|p| usia::load(&p)).transpose()?;
    let accs = parallel::episodes(
        encoder.as_ref(),
        &pool,
        &cfg.episodes(),
        cfg.bool("eval.shuffled"),
        &cfg.probe(),
        cfg.usize("run.workers"),
    )?;
    if let Some(p) = cfg.path("eval.out") {
        report::write(&p, &report::episodes_csv(&accs)?)?;
    }
    let _ = writeln!(out, "{}", report::summary_line(&aggregate(&accs)?));
    Ok(())
}

fn mi_bench(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let rows = parallel::mi_sweep(&cfg.mi_grid(), &cfg.mi_seeds(), &cfg.mi(), cfg.usize("run.workers"))?;
    let csv = report::mi_csv(&rows)?;
    if let Some(p) = cfg.path("mi.out") {
        report::write(&p, &csv)?;
    }
    if let Some(p) = cfg.path("mi.svg") {
        let series = |name: &str, f: fn(&unisiam_core::mi::MIBenchResult) -> f64| report::Series {
            name: name.into(),
            points: rows.iter().filter(|r| r.seed == cfg.seed()).map(|r| (r.rho, f(r))).collect(),
        };
        let svg = report::line_plot(
            "MI estimates vs correlation",
            "rho",
            "nats",
            &[series("true", |r| r.true_mi), series("I_NCE", |r| r.est_nce), series("I_MINE", |r| r.est_mine)],
        );
        report::write(&p, svg.as_bytes())?;
    }
    let _ = out.write_all(&csv);
    Ok(())
}

fn diag(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let path = cfg.path("diag.ckpt").ok_or_else(|| CliError::Config("diag needs diag.ckpt".into()))?;
    let stack = usia::load(&path)?;
    let pool = world(cfg)?.get(cfg.split("diag.split")).clone();
    let (x, _) = pool.flatten();
    let x = match cfg.usize("diag.samples") {
        0 => x,
        n => x.select_rows(&(0..n.min(x.rows())).collect::<Vec<_>>())?,
    };
    let report = embed_spectrum(&stack, &x, cfg.source())?;
    if let Some(p) = cfg.path("diag.out") {
        report::write(&p, &report::spectrum_csv(&report)?)?;
    }
    if let Some(p) = cfg.path("diag.svg") {
        let points = report.log10_sigma.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)).collect();
        let svg = report::line_plot(
            "Singular value spectrum",
            "index",
            "log10 sigma",
            &[report::Series { name: report.source.as_str().into(), points }],
        );
        report::write(&p, svg.as_bytes())?;
    }
    let _ = writeln!(out, "effective_rank,{}", report.effective_rank);
    Ok(())
}

/// Spectrum of eval-mode backbone or projection embeddings of `x`.
pub fn embed_spectrum(stack: &EncoderStack, x: &Tensor, source: Source) -> Result<unisiam_core::diagnostics::SpectrumReport> {
    let emb = match source {
        Source::Backbone => stack.forward_backbone(x)?,
        Source::Projection => stack.forward_proj(x)?,
    };
    Ok(singular_spectrum(&emb, source)?)
}

fn gen_data(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let pools = world(cfg)?;
    let mut ds = match cfg.str("gen.split") {
        "all" => {
            let parts: Vec<fsds::Dataset> = [&pools.train, &pools.val, &pools.test].iter().map(|p| fsds::Dataset::from_pool(p)).collect();
            let data: Vec<f64> = parts.iter().flat_map(|d| d.vectors.data().iter().copied()).collect();
            let labels: Vec<u32> = parts.iter().flat_map(|d| d.labels.clone().unwrap_or_default()).collect();
            fsds::Dataset::new(Tensor::matrix(labels.len(), pools.train.dim(), data)?, Some(labels))?
        }
        _ => fsds::Dataset::from_pool(pools.get(cfg.split("gen.split"))),
    };
    if !cfg.bool("gen.labels") {
        ds.labels = None;
    }
    let path = cfg.path("gen.out").ok_or_else(|| CliError::Config("gen.out must name a file".into()))?;
    fsds::write(&path, &ds)?;
    let _ = writeln!(out, "wrote {} vectors of dim {} to {}", ds.vectors.rows(), ds.vectors.cols(), path.display());
    Ok(())
}
