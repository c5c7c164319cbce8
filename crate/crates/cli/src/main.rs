//! `cindi`: synthesize data, train and select flows, flag and impute, run
//! the full loop and re-evaluate stored scores.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cindi_core::detect::{read_flags_csv, sections, smooth};
use cindi_core::flow::{load_checkpoint, save_checkpoint, FlowModel};
use cindi_core::impute::{interpolate, raw, write_changes_csv, Method};
use cindi_core::metrics::{evaluate, MetricReport};
use cindi_core::pipeline::{
    eval_scores_csv, flag_range, impute_with_fallback, mask_in, model_select_for, prepare, run, selection_data,
    write_atomic, write_json, DataSource, PipelineConfig,
};
use cindi_core::select::{write_reports_csv, HyperParams};
use cindi_core::series::{synth_generate, write_csv, IndexRange, MultiSeries, Normalizer, SplitSpec};
use cindi_core::train::fit;

#[derive(Parser)]
#[command(name = "cindi", version, about = "Joint anomaly detection and imputation with conditional normalizing flows")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic or benchmark series as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write the series' split as JSON (benchmark sources only).
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Fit one flow with fixed hyperparameters.
    Train(OutDir),
    /// Search hyperparameters with CMA-ES and keep the best flow.
    Select(OutDir),
    /// Score a range with a checkpoint and flag it.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Region::Train)]
        range: Region,
        #[command(flatten)]
        out: OutDir,
    },
    /// Replace labelled (and optionally flagged) steps.
    Impute {
        /// Defaults to the configured method.
        #[arg(long)]
        method: Option<Method>,
        /// Required for `cindi`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Flags from `detect`, added to the labels.
        #[arg(long)]
        flags: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the configured method end to end into a run directory.
    Run(OutDir),
    /// Recompute metrics from stored test scores.
    Eval {
        /// Run directory; uses its config snapshot and downstream scores.
        #[arg(long, conflicts_with = "scores")]
        run: Option<PathBuf>,
        /// A `timestep,score,label` file.
        #[arg(long, requires = "max_buffer")]
        scores: Option<PathBuf>,
        #[arg(long)]
        max_buffer: Option<usize>,
        /// Fail unless the result equals the run's stored metrics.json.
        #[arg(long, requires = "run")]
        check: bool,
    },
}

#[derive(Args)]
struct OutDir {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Region {
    Train,
    Eval,
    Test,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out, split_out } => synth(&cfg, &out, split_out.as_deref()),
        Command::Train(o) => train(&cfg, &o.out),
        Command::Select(o) => select(&cfg, &o.out),
        Command::Detect { checkpoint, range, out } => detect(&cfg, &checkpoint, range, &out.out),
        Command::Impute {
            method,
            checkpoint,
            flags,
            out,
        } => impute(&cfg, method.unwrap_or(cfg.method), checkpoint.as_deref(), flags.as_deref(), &out.out),
        Command::Run(o) => {
            let summary = run(&cfg, &o.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval {
            run,
            scores,
            max_buffer,
            check,
        } => eval(run.as_deref(), scores.as_deref(), max_buffer, check),
    }
}

fn out_dir(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn synth(cfg: &PipelineConfig, out: &Path, split_out: Option<&Path>) -> Result<()> {
    let (series, split) = match &cfg.data {
        DataSource::Csv { .. } => bail!("synth needs a synth or benchmark data source, not csv"),
        DataSource::Synth(spec) => (synth_generate(spec)?, cfg.split.clone()),
        DataSource::Benchmark(_) => {
            let (s, split) = cfg.dataset()?;
            (s, Some(split))
        }
    };
    write_csv(out, &series)?;
    if let Some(p) = split_out {
        let split = split.context("no split configured for this source")?;
        split.check(series.len())?;
        write_json(p, &split)?;
    }
    eprintln!("wrote {} steps x {} channels to {}", series.len(), series.dim(), out.display());
    Ok(())
}

/// The configured hyperparameters, or the centre of the search box.
fn fixed_hyperparams(cfg: &PipelineConfig) -> HyperParams {
    match &cfg.hyperparams {
        Some(h) => HyperParams { encoder: cfg.encoder, ..h.clone() },
        None => cfg.selection.space.decode(&[0.5; 6], cfg.encoder),
    }
}

fn train(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (series, split) = cfg.dataset()?;
    let mut fixed = cfg.clone();
    fixed.hyperparams = Some(fixed_hyperparams(cfg));
    let hp = fixed.hyperparams.clone().expect("set above");
    let prep = prepare(&series, &split, &fixed, &fixed.selection)?;
    let exclude = if cfg.skip_first_fit { mask_in(series.labels(), split.train) } else { vec![false; series.len()] };
    let data = selection_data(&series, &prep, exclude, cfg.max_buffer, cfg.recon_steps);
    let (tw, vw) = data.windows(hp.window)?;
    let model = FlowModel::new(hp.flow_config(series.dim()), cfg.seed)?;
    let (model, report) = fit(model, &tw, &vw, &hp.train_config(&cfg.selection.train, cfg.seed))?;
    out_dir(dir, &fixed)?;
    save_checkpoint(dir.join("checkpoint.json"), &model, Some(&prep.normalizer))?;
    write_json(&dir.join("train_report.json"), &report)?;
    eprintln!(
        "best epoch {} of {}, validation NLL {:.4}",
        report.best_epoch,
        report.epochs.len() - 1,
        report.best_validation
    );
    Ok(())
}

fn select(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (series, split) = cfg.dataset()?;
    let (sel, normalizer) = model_select_for(&series, &split, cfg)?;
    out_dir(dir, cfg)?;
    save_checkpoint(dir.join("checkpoint.json"), &sel.best, Some(&normalizer))?;
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &sel.reports)?;
    write_atomic(&dir.join("candidates.csv"), &buf)?;
    write_json(&dir.join("candidates.json"), &sel.reports)?;
    println!("{}", serde_json::to_string_pretty(&sel.best_report)?);
    Ok(())
}

fn checkpoint(path: &Path) -> Result<(FlowModel, Normalizer)> {
    let (model, normalizer) = load_checkpoint(path)?;
    let normalizer = normalizer.with_context(|| format!("{} carries no normalizer", path.display()))?;
    Ok((model, normalizer))
}

fn region(series: &MultiSeries, split: &SplitSpec, which: Region) -> Result<IndexRange> {
    Ok(match which {
        Region::Train => split.train,
        Region::Eval => split.eval.context("the split has no eval range")?,
        Region::Test => split.test.context("the split has no test range")?,
        Region::All => IndexRange::new(0, series.len()),
    })
}

fn detect(cfg: &PipelineConfig, ckpt: &Path, which: Region, dir: &Path) -> Result<()> {
    let (series, split) = cfg.dataset()?;
    let (model, normalizer) = checkpoint(ckpt)?;
    if model.dim() != series.dim() {
        bail!("checkpoint has {} channels, the series {}", model.dim(), series.dim());
    }
    let range = region(&series, &split, which)?;
    let (flagging, _) = flag_range(&model, &series, &normalizer, range, cfg.smoothing, cfg.selection.train.exec)?;
    out_dir(dir, cfg)?;
    flagging.save_csv(&dir.join("flags.csv"))?;
    let labels = &series.labels()[range.start..range.end];
    let report: Option<MetricReport> = evaluate(&smooth(&flagging.scores, flagging.smoothing), labels, cfg.max_buffer).ok();
    let summary = serde_json::json!({
        "range": range,
        "tau": flagging.tau,
        "flagged": flagging.flagged(),
        "sections": flagging.sections(),
        "metrics": report,
    });
    write_json(&dir.join("detect.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn impute(cfg: &PipelineConfig, method: Method, ckpt: Option<&Path>, flags: Option<&Path>, dir: &Path) -> Result<()> {
    let (series, _) = cfg.dataset()?;
    let n = series.len();
    let mut mask = series.labels().to_vec();
    if let Some(p) = flags {
        for (m, f) in mask.iter_mut().zip(read_flags_csv(p, n)?) {
            *m |= f;
        }
    }
    let (out, changed) = match method {
        Method::Cindi => {
            let ckpt = ckpt.context("--checkpoint is required for cindi imputation")?;
            let (model, normalizer) = checkpoint(ckpt)?;
            let (result, fallback) = impute_with_fallback(&model, &series, &mask, &normalizer)?;
            if !fallback.is_empty() {
                eprintln!("{} section(s) before step {} were interpolated linearly", fallback.len(), model.window());
            }
            (result.series, result.changed)
        }
        Method::Raw => (raw(&series), Vec::new()),
        Method::Skip => (series.clone(), Vec::new()),
        m => {
            let kind = m.interp_kind().expect("interpolating method");
            let r = interpolate(&series, &mask, kind)?;
            (r.series, r.changed)
        }
    };
    out_dir(dir, cfg)?;
    if method == Method::Skip {
        write_json(&dir.join("skip_manifest.json"), &sections(&mask))?;
    }
    write_csv(dir.join("imputed.csv"), &out)?;
    let mut buf = Vec::new();
    write_changes_csv(&mut buf, 0, &changed, series.channel_names())?;
    write_atomic(&dir.join("changes.csv"), &buf)?;
    eprintln!(
        "{method}: {} section(s), {} step(s) replaced",
        changed.len(),
        changed.iter().map(|c| c.length).sum::<usize>()
    );
    Ok(())
}

fn eval(run_dir: Option<&Path>, scores: Option<&Path>, max_buffer: Option<usize>, check: bool) -> Result<()> {
    let (report, stored) = match (run_dir, scores) {
        (Some(dir), None) => {
            let cfg = PipelineConfig::load(&dir.join("config.toml"))?;
            let mb = max_buffer.unwrap_or(cfg.max_buffer);
            let report = eval_scores_csv(&dir.join("downstream").join("test_scores.csv"), mb)?;
            (report, Some(dir.join("downstream").join("metrics.json")))
        }
        (None, Some(p)) => (eval_scores_csv(p, max_buffer.expect("required by clap"))?, None),
        _ => bail!("pass --run <dir> or --scores <file> --max-buffer <n>"),
    };
    // Same bytes as the stored metrics.json.
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if check {
        let path = stored.expect("--check requires --run");
        let want = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        if want != text {
            bail!("recomputed metrics differ from {}", path.display());
        }
    }
    print!("{text}");
    Ok(())
}
