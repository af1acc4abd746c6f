//! `vsum` subcommands: synth, train, eval, ablate, plot.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vsum_core::checkpoint::{load_checkpoint, save_checkpoint};
use vsum_core::config::{load_config, parse_override, RunConfig};
use vsum_core::dataio::{generate_synthetic, load_dataset, write_dataset, Dataset, VideoRecord};
use vsum_core::eval::Setting;
use vsum_core::pipeline::{evaluate_model, run_ablation, run_protocol};
use vsum_core::plot::{plot_series, render_svg};
use vsum_core::trainer::train;
use vsum_core::{Error, Result};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PLOT_RECORDS_FILE: &str = "plot.jsonl";

#[derive(Debug, Parser)]
#[command(name = "vsum", version, about = "Unsupervised video summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Synth(Common),
    /// Train on the target bundle and save a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint, or retrain per split when no checkpoint is set.
    Eval(Common),
    /// Run the eight ablation configurations.
    Ablate(Common),
    /// Emit per-video score charts for a checkpoint.
    Plot(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides of the form --section.key=value.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = self.config.clone();
        let mut pairs = Vec::new();
        let mut args = self.overrides.iter();
        while let Some(arg) = args.next() {
            // --config may also appear after the first override.
            let path = if arg == "--config" {
                Some(args.next().cloned().ok_or_else(|| Error::Config("--config needs a path".into()))?)
            } else {
                arg.strip_prefix("--config=").map(str::to_string)
            };
            match path {
                Some(p) if config.is_some() => {
                    return Err(Error::Config(format!("--config given twice ({p})")));
                }
                Some(p) => config = Some(PathBuf::from(p)),
                None => pairs.push(parse_override(arg)?),
            }
        }
        load_config(config.as_deref(), &pairs)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => synth(&c.resolve()?),
        Command::Train(c) => train_cmd(&c.resolve()?),
        Command::Eval(c) => eval_cmd(&c.resolve()?),
        Command::Ablate(c) => ablate_cmd(&c.resolve()?),
        Command::Plot(c) => plot_cmd(&c.resolve()?),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("plain data serialises")
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let mut d = generate_synthetic(&cfg.synth)?;
    d.meta["config"] = cfg.to_json();
    let path = cfg
        .paths
        .data
        .clone()
        .unwrap_or_else(|| cfg.paths.out.join(&cfg.synth.name));
    write_dataset(&d, &path)?;
    println!("wrote {} videos to {}", d.videos.len(), path.display());
    Ok(())
}

struct Data {
    target: Dataset,
    auxiliary: Vec<Dataset>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let target = load_dataset(&cfg.data_path()?)?;
    let auxiliary = cfg
        .paths
        .aux
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Data { target, auxiliary })
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.out.join("checkpoint"))
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let videos: Vec<&VideoRecord> = match cfg.eval.setting {
        Setting::Canonical => data.target.videos.iter().collect(),
        Setting::Augmented => data
            .target
            .videos
            .iter()
            .chain(data.auxiliary.iter().flat_map(|d| &d.videos))
            .collect(),
        Setting::Transfer => data.auxiliary.iter().flat_map(|d| &d.videos).collect(),
    };
    let dim = videos
        .first()
        .ok_or_else(|| Error::Config("no training videos for this setting".into()))?
        .dim();
    let model_cfg = cfg.model_config(dim)?;
    let (model, history) = train(&videos, &model_cfg, &cfg.train)?;
    let dir = checkpoint_dir(cfg);
    save_checkpoint(&dir, &model, &cfg.train, cfg.to_json())?;
    write_text(&dir.join(TRAIN_LOG_FILE), &history.to_jsonl())?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} videos; final score variance {:.6}; checkpoint at {}",
        history.epochs.len(),
        videos.len(),
        last.score_variance,
        dir.display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let out = cfg.paths.out.join("eval");
    let report = match &cfg.paths.checkpoint {
        Some(dir) => {
            let (model, _) = load_checkpoint(dir)?;
            evaluate_model(
                &model,
                &data.target,
                &data.auxiliary,
                &cfg.eval,
                cfg.to_json(),
            )?
        }
        None => {
            let model_cfg = cfg.model_config(data.target.videos.first().map_or(0, |v| v.dim()))?;
            let outcome = run_protocol(
                &data.target,
                &data.auxiliary,
                &model_cfg,
                &cfg.train,
                &cfg.eval,
                cfg.to_json(),
            )?;
            let log: String = outcome
                .histories
                .iter()
                .enumerate()
                .flat_map(|(split, h)| {
                    h.epochs.iter().map(move |e| {
                        let mut v = serde_json::to_value(e).expect("plain record");
                        v["split"] = split.into();
                        v.to_string() + "\n"
                    })
                })
                .collect();
            write_text(&out.join(TRAIN_LOG_FILE), &log)?;
            outcome.report
        }
    };
    report.write(&out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model_cfg = cfg.model_config(data.target.videos.first().map_or(0, |v| v.dim()))?;
    let table = run_ablation(
        &data.target,
        &data.auxiliary,
        &model_cfg,
        &cfg.train,
        &cfg.eval,
        &cfg.ablate.seeds,
        cfg.to_json(),
    )?;
    let out = cfg.paths.out.join("ablate");
    write_text(&out.join("ablation.md"), &table.to_markdown())?;
    write_text(&out.join("ablation.jsonl"), &table.to_jsonl())?;
    write_text(&out.join("ablation.json"), &to_pretty(&table))?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn plot_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = checkpoint_dir(cfg);
    let (model, _) = load_checkpoint(&dir)?;
    let data = load_data(cfg)?;
    let chosen: Vec<&VideoRecord> = if cfg.plot.videos.is_empty() {
        data.target
            .videos
            .iter()
            .take(cfg.plot.max_videos)
            .collect()
    } else {
        cfg.plot
            .videos
            .iter()
            .map(|id| {
                data.target.get(id).ok_or_else(|| {
                    Error::Config(format!("video '{id}' not in '{}'", data.target.name))
                })
            })
            .collect::<Result<_>>()?
    };
    let out = cfg.paths.out.join("plots");
    let mut records = String::new();
    for v in chosen {
        let s = plot_series(&model, v, data.target.kind, &cfg.eval)?;
        write_text(
            &out.join(format!("{}.svg", v.id)),
            &render_svg(&s, cfg.plot.width, cfg.plot.height),
        )?;
        let mut rec = serde_json::to_value(&s).expect("plain record");
        rec["config"] = cfg.to_json();
        records.push_str(&(rec.to_string() + "\n"));
    }
    write_text(&out.join(PLOT_RECORDS_FILE), &records)?;
    println!("wrote plots to {}", out.display());
    Ok(())
}
