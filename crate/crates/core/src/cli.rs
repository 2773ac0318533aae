use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hcpo::config::{load_config, RunConfig};
use hcpo::env::{write_dataset, Dataset};
use hcpo::eval::{
    evaluate, history_preference_analysis, layer_drop_sweep, short_long_ratio, DropMode,
};
use hcpo::model::{load_checkpoint, DropSpec, ModelParams};
use hcpo::reward::score_records;
use hcpo::rng::stream_key;
use hcpo::trainer::{read_metrics, train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "hcpo", version, about = "Train and probe history-aware GUI agents on GridGUI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DropArg {
    None,
    Actions,
    Images,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an episode dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a policy into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file; defaults to the configured evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        drop: DropArg,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-wise token-drop sweep.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Drop layers to sweep; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "actions,images,both")]
        modes: Vec<String>,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
        /// Also write the curves as gnuplot data blocks.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// History-length preference analysis.
    Prefs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Analyze only the first N episodes.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "prefs.jsonl")]
        out: PathBuf,
        /// Kept-sample histogram as CSV.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Score `{response, gt}` records.
    Score {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Short-vs-long reward ratio per step of a metrics log.
    Ratio {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn policy(cfg: &RunConfig, ckpt: &Path) -> Result<ModelParams> {
    let ck = load_checkpoint(ckpt)?;
    let params = ck.group("policy")?.clone();
    if params.dims != cfg.agent().dims() {
        bail!("checkpoint {} does not match the configured model", ckpt.display());
    }
    Ok(params)
}

fn dataset(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    Ok(match data {
        Some(p) => hcpo::env::read_dataset(p)?,
        None => cfg.eval_dataset()?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config: c, out, split } => {
            let cfg = config(&c)?;
            let data = match split {
                Split::Train => cfg.train_dataset()?,
                Split::Eval => cfg.eval_dataset()?,
            };
            write_dataset(&data, &out)?;
            log::info!("wrote {} episodes to {}", data.episodes.len(), out.display());
        }
        Command::Train {
            config: c,
            out,
            force,
            resume,
        } => {
            let cfg = config(&c)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = train(&cfg, &out, &TrainOptions { force, resume, ..Default::default() })?;
            if let Some(e) = outcome.eval {
                println!(
                    "sr {:.4} (full) {:.4} (compressed, k={})",
                    e.full.step_sr, e.compressed.step_sr, cfg.eval.drop_layer
                );
            }
        }
        Command::Eval {
            config: c,
            ckpt,
            data,
            drop,
            k,
            out,
        } => {
            let cfg = config(&c)?;
            let params = policy(&cfg, &ckpt)?;
            let spec = match drop {
                DropArg::None => DropSpec::none(),
                DropArg::Actions => DropSpec::actions(k),
                DropArg::Images => DropSpec::images(k),
                DropArg::Both => DropSpec::both(k),
            };
            let data = dataset(&cfg, &data)?;
            let report = evaluate(&params, &cfg.agent(), &data.episodes, spec)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Probe {
            config: c,
            ckpt,
            data,
            ks,
            modes,
            out,
            gnuplot,
        } => {
            let cfg = config(&c)?;
            let params = policy(&cfg, &ckpt)?;
            let modes = modes
                .iter()
                .map(|m| DropMode::from_name(m).with_context(|| format!("unknown drop mode `{m}`")))
                .collect::<Result<Vec<_>>>()?;
            let ks = ks.unwrap_or_else(|| cfg.eval.probe_ks.clone());
            let data = dataset(&cfg, &data)?;
            let table = layer_drop_sweep(&params, &cfg.agent(), &data.episodes, &ks, &modes)?;
            write(&out, &table.to_csv())?;
            if let Some(g) = gnuplot {
                write(&g, &table.to_gnuplot())?;
            }
        }
        Command::Prefs {
            config: c,
            ckpt,
            data,
            episodes,
            out,
            hist,
        } => {
            let cfg = config(&c)?;
            let params = policy(&cfg, &ckpt)?;
            let mut data = match data {
                Some(p) => hcpo::env::read_dataset(&p)?,
                None => cfg.train_dataset()?,
            };
            if let Some(n) = episodes {
                data.episodes.truncate(n);
            }
            let key = stream_key(cfg.seed, &["prefs".into()]);
            let report = history_preference_analysis(&params, &cfg.agent(), &data.episodes, &cfg.eval.preference, key)?;
            report.write_jsonl(&out)?;
            if let Some(h) = hist {
                write(&h, &report.histogram_csv())?;
            }
            println!("kept {} discarded {} histogram {:?}", report.kept, report.discarded, report.histogram);
        }
        Command::Score { config: c, input, output } => {
            let cfg = config(&c)?;
            let n = score_records(&input, &output, &cfg.env.tags)?;
            log::info!("scored {n} records");
        }
        Command::Ratio { metrics, out } => {
            let records = read_metrics(&metrics)?;
            let mut csv = String::from("step,ratio\n");
            for (m, r) in records.iter().zip(short_long_ratio(&records)) {
                csv.push_str(&format!("{},{}\n", m.step, r.map(|v| v.to_string()).unwrap_or_default()));
            }
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
