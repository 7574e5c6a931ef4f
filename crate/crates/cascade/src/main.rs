use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use cascade::config_io::load_config;
use cascade::harness::{diff_files, run_scenario, write_pcm, write_report, Mode};
use cascade::trace_io::load_trace_at_rate;
use cascade_core::{PipelineConfig, StageSelection};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cascade", version, about = "Streaming voice-agent pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario trace and print its latency table.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Sim)]
        mode: Mode,
        /// full, asr, asr+llm, llm, tts+vocoder, llm+tts+vocoder or vocoder
        #[arg(long, default_value = "full")]
        stages: String,
        /// Directory for report.json, report.txt and events.log.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for one WAV per agent turn.
        #[arg(long)]
        pcm_dir: Option<PathBuf>,
        /// Overrides the trace's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Turn on latency jitter.
        #[arg(long)]
        jitter: bool,
    },
    /// Compare two event logs; exits 1 when they differ.
    Diff { a: PathBuf, b: PathBuf },
    /// Serve the session gateway and viewer.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Static files for the viewer.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn config(path: Option<&PathBuf>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { trace, config: cfg_path, mode, stages, report, pcm_dir, seed, jitter } => {
            let mut cfg = config(cfg_path.as_ref())?;
            cfg.jitter |= jitter;
            let sel = StageSelection::parse(&stages).ok_or_else(|| anyhow!("unknown stage selection '{stages}'"))?;
            let mut trace = load_trace_at_rate(&trace, cfg.sample_rate)?;
            if let Some(s) = seed {
                trace.seed = s;
            }
            let out = run_scenario(&trace, &cfg, mode, sel)?;
            print!("{}", out.report.to_text());
            if let Some(dir) = report {
                write_report(&out, &dir).with_context(|| format!("writing report to {}", dir.display()))?;
            }
            if let Some(dir) = pcm_dir {
                for p in write_pcm(&out, &dir, cfg.vocoder.output_rate)? {
                    log::info!("wrote {}", p.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Diff { a, b } => {
            let diffs = diff_files(&a, &b)?;
            for d in diffs.iter().take(20) {
                println!("{}", d.describe());
            }
            if diffs.is_empty() {
                println!("identical");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{} differing events", diffs.len());
                Ok(ExitCode::from(1))
            }
        }
        Cmd::Serve { bind, config: cfg_path, static_dir } => {
            let cfg = config(cfg_path.as_ref())?;
            let server = cascade::gateway::Gateway::bind(bind, cfg, static_dir)?;
            log::info!("listening on {}", server.local_addr());
            server.serve();
            Ok(ExitCode::SUCCESS)
        }
    }
}
