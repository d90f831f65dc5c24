use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use socratic_core::bench::{self, BenchError, RunConfig};
use socratic_core::engine::EpisodeConfig;
use socratic_core::gateway::{load_script, GatewayConfig, HttpConfig, ScriptedGateway};
use socratic_core::prompts::PromptSet;

#[derive(Parser)]
#[command(
    name = "socratic",
    version,
    about = "Run, score and inspect zero-shot planning episodes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatewayKind {
    Http,
    Scripted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every scenario of a task set and write traces.jsonl
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        gateway: GatewayKind,
        /// Oracle script (scripted gateway)
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable failure recovery
        #[arg(long = "static")]
        static_mode: bool,
        #[arg(long)]
        no_std: bool,
        #[arg(long)]
        cot: bool,
        /// Controller-noise probability overriding the scenarios' own
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 10)]
        budget: u32,
        /// Save every exchange as a replayable script
        #[arg(long)]
        record: Option<PathBuf>,
        /// Load prompt templates from this directory instead of the bundled ones
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
        endpoint: String,
        #[arg(long, default_value = "gpt-4o")]
        model: String,
        /// Environment variable holding the API key
        #[arg(long, default_value = "OPENAI_API_KEY")]
        api_key_env: String,
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 3)]
        retries: u32,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
    },
    /// Score a trace file against a task set's annotations
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Report directory (defaults to the trace file's directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute one trace line and compare with the recorded trace
    Replay {
        #[arg(long)]
        traces: PathBuf,
        /// 1-based line number
        #[arg(long, default_value_t = 1)]
        line: usize,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        script: PathBuf,
    },
    /// Render the prompts of a scenario without calling a model
    Prompts {
        #[arg(long)]
        tasks: PathBuf,
        /// Scenario id (defaults to all)
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        no_std: bool,
        #[arg(long)]
        cot: bool,
        /// Write one file per prompt here instead of printing
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        if e.is_io() {
            Failure::Io(e.into())
        } else {
            Failure::Config(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, Failure> {
    r.map_err(|e| Failure::Io(anyhow::Error::new(e).context(what.display().to_string())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run {
            tasks,
            gateway,
            script,
            seed,
            static_mode,
            no_std,
            cot,
            noise,
            out,
            jobs,
            budget,
            record,
            prompts,
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            retries,
            max_in_flight,
        } => {
            let gateway = match gateway {
                GatewayKind::Scripted => {
                    let Some(script) = script else {
                        return Err(anyhow::anyhow!("--gateway scripted needs --script").into());
                    };
                    // fail before any episode runs
                    load_script(&script).context("loading script")?;
                    GatewayConfig::Scripted { script }
                }
                GatewayKind::Http => GatewayConfig::Http(HttpConfig {
                    endpoint,
                    model,
                    api_key_env,
                    timeout: Duration::from_secs(timeout_secs),
                    retries,
                    backoff_base: Duration::from_millis(500),
                    max_in_flight,
                }),
            };
            let tasks = bench::load_tasks(&tasks)?;
            let cfg = RunConfig {
                episode: EpisodeConfig {
                    failure_budget: budget,
                    replanning_enabled: !static_mode,
                    use_std: !no_std,
                    use_cot: cot,
                    decode: None,
                    noise_override: noise,
                    seed,
                },
                gateway,
                jobs,
                seed,
                out_dir: out,
                record,
                prompts_dir: prompts,
            };
            let path = bench::run_bench(&tasks, &cfg)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Score {
            traces,
            tasks,
            format,
            out,
        } => {
            let report = bench::score(&traces, &tasks)?;
            let dir = out.unwrap_or_else(|| {
                traces
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            bench::write_report(&report, &dir)?;
            match format {
                Format::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                ),
                Format::Table => print!("{}", report.to_table()),
            }
            Ok(())
        }
        Cmd::Replay {
            traces,
            line,
            tasks,
            script,
        } => {
            let text = io(std::fs::read_to_string(&traces), &traces)?;
            let Some(raw) = text
                .lines()
                .nth(line.saturating_sub(1))
                .filter(|_| line > 0)
            else {
                return Err(anyhow::anyhow!("{} has no line {line}", traces.display()).into());
            };
            let recorded = bench::parse_trace_line(raw, line)?;
            let tasks = bench::load_tasks(&tasks)?;
            let gw = ScriptedGateway::new(load_script(&script).context("loading script")?);
            let again = bench::replay(&recorded, &tasks, &gw)?;
            let same = again.to_json_line() == raw;
            println!(
                "{} outcome={:?} sr={} gc={} failures={} identical={same}",
                again.task_id, again.outcome, again.sr, again.gc, again.failure_count
            );
            if !same {
                return Err(anyhow::anyhow!("replayed trace differs from line {line}").into());
            }
            Ok(())
        }
        Cmd::Prompts {
            tasks,
            scenario,
            no_std,
            cot,
            out,
        } => {
            let tasks = bench::load_tasks(&tasks)?;
            let chosen: Vec<_> = match &scenario {
                Some(id) => match tasks.get(id) {
                    Some(s) => vec![s],
                    None => return Err(Failure::Config(anyhow::anyhow!("no scenario `{id}`"))),
                },
                None => tasks.scenarios.iter().collect(),
            };
            if let Some(dir) = &out {
                io(std::fs::create_dir_all(dir), dir)?;
            }
            for s in chosen {
                for (kind, p) in bench::dump_prompts(PromptSet::builtin(), s, !no_std, cot) {
                    match &out {
                        Some(dir) => {
                            let path = dir.join(format!("{}.{kind}.txt", s.id));
                            io(std::fs::write(&path, p.to_string()), &path)?;
                        }
                        None => print!("=== {} / {kind}\n{p}\n", s.id),
                    }
                }
            }
            Ok(())
        }
    }
}
