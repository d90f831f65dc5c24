//! Task sets, batch runs, trace files and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::engine::{
    EngineError, EpisodeConfig, EpisodeTrace, SocraticPlanner, TRACE_SCHEMA_VERSION,
};
use crate::eval::{score_dataset, EvalError, GtAnnotation, MetricsReport};
use crate::gateway::{GatewayConfig, GatewayError, ModelGateway, RecordingGateway};
use crate::plan::{Plan, Subgoal};
use crate::prompts::{
    classify_validity, Feedback, PromptSet, QaTranscript, QaTurn, RenderedPrompt,
};
use crate::world::Scenario;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("malformed task set at scenario `{id}`: {detail}")]
    MalformedTaskSet { id: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: schema version {found:?} is not {expected}")]
    SchemaMismatch {
        line: usize,
        found: Option<u64>,
        expected: u32,
    },
    #[error("trace line {line}: {detail}")]
    BadTrace { line: usize, detail: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("configuration: {0}")]
    Config(String),
}

impl BenchError {
    /// Configuration problems versus I/O problems, for process exit codes.
    pub fn is_io(&self) -> bool {
        matches!(self, BenchError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSet {
    pub name: String,
    pub version: String,
    pub scenarios: Vec<Scenario>,
}

impl TaskSet {
    pub fn ground_truth(&self) -> BTreeMap<String, GtAnnotation> {
        self.scenarios
            .iter()
            .map(|s| (s.id.clone(), s.gt.clone()))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }
}

/// Parses a task file: either `{"name", "version", "scenarios": [...]}` or a
/// bare array of scenarios.
pub fn parse_tasks(text: &str, default_name: &str) -> Result<TaskSet, BenchError> {
    let malformed = |id: &str, detail: String| BenchError::MalformedTaskSet {
        id: id.to_string(),
        detail,
    };
    let root: Value = serde_json::from_str(text).map_err(|e| malformed("<file>", e.to_string()))?;
    let (name, version, list) = match root {
        Value::Array(list) => (default_name.to_string(), String::new(), list),
        Value::Object(mut m) => {
            let name = m
                .get("name")
                .and_then(Value::as_str)
                .unwrap_or(default_name)
                .to_string();
            let version = match m.get("version") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => String::new(),
            };
            match m.remove("scenarios") {
                Some(Value::Array(list)) => (name, version, list),
                _ => return Err(malformed("<file>", "missing `scenarios` array".into())),
            }
        }
        _ => return Err(malformed("<file>", "expected an object or an array".into())),
    };
    let mut seen = BTreeSet::new();
    let mut scenarios = Vec::with_capacity(list.len());
    for (n, v) in list.into_iter().enumerate() {
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{n}"));
        let s: Scenario = serde_json::from_value(v).map_err(|e| malformed(&id, e.to_string()))?;
        if !seen.insert(s.id.clone()) {
            return Err(malformed(&id, "duplicate scenario id".into()));
        }
        scenarios.push(s);
    }
    Ok(TaskSet {
        name,
        version,
        scenarios,
    })
}

pub fn load_tasks(path: &Path) -> Result<TaskSet, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_tasks(&text, &stem)
}

/// Per-episode noise seed: stable across runs and independent of
/// scheduling.
pub fn derive_seed(global: u64, scenario_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in scenario_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ global;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub episode: EpisodeConfig,
    pub gateway: GatewayConfig,
    pub jobs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where to write a replayable script of every exchange.
    pub record: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
}

pub const TRACE_FILE: &str = "traces.jsonl";

/// Runs every scenario on a bounded pool; traces come back in scenario order.
pub fn run_traces(
    tasks: &TaskSet,
    gateway: &dyn ModelGateway,
    prompts: &PromptSet,
    episode: &EpisodeConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<EpisodeTrace>, BenchError> {
    episode.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    pool.install(|| {
        tasks
            .scenarios
            .par_iter()
            .map(|s| {
                let cfg = EpisodeConfig {
                    seed: derive_seed(seed, &s.id),
                    ..episode.clone()
                };
                SocraticPlanner::with_prompts(gateway, prompts, cfg)
                    .run_episode(s)
                    .map_err(BenchError::from)
            })
            .collect()
    })
}

/// Runs the task set and writes `traces.jsonl` under the output directory.
pub fn run_bench(tasks: &TaskSet, cfg: &RunConfig) -> Result<PathBuf, BenchError> {
    if cfg.jobs == 0 {
        return Err(BenchError::Config("jobs must be positive".into()));
    }
    cfg.episode.validate()?;
    let prompts = match &cfg.prompts_dir {
        Some(d) => PromptSet::load_dir(d).map_err(|e| BenchError::Config(e.to_string()))?,
        None => PromptSet::builtin().clone(),
    };
    let gateway: Arc<dyn ModelGateway> = cfg.gateway.build()?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let traces = if let Some(record_path) = &cfg.record {
        let rec = RecordingGateway::new(gateway);
        let traces = run_traces(tasks, &rec, &prompts, &cfg.episode, cfg.seed, cfg.jobs)?;
        fs::write(record_path, rec.to_script().to_json()).map_err(io_err(record_path))?;
        traces
    } else {
        run_traces(tasks, &*gateway, &prompts, &cfg.episode, cfg.seed, cfg.jobs)?
    };

    let path = cfg.out_dir.join(TRACE_FILE);
    write_traces(&path, &traces)?;
    Ok(path)
}

pub fn write_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<(), BenchError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for t in traces {
        writeln!(f, "{}", t.to_json_line()).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn parse_trace_line(line: &str, n: usize) -> Result<EpisodeTrace, BenchError> {
    let v: Value = serde_json::from_str(line).map_err(|e| BenchError::BadTrace {
        line: n,
        detail: e.to_string(),
    })?;
    let found = v.get("schema_version").and_then(Value::as_u64);
    if found != Some(u64::from(TRACE_SCHEMA_VERSION)) {
        return Err(BenchError::SchemaMismatch {
            line: n,
            found,
            expected: TRACE_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(v).map_err(|e| BenchError::BadTrace {
        line: n,
        detail: e.to_string(),
    })
}

/// Reads a JSONL trace file; blank lines are ignored, lines are 1-based.
pub fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_trace_line(l, i + 1))
        .collect()
}

pub fn score(traces: &Path, tasks: &Path) -> Result<MetricsReport, BenchError> {
    let traces = read_traces(traces)?;
    let tasks = load_tasks(tasks)?;
    Ok(score_dataset(&traces, &tasks.ground_truth())?)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<(PathBuf, PathBuf), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join(REPORT_JSON);
    let table = dir.join(REPORT_TABLE);
    let mut body = serde_json::to_string_pretty(report).expect("report serializes");
    body.push('\n');
    fs::write(&json, body).map_err(io_err(&json))?;
    fs::write(&table, report.to_table()).map_err(io_err(&table))?;
    Ok((json, table))
}

/// Re-executes one recorded episode with the same configuration and seed.
pub fn replay(
    trace: &EpisodeTrace,
    tasks: &TaskSet,
    gateway: &dyn ModelGateway,
) -> Result<EpisodeTrace, BenchError> {
    let s = tasks.get(&trace.task_id).ok_or_else(|| {
        BenchError::Config(format!("task `{}` is not in the task set", trace.task_id))
    })?;
    Ok(SocraticPlanner::new(gateway, trace.config.clone()).run_episode(s)?)
}

/// Every prompt an episode of `s` could send, rendered without calling a
/// model. Model-dependent inputs are filled with labelled stand-ins.
pub fn dump_prompts(
    prompts: &PromptSet,
    s: &Scenario,
    use_std: bool,
    use_cot: bool,
) -> Vec<(&'static str, RenderedPrompt)> {
    let i = &s.instruction;
    let mut out = Vec::new();
    if use_cot {
        out.push(("std_cot", prompts.gen_cot_prompt(i)));
        out.push((
            "tp",
            prompts.gen_tp_cot_prompt(i, "<step-by-step decomposition>"),
        ));
    } else if use_std {
        out.push(("std", prompts.gen_std_prompt(i)));
        let qa = QaTranscript {
            turns: vec![QaTurn {
                question: "<question>".into(),
                answer: "<answer>".into(),
            }],
        };
        out.push((
            "tp",
            prompts.gen_tp_prompt(i, &qa).expect("non-empty transcript"),
        ));
    } else {
        out.push(("tp_no_std", prompts.gen_tp_no_std_prompt(i)));
    }
    let plan = Plan::new(s.gt.core.clone());
    if let Some(sg) = s.gt.core.first().cloned().or_else(|| first_subgoal(s)) {
        let v = classify_validity("INVALID");
        out.push(("validity", prompts.gen_validity_prompt(&sg)));
        out.push(("feedback", prompts.gen_feedback_prompt(&sg, &v)));
        let f = Feedback {
            raw: "<feedback>".into(),
        };
        out.push((
            "replan",
            prompts.gen_replan_prompt(&f, &plan, &s.initial.vocabulary(), &v, i),
        ));
    }
    out
}

fn first_subgoal(s: &Scenario) -> Option<Subgoal> {
    s.initial
        .entities
        .keys()
        .next()
        .map(|o| Subgoal::new(crate::plan::ActionKind::Navigate, o.clone()).expect("navigate"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_duplicate_task_sets() {
        let t = parse_tasks("[]", "x").unwrap();
        assert!(t.scenarios.is_empty());
        let t = parse_tasks(r#"{"name":"n","version":1,"scenarios":[]}"#, "x").unwrap();
        assert_eq!((t.name.as_str(), t.version.as_str()), ("n", "1"));

        let one = r#"{"id":"a","instruction":"pick up the apple","agent_zone":"k",
            "entities":[{"id":"apple","zone":"k","pickupable":true}],
            "goal":[{"state":["apple","is_clean",false]}],
            "gt":{"core":["(Pickup, apple)"]}}"#;
        let dup = format!("[{one},{one}]");
        match parse_tasks(&dup, "x") {
            Err(BenchError::MalformedTaskSet { id, detail }) => {
                assert_eq!(id, "a");
                assert!(detail.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        let bad = r#"[{"id":"b","instruction":"x","agent_zone":"k","entities":[],"goal":[],"gt":{"core":[]}}]"#;
        assert!(matches!(
            parse_tasks(bad, "x"),
            Err(BenchError::MalformedTaskSet { id, .. }) if id == "b"
        ));
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(42, "bread"), derive_seed(42, "bread"));
        assert_ne!(derive_seed(42, "bread"), derive_seed(43, "bread"));
        assert_ne!(derive_seed(42, "bread"), derive_seed(42, "apple"));
    }

    #[test]
    fn schema_mismatch_is_reported() {
        assert!(matches!(
            parse_trace_line(r#"{"schema_version":99}"#, 3),
            Err(BenchError::SchemaMismatch {
                line: 3,
                found: Some(99),
                ..
            })
        ));
        assert!(matches!(
            parse_trace_line(r#"{"task_id":"x"}"#, 1),
            Err(BenchError::SchemaMismatch { found: None, .. })
        ));
        assert!(matches!(
            parse_trace_line(r#"{"schema_version":1}"#, 1),
            Err(BenchError::BadTrace { .. })
        ));
    }
}
