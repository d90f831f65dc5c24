//! Episode driver: decompose, plan, execute, and recover from failures.
//!
//! ```text
//! QA   <- LLM(std(I))             skipped without decomposition
//! P    <- LLM(tp(I, QA))
//! for subgoal in P:
//!     execute; O |= detect()
//!     on failure:
//!         v <- MLLM(validity(subgoal), scene)
//!         if object in O and v valid: redo
//!         else: f <- MLLM(feedback, scene); P <- LLM(replan(f, P, O, v, I))
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Completion, DecodeParams, GatewayError, ModelGateway, TokenCounts};
use crate::plan::{parse_plan, Instruction, ObjectId, Plan, PlanError, PlanOrigin, Subgoal};
use crate::prompts::{
    classify_validity, Feedback, PromptError, PromptSet, QaTranscript, QaTurn, RenderedPrompt,
    Validity, Verdict,
};
use crate::world::{
    apply_subgoal, check_goal_conditions, detect_objects, effect_holds, new_world, render_scene,
    Scenario, SceneSnapshot, StepReason, WorldError, WorldState,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FAILURE_BUDGET: u32 = 10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("decomposition reply contains no question/answer pairs")]
    MalformedTranscript,
    #[error("planning failed: {0}")]
    PlanningFailed(#[source] PlanError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid episode configuration: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub failure_budget: u32,
    /// `false` runs the static ablation: failed subgoals are skipped.
    pub replanning_enabled: bool,
    pub use_std: bool,
    /// Replaces the self-questioning pass with a step-by-step decomposition.
    pub use_cot: bool,
    /// `None` derives the default profile from the scenario vocabulary.
    pub decode: Option<DecodeParams>,
    pub noise_override: Option<f64>,
    /// Seed of the controller-noise stream for this episode.
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            failure_budget: DEFAULT_FAILURE_BUDGET,
            replanning_enabled: true,
            use_std: true,
            use_cot: false,
            decode: None,
            noise_override: None,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.failure_budget == 0 {
            return Err(EngineError::Config(
                "failure budget must be positive".into(),
            ));
        }
        if let Some(p) = self.noise_override {
            if !(0.0..=1.0).contains(&p) {
                return Err(EngineError::Config(format!("noise {p} is outside [0, 1]")));
            }
        }
        if let Some(d) = &self.decode {
            if d.temperature.is_nan() || d.temperature < 0.0 || d.max_tokens == 0 {
                return Err(EngineError::Config("bad decode parameters".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    BudgetExhausted,
    PlanExhausted,
    /// No usable plan came out of decomposition or planning.
    PlanningFailed,
    /// Recovery could not proceed (gateway error, unparseable revision).
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decompose,
    Plan,
    Validity,
    Feedback,
    Replan,
}

/// One model exchange as it went over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: Stage,
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub token_counts: TokenCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum AbortReason {
    GatewayError(String),
    ReplanUnparseable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryDecision {
    Redo {
        validity: Validity,
    },
    Replan {
        plan: Plan,
        feedback: Feedback,
        validity: Validity,
    },
    Abort {
        reason: AbortReason,
        validity: Option<Validity>,
        feedback: Option<Feedback>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecoveryRecord {
    Redo,
    Replan { new_plan: Plan, resume_index: usize },
    Abort { reason: AbortReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub plan_index: usize,
    pub subgoal: Subgoal,
    pub success: bool,
    pub reason: StepReason,
    pub scene: String,
    pub observed: BTreeSet<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<RecoveryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub schema_version: u32,
    pub task_id: String,
    pub task_type: String,
    pub instruction: Instruction,
    pub config: EpisodeConfig,
    /// Effective sampling controls.
    pub decode: DecodeParams,
    /// Effective controller-noise probability.
    pub noise: f64,
    pub qa: Option<QaTranscript>,
    pub initial_plan: Plan,
    pub final_plan: Plan,
    pub steps: Vec<StepRecord>,
    pub calls: Vec<CallRecord>,
    pub failure_count: u32,
    pub redo_count: u32,
    pub replan_count: u32,
    pub outcome: Outcome,
    pub sr: u8,
    pub gc: f64,
    pub goal_status: Vec<bool>,
    pub final_state: WorldState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// Per-episode list of model exchanges.
#[derive(Debug, Default)]
pub struct CallLog {
    pub calls: Vec<CallRecord>,
}

impl CallLog {
    fn push(
        &mut self,
        stage: Stage,
        prompt: &RenderedPrompt,
        r: &Result<Completion, GatewayError>,
    ) {
        let (response, provider, latency_ms, token_counts, error) = match r {
            Ok(c) => (
                Some(c.text.clone()),
                Some(c.provider_id.clone()),
                c.latency_ms,
                c.token_counts,
                None,
            ),
            Err(e) => (None, None, 0, TokenCounts::default(), Some(e.to_string())),
        };
        self.calls.push(CallRecord {
            stage,
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            response,
            provider,
            latency_ms,
            token_counts,
            error,
        });
    }
}

pub struct SocraticPlanner<'a> {
    gateway: &'a dyn ModelGateway,
    prompts: &'a PromptSet,
    config: EpisodeConfig,
}

impl<'a> SocraticPlanner<'a> {
    pub fn new(gateway: &'a dyn ModelGateway, config: EpisodeConfig) -> Self {
        Self::with_prompts(gateway, PromptSet::builtin(), config)
    }

    pub fn with_prompts(
        gateway: &'a dyn ModelGateway,
        prompts: &'a PromptSet,
        config: EpisodeConfig,
    ) -> Self {
        SocraticPlanner {
            gateway,
            prompts,
            config,
        }
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    fn call(
        &self,
        stage: Stage,
        prompt: &RenderedPrompt,
        scene: Option<&SceneSnapshot>,
        params: &DecodeParams,
        log: &mut CallLog,
    ) -> Result<String, GatewayError> {
        let r = match scene {
            Some(s) => {
                let sent = prompt.with_observation(s);
                let r = self.gateway.complete(&sent, params);
                log.push(stage, &sent, &r);
                r
            }
            None => {
                let r = self.gateway.complete(prompt, params);
                log.push(stage, prompt, &r);
                r
            }
        };
        r.map(|c| c.text)
    }

    /// Self-questioning pass (or the step-by-step variant under `use_cot`).
    pub fn decompose(
        &self,
        i: &Instruction,
        params: &DecodeParams,
        log: &mut CallLog,
    ) -> Result<QaTranscript, EngineError> {
        if self.config.use_cot {
            let prompt = self.prompts.gen_cot_prompt(i);
            let text = self.call(Stage::Decompose, &prompt, None, params, log)?;
            if text.trim().is_empty() {
                return Err(EngineError::MalformedTranscript);
            }
            return Ok(QaTranscript {
                turns: vec![QaTurn {
                    question: format!(
                        "How can you decompose the instruction: {}? Let's think step by step.",
                        i.text()
                    ),
                    answer: text.trim().to_string(),
                }],
            });
        }
        let prompt = self.prompts.gen_std_prompt(i);
        let text = self.call(Stage::Decompose, &prompt, None, params, log)?;
        let qa = QaTranscript::parse(&text);
        if qa.turns.is_empty() {
            return Err(EngineError::MalformedTranscript);
        }
        Ok(qa)
    }

    pub fn plan(
        &self,
        i: &Instruction,
        qa: Option<&QaTranscript>,
        params: &DecodeParams,
        log: &mut CallLog,
    ) -> Result<Plan, EngineError> {
        let prompt = match qa {
            Some(qa) if self.config.use_cot => {
                let text = qa.turns.first().map(|t| t.answer.as_str()).unwrap_or("");
                self.prompts.gen_tp_cot_prompt(i, text)
            }
            Some(qa) => self.prompts.gen_tp_prompt(i, qa)?,
            None => self.prompts.gen_tp_no_std_prompt(i),
        };
        let text = self.call(Stage::Plan, &prompt, None, params, log)?;
        parse_plan(&text)
            .map(|p| p.plan)
            .map_err(EngineError::PlanningFailed)
    }

    /// Decides between retrying the failed subgoal and revising the plan.
    #[allow(clippy::too_many_arguments)]
    pub fn handle_failure(
        &self,
        sg: &Subgoal,
        scene: &SceneSnapshot,
        observed: &BTreeSet<ObjectId>,
        current: &Plan,
        i: &Instruction,
        params: &DecodeParams,
        log: &mut CallLog,
    ) -> RecoveryDecision {
        let abort = |e: GatewayError, validity, feedback| RecoveryDecision::Abort {
            reason: AbortReason::GatewayError(e.to_string()),
            validity,
            feedback,
        };
        let prompt = self.prompts.gen_validity_prompt(sg);
        let validity = match self.call(Stage::Validity, &prompt, Some(scene), params, log) {
            Ok(t) => classify_validity(&t),
            Err(e) => return abort(e, None, None),
        };
        if observed.contains(sg.object()) && validity.verdict == Verdict::Valid {
            return RecoveryDecision::Redo { validity };
        }
        let prompt = self.prompts.gen_feedback_prompt(sg, &validity);
        let feedback = match self.call(Stage::Feedback, &prompt, Some(scene), params, log) {
            Ok(t) => Feedback { raw: t },
            Err(e) => return abort(e, Some(validity), None),
        };
        let prompt = self
            .prompts
            .gen_replan_prompt(&feedback, current, observed, &validity, i);
        let text = match self.call(Stage::Replan, &prompt, None, params, log) {
            Ok(t) => t,
            Err(e) => return abort(e, Some(validity), Some(feedback)),
        };
        match parse_plan(&text) {
            Ok(p) => RecoveryDecision::Replan {
                plan: p.plan,
                feedback,
                validity,
            },
            Err(e) => RecoveryDecision::Abort {
                reason: AbortReason::ReplanUnparseable(e.to_string()),
                validity: Some(validity),
                feedback: Some(feedback),
            },
        }
    }

    /// Runs one scenario to completion. Only configuration problems are
    /// errors; everything else ends up in the trace.
    pub fn run_episode(&self, scenario: &Scenario) -> Result<EpisodeTrace, EngineError> {
        self.config.validate()?;
        let mut world = new_world(scenario)?;
        world.noise_seed = self.config.seed;
        if let Some(p) = self.config.noise_override {
            world.noise = p;
        }
        let params = self
            .config
            .decode
            .clone()
            .unwrap_or_else(|| DecodeParams::for_vocabulary(&scenario.vocabulary()));
        let i = &scenario.instruction;
        let mut log = CallLog::default();
        let mut ep = Episode {
            trace: EpisodeTrace {
                schema_version: TRACE_SCHEMA_VERSION,
                task_id: scenario.id.clone(),
                task_type: scenario.task_type.clone(),
                instruction: i.clone(),
                config: self.config.clone(),
                decode: params.clone(),
                noise: world.noise,
                qa: None,
                initial_plan: Plan::new(Vec::new()),
                final_plan: Plan::new(Vec::new()),
                steps: Vec::new(),
                calls: Vec::new(),
                failure_count: 0,
                redo_count: 0,
                replan_count: 0,
                outcome: Outcome::PlanningFailed,
                sr: 0,
                gc: 0.0,
                goal_status: Vec::new(),
                final_state: world.clone(),
                error: None,
            },
        };

        let setup = (|| {
            let qa = if self.config.use_std || self.config.use_cot {
                Some(self.decompose(i, &params, &mut log)?)
            } else {
                None
            };
            ep.trace.qa = qa.clone();
            self.plan(i, qa.as_ref(), &params, &mut log)
        })();
        let mut plan = match setup {
            Ok(p) => p,
            Err(e) => {
                ep.trace.outcome = match e {
                    EngineError::Gateway(_) => Outcome::Aborted,
                    _ => Outcome::PlanningFailed,
                };
                ep.trace.error = Some(e.to_string());
                return Ok(ep.finish(world, scenario, log));
            }
        };
        ep.trace.initial_plan = plan.clone();

        let mut observed: BTreeSet<ObjectId> = BTreeSet::new();
        let mut done: Vec<Subgoal> = Vec::new();
        let mut idx = 0usize;
        let outcome = loop {
            if check_goal_conditions(&world, &scenario.goal)
                .iter()
                .all(|g| *g)
            {
                break Outcome::Success;
            }
            let Some(sg) = plan.steps.get(idx).cloned() else {
                break Outcome::PlanExhausted;
            };
            let res = apply_subgoal(&world, &sg);
            world = res.state_after;
            observed.extend(detect_objects(&world));
            let scene = render_scene(&world);
            let mut step = StepRecord {
                plan_index: idx,
                subgoal: sg.clone(),
                success: res.success,
                reason: res.reason,
                scene: scene.description.clone(),
                observed: observed.clone(),
                validity: None,
                feedback: None,
                recovery: None,
            };
            if res.success {
                done.push(sg);
                idx += 1;
                ep.trace.steps.push(step);
                continue;
            }
            ep.trace.failure_count += 1;
            if ep.trace.failure_count >= self.config.failure_budget {
                ep.trace.steps.push(step);
                break Outcome::BudgetExhausted;
            }
            if !self.config.replanning_enabled {
                idx += 1;
                ep.trace.steps.push(step);
                continue;
            }
            match self.handle_failure(&sg, &scene, &observed, &plan, i, &params, &mut log) {
                RecoveryDecision::Redo { validity } => {
                    ep.trace.redo_count += 1;
                    step.validity = Some(validity);
                    step.recovery = Some(RecoveryRecord::Redo);
                    ep.trace.steps.push(step);
                }
                RecoveryDecision::Replan {
                    plan: mut new_plan,
                    feedback,
                    validity,
                } => {
                    ep.trace.replan_count += 1;
                    new_plan.origin = PlanOrigin::Replanned(idx);
                    let resume = resume_index(&new_plan, &done, &world);
                    step.validity = Some(validity);
                    step.feedback = Some(feedback);
                    step.recovery = Some(RecoveryRecord::Replan {
                        new_plan: new_plan.clone(),
                        resume_index: resume,
                    });
                    ep.trace.steps.push(step);
                    plan = new_plan;
                    idx = resume;
                }
                RecoveryDecision::Abort {
                    reason,
                    validity,
                    feedback,
                } => {
                    step.validity = validity;
                    step.feedback = feedback;
                    step.recovery = Some(RecoveryRecord::Abort { reason });
                    ep.trace.steps.push(step);
                    break Outcome::Aborted;
                }
            }
        };
        ep.trace.outcome = outcome;
        ep.trace.final_plan = plan;
        Ok(ep.finish(world, scenario, log))
    }
}

struct Episode {
    trace: EpisodeTrace,
}

impl Episode {
    fn finish(mut self, world: WorldState, scenario: &Scenario, log: CallLog) -> EpisodeTrace {
        let status = check_goal_conditions(&world, &scenario.goal);
        let met = status.iter().filter(|g| **g).count();
        let t = &mut self.trace;
        t.sr = u8::from(met == status.len());
        t.gc = if status.is_empty() {
            0.0
        } else {
            met as f64 / status.len() as f64
        };
        if t.final_plan.is_empty() {
            t.final_plan = t.initial_plan.clone();
        }
        t.goal_status = status;
        t.final_state = world;
        t.calls = log.calls;
        self.trace
    }
}

/// Where execution continues in a revised plan: past the longest prefix that
/// replays subgoals already completed (in order), then past any further
/// subgoals whose effect already holds.
pub fn resume_index(revised: &Plan, done: &[Subgoal], world: &WorldState) -> usize {
    let mut h = 0;
    let mut j = 0;
    while let Some(sg) = revised.steps.get(j) {
        match done[h..].iter().position(|d| d == sg) {
            Some(p) => {
                h += p + 1;
                j += 1;
            }
            None => break,
        }
    }
    while revised
        .steps
        .get(j)
        .is_some_and(|sg| effect_holds(world, sg))
    {
        j += 1;
    }
    j
}
