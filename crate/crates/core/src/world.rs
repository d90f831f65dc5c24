//! Symbolic household simulator.
//!
//! Objects live in named zones and optionally inside a receptacle. The agent
//! occupies one zone and holds at most one object. An object is visible when
//! it is held, or when it is in the agent's zone and its container (if any) is
//! open or cannot be closed.
//!
//! Appliance effects fire on the step that enables them: switching on a
//! microwave heats what is inside, closing a fridge chills its contents, and
//! turning on a faucet cleans whatever sits in a sink of the same zone.
//!
//! Controller noise is drawn from `(noise_seed, step_count)` so a run can be
//! replayed exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::GtAnnotation;
use crate::plan::{ActionKind, Instruction, ObjectId, Subgoal};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Capability and state flags of an entity. Missing flags default to false.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    #[serde(skip_serializing_if = "is_false")]
    pub pickupable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub openable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_open: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub toggleable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_on: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub sliceable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_sliced: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub heatable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_heated: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub coolable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_chilled: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub cleanable: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_clean: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub is_receptacle: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub heavy: bool,
}

impl Flags {
    /// Returns the first violated state-implies-capability rule.
    fn implication_violation(&self) -> Option<&'static str> {
        let rules = [
            (self.is_open, self.openable, "is_open requires openable"),
            (self.is_on, self.toggleable, "is_on requires toggleable"),
            (
                self.is_sliced,
                self.sliceable,
                "is_sliced requires sliceable",
            ),
            (self.is_heated, self.heatable, "is_heated requires heatable"),
            (
                self.is_chilled,
                self.coolable,
                "is_chilled requires coolable",
            ),
            (self.is_clean, self.cleanable, "is_clean requires cleanable"),
        ];
        rules
            .into_iter()
            .find(|(state, capability, _)| *state && !*capability)
            .map(|(_, _, rule)| rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntity {
    pub id: ObjectId,
    /// Category token (`knife`, `microwave`, ...). Defaults to the id.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub class: String,
    pub zone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container: Option<ObjectId>,
    #[serde(flatten)]
    pub flags: Flags,
}

impl ObjectEntity {
    pub fn class(&self) -> &str {
        if self.class.is_empty() {
            self.id.as_str()
        } else {
            &self.class
        }
    }

    fn is_knife(&self) -> bool {
        matches!(self.class(), "knife" | "butterknife")
    }
}

/// Mutable object states a goal condition may test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFlag {
    IsOpen,
    IsOn,
    IsSliced,
    IsHeated,
    IsChilled,
    IsClean,
}

impl StateFlag {
    pub fn read(self, flags: &Flags) -> bool {
        match self {
            StateFlag::IsOpen => flags.is_open,
            StateFlag::IsOn => flags.is_on,
            StateFlag::IsSliced => flags.is_sliced,
            StateFlag::IsHeated => flags.is_heated,
            StateFlag::IsChilled => flags.is_chilled,
            StateFlag::IsClean => flags.is_clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalCondition {
    Located(ObjectId, ObjectId),
    InZone(ObjectId, String),
    State(ObjectId, StateFlag, bool),
}

impl GoalCondition {
    fn object(&self) -> &ObjectId {
        match self {
            GoalCondition::Located(o, _)
            | GoalCondition::InZone(o, _)
            | GoalCondition::State(o, _, _) => o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalSpec {
    pub conditions: Vec<GoalCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub entities: BTreeMap<ObjectId, ObjectEntity>,
    pub agent_zone: String,
    pub held: Option<ObjectId>,
    pub step_count: u64,
    pub noise_seed: u64,
    /// Per-action probability that the controller fails regardless of the
    /// action's preconditions.
    pub noise: f64,
}

impl WorldState {
    pub fn entity(&self, id: &ObjectId) -> Option<&ObjectEntity> {
        self.entities.get(id)
    }

    pub fn vocabulary(&self) -> BTreeSet<ObjectId> {
        self.entities.keys().cloned().collect()
    }

    pub fn is_visible(&self, id: &ObjectId) -> bool {
        if self.held.as_ref() == Some(id) {
            return true;
        }
        let Some(e) = self.entities.get(id) else {
            return false;
        };
        if e.zone != self.agent_zone {
            return false;
        }
        match &e.container {
            None => true,
            Some(c) => self
                .entities
                .get(c)
                .is_some_and(|c| !c.flags.openable || c.flags.is_open),
        }
    }

    /// Checks every structural invariant of the state.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.agent_zone.trim().is_empty() {
            return Err("agent_zone is empty".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(format!("noise {} outside [0, 1]", self.noise));
        }
        for (id, e) in &self.entities {
            if &e.id != id {
                return Err(format!("entity key {id} does not match id {}", e.id));
            }
            if let Some(rule) = e.flags.implication_violation() {
                return Err(format!("{id}: {rule}"));
            }
            if let Some(c) = &e.container {
                match self.entities.get(c) {
                    Some(ce) if ce.flags.is_receptacle => {}
                    Some(_) => return Err(format!("{id}: container {c} is not a receptacle")),
                    None => return Err(format!("{id}: container {c} does not exist")),
                }
                if self.is_inside(c, id) {
                    return Err(format!("{id} is inside itself"));
                }
            }
        }
        if let Some(h) = &self.held {
            let e = self
                .entities
                .get(h)
                .ok_or_else(|| format!("held object {h} does not exist"))?;
            if e.container.is_some() {
                return Err(format!("held object {h} is inside a container"));
            }
            if e.zone != self.agent_zone {
                return Err(format!("held object {h} is not with the agent"));
            }
        }
        Ok(())
    }

    /// Moves an object and everything (transitively) inside it to `zone`.
    fn relocate(&mut self, id: &ObjectId, zone: &str) {
        let mut stack = vec![id.clone()];
        while let Some(cur) = stack.pop() {
            if let Some(e) = self.entities.get_mut(&cur) {
                e.zone = zone.to_string();
            }
            stack.extend(
                self.entities
                    .values()
                    .filter(|e| e.container.as_ref() == Some(&cur))
                    .map(|e| e.id.clone()),
            );
        }
    }

    /// Whether `inner` is `outer` or sits (transitively) inside it.
    fn is_inside(&self, inner: &ObjectId, outer: &ObjectId) -> bool {
        let mut cur = Some(inner);
        for _ in 0..=self.entities.len() {
            match cur {
                Some(c) if c == outer => return true,
                Some(c) => cur = self.entities.get(c).and_then(|e| e.container.as_ref()),
                None => return false,
            }
        }
        true
    }

    fn contents(&self, receptacle: &ObjectId) -> Vec<ObjectId> {
        self.entities
            .values()
            .filter(|e| e.container.as_ref() == Some(receptacle))
            .map(|e| e.id.clone())
            .collect()
    }
}

/// One benchmark task: initial world, instruction, goal and plan annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioFile", into = "ScenarioFile")]
pub struct Scenario {
    pub id: String,
    pub task_type: String,
    pub instruction: Instruction,
    pub initial: WorldState,
    pub goal: GoalSpec,
    pub gt: GtAnnotation,
}

impl Scenario {
    pub fn vocabulary(&self) -> BTreeSet<ObjectId> {
        self.initial.vocabulary()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let invalid = |m: String| WorldError::InvalidScenario(format!("{}: {m}", self.id));
        if self.id.trim().is_empty() {
            return Err(WorldError::InvalidScenario("scenario id is empty".into()));
        }
        self.initial.check_invariants().map_err(invalid)?;
        if self.goal.conditions.is_empty() {
            return Err(invalid("goal has no conditions".into()));
        }
        for c in &self.goal.conditions {
            let o = c.object();
            if !self.initial.entities.contains_key(o) {
                return Err(invalid(format!("goal references unknown object {o}")));
            }
            if let GoalCondition::Located(_, r) = c {
                if !self.initial.entities.contains_key(r) {
                    return Err(invalid(format!("goal references unknown receptacle {r}")));
                }
            }
        }
        self.gt
            .validate()
            .map_err(|e| invalid(format!("ground truth: {e}")))?;
        Ok(())
    }
}

/// On-disk scenario layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioFile {
    id: String,
    #[serde(default)]
    task_type: String,
    instruction: Instruction,
    agent_zone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    held: Option<ObjectId>,
    entities: Vec<ObjectEntity>,
    goal: Vec<GoalCondition>,
    gt: GtAnnotation,
    #[serde(default)]
    noise: f64,
}

impl TryFrom<ScenarioFile> for Scenario {
    type Error = WorldError;
    fn try_from(f: ScenarioFile) -> Result<Self, Self::Error> {
        let mut entities = BTreeMap::new();
        for e in f.entities {
            if entities.insert(e.id.clone(), e).is_some() {
                return Err(WorldError::InvalidScenario(format!(
                    "{}: duplicate entity id",
                    f.id
                )));
            }
        }
        let scenario = Scenario {
            id: f.id,
            task_type: f.task_type,
            instruction: f.instruction,
            initial: WorldState {
                entities,
                agent_zone: f.agent_zone,
                held: f.held,
                step_count: 0,
                noise_seed: 0,
                noise: f.noise,
            },
            goal: GoalSpec { conditions: f.goal },
            gt: f.gt,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

impl From<Scenario> for ScenarioFile {
    fn from(s: Scenario) -> Self {
        ScenarioFile {
            id: s.id,
            task_type: s.task_type,
            instruction: s.instruction,
            agent_zone: s.initial.agent_zone,
            held: s.initial.held,
            entities: s.initial.entities.into_values().collect(),
            goal: s.goal.conditions,
            gt: s.gt,
            noise: s.initial.noise,
        }
    }
}

/// Fresh world for an episode.
pub fn new_world(scenario: &Scenario) -> Result<WorldState, WorldError> {
    scenario.validate()?;
    let mut w = scenario.initial.clone();
    w.step_count = 0;
    Ok(w)
}

/// Why a step succeeded or failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum StepReason {
    Ok,
    PreconditionViolated(String),
    TargetNotVisible,
    HandOccupied,
    HandEmpty,
    ReceptacleClosed,
    ObjectTooHeavy,
    ControllerNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    pub success: bool,
    pub reason: StepReason,
    pub state_after: WorldState,
}

/// Uniform draw in `[0, 1)` keyed by seed and step.
fn noise_draw(seed: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.random::<f64>()
}

fn violated(detail: impl Into<String>) -> StepReason {
    StepReason::PreconditionViolated(detail.into())
}

/// Executes one subgoal. Never panics on well-formed input; objects missing
/// from the world are reported as not visible.
pub fn apply_subgoal(w: &WorldState, sg: &Subgoal) -> ExecutionResult {
    let step = w.step_count;
    let mut unchanged = w.clone();
    unchanged.step_count = step + 1;

    if w.noise > 0.0 && noise_draw(w.noise_seed, step) < w.noise {
        return ExecutionResult {
            success: false,
            reason: StepReason::ControllerNoise,
            state_after: unchanged,
        };
    }

    let mut next = unchanged.clone();
    match transition(&mut next, sg) {
        Ok(()) => ExecutionResult {
            success: true,
            reason: StepReason::Ok,
            state_after: next,
        },
        Err(reason) => ExecutionResult {
            success: false,
            reason,
            state_after: unchanged,
        },
    }
}

fn transition(w: &mut WorldState, sg: &Subgoal) -> Result<(), StepReason> {
    let target = sg.object().clone();
    let Some(entity) = w.entities.get(&target).cloned() else {
        return Err(StepReason::TargetNotVisible);
    };

    if sg.action() == ActionKind::Navigate {
        if w.held.as_ref() != Some(&target) {
            let zone = entity.zone.clone();
            w.agent_zone = zone.clone();
            if let Some(h) = w.held.clone() {
                w.relocate(&h, &zone);
            }
        }
        return Ok(());
    }

    if !w.is_visible(&target) {
        return Err(StepReason::TargetNotVisible);
    }
    let flags = &entity.flags;

    match sg.action() {
        ActionKind::Pickup => {
            if !flags.pickupable {
                return Err(violated(format!("{target} cannot be picked up")));
            }
            if flags.heavy {
                return Err(StepReason::ObjectTooHeavy);
            }
            if w.held.is_some() {
                return Err(StepReason::HandOccupied);
            }
            let zone = w.agent_zone.clone();
            if let Some(e) = w.entities.get_mut(&target) {
                e.container = None;
            }
            w.relocate(&target, &zone);
            w.held = Some(target);
        }
        ActionKind::Put => {
            let receptacle = sg
                .receptacle()
                .cloned()
                .ok_or_else(|| violated("put without receptacle"))?;
            match &w.held {
                None => return Err(StepReason::HandEmpty),
                Some(h) if *h != target => {
                    return Err(violated(format!("holding {h}, not {target}")))
                }
                Some(_) => {}
            }
            if w.is_inside(&receptacle, &target) {
                return Err(violated(format!("cannot put {target} inside itself")));
            }
            let Some(rec) = w.entities.get(&receptacle) else {
                return Err(StepReason::TargetNotVisible);
            };
            if !w.is_visible(&receptacle) {
                return Err(StepReason::TargetNotVisible);
            }
            if !rec.flags.is_receptacle {
                return Err(violated(format!("{receptacle} is not a receptacle")));
            }
            if rec.flags.openable && !rec.flags.is_open {
                return Err(StepReason::ReceptacleClosed);
            }
            let zone = rec.zone.clone();
            if let Some(e) = w.entities.get_mut(&target) {
                e.container = Some(receptacle);
            }
            w.relocate(&target, &zone);
            w.held = None;
        }
        ActionKind::Open | ActionKind::Close => {
            let opening = sg.action() == ActionKind::Open;
            if !flags.openable {
                return Err(violated(format!("{target} cannot be opened or closed")));
            }
            if flags.is_open == opening {
                let state = if opening { "open" } else { "closed" };
                return Err(violated(format!("{target} is already {state}")));
            }
            if let Some(e) = w.entities.get_mut(&target) {
                e.flags.is_open = opening;
            }
            if !opening && entity.class() == "fridge" {
                for id in w.contents(&target) {
                    if let Some(e) = w.entities.get_mut(&id) {
                        if e.flags.coolable {
                            e.flags.is_chilled = true;
                        }
                    }
                }
            }
        }
        ActionKind::ToggleOn | ActionKind::ToggleOff => {
            let on = sg.action() == ActionKind::ToggleOn;
            if !flags.toggleable {
                return Err(violated(format!("{target} cannot be toggled")));
            }
            if flags.is_on == on {
                let state = if on { "on" } else { "off" };
                return Err(violated(format!("{target} is already {state}")));
            }
            if let Some(e) = w.entities.get_mut(&target) {
                e.flags.is_on = on;
            }
            if on {
                apply_toggle_effects(w, &entity);
            }
        }
        ActionKind::Slice => {
            let Some(h) = &w.held else {
                return Err(StepReason::HandEmpty);
            };
            if !w.entities.get(h).is_some_and(ObjectEntity::is_knife) {
                return Err(violated(format!("slicing requires a knife, holding {h}")));
            }
            if !flags.sliceable {
                return Err(violated(format!("{target} cannot be sliced")));
            }
            if flags.is_sliced {
                return Err(violated(format!("{target} is already sliced")));
            }
            if let Some(e) = w.entities.get_mut(&target) {
                e.flags.is_sliced = true;
            }
        }
        ActionKind::Navigate => unreachable!("handled above"),
    }
    Ok(())
}

fn apply_toggle_effects(w: &mut WorldState, appliance: &ObjectEntity) {
    let affected: Vec<ObjectId> = match appliance.class() {
        "microwave" => w
            .contents(&appliance.id)
            .into_iter()
            .filter(|id| w.entities[id].flags.heatable)
            .collect(),
        "faucet" => w
            .entities
            .values()
            .filter(|e| e.class().starts_with("sink") && e.zone == appliance.zone)
            .flat_map(|sink| w.contents(&sink.id))
            .filter(|id| w.entities[id].flags.cleanable)
            .collect(),
        _ => Vec::new(),
    };
    for id in affected {
        if let Some(e) = w.entities.get_mut(&id) {
            match appliance.class() {
                "microwave" => e.flags.is_heated = true,
                _ => e.flags.is_clean = true,
            }
        }
    }
}

/// Whether the lasting effect of `sg` already holds in `w`.
pub fn effect_holds(w: &WorldState, sg: &Subgoal) -> bool {
    let Some(e) = w.entities.get(sg.object()) else {
        return false;
    };
    match sg.action() {
        ActionKind::Navigate => e.zone == w.agent_zone,
        ActionKind::Pickup => w.held.as_ref() == Some(sg.object()),
        ActionKind::Put => e.container.as_ref() == sg.receptacle(),
        ActionKind::Open => e.flags.is_open,
        ActionKind::Close => e.flags.openable && !e.flags.is_open,
        ActionKind::ToggleOn => e.flags.is_on,
        ActionKind::ToggleOff => e.flags.toggleable && !e.flags.is_on,
        ActionKind::Slice => e.flags.is_sliced,
    }
}

/// Ids the agent can currently see.
pub fn detect_objects(w: &WorldState) -> BTreeSet<ObjectId> {
    w.entities
        .keys()
        .filter(|id| w.is_visible(id))
        .cloned()
        .collect()
}

/// Textual observation of the agent's surroundings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub description: String,
    pub visible_ids: BTreeSet<ObjectId>,
}

pub fn render_scene(w: &WorldState) -> SceneSnapshot {
    let visible = detect_objects(w);
    let mut out = String::new();
    let _ = writeln!(out, "Agent location: {}", w.agent_zone);
    let _ = writeln!(
        out,
        "Holding: {}",
        w.held.as_ref().map_or("nothing", ObjectId::as_str)
    );
    if visible.is_empty() {
        out.push_str("Visible objects: none\n");
    } else {
        out.push_str("Visible objects:\n");
        for id in &visible {
            let e = &w.entities[id];
            let f = &e.flags;
            let mut markers: Vec<String> = Vec::new();
            if w.held.as_ref() == Some(id) {
                markers.push("held".into());
            }
            if f.openable {
                markers.push(if f.is_open { "open" } else { "closed" }.into());
            }
            for (set, name) in [
                (f.is_on, "on"),
                (f.is_sliced, "sliced"),
                (f.is_heated, "heated"),
                (f.is_chilled, "chilled"),
                (f.is_clean, "clean"),
            ] {
                if set {
                    markers.push(name.into());
                }
            }
            if let Some(c) = &e.container {
                markers.push(format!("in {c}"));
            }
            if markers.is_empty() {
                let _ = writeln!(out, "- {id}");
            } else {
                let _ = writeln!(out, "- {id} ({})", markers.join(", "));
            }
        }
    }
    SceneSnapshot {
        description: out,
        visible_ids: visible,
    }
}

/// Evaluates each goal condition against the world.
pub fn check_goal_conditions(w: &WorldState, g: &GoalSpec) -> Vec<bool> {
    g.conditions
        .iter()
        .map(|c| match c {
            GoalCondition::Located(o, r) => w
                .entities
                .get(o)
                .is_some_and(|e| e.container.as_ref() == Some(r)),
            GoalCondition::InZone(o, z) => w.entities.get(o).is_some_and(|e| &e.zone == z),
            GoalCondition::State(o, flag, want) => w
                .entities
                .get(o)
                .is_some_and(|e| flag.read(&e.flags) == *want),
        })
        .collect()
}
