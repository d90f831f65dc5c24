//! Subgoal and plan data model, plus the `(action, object[, receptacle])`
//! template format that planners emit.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("arity mismatch for {action}: got {fields} field(s)")]
    ArityMismatch { action: String, fields: usize },
    #[error("empty object name")]
    EmptyObject,
    #[error("invalid object token `{0}`")]
    InvalidToken(String),
    #[error("not a subgoal template: `{0}`")]
    Malformed(String),
    #[error("no subgoals found ({skipped_lines} non-template line(s) skipped)")]
    NoSubgoalsFound { skipped_lines: usize },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("object vocabulary is empty")]
    EmptyVocabulary,
    #[error("instruction is empty")]
    EmptyInstruction,
}

/// The closed set of admissible controller actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Pickup,
    Put,
    ToggleOn,
    ToggleOff,
    Open,
    Close,
    Slice,
    Navigate,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::Pickup,
        ActionKind::Put,
        ActionKind::ToggleOn,
        ActionKind::ToggleOff,
        ActionKind::Open,
        ActionKind::Close,
        ActionKind::Slice,
        ActionKind::Navigate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Pickup => "Pickup",
            ActionKind::Put => "Put",
            ActionKind::ToggleOn => "ToggleOn",
            ActionKind::ToggleOff => "ToggleOff",
            ActionKind::Open => "Open",
            ActionKind::Close => "Close",
            ActionKind::Slice => "Slice",
            ActionKind::Navigate => "Navigate",
        }
    }

    /// Only `Put` carries a receptacle.
    pub fn takes_receptacle(self) -> bool {
        self == ActionKind::Put
    }

    /// Case-insensitive lookup. The `Object` suffix used by some planners
    /// (`PutObject`, `PickupObject`) is accepted as an alias.
    pub fn from_name(raw: &str) -> Option<ActionKind> {
        let lowered = raw.trim().to_ascii_lowercase();
        let key = lowered.strip_suffix("object").unwrap_or(&lowered);
        ActionKind::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(key))
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercase single-token object identifier, e.g. `desklamp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectId(String);

impl ObjectId {
    /// Normalizes to lowercase and joins whitespace-separated words.
    pub fn new(raw: &str) -> Result<ObjectId, PlanError> {
        let token: String = raw
            .split_whitespace()
            .collect::<String>()
            .to_ascii_lowercase();
        if token.is_empty() {
            return Err(PlanError::EmptyObject);
        }
        if !token.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(PlanError::InvalidToken(raw.trim().to_string()));
        }
        Ok(ObjectId(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ObjectId {
    type Error = PlanError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        ObjectId::new(&value)
    }
}

impl From<ObjectId> for String {
    fn from(value: ObjectId) -> Self {
        value.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PartialEq<str> for ObjectId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for ObjectId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// One `(action, object[, receptacle])` step. The receptacle is present
/// exactly when the action is `Put`.
///
/// Serializes as its canonical template string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Subgoal {
    action: ActionKind,
    object: ObjectId,
    receptacle: Option<ObjectId>,
}

impl Subgoal {
    /// Builds a non-`Put` subgoal.
    pub fn new(action: ActionKind, object: ObjectId) -> Result<Subgoal, PlanError> {
        if action.takes_receptacle() {
            return Err(PlanError::ArityMismatch {
                action: action.name().to_string(),
                fields: 2,
            });
        }
        Ok(Subgoal {
            action,
            object,
            receptacle: None,
        })
    }

    pub fn put(object: ObjectId, receptacle: ObjectId) -> Subgoal {
        Subgoal {
            action: ActionKind::Put,
            object,
            receptacle: Some(receptacle),
        }
    }

    pub fn action(&self) -> ActionKind {
        self.action
    }

    pub fn object(&self) -> &ObjectId {
        &self.object
    }

    pub fn receptacle(&self) -> Option<&ObjectId> {
        self.receptacle.as_ref()
    }

    /// Every object the subgoal names, target first.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectId> {
        std::iter::once(&self.object).chain(self.receptacle.iter())
    }
}

impl fmt::Display for Subgoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.receptacle {
            Some(r) => write!(f, "({}, {}, {})", self.action, self.object, r),
            None => write!(f, "({}, {})", self.action, self.object),
        }
    }
}

impl FromStr for Subgoal {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_subgoal(s)
    }
}

impl TryFrom<String> for Subgoal {
    type Error = PlanError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_subgoal(&value)
    }
}

impl From<Subgoal> for String {
    fn from(value: Subgoal) -> Self {
        render_subgoal(&value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOrigin {
    Initial,
    /// Produced by re-planning after a failure at this step index.
    Replanned(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<Subgoal>,
    pub origin: PlanOrigin,
}

impl Plan {
    pub fn new(steps: Vec<Subgoal>) -> Plan {
        Plan {
            steps,
            origin: PlanOrigin::Initial,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One canonical subgoal per line.
    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(render_subgoal)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A natural-language instruction; never blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Instruction, PlanError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PlanError::EmptyInstruction);
        }
        Ok(Instruction(text))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Instruction {
    type Error = PlanError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Instruction::new(value)
    }
}

impl From<Instruction> for String {
    fn from(value: Instruction) -> Self {
        value.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Strips a leading list marker such as `1.`, `2)`, `-` or `*`.
fn strip_list_marker(line: &str) -> &str {
    let line = line.trim_start();
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim_start();
        }
        return line;
    }
    line.strip_prefix(['-', '*'])
        .map(str::trim_start)
        .unwrap_or(line)
}

/// Parses the body between the parentheses of one template group.
fn parse_fields(body: &str) -> Result<Subgoal, PlanError> {
    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
    let action_raw = fields[0];
    let action = ActionKind::from_name(action_raw)
        .ok_or_else(|| PlanError::UnknownAction(action_raw.to_string()))?;
    let arity_ok = match fields.len() {
        2 => !action.takes_receptacle(),
        3 => action.takes_receptacle(),
        _ => false,
    };
    if !arity_ok {
        return Err(PlanError::ArityMismatch {
            action: action.name().to_string(),
            fields: fields.len(),
        });
    }
    let object = ObjectId::new(fields[1])?;
    let receptacle = match fields.get(2) {
        Some(r) => Some(ObjectId::new(r)?),
        None => None,
    };
    Ok(Subgoal {
        action,
        object,
        receptacle,
    })
}

/// Parses a single template line: `(Action, object)` or
/// `(Put, object, receptacle)`, optionally preceded by a list index.
pub fn parse_subgoal(line: &str) -> Result<Subgoal, PlanError> {
    let body = strip_list_marker(line.trim())
        .trim_end()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| PlanError::Malformed(line.trim().to_string()))?;
    if body.contains(['(', ')']) {
        return Err(PlanError::Malformed(line.trim().to_string()));
    }
    parse_fields(body)
}

pub fn render_subgoal(sg: &Subgoal) -> String {
    sg.to_string()
}

/// Result of extracting template lines from a free-form completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlan {
    pub plan: Plan,
    /// Non-blank lines that contained no parseable subgoal.
    pub skipped_lines: usize,
}

/// Extracts every subgoal from a completion, in document order. A line may
/// hold several parenthesized groups; lines without any parseable group are
/// skipped and counted.
pub fn parse_plan(raw: &str) -> Result<ParsedPlan, PlanError> {
    let mut steps = Vec::new();
    let mut skipped_lines = 0;
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let before = steps.len();
        let mut rest = line;
        while let Some(open) = rest.find('(') {
            let after = &rest[open + 1..];
            let Some(close) = after.find(')') else { break };
            let body = &after[..close];
            if !body.contains('(') {
                if let Ok(sg) = parse_fields(body) {
                    steps.push(sg);
                }
                rest = &after[close + 1..];
            } else {
                rest = after;
            }
        }
        if steps.len() == before {
            skipped_lines += 1;
        }
    }
    if steps.is_empty() {
        return Err(PlanError::NoSubgoalsFound { skipped_lines });
    }
    Ok(ParsedPlan {
        plan: Plan::new(steps),
        skipped_lines,
    })
}

/// Checks that every object the subgoal names is in the vocabulary.
pub fn validate_subgoal(sg: &Subgoal, vocab: &BTreeSet<ObjectId>) -> Result<(), PlanError> {
    if vocab.is_empty() {
        return Err(PlanError::EmptyVocabulary);
    }
    match sg.objects().find(|o| !vocab.contains(*o)) {
        Some(missing) => Err(PlanError::UnknownObject(missing.to_string())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obj(s: &str) -> ObjectId {
        ObjectId::new(s).unwrap()
    }

    #[test]
    fn parses_pair_and_triple() {
        let sg = parse_subgoal("(Pickup, knife)").unwrap();
        assert_eq!(sg, Subgoal::new(ActionKind::Pickup, obj("knife")).unwrap());
        let sg = parse_subgoal("(Put, pan, fridge)").unwrap();
        assert_eq!(sg, Subgoal::put(obj("pan"), obj("fridge")));
    }

    #[test]
    fn put_without_receptacle_is_arity_error() {
        assert!(matches!(
            parse_subgoal("(Put, mug)"),
            Err(PlanError::ArityMismatch { fields: 2, .. })
        ));
        assert!(matches!(
            parse_subgoal("(Open, fridge, door)"),
            Err(PlanError::ArityMismatch { fields: 3, .. })
        ));
        assert!(matches!(
            parse_subgoal("(Pickup)"),
            Err(PlanError::ArityMismatch { fields: 1, .. })
        ));
    }

    #[test]
    fn tolerant_of_case_index_and_whitespace() {
        let sg = parse_subgoal("  3.  ( pickup ,  Knife )  ").unwrap();
        assert_eq!(sg.to_string(), "(Pickup, knife)");
        let sg = parse_subgoal("- (PutObject, Apple, Dining Table)").unwrap();
        assert_eq!(sg.to_string(), "(Put, apple, diningtable)");
        assert_eq!(
            parse_subgoal("(toggleon, desklamp)").unwrap().action(),
            ActionKind::ToggleOn
        );
    }

    #[test]
    fn rejects_unknown_action_and_empty_object() {
        assert_eq!(
            parse_subgoal("(Throw, ball)"),
            Err(PlanError::UnknownAction("Throw".into()))
        );
        assert_eq!(parse_subgoal("(Pickup,  )"), Err(PlanError::EmptyObject));
        assert!(matches!(
            parse_subgoal("Pickup knife"),
            Err(PlanError::Malformed(_))
        ));
    }

    #[test]
    fn parse_plan_numbered_lines() {
        let parsed = parse_plan("1. (Pickup, knife)\n2. (Slice, bread)").unwrap();
        assert_eq!(parsed.plan.len(), 2);
        assert_eq!(parsed.skipped_lines, 0);
        assert_eq!(parsed.plan.steps[1].to_string(), "(Slice, bread)");
    }

    #[test]
    fn parse_plan_skips_prose() {
        let parsed = parse_plan("Sure! Here is the plan:\n(ToggleOn, desklamp)").unwrap();
        assert_eq!(parsed.plan.len(), 1);
        assert_eq!(parsed.skipped_lines, 1);
    }

    #[test]
    fn parse_plan_noisy_completion_matches_manual_extraction() {
        let raw = "Here is my plan (it is short):\n\
                   1. (Pickup, knife)\n\
                   \n\
                   2. (Slice, bread) then (Put, knife, countertop)\n\
                   3. (Fly, bread)\n\
                   Done.";
        let parsed = parse_plan(raw).unwrap();
        let rendered: Vec<String> = parsed.plan.steps.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            rendered,
            [
                "(Pickup, knife)",
                "(Slice, bread)",
                "(Put, knife, countertop)"
            ]
        );
        // prose header, (Fly, bread) line, "Done."
        assert_eq!(parsed.skipped_lines, 3);
    }

    #[test]
    fn parse_plan_without_template_lines() {
        assert_eq!(
            parse_plan("I cannot help."),
            Err(PlanError::NoSubgoalsFound { skipped_lines: 1 })
        );
        assert_eq!(
            parse_plan(""),
            Err(PlanError::NoSubgoalsFound { skipped_lines: 0 })
        );
    }

    #[test]
    fn render_canonical() {
        let sg = Subgoal::new(ActionKind::Slice, obj("bread")).unwrap();
        assert_eq!(render_subgoal(&sg), "(Slice, bread)");
        assert_eq!(
            render_subgoal(&Subgoal::put(obj("pan"), obj("fridge"))),
            "(Put, pan, fridge)"
        );
    }

    #[test]
    fn validate_against_vocabulary() {
        let vocab: BTreeSet<ObjectId> = ["bread", "knife", "fridge"].map(obj).into();
        let ok = Subgoal::new(ActionKind::Pickup, obj("bread")).unwrap();
        assert_eq!(validate_subgoal(&ok, &vocab), Ok(()));
        let bad = Subgoal::new(ActionKind::Pickup, obj("unicorn")).unwrap();
        assert_eq!(
            validate_subgoal(&bad, &vocab),
            Err(PlanError::UnknownObject("unicorn".into()))
        );
        let bad_rec = Subgoal::put(obj("bread"), obj("oven"));
        assert_eq!(
            validate_subgoal(&bad_rec, &vocab),
            Err(PlanError::UnknownObject("oven".into()))
        );
        assert_eq!(
            validate_subgoal(&ok, &BTreeSet::new()),
            Err(PlanError::EmptyVocabulary)
        );
    }

    #[test]
    fn instruction_must_not_be_blank() {
        assert_eq!(Instruction::new("  \n"), Err(PlanError::EmptyInstruction));
        assert!(Instruction::new("turn on the desk lamp").is_ok());
    }

    #[test]
    fn serde_uses_canonical_text() {
        let sg = Subgoal::put(obj("pan"), obj("fridge"));
        assert_eq!(
            serde_json::to_string(&sg).unwrap(),
            "\"(Put, pan, fridge)\""
        );
        let back: Subgoal = serde_json::from_str("\"(Put, pan, fridge)\"").unwrap();
        assert_eq!(back, sg);
        assert!(serde_json::from_str::<Subgoal>("\"(Put, pan)\"").is_err());
    }

    pub(crate) fn arb_subgoal() -> impl Strategy<Value = Subgoal> {
        let token = "[a-z][a-z0-9_]{0,10}";
        (0..ActionKind::ALL.len(), token, token).prop_map(|(i, o, r)| {
            let action = ActionKind::ALL[i];
            if action.takes_receptacle() {
                Subgoal::put(obj(&o), obj(&r))
            } else {
                Subgoal::new(action, obj(&o)).unwrap()
            }
        })
    }

    proptest! {
        #[test]
        fn prop_receptacle_only_on_put(line in "\\([A-Za-z]{3,9}, ?[a-z]{1,6}(, ?[a-z]{1,6})?\\)") {
            if let Ok(sg) = parse_subgoal(&line) {
                prop_assert_eq!(sg.receptacle().is_some(), sg.action() == ActionKind::Put);
            }
        }

        #[test]
        fn prop_parse_plan_preserves_order(steps in proptest::collection::vec(arb_subgoal(), 1..12)) {
            let text = steps
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}. {}\nsome commentary", i + 1, s))
                .collect::<Vec<_>>()
                .join("\n");
            let parsed = parse_plan(&text).unwrap();
            prop_assert_eq!(parsed.plan.steps, steps.clone());
            prop_assert_eq!(parsed.skipped_lines, steps.len());
        }
    }
}
