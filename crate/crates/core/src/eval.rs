//! High-level plan scoring.
//!
//! A ground-truth annotation is a core subgoal sequence plus markup that
//! admits equivalent variants:
//!
//! - a *floating* slot only has to come after its anchor (closing a door
//!   any time after opening it);
//! - a *wildcard* `Put` slot accepts any receptacle;
//! - a *swap group* lists adjacent blocks of slots whose relative order does
//!   not matter.
//!
//! [`compile_relaxed_spec`] turns the markup into slot patterns plus a
//! precedence DAG. A candidate plan relaxed-matches when its steps can be
//! assigned one-to-one to slots in an order that is a linear extension of the
//! DAG. `Navigate` steps are controller-level and are ignored by both
//! matchers; annotations must not contain them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EpisodeTrace;
use crate::plan::{ActionKind, ObjectId, Plan, Subgoal};

/// Largest annotation the bitmask matcher supports.
pub const MAX_SLOTS: usize = 128;
/// Largest spec [`enumerate_valid_plans`] will expand.
pub const ENUMERATION_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("precedence relation has a cycle")]
    CyclicPrecedence,
    #[error("spec has {slots} slots, enumeration is limited to {limit}")]
    TooLarge { slots: usize, limit: usize },
    #[error("no ground truth for task `{0}`")]
    MissingGroundTruth(String),
}

/// Inclusive slot range `[start, end]`.
pub type SlotRange = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub core: Vec<Subgoal>,
    /// `(slot, anchor)` pairs: `slot` may appear anywhere after `anchor`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub floating: Vec<(usize, usize)>,
    /// `Put` slots whose receptacle may be anything.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wildcards: Vec<usize>,
    /// Each group is a list of adjacent blocks that may be reordered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub swap_groups: Vec<Vec<SlotRange>>,
}

impl GtAnnotation {
    pub fn strict(core: Vec<Subgoal>) -> GtAnnotation {
        GtAnnotation {
            core,
            ..GtAnnotation::default()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidAnnotation(m));
        let n = self.core.len();
        if n > MAX_SLOTS {
            return bad(format!("{n} slots exceeds the limit of {MAX_SLOTS}"));
        }
        if let Some(i) = self
            .core
            .iter()
            .position(|s| s.action() == ActionKind::Navigate)
        {
            return bad(format!("slot {i} is a Navigate step"));
        }
        let mut floated = BTreeSet::new();
        for &(slot, anchor) in &self.floating {
            if slot >= n {
                return bad(format!("floating slot {slot} out of range"));
            }
            if anchor >= slot {
                return bad(format!(
                    "floating slot {slot} must come after its anchor {anchor}"
                ));
            }
            if !floated.insert(slot) {
                return bad(format!("slot {slot} floats twice"));
            }
        }
        for &w in &self.wildcards {
            match self.core.get(w) {
                None => return bad(format!("wildcard slot {w} out of range")),
                Some(s) if s.action() != ActionKind::Put => {
                    return bad(format!("wildcard slot {w} is not a Put"))
                }
                Some(_) => {}
            }
        }
        let mut used = vec![false; n];
        for (g, group) in self.swap_groups.iter().enumerate() {
            if group.len() < 2 {
                return bad(format!("swap group {g} needs at least two blocks"));
            }
            let mut blocks = group.clone();
            blocks.sort_unstable();
            for &(start, end) in &blocks {
                if start > end || end >= n {
                    return bad(format!("swap group {g} has bad range [{start}, {end}]"));
                }
                for slot in &mut used[start..=end] {
                    if *slot {
                        return bad(format!("swap group {g} overlaps another range"));
                    }
                    *slot = true;
                }
            }
            if blocks.windows(2).any(|w| w[1].0 != w[0].1 + 1) {
                return bad(format!("swap group {g} blocks are not adjacent"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ReceptaclePattern {
    None,
    Exact(ObjectId),
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotPattern {
    pub action: ActionKind,
    pub object: ObjectId,
    pub receptacle: ReceptaclePattern,
}

impl SlotPattern {
    pub fn matches(&self, sg: &Subgoal) -> bool {
        if sg.action() != self.action || sg.object() != &self.object {
            return false;
        }
        match (&self.receptacle, sg.receptacle()) {
            (ReceptaclePattern::None, None) => true,
            (ReceptaclePattern::Exact(r), Some(c)) => r == c,
            (ReceptaclePattern::Any, Some(_)) => true,
            _ => false,
        }
    }
}

/// Slot patterns plus a precedence DAG over slot indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelaxedSpec {
    slots: Vec<SlotPattern>,
    edges: Vec<(usize, usize)>,
    /// Bit `j` of `preds[i]` is set when slot `j` must precede slot `i`.
    preds: Vec<u128>,
}

impl RelaxedSpec {
    pub fn slots(&self) -> &[SlotPattern] {
        &self.slots
    }

    /// `(before, after)` pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn precedes(&self, before: usize, after: usize) -> bool {
        self.preds
            .get(after)
            .is_some_and(|m| before < 128 && m & (1u128 << before) != 0)
    }

    fn is_acyclic(&self) -> bool {
        let n = self.slots.len();
        let mut placed: u128 = 0;
        for _ in 0..n {
            let next = (0..n).find(|&i| placed & (1 << i) == 0 && self.preds[i] & !placed == 0);
            match next {
                Some(i) => placed |= 1 << i,
                None => return false,
            }
        }
        true
    }
}

#[allow(clippy::needless_range_loop)]
pub fn compile_relaxed_spec(gt: &GtAnnotation) -> Result<RelaxedSpec, EvalError> {
    gt.validate()?;
    let n = gt.core.len();
    let wild: BTreeSet<usize> = gt.wildcards.iter().copied().collect();
    let slots = gt
        .core
        .iter()
        .enumerate()
        .map(|(i, sg)| SlotPattern {
            action: sg.action(),
            object: sg.object().clone(),
            receptacle: match sg.receptacle() {
                None => ReceptaclePattern::None,
                Some(_) if wild.contains(&i) => ReceptaclePattern::Any,
                Some(r) => ReceptaclePattern::Exact(r.clone()),
            },
        })
        .collect();

    // before[x][y]: slot x must precede slot y
    let mut before = vec![vec![false; n]; n];
    for (i, row) in before.iter_mut().enumerate() {
        for cell in row.iter_mut().skip(i + 1) {
            *cell = true;
        }
    }
    for group in &gt.swap_groups {
        for (a, &(sa, ea)) in group.iter().enumerate() {
            for &(sb, eb) in &group[a + 1..] {
                for x in sa..=ea {
                    for y in sb..=eb {
                        before[x][y] = false;
                        before[y][x] = false;
                    }
                }
            }
        }
    }
    for &(slot, anchor) in &gt.floating {
        for k in 0..n {
            before[k][slot] = false;
            before[slot][k] = false;
        }
        before[anchor][slot] = true;
    }

    let mut edges = Vec::new();
    let mut preds = vec![0u128; n];
    for (i, row) in before.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            if b {
                edges.push((i, j));
                preds[j] |= 1 << i;
            }
        }
    }
    let spec = RelaxedSpec {
        slots,
        edges,
        preds,
    };
    if !spec.is_acyclic() {
        return Err(EvalError::CyclicPrecedence);
    }
    Ok(spec)
}

fn without_navigation(plan: &Plan) -> Vec<&Subgoal> {
    plan.steps
        .iter()
        .filter(|s| s.action() != ActionKind::Navigate)
        .collect()
}

/// Exact sequence equality with the annotation's core. Markup is ignored.
pub fn strict_match(candidate: &Plan, gt: &GtAnnotation) -> bool {
    let steps = without_navigation(candidate);
    steps.len() == gt.core.len() && steps.iter().zip(&gt.core).all(|(a, b)| *a == b)
}

/// Whether some bijection of candidate steps onto slots respects both the
/// slot patterns and the precedence DAG.
pub fn relaxed_match(candidate: &Plan, spec: &RelaxedSpec) -> bool {
    let steps = without_navigation(candidate);
    if steps.len() != spec.slots.len() {
        return false;
    }
    let mut dead = HashSet::new();
    assign(&steps, spec, 0, &mut dead)
}

/// Depth-first assignment of `steps[k..]`; `placed` is the set of slots
/// already used. A failed `placed` set is remembered because the remaining
/// subproblem depends only on it.
fn assign(steps: &[&Subgoal], spec: &RelaxedSpec, placed: u128, dead: &mut HashSet<u128>) -> bool {
    let k = placed.count_ones() as usize;
    if k == steps.len() {
        return true;
    }
    if dead.contains(&placed) {
        return false;
    }
    for (slot, pattern) in spec.slots.iter().enumerate() {
        let bit = 1u128 << slot;
        if placed & bit != 0 || spec.preds[slot] & !placed != 0 {
            continue;
        }
        if pattern.matches(steps[k]) && assign(steps, spec, placed | bit, dead) {
            return true;
        }
    }
    dead.insert(placed);
    false
}

/// Every plan the spec admits: all linear extensions of the precedence DAG
/// times every receptacle choice for wildcard slots. Brute force; meant as a
/// test oracle for [`relaxed_match`].
pub fn enumerate_valid_plans(
    spec: &RelaxedSpec,
    receptacles: &BTreeSet<ObjectId>,
) -> Result<BTreeSet<Vec<Subgoal>>, EvalError> {
    let n = spec.slots.len();
    if n > ENUMERATION_LIMIT {
        return Err(EvalError::TooLarge {
            slots: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut orders = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    permutations(&mut perm, 0, &mut |p| {
        let mut pos = vec![0; n];
        for (i, &slot) in p.iter().enumerate() {
            pos[slot] = i;
        }
        if spec.edges.iter().all(|&(a, b)| pos[a] < pos[b]) {
            orders.push(p.to_vec());
        }
    });

    let mut out = BTreeSet::new();
    for order in orders {
        let mut partial: Vec<Vec<Subgoal>> = vec![Vec::new()];
        for &slot in &order {
            let pat = &spec.slots[slot];
            let choices: Vec<Subgoal> = match &pat.receptacle {
                ReceptaclePattern::None => {
                    vec![Subgoal::new(pat.action, pat.object.clone()).expect("non-Put slot")]
                }
                ReceptaclePattern::Exact(r) => vec![Subgoal::put(pat.object.clone(), r.clone())],
                ReceptaclePattern::Any => receptacles
                    .iter()
                    .map(|r| Subgoal::put(pat.object.clone(), r.clone()))
                    .collect(),
            };
            partial = partial
                .into_iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |c| {
                        let mut next = prefix.clone();
                        next.push(c.clone());
                        next
                    })
                })
                .collect();
        }
        out.extend(partial);
    }
    Ok(out)
}

fn permutations(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Aggregate metrics; rates are percentages, `None` when there is no data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_episodes: usize,
    pub sr: Option<f64>,
    pub gc: Option<f64>,
    pub strict_hlp: Option<f64>,
    pub relaxed_hlp: Option<f64>,
    pub per_task_type: Vec<TaskTypeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTypeRow {
    pub task_type: String,
    pub n_episodes: usize,
    pub mean_gt_length: f64,
    pub sr: f64,
    pub gc: f64,
    pub strict_hlp: f64,
    pub relaxed_hlp: f64,
}

#[derive(Default)]
struct Tally {
    n: usize,
    gt_len: usize,
    sr: f64,
    gc: f64,
    strict: usize,
    relaxed: usize,
}

impl Tally {
    fn add(&mut self, gt_len: usize, sr: f64, gc: f64, strict: bool, relaxed: bool) {
        self.n += 1;
        self.gt_len += gt_len;
        self.sr += sr;
        self.gc += gc;
        self.strict += usize::from(strict);
        self.relaxed += usize::from(relaxed);
    }

    fn pct(&self, v: f64) -> f64 {
        100.0 * v / self.n as f64
    }
}

/// Scores the initial (pre-replan) plan of every trace and averages the
/// execution outcomes. Rows follow the order task types first appear.
pub fn score_dataset(
    traces: &[EpisodeTrace],
    gts: &BTreeMap<String, GtAnnotation>,
) -> Result<MetricsReport, EvalError> {
    let mut overall = Tally::default();
    let mut order: Vec<String> = Vec::new();
    let mut by_type: BTreeMap<String, Tally> = BTreeMap::new();
    let mut specs: BTreeMap<&str, RelaxedSpec> = BTreeMap::new();

    for t in traces {
        let gt = gts
            .get(&t.task_id)
            .ok_or_else(|| EvalError::MissingGroundTruth(t.task_id.clone()))?;
        if !specs.contains_key(t.task_id.as_str()) {
            specs.insert(&t.task_id, compile_relaxed_spec(gt)?);
        }
        let spec = &specs[t.task_id.as_str()];
        let strict = strict_match(&t.initial_plan, gt);
        let relaxed = relaxed_match(&t.initial_plan, spec);
        let sr = f64::from(t.sr);
        overall.add(gt.core.len(), sr, t.gc, strict, relaxed);
        if !by_type.contains_key(&t.task_type) {
            order.push(t.task_type.clone());
        }
        by_type.entry(t.task_type.clone()).or_default().add(
            gt.core.len(),
            sr,
            t.gc,
            strict,
            relaxed,
        );
    }

    let rate = |v: f64| (overall.n > 0).then(|| overall.pct(v));
    Ok(MetricsReport {
        n_episodes: overall.n,
        sr: rate(overall.sr),
        gc: rate(overall.gc),
        strict_hlp: rate(overall.strict as f64),
        relaxed_hlp: rate(overall.relaxed as f64),
        per_task_type: order
            .into_iter()
            .map(|task_type| {
                let t = &by_type[&task_type];
                TaskTypeRow {
                    n_episodes: t.n,
                    mean_gt_length: t.gt_len as f64 / t.n as f64,
                    sr: t.pct(t.sr),
                    gc: t.pct(t.gc),
                    strict_hlp: t.pct(t.strict as f64),
                    relaxed_hlp: t.pct(t.relaxed as f64),
                    task_type,
                }
            })
            .collect(),
    })
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
        }
        let mut rows: Vec<[String; 7]> = vec![[
            "task type".into(),
            "episodes".into(),
            "gt length".into(),
            "SR".into(),
            "GC".into(),
            "StrictHLP".into(),
            "RelaxedHLP".into(),
        ]];
        for r in &self.per_task_type {
            rows.push([
                r.task_type.clone(),
                r.n_episodes.to_string(),
                format!("{:.1}", r.mean_gt_length),
                cell(Some(r.sr)),
                cell(Some(r.gc)),
                cell(Some(r.strict_hlp)),
                cell(Some(r.relaxed_hlp)),
            ]);
        }
        rows.push([
            "overall".into(),
            self.n_episodes.to_string(),
            "-".into(),
            cell(self.sr),
            cell(self.gc),
            cell(self.strict_hlp),
            cell(self.relaxed_hlp),
        ]);
        let mut widths = [0usize; 7];
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            let mut line = format!("{:<w$}", row[0], w = widths[0]);
            for (c, w) in row.iter().zip(widths).skip(1) {
                let _ = write!(line, "  {c:>w$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}
