//! Prompt templates and the conversation artifacts they carry.
//!
//! Each generator lives in its own plain-text file under `prompts/`:
//!
//! ```text
//! # prompt: validity
//! # version: 1
//! [system]
//! ...
//! [user]
//! ... {subgoal} ...
//! ```
//!
//! Placeholders are `{name}` tokens from a fixed per-template set and are
//! substituted in a single pass, so values that themselves contain braces
//! are never re-expanded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{Instruction, ObjectId, Plan, Subgoal};
use crate::world::SceneSnapshot;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("QA transcript is empty")]
    EmptyTranscript,
    #[error("template {file}: {detail}")]
    BadTemplate { file: String, detail: String },
    #[error("template {file}: placeholder {{{name}}} is not allowed here")]
    UndeclaredPlaceholder { file: String, name: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Std,
    Tp,
    TpNoStd,
    StdCot,
    Validity,
    Feedback,
    Replan,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Std,
        PromptKind::Tp,
        PromptKind::TpNoStd,
        PromptKind::StdCot,
        PromptKind::Validity,
        PromptKind::Feedback,
        PromptKind::Replan,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Std => "std.txt",
            PromptKind::Tp => "tp.txt",
            PromptKind::TpNoStd => "tp_no_std.txt",
            PromptKind::StdCot => "std_cot.txt",
            PromptKind::Validity => "validity.txt",
            PromptKind::Feedback => "feedback.txt",
            PromptKind::Replan => "replan.txt",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::Std | PromptKind::StdCot | PromptKind::TpNoStd => &["instruction"],
            PromptKind::Tp => &["instruction", "QA"],
            PromptKind::Validity => &["subgoal"],
            PromptKind::Feedback => &["subgoal", "object", "validity"],
            PromptKind::Replan => &[
                "instruction",
                "initial high-level plan",
                "observed_objects",
                "validity",
                "feedback",
            ],
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            PromptKind::Std => include_str!("../prompts/std.txt"),
            PromptKind::Tp => include_str!("../prompts/tp.txt"),
            PromptKind::TpNoStd => include_str!("../prompts/tp_no_std.txt"),
            PromptKind::StdCot => include_str!("../prompts/std_cot.txt"),
            PromptKind::Validity => include_str!("../prompts/validity.txt"),
            PromptKind::Feedback => include_str!("../prompts/feedback.txt"),
            PromptKind::Replan => include_str!("../prompts/replan.txt"),
        }
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_ \-]*)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub version: Option<u32>,
    pub system_text: String,
    pub user_text: String,
}

impl PromptTemplate {
    pub fn parse(kind: PromptKind, text: &str) -> Result<PromptTemplate, PromptError> {
        let file = kind.file_name().to_string();
        let bad = |detail: &str| PromptError::BadTemplate {
            file: file.clone(),
            detail: detail.to_string(),
        };
        let mut version = None;
        let mut section: Option<&mut String> = None;
        let mut system = None::<String>;
        let mut user = None::<String>;
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.peek() {
            let Some(meta) = line.strip_prefix('#') else {
                break;
            };
            if let Some(v) = meta.trim().strip_prefix("version:") {
                version = Some(v.trim().parse().map_err(|_| bad("bad version header"))?);
            }
            lines.next();
        }
        let mut sys_buf = String::new();
        let mut user_buf = String::new();
        for line in lines {
            match line.trim() {
                "[system]" => {
                    if system.is_some() {
                        return Err(bad("duplicate [system] section"));
                    }
                    system = Some(String::new());
                    section = Some(&mut sys_buf);
                }
                "[user]" => {
                    if user.is_some() {
                        return Err(bad("duplicate [user] section"));
                    }
                    user = Some(String::new());
                    section = Some(&mut user_buf);
                }
                _ => match section.as_deref_mut() {
                    Some(buf) => {
                        buf.push_str(line);
                        buf.push('\n');
                    }
                    None if line.trim().is_empty() => {}
                    None => return Err(bad("text outside of a section")),
                },
            }
        }
        if user.is_none() {
            return Err(bad("missing [user] section"));
        }
        let template = PromptTemplate {
            kind,
            version,
            system_text: sys_buf.trim().to_string(),
            user_text: user_buf.trim_end().to_string(),
        };
        for caps in placeholder_re()
            .captures_iter(&format!("{}\n{}", template.system_text, template.user_text))
        {
            let name = &caps[1];
            if !kind.placeholders().contains(&name) {
                return Err(PromptError::UndeclaredPlaceholder {
                    file,
                    name: name.to_string(),
                });
            }
        }
        Ok(template)
    }

    fn render(&self, values: &[(&str, &str)]) -> RenderedPrompt {
        let fill = |text: &str| {
            placeholder_re()
                .replace_all(text, |caps: &regex::Captures| {
                    values
                        .iter()
                        .find(|(k, _)| *k == &caps[1])
                        .map(|(_, v)| v.to_string())
                        .unwrap_or_else(|| caps[0].to_string())
                })
                .into_owned()
        };
        RenderedPrompt {
            system: fill(&self.system_text),
            user: fill(&self.user_text),
        }
    }
}

/// A prompt ready to send: system and user message bodies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// The text scripted matchers and recordings key on.
    pub fn request_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }

    /// Appends a scene description as observation context.
    pub fn with_observation(&self, scene: &SceneSnapshot) -> RenderedPrompt {
        RenderedPrompt {
            system: self.system.clone(),
            user: format!(
                "{}\n\nObservation:\n{}",
                self.user,
                scene.description.trim_end()
            ),
        }
    }
}

impl fmt::Display for RenderedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[system]\n{}\n[user]\n{}\n", self.system, self.user)
    }
}

/// The seven templates, loaded once and then read-only.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<PromptKind, PromptTemplate>,
}

impl PromptSet {
    /// The templates compiled into the crate from `prompts/`.
    pub fn builtin() -> &'static PromptSet {
        static SET: OnceLock<PromptSet> = OnceLock::new();
        SET.get_or_init(|| {
            let templates = PromptKind::ALL
                .into_iter()
                .map(|k| {
                    let t = PromptTemplate::parse(k, k.builtin_text())
                        .expect("bundled templates are valid");
                    (k, t)
                })
                .collect();
            PromptSet { templates }
        })
    }

    /// Loads all seven template files from `dir`.
    pub fn load_dir(dir: &Path) -> Result<PromptSet, PromptError> {
        let mut templates = BTreeMap::new();
        for k in PromptKind::ALL {
            let path = dir.join(k.file_name());
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            templates.insert(k, PromptTemplate::parse(k, &text)?);
        }
        Ok(PromptSet { templates })
    }

    pub fn template(&self, kind: PromptKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    pub fn gen_std_prompt(&self, i: &Instruction) -> RenderedPrompt {
        self.template(PromptKind::Std)
            .render(&[("instruction", i.text())])
    }

    pub fn gen_tp_prompt(
        &self,
        i: &Instruction,
        qa: &QaTranscript,
    ) -> Result<RenderedPrompt, PromptError> {
        if qa.turns.is_empty() {
            return Err(PromptError::EmptyTranscript);
        }
        Ok(self
            .template(PromptKind::Tp)
            .render(&[("instruction", i.text()), ("QA", &qa.serialize())]))
    }

    pub fn gen_tp_no_std_prompt(&self, i: &Instruction) -> RenderedPrompt {
        self.template(PromptKind::TpNoStd)
            .render(&[("instruction", i.text())])
    }

    pub fn gen_cot_prompt(&self, i: &Instruction) -> RenderedPrompt {
        self.template(PromptKind::StdCot)
            .render(&[("instruction", i.text())])
    }

    /// Planner prompt fed with a free-form step-by-step decomposition
    /// instead of a QA conversation.
    pub fn gen_tp_cot_prompt(&self, i: &Instruction, decomposition: &str) -> RenderedPrompt {
        let mut t = self.template(PromptKind::Tp).clone();
        t.user_text = t
            .user_text
            .replace("Conversation:", "Decomposition:")
            .replace(
                "Based on this conversation",
                "Based on this step-by-step decomposition",
            );
        t.render(&[("instruction", i.text()), ("QA", decomposition.trim())])
    }

    pub fn gen_validity_prompt(&self, sg: &Subgoal) -> RenderedPrompt {
        self.template(PromptKind::Validity)
            .render(&[("subgoal", &sg.to_string())])
    }

    pub fn gen_feedback_prompt(&self, sg: &Subgoal, v: &Validity) -> RenderedPrompt {
        self.template(PromptKind::Feedback).render(&[
            ("subgoal", &sg.to_string()),
            ("object", sg.object().as_str()),
            ("validity", v.verdict.keyword()),
        ])
    }

    pub fn gen_replan_prompt(
        &self,
        f: &Feedback,
        p: &Plan,
        observed: &BTreeSet<ObjectId>,
        v: &Validity,
        i: &Instruction,
    ) -> RenderedPrompt {
        let observed = if observed.is_empty() {
            "none".to_string()
        } else {
            observed
                .iter()
                .map(ObjectId::as_str)
                .collect::<Vec<_>>()
                .join(", ")
        };
        self.template(PromptKind::Replan).render(&[
            ("instruction", i.text()),
            ("initial high-level plan", &p.render()),
            ("observed_objects", &observed),
            ("validity", v.verdict.keyword()),
            ("feedback", f.raw.trim()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTurn {
    pub question: String,
    pub answer: String,
}

/// Self-questioning conversation produced by the decomposer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTranscript {
    pub turns: Vec<QaTurn>,
}

/// Discovery items and the keywords that count as covering them.
pub const CHECKLIST: [(&str, &[&str]); 4] = [
    ("sub-tasks", &["sub-task", "subtask", "sub task"]),
    ("order", &["order", "sequence", "first"]),
    ("target objects", &["object", "receptacle"]),
    ("execution steps", &["how", "execute", "step"]),
];

fn qa_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:[-*]\s*|\d+[.)]\s*)?\**(q|question|a|answer)\s*\d*\s*\**\s*:\**\s*(.*)$",
        )
        .unwrap()
    })
}

impl QaTranscript {
    /// Extracts question/answer pairs. Continuation lines extend the
    /// preceding question or answer; questions without an answer are dropped.
    pub fn parse(text: &str) -> QaTranscript {
        enum Last {
            None,
            Question,
            Answer,
        }
        let mut turns = Vec::new();
        let mut question: Option<String> = None;
        let mut last = Last::None;
        for line in text.lines() {
            if let Some(caps) = qa_line_re().captures(line) {
                let body = caps[2].trim().to_string();
                if caps[1].to_ascii_lowercase().starts_with('q') {
                    question = Some(body);
                    last = Last::Question;
                } else if let Some(q) = question.take() {
                    turns.push(QaTurn {
                        question: q,
                        answer: body,
                    });
                    last = Last::Answer;
                } else {
                    last = Last::None;
                }
                continue;
            }
            let extra = line.trim();
            if extra.is_empty() {
                continue;
            }
            match last {
                Last::Question => {
                    if let Some(q) = question.as_mut() {
                        q.push(' ');
                        q.push_str(extra);
                    }
                }
                Last::Answer => {
                    if let Some(t) = turns.last_mut() {
                        t.answer.push(' ');
                        t.answer.push_str(extra);
                    }
                }
                Last::None => {}
            }
        }
        QaTranscript { turns }
    }

    /// `Q:` / `A:` lines in turn order.
    pub fn serialize(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("Q: {}\nA: {}", t.question, t.answer))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Lexical coverage of [`CHECKLIST`] by the questions.
    pub fn checklist_coverage(&self) -> [bool; 4] {
        let questions = self
            .turns
            .iter()
            .map(|t| t.question.to_lowercase())
            .collect::<Vec<_>>()
            .join("\n");
        CHECKLIST.map(|(_, words)| words.iter().any(|w| questions.contains(w)))
    }

    pub fn covers_checklist(&self) -> bool {
        self.checklist_coverage().iter().all(|c| *c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

impl Verdict {
    pub fn keyword(self) -> &'static str {
        match self {
            Verdict::Valid => "VALID",
            Verdict::Invalid => "INVALID",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub verdict: Verdict,
    pub raw: String,
}

/// `INVALID` anywhere wins; otherwise `VALID` anywhere; otherwise the reply is
/// treated as invalid so that an unclear answer leads to re-planning.
pub fn classify_validity(raw: &str) -> Validity {
    let upper = raw.to_uppercase();
    let verdict = if upper.contains("INVALID") {
        Verdict::Invalid
    } else if upper.contains("VALID") {
        Verdict::Valid
    } else {
        Verdict::Invalid
    };
    Validity {
        verdict,
        raw: raw.to_string(),
    }
}

/// Failure cause and corrective guidance from the scene-conditioned model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub raw: String,
}

impl Feedback {
    pub fn new(raw: impl Into<String>) -> Option<Feedback> {
        let raw = raw.into();
        (!raw.trim().is_empty()).then_some(Feedback { raw })
    }
}
