use std::path::{Path, PathBuf};

use socratic_core::bench::load_tasks;
use socratic_core::engine::{CallLog, RecoveryRecord, Stage};
use socratic_core::gateway::load_script;
use socratic_core::world::StepReason;
use socratic_core::*;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario(file: &str) -> Scenario {
    load_tasks(&root().join("tasks").join(file))
        .unwrap()
        .scenarios
        .remove(0)
}

fn gateway(file: &str) -> ScriptedGateway {
    ScriptedGateway::new(load_script(&root().join("fixtures/scripts").join(file)).unwrap())
}

fn sg(s: &str) -> Subgoal {
    s.parse().unwrap()
}

fn run(task: &str, script: &str, cfg: EpisodeConfig) -> EpisodeTrace {
    let gw = gateway(script);
    SocraticPlanner::new(&gw, cfg)
        .run_episode(&scenario(task))
        .unwrap()
}

#[test]
fn bread_script_has_three_entries() {
    assert_eq!(gateway("bread.json").script().entries.len(), 3);
}

#[test]
fn bread_end_to_end() {
    let t = run("bread.json", "bread.json", EpisodeConfig::default());
    assert_eq!(t.outcome, Outcome::Success);
    assert_eq!((t.sr, t.gc), (1, 1.0));
    assert_eq!(t.replan_count, 0);
    assert_eq!(t.qa.as_ref().unwrap().turns.len(), 4);
    assert_eq!(t.initial_plan.steps[0], sg("(Pickup, knife)"));
    assert_eq!(t.initial_plan.steps[1], sg("(Slice, bread)"));
    assert_eq!(*t.initial_plan.steps.last().unwrap(), sg("(Close, fridge)"));
    assert_eq!(t.initial_plan.len(), 15);
    assert_eq!(t.calls.len(), 2);
    assert_eq!(t.calls[0].stage, Stage::Decompose);
    assert!(t.calls[1]
        .user
        .contains("Q: What sub-tasks make up the instruction?"));
}

#[test]
fn bread_fridge_recovery_inserts_open() {
    let t = run(
        "bread.json",
        "bread_fridge_recovery.json",
        EpisodeConfig::default(),
    );
    assert_eq!(t.outcome, Outcome::Success);
    assert_eq!(t.sr, 1);
    assert_eq!(t.replan_count, 1);
    assert_eq!(t.redo_count, 0);
    let failed: Vec<_> = t.steps.iter().filter(|s| !s.success).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].reason, StepReason::ReceptacleClosed);
    assert!(failed[0]
        .validity
        .as_ref()
        .unwrap()
        .raw
        .contains("door is closed"));
    match failed[0].recovery.as_ref().unwrap() {
        RecoveryRecord::Replan {
            new_plan,
            resume_index,
        } => assert_eq!(new_plan.steps[*resume_index], sg("(Open, fridge)")),
        other => panic!("{other:?}"),
    }
    // the step right after the failure executes the inserted subgoal
    let pos = t.steps.iter().position(|s| !s.success).unwrap();
    assert_eq!(t.steps[pos + 1].subgoal, sg("(Open, fridge)"));
}

#[test]
fn bread_fridge_static_fails() {
    let cfg = EpisodeConfig {
        replanning_enabled: false,
        ..EpisodeConfig::default()
    };
    let t = run("bread.json", "bread_fridge_recovery.json", cfg);
    assert_eq!(t.outcome, Outcome::PlanExhausted);
    assert_eq!(t.sr, 0);
    assert!(t.gc < 1.0);
    assert!((t.gc - 2.0 / 3.0).abs() < 1e-12);
    assert!(t
        .steps
        .iter()
        .all(|s| s.validity.is_none() && s.recovery.is_none()));
}

#[test]
fn no_std_plan_slices_without_knife_then_recovers() {
    let cfg = EpisodeConfig {
        use_std: false,
        ..EpisodeConfig::default()
    };
    let t = run("bread.json", "bread_no_std.json", cfg);
    assert!(t.qa.is_none());
    assert_eq!(t.initial_plan.steps[0], sg("(Slice, bread)"));
    assert!(!t.initial_plan.steps.contains(&sg("(Pickup, knife)")));
    assert_eq!(t.steps[0].reason, StepReason::HandEmpty);
    assert_eq!(t.replan_count, 1);
    assert_eq!(t.outcome, Outcome::Success);
    assert!(!t.calls[0].user.lines().any(|l| l.starts_with("Q:")));
}

#[test]
fn desklamp_replan_avoids_pickup() {
    let t = run("desklamp.json", "desklamp.json", EpisodeConfig::default());
    assert_eq!(t.steps[0].reason, StepReason::ObjectTooHeavy);
    let Some(RecoveryRecord::Replan { new_plan, .. }) = &t.steps[0].recovery else {
        panic!("expected a replan")
    };
    assert!(new_plan.steps.contains(&sg("(ToggleOn, desklamp)")));
    assert!(!new_plan.steps.contains(&sg("(Pickup, desklamp)")));
    assert_eq!(t.outcome, Outcome::Success);
}

#[test]
fn pan_fridge_replan_next_is_open() {
    let t = run(
        "pan_fridge.json",
        "pan_fridge.json",
        EpisodeConfig::default(),
    );
    assert_eq!(t.replan_count, 1);
    let pos = t.steps.iter().position(|s| !s.success).unwrap();
    assert_eq!(t.steps[pos].subgoal, sg("(Put, pan, fridge)"));
    assert_eq!(t.steps[pos + 1].subgoal, sg("(Open, fridge)"));
    assert_eq!(t.sr, 1);
}

#[test]
fn seeded_noise_gives_single_redo() {
    let cfg = EpisodeConfig {
        noise_override: Some(0.05),
        seed: 2,
        ..EpisodeConfig::default()
    };
    let t = run("bread.json", "bread.json", cfg);
    assert_eq!(t.failure_count, 1);
    assert_eq!(t.redo_count, 1);
    assert_eq!(t.replan_count, 0);
    assert_eq!(t.sr, 1);
    let pos = t.steps.iter().position(|s| !s.success).unwrap();
    assert_eq!(t.steps[pos].reason, StepReason::ControllerNoise);
    assert_eq!(t.steps[pos].recovery, Some(RecoveryRecord::Redo));
    assert_eq!(t.steps[pos + 1].subgoal, t.steps[pos].subgoal);
}

#[test]
fn noise_one_exhausts_budget_on_bread() {
    let cfg = EpisodeConfig {
        noise_override: Some(1.0),
        ..EpisodeConfig::default()
    };
    let t = run("bread.json", "bread.json", cfg);
    assert_eq!(t.outcome, Outcome::BudgetExhausted);
    assert_eq!(t.failure_count, 10);
    assert_eq!(t.steps.iter().filter(|s| !s.success).count(), 10);
}

#[test]
fn cot_mode_uses_single_pseudo_turn() {
    let gw = gateway("mini7.json");
    let cfg = EpisodeConfig {
        use_cot: true,
        ..EpisodeConfig::default()
    };
    let planner = SocraticPlanner::new(&gw, cfg);
    let s = scenario("bread.json");
    let mut log = CallLog::default();
    let qa = planner
        .decompose(&s.instruction, &DecodeParams::default(), &mut log)
        .unwrap();
    assert_eq!(qa.turns.len(), 1);
    assert!(log.calls[0].user.contains("Let's think step by step"));
    let plan = planner
        .plan(
            &s.instruction,
            Some(&qa),
            &DecodeParams::default(),
            &mut log,
        )
        .unwrap();
    assert_eq!(plan.len(), 15);
    assert!(log.calls[1]
        .user
        .contains("Based on this step-by-step decomposition"));
}

#[test]
fn replay_is_byte_identical() {
    let cfg = EpisodeConfig {
        noise_override: Some(0.2),
        seed: 99,
        ..EpisodeConfig::default()
    };
    let a = run("bread.json", "bread_fridge_recovery.json", cfg.clone());
    let b = run("bread.json", "bread_fridge_recovery.json", a.config.clone());
    assert_eq!(a.to_json_line(), b.to_json_line());
    let back: EpisodeTrace = serde_json::from_str(&a.to_json_line()).unwrap();
    assert_eq!(back.to_json_line(), a.to_json_line());
}

#[test]
fn decode_defaults_cover_vocabulary() {
    let t = run("bread.json", "bread.json", EpisodeConfig::default());
    assert_eq!(t.decode.temperature, 0.0);
    let keys: Vec<_> = t.decode.token_bias.keys().cloned().collect();
    assert_eq!(
        keys,
        ["bread", "countertop", "fridge", "knife", "microwave"]
    );
    assert!(t.decode.token_bias.values().all(|v| *v == 0.1));
}

#[test]
fn task_files_exist() {
    for f in [
        "mini7.json",
        "bread.json",
        "desklamp.json",
        "pan_fridge.json",
    ] {
        assert!(Path::new(&root().join("tasks").join(f)).exists());
    }
}
