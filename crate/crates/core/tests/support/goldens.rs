//! Golden cases: every feedback class and the fixed prompt texts, pinned to
//! files under `tests/golden/`. Set `BLESS=1` to rewrite them.

use std::path::PathBuf;

use tabletalk_core::agents::{communication_instruction, dialog_turn, AgentKind, TurnView};
use tabletalk_core::dialog::{DialogState, ProtocolParams};
use tabletalk_core::geometry::Vec3;
use tabletalk_core::gridpath::{
    feedback_text, parse_feedback_text, parse_plan, user_prompt, validate_paths, AgentPath, Cell, GridAgent,
    GridInstance,
};
use tabletalk_core::kinematics::Contact;
use tabletalk_core::plan::{
    validate_text, CollisionAtStep, FailureDetail, FeedbackDetail, IkFailure, WaypointIssue,
};
use tabletalk_core::world::{describe, reset, TaskId};

pub const PAPER_SPACING_LINE: &str =
    "Some steps in this plan are not exactly 1 step away from each other: Bob: (7, 4, 5), (7, 1, 5);";

fn c(x: i32, y: i32, z: i32) -> Cell {
    Cell::new(x, y, z)
}

fn p(name: &str, cells: &[(i32, i32, i32)]) -> AgentPath {
    AgentPath { name: name.into(), path: cells.iter().map(|&(x, y, z)| c(x, y, z)).collect() }
}

pub fn golden_instance() -> GridInstance {
    GridInstance {
        size: [10, 10, 10],
        obstacles: vec![c(2, 0, 0), c(5, 5, 5)],
        agents: vec![
            GridAgent { name: "Alice".into(), init: c(0, 0, 0), goal: c(0, 0, 3) },
            GridAgent { name: "Bob".into(), init: c(7, 4, 5), goal: c(7, 1, 5) },
        ],
    }
}

fn grid_case(paths: &[AgentPath]) -> String {
    feedback_text(&validate_paths(&golden_instance(), paths))
}

fn alice_ok() -> AgentPath {
    p("Alice", &[(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)])
}

fn bob_ok() -> AgentPath {
    p("Bob", &[(7, 4, 5), (7, 3, 5), (7, 2, 5), (7, 1, 5)])
}

pub fn grid_cases() -> Vec<(&'static str, String)> {
    let inst = golden_instance();
    let crossing = |bob_init: Cell| GridInstance {
        size: [5, 5, 5],
        obstacles: vec![],
        agents: vec![
            GridAgent { name: "Alice".into(), init: c(0, 0, 0), goal: c(2, 0, 0) },
            GridAgent { name: "Bob".into(), init: bob_init, goal: c(0, 0, 0) },
        ],
    };
    vec![
        ("grid_spacing", grid_case(&[alice_ok(), p("Bob", &[(7, 4, 5), (7, 1, 5)])])),
        ("grid_missing", grid_case(&[alice_ok()])),
        ("grid_start", grid_case(&[p("Alice", &[(0, 1, 0), (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]), bob_ok()])),
        ("grid_goal", grid_case(&[p("Alice", &[(0, 0, 0), (0, 0, 1), (0, 0, 2)]), bob_ok()])),
        ("grid_bounds", grid_case(&[p("Alice", &[(0, 0, 0), (-1, 0, 0), (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]), bob_ok()])),
        ("grid_obstacle", grid_case(&[p("Alice", &[(0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 0, 0), (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]), bob_ok()])),
        (
            "grid_vertex",
            feedback_text(&validate_paths(
                &crossing(c(2, 0, 0)),
                &[p("Alice", &[(0, 0, 0), (1, 0, 0), (2, 0, 0)]), p("Bob", &[(2, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 0)])],
            )),
        ),
        (
            "grid_swap",
            feedback_text(&validate_paths(
                &crossing(c(3, 0, 0)),
                &[p("Alice", &[(0, 0, 0), (1, 0, 0), (2, 0, 0)]), p("Bob", &[(3, 0, 0), (2, 0, 0), (1, 0, 0), (0, 0, 0)])],
            )),
        ),
        (
            "grid_combined",
            grid_case(&[p("Alice", &[(0, 0, 0), (2, 0, 0), (2, 0, 1), (2, 0, 2)]), p("Bob", &[(7, 4, 5), (7, 1, 5), (10, 1, 5)])]),
        ),
        ("grid_parse", parse_feedback_text(&parse_plan("PLAN\nNAME Zed PATH [(0, 0, 0)]", &inst).unwrap_err())),
        ("grid_user_prompt", user_prompt(&inst, &[])),
    ]
}

fn plan_text(task: TaskId, text: &str) -> String {
    let scene = reset(task, 0);
    let (_, v) = validate_text(text, &scene);
    tabletalk_core::plan::render_feedback(&v.report).map(|f| f.text).unwrap_or_else(|_| "PASSED".into())
}

fn render(failure: FailureDetail) -> String {
    FeedbackDetail::Validation { failure }.into_feedback().text
}

fn pt(x: f64, y: f64, z: f64) -> Vec3<f64> {
    Vec3::new(x, y, z)
}

pub fn plan_cases() -> Vec<(&'static str, String)> {
    use TaskId::*;
    let obstacle = |arm: &str, link, obstacle: &str| Contact::Obstacle { arm: arm.into(), link, obstacle: obstacle.into() };
    let arms = |a: &str, la, b: &str, lb| Contact::Arms { arm_a: a.into(), link_a: la, arm_b: b.into(), link_b: lb };
    vec![
        ("plan_missing_keyword", plan_text(SortBlocks, "EXECUTE\nNAME Alice PICK blue_block PLACE zone2")),
        ("plan_unknown_agent", plan_text(SortBlocks, "EXECUTE\nNAME Zed ACTION WAIT")),
        ("plan_unknown_verb", plan_text(SortBlocks, "EXECUTE\nNAME Alice ACTION PUSH blue_block")),
        ("plan_bad_arity", plan_text(StackOrder, "EXECUTE\nNAME Chad ACTION PLACE bread_slice1\nNAME Dave ACTION WAIT")),
        ("plan_malformed_path", plan_text(PackBoxes, "EXECUTE\nNAME Alice ACTION PICK apple PATH [(0.1, 0.2)]\nNAME Bob ACTION WAIT")),
        ("plan_duplicate_agent", plan_text(SortBlocks, "EXECUTE\nNAME Alice ACTION WAIT\nNAME Alice ACTION WAIT\nNAME Bob ACTION WAIT\nNAME Chad ACTION WAIT")),
        ("plan_missing_agent", plan_text(SortBlocks, "EXECUTE\nNAME Alice ACTION WAIT\nNAME Bob ACTION WAIT")),
        (
            "plan_unreachable_target",
            plan_text(SortBlocks, "EXECUTE\nNAME Alice ACTION WAIT\nNAME Bob ACTION WAIT\nNAME Chad ACTION PICK yellow_block PLACE zone1"),
        ),
        ("plan_no_such_object", plan_text(SortBlocks, "EXECUTE\nNAME Alice ACTION PICK red_block PLACE zone2\nNAME Bob ACTION WAIT\nNAME Chad ACTION WAIT")),
        ("plan_not_holding", plan_text(StackOrder, "EXECUTE\nNAME Chad ACTION PLACE bread_slice1 cutting_board\nNAME Dave ACTION WAIT")),
        ("plan_not_a_bin", plan_text(PackBoxes, "EXECUTE\nNAME Alice ACTION PLACE apple table1 PATH [(0, 0, 0.5), (0, 0, 0.4)]\nNAME Bob ACTION WAIT")),
        (
            "plan_ik",
            render(FailureDetail::Ik {
                failures: vec![
                    IkFailure { agent: "Alice".into(), target: pt(1.2, 0.0, 0.05) },
                    IkFailure { agent: "Chad".into(), target: pt(0.3, 0.5, 0.9) },
                ],
            }),
        ),
        (
            "plan_collision",
            render(FailureDetail::Collision {
                collisions: vec![CollisionAtStep { step: 0, contacts: vec![arms("Alice", 2, "Bob", 3), obstacle("Bob", 1, "table")] }],
            }),
        ),
        (
            "plan_waypoints",
            render(FailureDetail::Waypoints {
                issues: vec![
                    WaypointIssue::StartMismatch { agent: "Alice".into(), point: pt(0.0, -0.2, 0.3), expected: pt(0.0, -0.31, 0.25) },
                    WaypointIssue::EndMismatch { agent: "Alice".into(), point: pt(0.18, -0.12, 0.2), expected: pt(0.18, -0.12, 0.09) },
                    WaypointIssue::Uneven { agent: "Bob".into(), pairs: vec![(pt(0.4, 0.1, 0.3), pt(0.4, 0.1, 0.62))] },
                    WaypointIssue::Unreachable { agent: "Bob".into(), index: 2, point: pt(0.0, 1.4, 0.3) },
                    WaypointIssue::Colliding { index: 1, contacts: vec![obstacle("Alice", 2, "wall")] },
                ],
            }),
        ),
        ("plan_no_proposal", FeedbackDetail::NoProposal { messages: 6 }.into_feedback().text),
        (
            "plan_motion",
            FeedbackDetail::MotionPlanning { reason: "planning budget exhausted after 50000 iterations (1 goals reached)".into() }
                .into_feedback()
                .text,
        ),
    ]
}

pub fn prompt_cases() -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = vec![
        ("instruction_sort_blocks", communication_instruction(TaskId::SortBlocks, AgentKind::Robot).into()),
        ("instruction_stack_order", communication_instruction(TaskId::StackOrder, AgentKind::Robot).into()),
        ("instruction_pack_boxes", communication_instruction(TaskId::PackBoxes, AgentKind::Robot).into()),
        ("instruction_central", communication_instruction(TaskId::SortBlocks, AgentKind::CentralPlanner).into()),
    ];
    for (name, task, agent) in [
        ("prompt_sort_blocks_alice", TaskId::SortBlocks, "Alice"),
        ("prompt_stack_order_dave", TaskId::StackOrder, "Dave"),
        ("prompt_pack_boxes_bob", TaskId::PackBoxes, "Bob"),
    ] {
        let scene = reset(task, 0);
        let roster = scene.agents();
        let mut state = DialogState::new(2 * roster.len());
        state.start_round(0);
        let turn = dialog_turn(&scene, AgentKind::Robot, agent, &roster, &state, &ProtocolParams::default());
        out.push((name, format!("{}\n\n{}", turn.prompt.system, turn.prompt.user)));
        if let TurnView::Dialog(view) = &turn.view {
            if task == TaskId::PackBoxes {
                out.push(("observation_pack_boxes_seed0", describe(&view.observation)));
            }
        }
    }
    out
}

pub fn all_cases() -> Vec<(&'static str, String)> {
    let mut cases = grid_cases();
    cases.extend(plan_cases());
    cases.extend(prompt_cases());
    cases
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Names of cases whose text differs from the pinned file.
pub fn mismatches() -> Vec<String> {
    let dir = golden_dir();
    let bless = std::env::var_os("BLESS").is_some();
    if bless {
        std::fs::create_dir_all(&dir).expect("golden dir");
    }
    let mut bad = Vec::new();
    for (name, text) in all_cases() {
        let path = dir.join(format!("{name}.txt"));
        if bless {
            std::fs::write(&path, &text).expect("golden write");
            continue;
        }
        match std::fs::read_to_string(&path) {
            Ok(pinned) if pinned == text => {}
            _ => bad.push(name.to_string()),
        }
    }
    bad
}
