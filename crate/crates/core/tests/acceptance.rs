//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed. Run with `--nocapture` to see the table.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use execbench::episode::{summarize, Action, ActionKind, EpisodeTrajectory, ErrorClass, TerminatedBy, Turn};
use execbench::harness::{run_episode, Phase, ScriptedPolicy, StrategyConfig, StrategyKind};
use execbench::scoring::{
    bash_reward, gauss_erf, kendall_tau_b, multiset_iou, order_coefficient, sql_reward, Cell, ChangeKind, FsChange,
    RewardBreakdown, ResultSet,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;

const BASH_TOL: f64 = 1e-6;
const ERF_TOL: f64 = 1e-7;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- oracles ----

/// erf via the positive-term series
/// erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)),
/// which has no cancellation for large x.
fn erf_oracle(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term > sum * 1e-18 {
        n += 1.0;
        term *= 2.0 * x * x / (2.0 * n + 1.0);
        sum += term;
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum
}

/// Kendall's tau over distinct values by counting concordant and discordant pairs.
fn tau_oracle(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len();
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (x[i] as i64 - x[j] as i64) * (y[i] as i64 - y[j] as i64);
            if s > 0 {
                c += 1;
            } else if s < 0 {
                d += 1;
            }
        }
    }
    (c - d) as f64 / (n * (n - 1) / 2) as f64
}

fn iou_oracle(a: &[u8], b: &[u8]) -> f64 {
    let mut counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for r in a {
        counts.entry(*r).or_default().0 += 1;
    }
    for r in b {
        counts.entry(*r).or_default().1 += 1;
    }
    let inter: usize = counts.values().map(|(x, y)| x.min(y)).sum();
    let union: usize = counts.values().map(|(x, y)| x.max(y)).sum();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn int_rows(vals: &[i128]) -> ResultSet {
    ResultSet::rows(vals.iter().map(|v| vec![Cell::Int(*v)]).collect())
}

// ---- criteria ----

fn gold_replay() -> Check {
    let mut lines = Vec::new();
    for env in common::ENVS {
        let mut h = common::handle(env);
        let mut trajectories = Vec::new();
        for i in 0..h.tasks().len() {
            h.reset(Some(i)).map_err(|e| format!("{env} reset {i}: {e}"))?;
            let plan = h.gold_plan().unwrap();
            for a in &plan.actions {
                h.step(Action::Code(a.clone())).map_err(|e| format!("{env} step: {e}"))?;
            }
            h.step(Action::Submit(plan.submit.clone())).map_err(|e| format!("{env} submit: {e}"))?;
            trajectories.push(h.last_trajectory().unwrap().clone());
        }
        let failed: Vec<_> = trajectories.iter().filter(|t| t.reward != Some(1.0)).map(|t| t.task_id.clone()).collect();
        ensure(failed.is_empty(), || format!("{env}: reward below 1 on {failed:?}"))?;
        let m = summarize(&trajectories).map_err(|e| e.to_string())?;
        ensure(m.success_rate == 1.0 && m.error_pct == 0.0, || format!("{env}: {m:?}"))?;
        lines.push(format!("{env} {}/{}", trajectories.len(), trajectories.len()));
    }
    Ok(format!("SR 1.0, Error 0% ({})", lines.join(", ")))
}

fn bash_golden() -> Check {
    let out = "4 files";
    let a = FsChange::new("/testbed/a.txt", ChangeKind::Changed);

    let r = bash_reward(out, out, std::slice::from_ref(&a), std::slice::from_ref(&a), |_| true);
    ensure((r.total - 1.0).abs() <= BASH_TOL, || format!("perfect match gave {}", r.total))?;

    let extra = FsChange::new("/testbed/extra", ChangeKind::Added);
    let r = bash_reward(out, out, &[extra], &[], |_| panic!("no common paths"));
    let want = 0.34 + 0.33 * (1.0 - erf_oracle(1.0)) + 0.33;
    ensure((r.total - want).abs() <= BASH_TOL, || format!("one extra change gave {} want {want}", r.total))?;
    ensure(r.path_correct_ratio == 1.0, || "empty intersection must score 1".into())?;

    let r = bash_reward("", "some gold output", &[], &[], |_| true);
    ensure((r.total - 0.66).abs() <= BASH_TOL, || format!("empty agent output gave {}", r.total))?;
    Ok(format!("1.0, {want:.7}, 0.66 within {BASH_TOL:e}"))
}

fn random_cell(rng: &mut StdRng) -> Cell {
    match rng.gen_range(0..5) {
        0 => Cell::Null,
        1 => Cell::Int(rng.gen_range(-50..50)),
        2 => Cell::decimal(&format!("{}.{}", rng.gen_range(0..99), rng.gen_range(0..99))),
        3 => Cell::text(["Ross", "Sky Radio", "é", "", "x y"][rng.gen_range(0..5)]),
        _ => Cell::bytes(&[rng.gen(), rng.gen()]),
    }
}

fn sql_golden() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    for case in 0..500 {
        let arity = rng.gen_range(1..4);
        let rows = (0..rng.gen_range(0..8)).map(|_| (0..arity).map(|_| random_cell(&mut rng)).collect()).collect();
        let x = ResultSet::rows(rows);
        let r = sql_reward(&x, &x);
        ensure(r.total == 1.0, || format!("case {case}: sql_reward(x, x) = {} for {x:?}", r.total))?;
    }

    let iou = multiset_iou(&int_rows(&[1, 2, 3]).rows, &int_rows(&[1, 2, 4]).rows);
    ensure(iou == 0.5, || format!("IoU case gave {iou}"))?;
    let iou = multiset_iou(&int_rows(&[1, 1]).rows, &int_rows(&[1]).rows);
    ensure(iou == 0.5, || format!("duplicate IoU case gave {iou}"))?;

    let c = order_coefficient(&int_rows(&[1, 2, 3]).rows, &int_rows(&[1, 3, 2]).rows);
    ensure((c - 2.0 / 3.0).abs() < 1e-12, || format!("order coefficient gave {c}"))?;

    let r = sql_reward(&int_rows(&[1, 2, 3]), &int_rows(&[2, 1]));
    ensure((r.iou - 2.0 / 3.0).abs() < 1e-12 && r.order_coeff == 0.0 && r.total == 0.0, || format!("reversed case gave {r:?}"))?;

    let gold = ResultSet::rows(vec![vec![Cell::text("Sky Radio")]]);
    ensure(sql_reward(&gold, &gold).total == 1.0, || "table answer".into())?;

    for _ in 0..200 {
        let rows = (0..rng.gen_range(0..5)).map(|_| vec![random_cell(&mut rng)]).collect();
        let g = ResultSet::rows(rows);
        let err = ResultSet::error("You have an error in your SQL syntax");
        ensure(sql_reward(&err, &g).total == 0.0, || "non-tabular agent output must score 0".into())?;
        ensure(sql_reward(&g, &err).total == 0.0, || "non-tabular gold output must score 0".into())?;
    }
    Ok("x,x = 1 over 500 sets; IoU 0.5; coefficient 2/3; reversed 0; non-tabular 0".into())
}

fn erf_accuracy() -> Check {
    let mut worst: f64 = 0.0;
    for k in 0..=50 {
        let x = k as f64 / 10.0;
        let d = (gauss_erf(x) - erf_oracle(x)).abs();
        worst = worst.max(d);
        ensure(d <= ERF_TOL, || format!("x = {x}: |{} - {}| = {d:e}", gauss_erf(x), erf_oracle(x)))?;
    }
    Ok(format!("max deviation {worst:.2e} on 0..5 step 0.1"))
}

fn kendall() -> Check {
    let mut cases = 0;
    for n in 2..=6 {
        let ident: Vec<usize> = (0..n).collect();
        let xs: Vec<f64> = ident.iter().map(|v| *v as f64).collect();
        for p in permutations(n) {
            let want = tau_oracle(&ident, &p);
            let ys: Vec<f64> = p.iter().map(|v| *v as f64).collect();
            let got = kendall_tau_b(&xs, &ys).ok_or("tau undefined")?;
            ensure((got - want).abs() < 1e-12, || format!("tau {p:?}: {got} vs {want}"))?;

            let agent: Vec<i128> = p.iter().map(|v| *v as i128).collect();
            let gold: Vec<i128> = ident.iter().map(|v| *v as i128).collect();
            let coeff = order_coefficient(&int_rows(&agent).rows, &int_rows(&gold).rows);
            ensure((coeff - (want + 1.0) / 2.0).abs() < 1e-12, || format!("coefficient {p:?}: {coeff}"))?;
            cases += 1;
        }
    }
    ensure(cases == 2 + 6 + 24 + 120 + 720, || format!("{cases} cases"))?;
    Ok(format!("{cases} permutations, n = 2..6"))
}

fn iou() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    for case in 0..2000 {
        let a: Vec<u8> = (0..rng.gen_range(0..=10)).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<u8> = (0..rng.gen_range(0..=10)).map(|_| rng.gen_range(0..5)).collect();
        let (got, want) = (multiset_iou(&a, &b), iou_oracle(&a, &b));
        ensure((got - want).abs() < 1e-12, || format!("case {case}: {a:?} vs {b:?}: {got} != {want}"))?;
    }
    Ok("2000 random multisets of <= 10 records".into())
}

fn synthetic(i: usize, reward: Option<f64>) -> EpisodeTrajectory {
    let turns = i % 4 + 1;
    EpisodeTrajectory {
        task_id: format!("t{i}"),
        env: "sql".into(),
        query: String::new(),
        gold: String::new(),
        turns: (0..turns)
            .map(|k| Turn {
                i: k,
                action_kind: ActionKind::Code,
                action: "SELECT 1".into(),
                observation: String::new(),
                admissible: !(k == 0 && i.is_multiple_of(5)),
                exit_status: None,
                error_class: ErrorClass::None,
                latency: Default::default(),
            })
            .collect(),
        reward,
        reward_breakdown: RewardBreakdown::None,
        terminated_by: if reward.is_some() { TerminatedBy::Submit } else { TerminatedBy::Abort },
        config_snapshot: json!({}),
    }
}

fn metrics() -> Check {
    // 8 solved, 3 at 3/7, 3 at 0.5, 4 at 0, 2 aborted
    let mut rewards = vec![Some(1.0); 8];
    rewards.extend([Some(3.0 / 7.0); 3]);
    rewards.extend([Some(0.5); 3]);
    rewards.extend([Some(0.0); 4]);
    rewards.extend([None; 2]);
    let corpus: Vec<_> = rewards.into_iter().enumerate().map(|(i, r)| synthetic(i, r)).collect();
    ensure(corpus.len() == 20, || "corpus size".into())?;
    let m = summarize(&corpus).map_err(|e| e.to_string())?;
    // turns cycle 1,2,3,4 five times: 50 turns; 4 episodes (i = 0, 5, 10, 15) have one bad action
    ensure(m.episode_count == 20, || format!("{m:?}"))?;
    ensure((m.success_rate - 0.40).abs() < 1e-12, || format!("SR {}", m.success_rate))?;
    ensure((m.error_pct - 8.0).abs() < 1e-9, || format!("Error {}", m.error_pct))?;
    ensure((m.mean_turns - 2.5).abs() < 1e-12, || format!("mean turns {}", m.mean_turns))?;
    Ok("SR 40%, Error 8%, mean turns 2.5".into())
}

const SQL_GOLD: &str = "SELECT name FROM station WHERE founded = 1988";

fn strategies() -> Check {
    let mut h = common::handle("sql");

    let try_again = StrategyConfig::new(StrategyKind::TryAgain, "sql");
    ensure(try_again.max_turns == 10, || format!("try_again budget {}", try_again.max_turns))?;
    let mut p = ScriptedPolicy::new(["SHOW TABLES"]);
    let t = run_episode(&mut h, Some(0), &mut p, &try_again).map_err(|e| e.to_string())?;
    ensure(t.turns.len() == 10 && t.terminated_by == TerminatedBy::MaxTurns, || format!("try_again cap: {} turns", t.turns.len()))?;

    let mut p = ScriptedPolicy::new(["SHOW TABLES", SQL_GOLD, "SHOW TABLES"]);
    let t = run_episode(&mut h, Some(0), &mut p, &try_again).map_err(|e| e.to_string())?;
    ensure(t.turns.len() == 2 && t.reward == Some(1.0), || format!("try_again stop: {} turns", t.turns.len()))?;

    let react = StrategyConfig::new(StrategyKind::React, "sql");
    let mut p = ScriptedPolicy::new([
        format!("Thought 1: go\nAction 1: execute[{SQL_GOLD}]"),
        "Thought 2: look\nAction 2: execute[SHOW TABLES]".into(),
        "Thought 3: done\nAction 3: submit".into(),
    ]);
    let t = run_episode(&mut h, Some(0), &mut p, &react).map_err(|e| e.to_string())?;
    ensure(t.turns.len() == 3 && t.terminated_by == TerminatedBy::Submit, || format!("react: {} turns", t.turns.len()))?;

    let ps = StrategyConfig::new(StrategyKind::PlanSolve, "sql");
    let plan = "1. Query.\n2. List tables.\n3. Check.";
    let mut p = ScriptedPolicy::new([plan, SQL_GOLD, "SHOW TABLES", "submit"]);
    let t = run_episode(&mut h, Some(0), &mut p, &ps).map_err(|e| e.to_string())?;
    ensure(t.turns.len() == 3 && t.terminated_by == TerminatedBy::Submit, || format!("plan_solve: {} turns", t.turns.len()))?;

    let refine = StrategyConfig::new(StrategyKind::PlanSolveRefine, "sql");
    let mut p = ScriptedPolicy::new(["1. List tables.\n2. Query.", "SHOW TABLES"]);
    let t = run_episode(&mut h, Some(0), &mut p, &refine).map_err(|e| e.to_string())?;
    let refines = p.calls.iter().filter(|c| **c == Phase::Refine).count();
    ensure(refines == 3 && t.turns.len() == 5, || format!("refine: {refines} refine calls, {} turns", t.turns.len()))?;
    Ok("try_again stops at 1 or 10; react and plan_solve stop on submit; refine <= 3".into())
}

fn probe(env: &str) -> &'static str {
    match env {
        "bash" => "ls /definitely/not/here",
        "sql" => "SELEC 1",
        "python" => "print(undefined_name)",
        _ => "ls",
    }
}

fn determinism() -> Check {
    for env in common::ENVS {
        let tasks = common::tasks(env);
        let mut recorded = Vec::new();
        let mut h = common::handle(env);
        for k in 0..10 {
            let i = k % tasks.len();
            h.reset(Some(i)).map_err(|e| e.to_string())?;
            let plan = h.gold_plan().unwrap();
            h.step(Action::Code(probe(env).into())).map_err(|e| e.to_string())?;
            for a in &plan.actions {
                h.step(Action::Code(a.clone())).map_err(|e| e.to_string())?;
            }
            h.step(Action::Submit(plan.submit)).map_err(|e| e.to_string())?;
            recorded.push((i, h.last_trajectory().unwrap().clone()));
        }
        h.close().map_err(|e| e.to_string())?;

        let mut h = common::handle(env);
        for (i, t) in &recorded {
            h.reset(Some(*i)).map_err(|e| e.to_string())?;
            for turn in &t.turns {
                let action = match turn.action_kind {
                    ActionKind::Code => Action::Code(turn.action.clone()),
                    ActionKind::Submit => Action::Submit(Some(turn.action.clone()).filter(|a| !a.is_empty())),
                };
                let out = h.step(action).map_err(|e| e.to_string())?;
                ensure(out.observation.text == turn.observation, || {
                    format!("{env} task {i} turn {}: {:?} != {:?}", turn.i, out.observation.text, turn.observation)
                })?;
            }
            let replay = h.last_trajectory().unwrap();
            ensure(replay.reward == t.reward, || format!("{env} task {i}: reward {:?} != {:?}", replay.reward, t.reward))?;
        }
    }
    Ok("10 replayed episodes per env match observation for observation".into())
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("gold replay", gold_replay),
        ("bash reward golden cases", bash_golden),
        ("sql reward golden and properties", sql_golden),
        ("erf accuracy", erf_accuracy),
        ("kendall coefficient", kendall),
        ("multiset iou", iou),
        ("metrics", metrics),
        ("strategy state machines", strategies),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
