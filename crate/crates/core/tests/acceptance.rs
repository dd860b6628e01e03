//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use explicable::domains::{param_space, shipped, DomainSpec, ParamAssignment, ParamId, SHIPPED};
use explicable::explainer::select_messages;
use explicable::harness::{
    generate_dataset, parse_results, read_dataset_from, read_tree, run_curves, write_dataset_to, write_results_to,
    write_tree, CurveResults, CurveRow, Dataset, DatasetHeader, ExperimentConfig, InstanceFailure,
};
use explicable::label_service::plan_session;
use explicable::learner::{
    conflict_rate, cross_validate, encode_all, stratified_folds, train_tree, FeatureRow, FeatureSchema, TreeHyper,
};
use explicable::mdp::{
    enumerate_trajectories, greedy_policy, most_likely_trajectory, solve, trajectory_probability, Mdp, TieBreak,
    Trajectory,
};
use explicable::reconciliation::theta::{reconcile_models, same_theta, theta_indices, ThetaIndex};
use explicable::reconciliation::{
    minimal_complete_explanation, reconcile, Candidates, CheckMode, CheckParams, SolvedModel, Target,
};
use explicable::search::Exhaustive;
use explicable::sim_user::{LabeledTransition, MessageMask, SimulatedUser};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);
type Rule = fn(&LabeledTransition, usize) -> u8;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 8] = [
        (
            "solver matches policy enumeration",
            Duration::from_secs(10),
            solver_oracle,
        ),
        (
            "trajectory probabilities normalize",
            Duration::from_secs(30),
            trajectory_mass,
        ),
        ("reconciliation algebra", Duration::from_secs(5), reconciliation_algebra),
        (
            "minimal explanations match brute force",
            Duration::from_secs(120),
            minimality_oracle,
        ),
        ("learning curves", Duration::from_secs(1800), learning_curves),
        (
            "end-to-end message selection",
            Duration::from_secs(300),
            end_to_end_selection,
        ),
        ("cross-validation protocol", Duration::from_secs(300), cv_protocol),
        ("file round-trips", Duration::from_secs(60), round_trips),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *limit => Err(format!("{detail}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} PASS [{took:.2?}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL [{took:.2?}] {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn solver_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let mdp = random_mdp(&mut rng, 4, 3);
        let q = solve(&mdp).map_err(|e| e.to_string())?;
        let (best, _) = enumerate_optimum(&mdp);
        let err = max_abs_diff(q.values(), &best);
        ensure!(err <= 1e-6, "mdp {i}: value error {err:e}");
        // the greedy policy itself must be optimal, not just the values
        let greedy = greedy_policy(&q, TieBreak::LowestIndex);
        let achieved = policy_value(&mdp, greedy.actions());
        let gap = max_abs_diff(&achieved, &best);
        ensure!(gap <= 1e-6, "mdp {i}: greedy policy is {gap:e} below optimum");
        worst = worst.max(err).max(gap);
    }
    Ok(format!("200 MDPs, max deviation {worst:.1e}"))
}

fn trajectory_mass() -> Outcome {
    let mut report = Vec::new();
    for (name, _) in SHIPPED {
        let spec = shipped(name).unwrap();
        let robot = SolvedModel::new(&spec, spec.robot_params()).unwrap();
        let policy = robot.policy();
        let starts: Vec<usize> = (0..robot.mdp.n_states())
            .filter(|&s| robot.mdp.initial()[s] > 0.0)
            .collect();
        let mut traces = 0;
        for &start in &starts {
            let all = enumerate_trajectories(&robot.mdp, &policy, start, 40).map_err(|e| format!("{name}: {e}"))?;
            let mass: f64 = all.iter().map(|(_, p)| p).sum();
            ensure!((mass - 1.0).abs() <= 1e-9, "{name} from {start}: mass {mass}");
            for (t, p) in &all {
                let direct = trajectory_probability(&robot.mdp, &policy, t);
                ensure!(direct == *p, "{name}: trace probability {direct} vs enumerated {p}");
                let oracle: f64 = t
                    .steps
                    .iter()
                    .map(|s| robot.mdp.prob(s.state, s.action, s.next))
                    .product();
                ensure!((oracle - p).abs() <= 1e-15, "{name}: oracle product {oracle} vs {p}");
            }
            let distinct: std::collections::HashSet<&Trajectory> = all.iter().map(|(t, _)| t).collect();
            ensure!(distinct.len() == all.len(), "{name}: duplicate trajectories enumerated");
            traces += all.len();
        }
        report.push(format!("{name} {} starts/{traces} traces", starts.len()));
    }
    Ok(report.join(", "))
}

fn random_assignment(
    space: &[(ParamId, Vec<explicable::domains::ParamValue>)],
    rng: &mut ChaCha8Rng,
) -> ParamAssignment {
    ParamAssignment::from_values(
        space
            .iter()
            .map(|(id, vals)| (id.clone(), vals.choose(rng).unwrap().clone())),
    )
}

fn random_subset<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let p = rng.gen_range(0.0..1.0);
    items.iter().filter(|_| rng.gen_bool(p)).cloned().collect()
}

fn reconciliation_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let specs: Vec<DomainSpec> = SHIPPED.iter().map(|(n, _)| shipped(n).unwrap()).collect();
    for trial in 0..500 {
        let spec = &specs[trial % specs.len()];
        let space = param_space(spec);
        let ids: Vec<ParamId> = space.iter().map(|(id, _)| id.clone()).collect();
        let human = random_assignment(&space, &mut rng);
        let robot = random_assignment(&space, &mut rng);
        let a = random_subset(&ids, &mut rng);
        let b = random_subset(&ids, &mut rng);
        let r = |s: &[ParamId]| reconcile(&human, &robot, s).unwrap();
        ensure!(r(&[]) == human, "{}: empty subset changed the model", spec.name());
        ensure!(r(&ids) == robot, "{}: full overwrite differs from robot", spec.name());
        let ra = r(&a);
        for id in &ids {
            let expected = if a.contains(id) {
                robot.get(id.as_str())
            } else {
                human.get(id.as_str())
            };
            ensure!(
                ra.get(id.as_str()) == expected,
                "{}: `{id}` wrong after reconcile",
                spec.name()
            );
        }
        let sequential = reconcile(&ra, &robot, &b).unwrap();
        let union: BTreeSet<ParamId> = a.iter().chain(&b).cloned().collect();
        ensure!(
            sequential == r(&union.into_iter().collect::<Vec<_>>()),
            "{}: composition fails",
            spec.name()
        );
    }

    for trial in 0..500 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=3);
        let terminal: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let human = random_mdp_on(&mut rng, n, m, &terminal);
        let robot = random_mdp_on(&mut rng, n, m, &terminal);
        let all = theta_indices(&human, &robot).unwrap();
        let rec = |s: &[ThetaIndex]| reconcile_models(&human, &robot, s).unwrap();
        ensure!(same_theta(&rec(&[]), &human).unwrap(), "θ {trial}: identity fails");
        ensure!(
            same_theta(&rec(&all), &robot).unwrap(),
            "θ {trial}: full overwrite fails"
        );

        // partial rows go to disjoint (s, a) pairs on each side
        let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..m).map(move |a| (s, a))).collect();
        pairs.shuffle(&mut rng);
        let (left, right) = pairs.split_at(pairs.len() / 2);
        let mut subsets = [random_subset(&all, &mut rng), random_subset(&all, &mut rng)];
        for (subset, rows) in subsets.iter_mut().zip([left, right]) {
            for &(s, a) in rows {
                if rng.gen_bool(0.5) {
                    continue;
                }
                for next in 0..n {
                    if rng.gen_bool(0.4) {
                        subset.push(ThetaIndex::TransitionEntry {
                            state: s,
                            action: a,
                            next,
                        });
                    }
                }
            }
        }
        let [a, b] = subsets;
        let ra = rec(&a);
        check_partial_rows(&human, &robot, &a, &ra).map_err(|e| format!("θ {trial}: {e}"))?;
        let sequential = reconcile_models(&ra, &robot, &b).unwrap();
        let union: Vec<ThetaIndex> = a.iter().chain(&b).copied().collect();
        ensure!(
            models_close(&sequential, &rec(&union), 1e-12),
            "θ {trial}: composition fails"
        );
    }
    Ok("500 parameter-level and 500 model-level triples".into())
}

/// Entries named by partial overwrites carry the robot's probability and
/// the rest of the row keeps the human's proportions.
fn check_partial_rows(human: &Mdp, robot: &Mdp, subset: &[ThetaIndex], out: &Mdp) -> Result<(), String> {
    for idx in subset {
        let ThetaIndex::TransitionEntry {
            state: s, action: a, ..
        } = *idx
        else {
            continue;
        };
        if subset.contains(&ThetaIndex::Transition { state: s, action: a }) {
            continue;
        }
        let fixed: BTreeSet<usize> = subset
            .iter()
            .filter_map(|i| match *i {
                ThetaIndex::TransitionEntry { state, action, next } if (state, action) == (s, a) => Some(next),
                _ => None,
            })
            .collect();
        let fixed_mass: f64 = fixed.iter().map(|&n| robot.prob(s, a, n)).sum();
        let human_free: f64 = (0..human.n_states())
            .filter(|n| !fixed.contains(n))
            .map(|n| human.prob(s, a, n))
            .sum();
        let total: f64 = (0..out.n_states()).map(|n| out.prob(s, a, n)).sum();
        ensure!((total - 1.0).abs() < 1e-12, "row ({s},{a}) sums to {total}");
        for n in 0..out.n_states() {
            let expected = if fixed.contains(&n) {
                robot.prob(s, a, n)
            } else if human_free > 0.0 {
                human.prob(s, a, n) * (1.0 - fixed_mass) / human_free
            } else {
                continue;
            };
            ensure!(
                (out.prob(s, a, n) - expected).abs() < 1e-12,
                "T({s},{a},{n}) = {} not {expected}",
                out.prob(s, a, n)
            );
        }
    }
    Ok(())
}

fn detour(spec: &DomainSpec) -> Trajectory {
    let robot = SolvedModel::new(spec, spec.robot_params()).unwrap();
    let start = spec.state_from_features(&[0, 0, 0, 0]).unwrap();
    most_likely_trajectory(&robot.mdp, &robot.policy(), start, 40)
}

fn minimality_oracle() -> Outcome {
    let spec = shipped("warehouse").unwrap();
    ensure!(
        spec.messages().len() == 7,
        "catalog has {} messages",
        spec.messages().len()
    );
    let robot = spec.robot_params();
    let robot_model = SolvedModel::new(&spec, robot.clone()).unwrap();
    let robot_actions = robot_model.policy().actions().to_vec();
    let traces = [detour(&spec)];
    let eps = CheckParams::default().eps_opt;
    let mut report = Vec::new();
    for scenario in ["study", "missing_inspection"] {
        let human = spec.scenario_params(scenario).unwrap();
        for mode in [CheckMode::Policy, CheckMode::Behavior] {
            let target = match mode {
                CheckMode::Policy => Target::Policy,
                CheckMode::Behavior => Target::Behavior { traces: &traces },
            };
            let got = minimal_complete_explanation(
                &spec,
                &human,
                &robot,
                &Candidates::catalog(&spec),
                target,
                CheckParams::default(),
                &Exhaustive,
            )
            .map_err(|e| e.to_string())?;
            let expected = match mode {
                CheckMode::Policy => brute_force_minimum(&spec, &human, |m| m.policy_complete(&robot_actions, eps)),
                CheckMode::Behavior => brute_force_minimum(&spec, &human, |m| m.behavior_complete(&traces, 0.0, eps)),
            };
            ensure!(
                got.subset == expected.as_ref().map(|e| e.0.clone()),
                "{scenario}/{mode:?}: search {:?} vs brute force {:?}",
                got.subset,
                expected
            );
            if let Some((_, c)) = &expected {
                ensure!(
                    (got.cost - c).abs() < 1e-12,
                    "{scenario}/{mode:?}: cost {} vs {c}",
                    got.cost
                );
            }
            ensure!(got.optimal, "{scenario}/{mode:?}: exhaustive result not marked optimal");
            report.push(format!("{scenario}/{mode:?}={:?}", got.subset.unwrap_or_default()));
        }
    }

    let human = spec.scenario_params("study").unwrap();
    let mismatched: BTreeSet<ParamId> = human.differing(&robot).into_iter().collect();
    let behavior = minimal_complete_explanation(
        &spec,
        &human,
        &robot,
        &Candidates::catalog(&spec),
        Target::Behavior { traces: &traces },
        CheckParams::default(),
        &Exhaustive,
    )
    .map_err(|e| e.to_string())?;
    let chosen = behavior.subset.clone().ok_or("no complete behavior explanation")?;
    let idx: Vec<usize> = chosen
        .iter()
        .map(|id| spec.messages().iter().position(|m| &m.id == id).unwrap())
        .collect();
    let communicated: BTreeSet<ParamId> = Candidates::catalog(&spec)
        .params_of(&idx)
        .intersection(&mismatched)
        .cloned()
        .collect();
    ensure!(
        communicated.len() < mismatched.len() && communicated.is_subset(&mismatched),
        "behavior explanation covers {communicated:?} of {mismatched:?}"
    );
    report.push(format!(
        "behavior explanation covers {}/{} mismatched params",
        communicated.len(),
        mismatched.len()
    ));
    Ok(report.join(", "))
}

fn learning_curves() -> Outcome {
    let mut report = Vec::new();
    let mut failures = Vec::new();
    for (name, _) in SHIPPED {
        let spec = Arc::new(shipped(name).unwrap());
        let cfg = ExperimentConfig::for_domain(name, 2024);
        ensure!(cfg.instances == 20 && cfg.k == 3, "{name}: unexpected defaults");
        let results = run_curves(spec, &cfg).map_err(|e| format!("{name}: {e}"))?;
        let curve = results.mean_curve();
        let (max_size, last) = *curve.last().unwrap();
        let text: Vec<String> = curve.iter().map(|(s, a)| format!("{s}:{a:.3}")).collect();
        report.push(format!("{name} [{}]", text.join(" ")));
        if last < 0.85 {
            failures.push(format!("{name}: mean accuracy {last:.3} at {max_size}"));
        }
        for w in curve.windows(2) {
            if w[1].1 < w[0].1 - 0.05 {
                failures.push(format!(
                    "{name}: drop from {:.3} to {:.3} at {}",
                    w[0].1, w[1].1, w[1].0
                ));
            }
        }
        if !results.failures.is_empty() {
            report.push(format!("{name} failed instances {}", results.failures.len()));
        }
    }
    ensure!(failures.is_empty(), "{}; {}", failures.join("; "), report.join(", "));
    Ok(report.join(", "))
}

fn end_to_end_selection() -> Outcome {
    let spec = Arc::new(shipped("warehouse").unwrap());
    let human = spec.scenario_params("study").unwrap();
    let robot = SolvedModel::new(&spec, spec.robot_params()).unwrap();
    let mut user = SimulatedUser::new(spec.clone(), human.clone()).unwrap();
    let mut cfg = ExperimentConfig::for_domain("warehouse", 6);
    cfg.target_rows = 3000;
    let rows = generate_dataset(&mut user, &robot, &cfg, 6).map_err(|e| e.to_string())?;
    let schema = FeatureSchema::new(&spec, false);
    let encoded = encode_all(&spec, &schema, &rows).unwrap();
    let tree = train_tree(&encoded, &schema, TreeHyper::default(), 6).unwrap();

    let trace = detour(&spec);
    let chosen =
        select_messages(&spec, &tree, std::slice::from_ref(&trace), 1.0, &Exhaustive).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = chosen
        .messages
        .iter()
        .map(|id| spec.messages().iter().position(|m| &m.id == id).unwrap())
        .collect();
    let relabeled = OracleModel::new(&spec, &told(&spec, &human, &idx)).labels(&trace, 0.0, 1e-6);
    ensure!(
        relabeled.iter().all(|&l| l == 1),
        "{:?} leaves {} of {} transitions inexplicable",
        chosen.messages,
        relabeled.iter().filter(|&&l| l == 0).count(),
        relabeled.len()
    );
    let eps = CheckParams::default().eps_opt;
    let (minimal, min_cost) = brute_force_minimum(&spec, &human, |m| {
        m.behavior_complete(std::slice::from_ref(&trace), 0.0, eps)
    })
    .ok_or("no complete behavior explanation exists")?;
    ensure!(
        chosen.cost <= min_cost + 1e-12,
        "chose {:?} at cost {} above minimal {minimal:?} at {min_cost}",
        chosen.messages,
        chosen.cost
    );
    Ok(format!(
        "chose {:?} (cost {}, objective {}), minimal complete {minimal:?} (cost {min_cost}), {} transitions",
        chosen.messages,
        chosen.cost,
        chosen.objective,
        relabeled.len()
    ))
}

/// 38 participants with 8 traces each, messages added one per trace, as
/// the labeling service plans them, labeled by the study user.
fn study_shaped() -> (Arc<DomainSpec>, Vec<LabeledTransition>) {
    let spec = Arc::new(shipped("warehouse").unwrap());
    let robot = SolvedModel::new(&spec, spec.robot_params()).unwrap();
    let mut user = SimulatedUser::new(spec.clone(), spec.scenario_params("study").unwrap()).unwrap();
    let mut rows = Vec::new();
    for participant in 0..38u64 {
        for planned in plan_session(&spec, &robot, 8, 40, participant) {
            let mask = MessageMask::from_ids(spec.messages(), &planned.messages).unwrap();
            for &step in &planned.trace.steps {
                rows.push(user.label_transition(step, &mask, CheckParams::default()).unwrap());
            }
        }
    }
    (spec, rows)
}

fn cv_protocol() -> Outcome {
    let (spec, rows) = study_shaped();
    let schema = FeatureSchema::new(&spec, false);
    let encoded = encode_all(&spec, &schema, &rows).unwrap();
    let hyper = TreeHyper::default();
    let first = cross_validate(&encoded, &schema, hyper, 10, 42).map_err(|e| e.to_string())?;
    let again = cross_validate(&encoded, &schema, hyper, 10, 42).unwrap();
    ensure!(first == again, "same seed gave different reports");
    ensure!(
        stratified_folds(&encoded, 10, 42) != stratified_folds(&encoded, 10, 43),
        "different seeds gave the same folds"
    );
    for fold in stratified_folds(&encoded, 10, 42) {
        let n = encoded.len();
        ensure!(
            fold.len() == n / 10 || fold.len() == n / 10 + 1,
            "unbalanced fold of {}",
            fold.len()
        );
    }

    // relabel by rules of the features so no two rows conflict
    let picked = 0;
    let rules: [(&str, Rule); 2] = [
        ("action", |r, a| u8::from(r.transition.action != a)),
        ("action and message", |r, a| {
            u8::from(r.transition.action != a || r.messages.get(0))
        }),
    ];
    let mut report = vec![format!(
        "{} rows, simulated labels {:.3}",
        rows.len(),
        first.mean_accuracy
    )];
    for (name, rule) in rules {
        let fixture: Vec<FeatureRow> = rows
            .iter()
            .zip(&encoded)
            .map(|(r, e)| FeatureRow {
                values: e.values.clone(),
                label: rule(r, picked),
            })
            .collect();
        ensure!(conflict_rate(&fixture) == 0.0, "{name} fixture has conflicts");
        ensure!(fixture.iter().any(|r| r.label == 0), "{name} fixture has one class");
        let cv = cross_validate(&fixture, &schema, hyper, 10, 42).unwrap();
        ensure!(
            cv.mean_accuracy == 1.0,
            "{name} fixture: {:.4} ({:?})",
            cv.mean_accuracy,
            cv.fold_accuracy
        );
        report.push(format!("{name} fixture 1.0"));
    }
    Ok(report.join(", "))
}

fn round_trips() -> Outcome {
    let (spec, rows) = study_shaped();
    let data = Dataset {
        header: DatasetHeader::new(&spec),
        rows,
    };
    let mut bytes = Vec::new();
    write_dataset_to(&mut bytes, &data).unwrap();
    let back = read_dataset_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure!(back == data, "dataset rows differ after reading back");
    let mut again = Vec::new();
    write_dataset_to(&mut again, &back).unwrap();
    ensure!(again == bytes, "dataset bytes differ on rewrite");

    let dir = tempfile::tempdir().unwrap();
    let schema = FeatureSchema::new(&spec, true);
    let tree = train_tree(
        &encode_all(&spec, &schema, &data.rows).unwrap(),
        &schema,
        TreeHyper::default(),
        9,
    )
    .unwrap();
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_tree(&p1, &tree).unwrap();
    let tree_back = read_tree(&p1).map_err(|e| e.to_string())?;
    ensure!(tree_back == tree, "tree differs after reading back");
    write_tree(&p2, &tree_back).unwrap();
    ensure!(
        std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap(),
        "tree bytes differ on rewrite"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let results = CurveResults {
        config: ExperimentConfig::for_domain("taxi", 8),
        rows: (0..50)
            .map(|i| CurveRow {
                instance: i / 5,
                seed: rng.gen(),
                train_size: 25 * (i % 5 + 1),
                test_size: rng.gen_range(20..60),
                test_accuracy: rng.gen::<f64>() / 3.0,
            })
            .collect(),
        failures: vec![InstanceFailure {
            instance: 11,
            seed: 3,
            error: "ran out of traces".into(),
        }],
    };
    let mut csv = Vec::new();
    write_results_to(&mut csv, &results).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    let parsed = parse_results(&text).map_err(|e| e.to_string())?;
    ensure!(parsed.config == results.config, "config differs after reading back");
    ensure!(parsed.rows == results.rows, "result rows differ after reading back");
    let mut csv2 = Vec::new();
    write_results_to(&mut csv2, &parsed).unwrap();
    ensure!(csv2 == csv, "results bytes differ on rewrite");
    Ok(format!(
        "{} dataset rows, {} tree nodes, {} result rows",
        data.rows.len(),
        tree.nodes.len(),
        results.rows.len()
    ))
}
