//! Model-level parameterization: every transition row, reward entry, the
//! discount and the initial distribution of an [`Mdp`] addressed by index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, Mdp, Outcome, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaIndex {
    /// The whole distribution `P(·|s,a)`.
    Transition {
        state: StateId,
        action: ActionId,
    },
    /// A single entry `P(next|s,a)`; the rest of the row is rescaled.
    TransitionEntry {
        state: StateId,
        action: ActionId,
        next: StateId,
    },
    Reward {
        state: StateId,
        action: ActionId,
        next: StateId,
    },
    Discount,
    Initial,
}

/// Row-level transition indices, reward entries over the union support of
/// both models, the discount and the initial distribution.
pub fn theta_indices(a: &Mdp, b: &Mdp) -> Result<Vec<ThetaIndex>> {
    check_same_space(a, b)?;
    let mut out = vec![ThetaIndex::Discount, ThetaIndex::Initial];
    for s in 0..a.n_states() {
        for act in 0..a.n_actions() {
            out.push(ThetaIndex::Transition { state: s, action: act });
            for next in union_support(a.row(s, act), b.row(s, act)) {
                out.push(ThetaIndex::Reward {
                    state: s,
                    action: act,
                    next,
                });
            }
        }
    }
    Ok(out)
}

/// Indices whose values differ between the two models.
pub fn differing_indices(a: &Mdp, b: &Mdp) -> Result<Vec<ThetaIndex>> {
    Ok(theta_indices(a, b)?
        .into_iter()
        .filter(|idx| match *idx {
            ThetaIndex::Discount => a.discount() != b.discount(),
            ThetaIndex::Initial => a.initial() != b.initial(),
            ThetaIndex::Transition { state, action } => union_support(a.row(state, action), b.row(state, action))
                .into_iter()
                .any(|n| a.prob(state, action, n) != b.prob(state, action, n)),
            ThetaIndex::TransitionEntry { state, action, next } => {
                a.prob(state, action, next) != b.prob(state, action, next)
            }
            ThetaIndex::Reward { state, action, next } => {
                a.reward(state, action, next) != b.reward(state, action, next)
            }
        })
        .collect())
}

fn check_same_space(a: &Mdp, b: &Mdp) -> Result<()> {
    if a.n_states() != b.n_states() || a.n_actions() != b.n_actions() {
        return Err(Error::InvalidMdp(format!(
            "models differ in shape: {}x{} vs {}x{}",
            a.n_states(),
            a.n_actions(),
            b.n_states(),
            b.n_actions()
        )));
    }
    if a.terminal_mask() != b.terminal_mask() {
        return Err(Error::InvalidMdp("models differ in terminal states".into()));
    }
    Ok(())
}

fn union_support(a: &[Outcome], b: &[Outcome]) -> Vec<StateId> {
    let mut v: Vec<StateId> = a.iter().chain(b).map(|o| o.next).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// The reconciliation operator on models: a copy of `human` with every
/// indexed piece replaced by the robot's value.
///
/// Partial row overwrites (`TransitionEntry`) fix the named entries to the
/// robot's probabilities and rescale the remaining human entries to fill
/// the residual mass.
pub fn reconcile_models(human: &Mdp, robot: &Mdp, subset: &[ThetaIndex]) -> Result<Mdp> {
    check_same_space(human, robot)?;
    let n_actions = human.n_actions();
    let mut rows: Vec<Vec<Outcome>> = human.rows().to_vec();
    let mut discount = human.discount();
    let mut initial = human.initial().to_vec();

    let mut whole_rows = std::collections::BTreeSet::new();
    let mut entries: std::collections::BTreeMap<(StateId, ActionId), Vec<StateId>> = Default::default();
    let mut rewards = Vec::new();
    for idx in subset {
        match *idx {
            ThetaIndex::Discount => discount = robot.discount(),
            ThetaIndex::Initial => initial = robot.initial().to_vec(),
            ThetaIndex::Transition { state, action } => {
                check_index(human, state, action, None)?;
                whole_rows.insert((state, action));
            }
            ThetaIndex::TransitionEntry { state, action, next } => {
                check_index(human, state, action, Some(next))?;
                entries.entry((state, action)).or_default().push(next);
            }
            ThetaIndex::Reward { state, action, next } => {
                check_index(human, state, action, Some(next))?;
                rewards.push((state, action, next));
            }
        }
    }

    for (s, a) in whole_rows.iter().copied() {
        let row = &mut rows[s * n_actions + a];
        *row = overwrite_row(human, robot, s, a, &union_support(human.row(s, a), robot.row(s, a)));
    }
    for ((s, a), fixed) in entries {
        if whole_rows.contains(&(s, a)) {
            continue;
        }
        rows[s * n_actions + a] = overwrite_row(human, robot, s, a, &fixed);
    }
    for (s, a, next) in rewards {
        let r = robot.reward(s, a, next);
        let row = &mut rows[s * n_actions + a];
        match row.iter_mut().find(|o| o.next == next) {
            Some(o) => o.reward = r,
            None => row.push(Outcome {
                next,
                prob: 0.0,
                reward: r,
            }),
        }
    }
    Mdp::new(
        human.n_states(),
        n_actions,
        rows,
        discount,
        initial,
        human.terminal_mask().to_vec(),
    )
}

fn check_index(m: &Mdp, s: StateId, a: ActionId, next: Option<StateId>) -> Result<()> {
    if s >= m.n_states() || a >= m.n_actions() || next.is_some_and(|n| n >= m.n_states()) {
        return Err(Error::UnknownParam(format!(
            "θ index ({s}, {a}, {next:?}) out of range"
        )));
    }
    Ok(())
}

/// Row with `fixed` entries at robot values and the rest rescaled.
fn overwrite_row(human: &Mdp, robot: &Mdp, s: StateId, a: ActionId, fixed: &[StateId]) -> Vec<Outcome> {
    let support = union_support(human.row(s, a), robot.row(s, a));
    let fixed_mass: f64 = fixed.iter().map(|&n| robot.prob(s, a, n)).sum();
    let residual = (1.0 - fixed_mass).max(0.0);
    let free: Vec<StateId> = support.iter().copied().filter(|n| !fixed.contains(n)).collect();
    let human_free: f64 = free.iter().map(|&n| human.prob(s, a, n)).sum();
    let robot_free: f64 = free.iter().map(|&n| robot.prob(s, a, n)).sum();

    support
        .iter()
        .map(|&n| {
            let prob = if fixed.contains(&n) {
                robot.prob(s, a, n)
            } else if human_free > 0.0 {
                human.prob(s, a, n) * residual / human_free
            } else if robot_free > 0.0 {
                robot.prob(s, a, n) * residual / robot_free
            } else {
                residual / free.len() as f64
            };
            Outcome {
                next: n,
                prob,
                reward: human.reward(s, a, n),
            }
        })
        .collect()
}

/// True when both models agree on every indexed value.
pub fn same_theta(a: &Mdp, b: &Mdp) -> Result<bool> {
    Ok(differing_indices(a, b)?.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(p_stay: f64, reward: f64, discount: f64) -> Mdp {
        let rows = vec![
            vec![
                Outcome {
                    next: 0,
                    prob: p_stay,
                    reward,
                },
                Outcome {
                    next: 1,
                    prob: 1.0 - p_stay,
                    reward,
                },
            ],
            vec![Outcome {
                next: 1,
                prob: 1.0,
                reward: 0.0,
            }],
        ];
        Mdp::new(2, 1, rows, discount, vec![1.0, 0.0], vec![false, true]).unwrap()
    }

    #[test]
    fn row_overwrite_changes_only_that_row() {
        let h = two_state(0.0, -1.0, 0.9);
        let r = two_state(0.25, -2.0, 0.95);
        let m = reconcile_models(&h, &r, &[ThetaIndex::Transition { state: 0, action: 0 }]).unwrap();
        assert_eq!(m.prob(0, 0, 0), 0.25);
        assert_eq!(m.reward(0, 0, 1), -1.0);
        assert_eq!(m.discount(), 0.9);
    }

    #[test]
    fn partial_entry_rescales_rest() {
        // three successors, human uniform, robot puts 0.5 on state 0
        let row = |p: [f64; 3]| {
            (0..3)
                .map(|n| Outcome {
                    next: n,
                    prob: p[n],
                    reward: 0.0,
                })
                .collect::<Vec<_>>()
        };
        let absorbing = |s| {
            vec![Outcome {
                next: s,
                prob: 1.0,
                reward: 0.0,
            }]
        };
        let mk = |p| {
            Mdp::new(
                3,
                1,
                vec![row(p), absorbing(1), absorbing(2)],
                0.9,
                vec![1.0, 0.0, 0.0],
                vec![false, true, true],
            )
            .unwrap()
        };
        let h = mk([0.2, 0.4, 0.4]);
        let r = mk([0.5, 0.1, 0.4]);
        let m = reconcile_models(
            &h,
            &r,
            &[ThetaIndex::TransitionEntry {
                state: 0,
                action: 0,
                next: 0,
            }],
        )
        .unwrap();
        assert_eq!(m.prob(0, 0, 0), 0.5);
        assert!((m.prob(0, 0, 1) - 0.25).abs() < 1e-12);
        assert!((m.prob(0, 0, 2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_and_full_subsets() {
        let h = two_state(0.0, -1.0, 0.9);
        let r = two_state(0.25, -2.0, 0.95);
        assert!(same_theta(&reconcile_models(&h, &r, &[]).unwrap(), &h).unwrap());
        let all = theta_indices(&h, &r).unwrap();
        assert!(same_theta(&reconcile_models(&h, &r, &all).unwrap(), &r).unwrap());
    }

    #[test]
    fn out_of_range_index_is_unknown() {
        let h = two_state(0.0, -1.0, 0.9);
        assert!(matches!(
            reconcile_models(&h, &h, &[ThetaIndex::Transition { state: 7, action: 0 }]),
            Err(Error::UnknownParam(_))
        ));
    }
}
